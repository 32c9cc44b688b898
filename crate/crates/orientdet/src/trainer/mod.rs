//! Training: progressive multi-view schedule, total-loss composition, the
//! two-stage and end-to-end loops, pseudo-label export, detector training,
//! and inference.

pub mod config;
pub mod eval;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{
    stage_of, ActiveView, ConfigError, LossWeights, RunConfig, StageInfo, StageSchedule,
    TrainConfig,
};
pub use eval::{evaluate_map50, evaluate_miou, rotated_nms, Detection};

use crate::angle::{assign_dense_positives, ds_match, level_angle, ssa_loss};
use crate::e2e::{decode_box, e2e_loss, fcos_assign, iaw_weights, WeightingMode};
use crate::geom::{dota_encode, normalize_half_pi, DotaRecord, OrientedBox, ViewKind, ViewTransform};
use crate::mil::{
    bag_aggregate, build_bag, build_refined_bag, mil_init_loss, mil_refined_loss, scaled_config,
    select_reliable,
};
use crate::netcore::{
    dense_angle_forward, det_forward, extract_pyramid, mil_forward, BagScores, Model, Pyramid,
};
use crate::nn::{Graph, NodeId, Sgd, Tensor};
use crate::ssc::ssc_loss;
use crate::ssff::{extract_proposals, fuse_pyramid, FusionMode};
use crate::synthdata::{class_name, make_view, Dataset, DatasetItem, PointLabel, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss component {component} is NaN at epoch {epoch}, step {step}")]
    Nan { component: &'static str, epoch: usize, step: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss components of one step (graph nodes; `None` = inactive).
pub struct LossParts {
    pub mil_ori: NodeId,
    pub mil_ref: NodeId,
    pub mil_view: Option<NodeId>,
    pub ssc: Option<NodeId>,
    pub ssa: Option<NodeId>,
    pub e2e: Option<NodeId>,
}

/// Compose the stage total: both MIL heads always, the augmented-view MIL
/// loss for the active view, SSC in stage 1, SSA in stages 2-3, plus
/// `gamma * L_e2e` when the end-to-end branch is active. Missing mandatory
/// parts panic (the trainer always provides them; ablations pass explicit
/// zero constants).
pub fn total_loss(
    g: &mut Graph,
    parts: &LossParts,
    stage: &StageInfo,
    weights: &LossWeights,
) -> NodeId {
    let mut terms = vec![(parts.mil_ori, 1.0), (parts.mil_ref, 1.0)];
    let view = parts.mil_view.expect("augmented-view MIL loss is mandatory");
    terms.push((view, 1.0));
    match stage.view {
        ActiveView::Resized => {
            let ssc = parts.ssc.expect("stage 1 requires the SSC part");
            terms.push((ssc, 1.0));
        }
        ActiveView::RotFlip => {
            let ssa = parts.ssa.expect("stages 2-3 require the SSA part");
            terms.push((ssa, 1.0));
        }
    }
    if let Some(e) = parts.e2e {
        terms.push((e, weights.gamma));
    }
    g.add_weighted(&terms)
}

/// Scalar loss values logged per step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub mil_ori: f64,
    pub mil_ref: f64,
    pub mil_view: f64,
    pub ssc: f64,
    pub ssa: f64,
    pub e2e: f64,
}

impl StepLosses {
    fn check(&self, epoch: usize, step: usize) -> Result<(), TrainError> {
        let parts = [
            ("L_mil_ori", self.mil_ori),
            ("L_mil_ref", self.mil_ref),
            ("L_mil_view", self.mil_view),
            ("L_ssc", self.ssc),
            ("L_ssa", self.ssa),
            ("L_e2e", self.e2e),
        ];
        for (component, v) in parts {
            if v.is_nan() {
                return Err(TrainError::Nan { component, epoch, step });
            }
        }
        Ok(())
    }
}

/// MIL forward over a set of points in one view. Returns per-bag scores,
/// the aggregated `[I,C]` node, and per-bag top selections.
struct MilPass {
    scores: Vec<BagScores>,
    agg: NodeId,
    tops: Vec<usize>,
    boxes: Vec<Vec<OrientedBox>>,
}

#[allow(clippy::too_many_arguments)]
fn mil_pass(
    g: &mut Graph,
    model: &Model,
    params: &crate::netcore::BoundParams,
    pyr: &Pyramid,
    fused: Option<NodeId>,
    fusion: FusionMode,
    points: &[PointLabel],
    bag_cfg: &crate::mil::BagConfig,
    angles: Option<&[f64]>,
    image_hw: (usize, usize),
    refined: bool,
) -> MilPass {
    let mut scores = Vec::with_capacity(points.len());
    let mut aggs = Vec::with_capacity(points.len());
    let mut tops = Vec::with_capacity(points.len());
    let mut boxes = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let bag = build_bag(p, bag_cfg, angles.map(|a| a[i]));
        let (feats, _voids) =
            extract_proposals(g, model, pyr, fused, &bag.proposals, image_hw, fusion);
        let s = mil_forward(g, model, params, feats, refined);
        let agg = bag_aggregate(g, &s);
        let top = select_reliable(g.value(s.cls), g.value(s.ins), p.class_id);
        scores.push(s);
        aggs.push(agg);
        tops.push(top);
        boxes.push(bag.proposals);
    }
    MilPass { scores, agg: g.concat_rows(&aggs), tops, boxes }
}

/// Refined-head pass over the coarse top selections.
#[allow(clippy::too_many_arguments)]
fn refined_pass(
    g: &mut Graph,
    model: &Model,
    params: &crate::netcore::BoundParams,
    pyr: &Pyramid,
    fused: Option<NodeId>,
    fusion: FusionMode,
    points: &[PointLabel],
    coarse: &MilPass,
    bag_cfg: &crate::mil::BagConfig,
    image_hw: (usize, usize),
) -> MilPass {
    let mut scores = Vec::with_capacity(points.len());
    let mut aggs = Vec::with_capacity(points.len());
    let mut tops = Vec::with_capacity(points.len());
    let mut boxes = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let top_box = coarse.boxes[i][coarse.tops[i]];
        let bag = build_refined_bag(&top_box, p, bag_cfg);
        let (feats, _voids) =
            extract_proposals(g, model, pyr, fused, &bag.proposals, image_hw, fusion);
        let s = mil_forward(g, model, params, feats, true);
        let agg = bag_aggregate(g, &s);
        let top = select_reliable(g.value(s.cls), g.value(s.ins), p.class_id);
        scores.push(s);
        aggs.push(agg);
        tops.push(top);
        boxes.push(bag.proposals);
    }
    MilPass { scores, agg: g.concat_rows(&aggs), tops, boxes }
}

fn image_hw(t: &Tensor) -> (usize, usize) {
    (t.shape()[1], t.shape()[2])
}

/// Forward one image and accumulate gradients. Returns the step's loss
/// components.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Model,
    cfg: &RunConfig,
    stage: &StageInfo,
    item: &DatasetItem,
    rng: &mut ChaCha8Rng,
    grads: &mut [Option<Tensor>],
    epoch: usize,
    step: usize,
) -> Result<StepLosses, TrainError> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let hw = image_hw(&item.image);
    let img = g.constant(item.image.clone());
    let pyr = extract_pyramid(&mut g, model, &params, img);
    let fused = (cfg.fusion == FusionMode::Gated)
        .then(|| fuse_pyramid(&mut g, model, &params, &pyr));
    let points = &item.points;
    if points.is_empty() {
        return Ok(StepLosses::default());
    }
    let labels: Vec<usize> = points.iter().map(|p| p.class_id).collect();

    // Dense angle maps of the original view (needed for SSA and DS).
    let need_angles = stage.view == ActiveView::RotFlip;
    let ang_maps: Vec<NodeId> = if need_angles {
        (0..pyr.levels.len())
            .map(|l| dense_angle_forward(&mut g, model, &params, &pyr, l))
            .collect()
    } else {
        Vec::new()
    };

    // Stage 3: DS-matched angles feed the proposal bags. A probe pass with
    // axis-aligned bags picks the top proposal whose dense angle is read.
    let ds_on = stage.ds_matching && cfg.use_ds;
    let bag_angles: Option<Vec<f64>> = if ds_on {
        let ang_values: Vec<Tensor> =
            ang_maps.iter().map(|n| g.value(*n).clone()).collect();
        let probe = mil_pass(
            &mut g, model, &params, &pyr, fused, cfg.fusion, points, &cfg.bag, None, hw, false,
        );
        Some(
            points
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let top = probe.boxes[i][probe.tops[i]];
                    ds_match(&top, &ang_values, &model.cfg.pyramid)
                })
                .collect(),
        )
    } else {
        None
    };

    let coarse = mil_pass(
        &mut g,
        model,
        &params,
        &pyr,
        fused,
        cfg.fusion,
        points,
        &cfg.bag,
        bag_angles.as_deref(),
        hw,
        false,
    );
    let l_mil_ori = mil_init_loss(&mut g, coarse.agg, &labels);
    let refined = refined_pass(
        &mut g, model, &params, &pyr, fused, cfg.fusion, points, &coarse, &cfg.bag, hw,
    );
    let l_mil_ref = mil_refined_loss(&mut g, refined.agg, &labels);

    // Augmented view.
    let mut losses = StepLosses::default();
    let (mil_view, ssc, ssa) = match stage.view {
        ActiveView::Resized => {
            let sigma = rng.gen_range(0.5..1.5);
            let t = ViewTransform::resize(sigma, hw.0).expect("sigma in range");
            let view = make_view(&item.image, &item.boxes, points, &t);
            let vhw = image_hw(&view.image);
            let vimg = g.constant(view.image.clone());
            let vpyr = extract_pyramid(&mut g, model, &params, vimg);
            let vfused = (cfg.fusion == FusionMode::Gated)
                .then(|| fuse_pyramid(&mut g, model, &params, &vpyr));
            let vbag_cfg = scaled_config(&cfg.bag, sigma);
            let vpass = mil_pass(
                &mut g,
                model,
                &params,
                &vpyr,
                vfused,
                cfg.fusion,
                &view.points,
                &vbag_cfg,
                None,
                vhw,
                false,
            );
            let l_view = mil_init_loss(&mut g, vpass.agg, &labels);
            let l_ssc = cfg.use_ssc.then(|| {
                ssc_loss(
                    &mut g,
                    &coarse.scores,
                    &vpass.scores,
                    cfg.bag.groups(),
                    cfg.bag.ratios.len(),
                    &cfg.ssc,
                )
            });
            (l_view, l_ssc, None)
        }
        ActiveView::RotFlip => {
            let rotate = rng.gen_range(0.0..1.0) < cfg.ssa.rotate_prob;
            let t = if rotate {
                ViewTransform::rotate(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), hw.0)
            } else {
                ViewTransform::vflip(hw.0)
            };
            let view = make_view(&item.image, &item.boxes, points, &t);
            let vhw = image_hw(&view.image);
            // Keep only points that remain inside the augmented image.
            let keep: Vec<usize> = view
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    p.x >= 0.0 && p.y >= 0.0 && p.x <= vhw.1 as f64 - 1.0 && p.y <= vhw.0 as f64 - 1.0
                })
                .map(|(i, _)| i)
                .collect();
            let vimg = g.constant(view.image.clone());
            let vpyr = extract_pyramid(&mut g, model, &params, vimg);
            let vfused = (cfg.fusion == FusionMode::Gated)
                .then(|| fuse_pyramid(&mut g, model, &params, &vpyr));
            let vang: Vec<NodeId> = (0..vpyr.levels.len())
                .map(|l| dense_angle_forward(&mut g, model, &params, &vpyr, l))
                .collect();
            let (l_view, l_ssa) = if keep.is_empty() {
                (None, None)
            } else {
                let vpoints: Vec<PointLabel> = keep.iter().map(|i| view.points[*i]).collect();
                let vlabels: Vec<usize> = vpoints.iter().map(|p| p.class_id).collect();
                let vangles: Option<Vec<f64>> = bag_angles.as_ref().map(|a| {
                    keep.iter()
                        .map(|i| {
                            normalize_half_pi(match t.kind {
                                ViewKind::Rotate(r) => a[*i] + r,
                                _ => -a[*i],
                            })
                        })
                        .collect()
                });
                let vpass = mil_pass(
                    &mut g,
                    model,
                    &params,
                    &vpyr,
                    vfused,
                    cfg.fusion,
                    &vpoints,
                    &cfg.bag,
                    vangles.as_deref(),
                    vhw,
                    false,
                );
                let l_view = mil_init_loss(&mut g, vpass.agg, &vlabels);
                // SSA over the kept points only.
                let opoints: Vec<PointLabel> = keep.iter().map(|i| points[*i]).collect();
                let opos = assign_dense_positives(&opoints, &model.cfg.pyramid, hw, &cfg.ssa);
                let vpos = assign_dense_positives(&vpoints, &model.cfg.pyramid, vhw, &cfg.ssa);
                let orig_angles: Vec<Vec<NodeId>> = opos
                    .iter()
                    .map(|cells| {
                        cells
                            .iter()
                            .zip(&ang_maps)
                            .map(|(c, m)| level_angle(&mut g, *m, c))
                            .collect()
                    })
                    .collect();
                let aug_angles: Vec<Vec<NodeId>> = vpos
                    .iter()
                    .map(|cells| {
                        cells
                            .iter()
                            .zip(&vang)
                            .map(|(c, m)| level_angle(&mut g, *m, c))
                            .collect()
                    })
                    .collect();
                let l_ssa = ssa_loss(&mut g, &orig_angles, &aug_angles, &t, &cfg.ssa);
                (Some(l_view), Some(l_ssa))
            };
            // A fully-clipped view contributes zero scalars so the loss
            // composition stays well-formed.
            let zero = g.constant(Tensor::scalar(0.0));
            let l_view = l_view.unwrap_or(zero);
            let l_ssa = l_ssa.unwrap_or(zero);
            (l_view, None, Some(l_ssa))
        }
    };

    // End-to-end branch: detection loss on pseudo boxes from the refined
    // head, weighted by the (detached) MIL scores.
    let l_e2e = if cfg.e2e {
        let mut pseudo = Vec::with_capacity(points.len());
        let mut weights = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let b = refined.boxes[i][refined.tops[i]];
            pseudo.push((b, p.class_id));
            weights.push(if cfg.iaw {
                iaw_weights(
                    g.value(refined.scores[i].cls),
                    g.value(refined.scores[i].ins),
                    &[refined.tops[i]],
                    &[p.class_id],
                )[0]
            } else {
                1.0
            });
        }
        let targets = fcos_assign(&pseudo, &model.cfg.pyramid, hw);
        let outs: Vec<crate::netcore::DetOutputs> = pyr
            .levels
            .iter()
            .map(|l| det_forward(&mut g, model, &params, *l))
            .collect();
        Some(e2e_loss(&mut g, &outs, &targets, &weights, WeightingMode::BoxCtr))
    } else {
        None
    };

    let parts = LossParts {
        mil_ori: l_mil_ori,
        mil_ref: l_mil_ref,
        mil_view: Some(mil_view),
        ssc: match stage.view {
            ActiveView::Resized => Some(ssc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))),
            ActiveView::RotFlip => None,
        },
        ssa,
        e2e: l_e2e,
    };
    losses.mil_ori = g.value(parts.mil_ori).item();
    losses.mil_ref = g.value(parts.mil_ref).item();
    losses.mil_view = g.value(mil_view).item();
    if let Some(s) = parts.ssc {
        losses.ssc = g.value(s).item();
    }
    if let Some(s) = parts.ssa {
        losses.ssa = g.value(s).item();
    }
    if let Some(s) = parts.e2e {
        losses.e2e = g.value(s).item();
    }
    losses.check(epoch, step)?;

    let total = total_loss(&mut g, &parts, stage, &cfg.weights);
    g.backward(total);
    for (k, id) in params.ids().iter().enumerate() {
        if let Some(grad) = g.take_grad(*id) {
            match &mut grads[k] {
                Some(acc) => acc.add_assign(&grad),
                slot => *slot = Some(grad),
            }
        }
    }
    Ok(losses)
}

/// Pseudo boxes for one image from a trained model: the refined head's top
/// selection per point (with DS angle when enabled).
pub fn pseudo_labels_for_item(
    model: &Model,
    cfg: &RunConfig,
    item: &DatasetItem,
    use_ds: bool,
) -> Vec<(OrientedBox, usize)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let hw = image_hw(&item.image);
    let img = g.constant(item.image.clone());
    let pyr = extract_pyramid(&mut g, model, &params, img);
    let fused = (cfg.fusion == FusionMode::Gated)
        .then(|| fuse_pyramid(&mut g, model, &params, &pyr));
    if item.points.is_empty() {
        return Vec::new();
    }
    let bag_angles: Option<Vec<f64>> = if use_ds {
        let ang_values: Vec<Tensor> = (0..pyr.levels.len())
            .map(|l| {
                let n = dense_angle_forward(&mut g, model, &params, &pyr, l);
                g.value(n).clone()
            })
            .collect();
        let probe = mil_pass(
            &mut g, model, &params, &pyr, fused, cfg.fusion, &item.points, &cfg.bag, None, hw,
            false,
        );
        Some(
            (0..item.points.len())
                .map(|i| ds_match(&probe.boxes[i][probe.tops[i]], &ang_values, &model.cfg.pyramid))
                .collect(),
        )
    } else {
        None
    };
    let coarse = mil_pass(
        &mut g,
        model,
        &params,
        &pyr,
        fused,
        cfg.fusion,
        &item.points,
        &cfg.bag,
        bag_angles.as_deref(),
        hw,
        false,
    );
    let refined = refined_pass(
        &mut g, model, &params, &pyr, fused, cfg.fusion, &item.points, &coarse, &cfg.bag, hw,
    );
    item.points
        .iter()
        .enumerate()
        .map(|(i, p)| (refined.boxes[i][refined.tops[i]], p.class_id))
        .collect()
}

/// Mean pseudo-label mIoU over up to `limit` dataset items.
pub fn dataset_miou(
    model: &Model,
    cfg: &RunConfig,
    ds: &Dataset,
    limit: usize,
    use_ds: bool,
) -> Result<f64, TrainError> {
    let n = ds.len().min(limit);
    let mut pseudo = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for i in 0..n {
        let item = ds.load(i)?;
        pseudo.push(
            pseudo_labels_for_item(model, cfg, &item, use_ds)
                .into_iter()
                .map(|(b, _)| b)
                .collect::<Vec<_>>(),
        );
        gt.push(item.boxes.iter().map(|(b, _)| *b).collect::<Vec<_>>());
    }
    Ok(evaluate_miou(&pseudo, &gt).0)
}

/// Output of a training run.
pub struct TrainOutputs {
    pub model: Model,
    pub log_csv: String,
    pub final_miou: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,L_mil_ori,L_mil_ref,L_mil_view,L_ssc,L_ssa,L_e2e,miou";

/// How many train items the per-epoch mIoU probe scans.
const MIOU_PROBE_LIMIT: usize = 64;

/// Train on a generated dataset. Deterministic given the config seed.
/// Writes `metrics.csv`, stage-boundary checkpoints, and `final.ckpt`
/// under `out_dir`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutputs, TrainError> {
    cfg.schedule.validate()?;
    fs::create_dir_all(out_dir)?;
    let ds = Dataset::open(data_dir)?;
    let n_items = ds.len().min(cfg.train.train_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = Model::new(cfg.model.clone(), &mut rng);
    let mut sgd = Sgd::new(
        &model.store,
        cfg.train.lr,
        cfg.train.momentum,
        cfg.train.weight_decay,
    );
    sgd.set_lr_mult(&model.store, "ang.", cfg.train.angle_lr_mult);
    let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut step = 0usize;
    let mut in_batch = 0usize;
    for epoch in 0..cfg.schedule.total_epochs {
        let stage = stage_of(epoch, &cfg.schedule)?;
        let mut sums = StepLosses::default();
        for idx in 0..n_items {
            let item = ds.load(idx)?;
            let l = train_step(&model, cfg, &stage, &item, &mut rng, &mut grads, epoch, step)?;
            sums.mil_ori += l.mil_ori;
            sums.mil_ref += l.mil_ref;
            sums.mil_view += l.mil_view;
            sums.ssc += l.ssc;
            sums.ssa += l.ssa;
            sums.e2e += l.e2e;
            in_batch += 1;
            if in_batch == cfg.train.batch_size {
                let scale = crate::nn::optim::warmup_factor(
                    step,
                    cfg.train.warmup_iters,
                    cfg.train.warmup_factor,
                ) / cfg.train.batch_size as f64;
                crate::nn::optim::clip_grad_norm(
                    &mut grads,
                    cfg.train.grad_clip_norm * cfg.train.batch_size as f64,
                );
                sgd.step(&mut model.store, &grads, scale);
                grads.iter_mut().for_each(|g| *g = None);
                in_batch = 0;
                step += 1;
            }
        }
        let inv = 1.0 / n_items as f64;
        let miou = dataset_miou(&model, cfg, &ds, MIOU_PROBE_LIMIT, stage.ds_matching && cfg.use_ds)?;
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            epoch,
            step,
            sums.mil_ori * inv,
            sums.mil_ref * inv,
            sums.mil_view * inv,
            sums.ssc * inv,
            sums.ssa * inv,
            sums.e2e * inv,
            miou
        )
        .unwrap();
        if epoch + 1 == cfg.schedule.burn_in1 || epoch + 1 == cfg.schedule.burn_in2 {
            model.save(&out_dir.join(format!("stage{}.ckpt", stage.stage)))?;
        }
    }
    model.save(&out_dir.join("final.ckpt"))?;
    fs::write(out_dir.join("metrics.csv"), &csv)?;
    let final_miou = dataset_miou(&model, cfg, &ds, usize::MAX, cfg.use_ds)?;
    Ok(TrainOutputs { model, log_csv: csv, final_miou })
}

/// Export one pseudo DOTA file per train image under `out_dir`.
pub fn export_pseudo_labels(
    model: &Model,
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<usize, TrainError> {
    fs::create_dir_all(out_dir)?;
    let ds = Dataset::open(data_dir)?;
    let mut total = 0usize;
    for i in 0..ds.len() {
        let item = ds.load(i)?;
        let pseudo = pseudo_labels_for_item(model, cfg, &item, cfg.use_ds);
        total += pseudo.len();
        let records: Vec<DotaRecord> = pseudo
            .into_iter()
            .map(|(b, c)| DotaRecord { bbox: b, class_name: class_name(c), difficulty: 0 })
            .collect();
        fs::write(out_dir.join(format!("{i}.dota")), dota_encode(&records))?;
    }
    Ok(total)
}

/// Run the detection head over one image and return NMS-filtered
/// detections.
pub fn detect(model: &Model, item_image: &Tensor, score_thr: f64) -> Vec<Detection> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let img = g.constant(item_image.clone());
    let pyr = extract_pyramid(&mut g, model, &params, img);
    let mut dets = Vec::new();
    let nlvl = pyr.levels.len();
    for lvl in 0..nlvl {
        let out = det_forward(&mut g, model, &params, pyr.levels[lvl]);
        let cls = g.value(out.cls).clone();
        let bbox = g.value(out.bbox).clone();
        let ctr = g.value(out.ctr).clone();
        let (c, h, w) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);
        let stride = model.cfg.pyramid.strides[lvl] as f64;
        for i in 0..h {
            for j in 0..w {
                let ctr_p = 1.0 / (1.0 + (-ctr.data()[i * w + j]).exp());
                for k in 0..c {
                    let p = 1.0 / (1.0 + (-cls.data()[(k * h + i) * w + j]).exp());
                    let score = p * ctr_p;
                    if score < score_thr {
                        continue;
                    }
                    let params5: Vec<f64> =
                        (0..5).map(|ch| bbox.data()[(ch * h + i) * w + j]).collect();
                    dets.push(Detection {
                        bbox: decode_box((i, j), stride, &params5),
                        score,
                        class: k,
                    });
                }
            }
        }
    }
    rotated_nms(&mut dets, 0.3);
    dets.truncate(100);
    dets
}

/// Train a fresh detector on exported pseudo labels (supervised FCOS-style
/// training with unit instance weights). Returns the trained model.
pub fn train_detector(
    cfg: &RunConfig,
    data_dir: &Path,
    labels_dir: &Path,
    out_dir: &Path,
) -> Result<Model, TrainError> {
    fs::create_dir_all(out_dir)?;
    let ds = Dataset::open(data_dir)?;
    let n_items = ds.len().min(cfg.train.train_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x5e7ec7));
    let mut model = Model::new(cfg.model.clone(), &mut rng);
    let mut sgd = Sgd::new(
        &model.store,
        cfg.train.lr,
        cfg.train.momentum,
        cfg.train.weight_decay,
    );
    let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut step = 0usize;
    let mut in_batch = 0usize;
    for _epoch in 0..cfg.schedule.total_epochs {
        for idx in 0..n_items {
            let item = ds.load(idx)?;
            let text = fs::read_to_string(labels_dir.join(format!("{idx}.dota")))?;
            let pseudo: Vec<(OrientedBox, usize)> = crate::geom::dota_decode(&text)
                .map_err(SynthError::Geom)?
                .into_iter()
                .map(|r| {
                    let c = crate::synthdata::parse_class_name(&r.class_name)?;
                    Ok((r.bbox, c))
                })
                .collect::<Result<_, SynthError>>()?;
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let hw = image_hw(&item.image);
            let img = g.constant(item.image.clone());
            let pyr = extract_pyramid(&mut g, &model, &params, img);
            let targets = fcos_assign(&pseudo, &model.cfg.pyramid, hw);
            let outs: Vec<crate::netcore::DetOutputs> = pyr
                .levels
                .iter()
                .map(|l| det_forward(&mut g, &model, &params, *l))
                .collect();
            let weights = vec![1.0; pseudo.len()];
            let loss = e2e_loss(&mut g, &outs, &targets, &weights, WeightingMode::BoxCtr);
            if g.value(loss).item().is_nan() {
                return Err(TrainError::Nan { component: "L_det", epoch: _epoch, step });
            }
            g.backward(loss);
            for (k, id) in params.ids().iter().enumerate() {
                if let Some(grad) = g.take_grad(*id) {
                    match &mut grads[k] {
                        Some(acc) => acc.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
            }
            in_batch += 1;
            if in_batch == cfg.train.batch_size {
                let scale = crate::nn::optim::warmup_factor(
                    step,
                    cfg.train.warmup_iters,
                    cfg.train.warmup_factor,
                ) / cfg.train.batch_size as f64;
                crate::nn::optim::clip_grad_norm(
                    &mut grads,
                    cfg.train.grad_clip_norm * cfg.train.batch_size as f64,
                );
                sgd.step(&mut model.store, &grads, scale);
                grads.iter_mut().for_each(|g| *g = None);
                in_batch = 0;
                step += 1;
            }
        }
    }
    model.save(&out_dir.join("detector.ckpt"))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.scene.image_size = 64;
        c.scene.objects_min = 1;
        c.scene.objects_max = 2;
        c.scene.size_range = (10.0, 24.0);
        c.model.channels = 4;
        c.model.mil_hidden = 8;
        c.model.gn_groups = 2;
        c.bag.basic_scales = vec![8.0, 12.0, 16.0, 24.0];
        c.schedule = StageSchedule { burn_in1: 1, burn_in2: 2, total_epochs: 3 };
        c.train.train_images = 3;
        c.train.warmup_iters = 4;
        c
    }

    #[test]
    fn two_stage_smoke_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("run");
        let cfg = tiny_cfg();
        generate_dataset(&cfg.scene, cfg.train.train_images, &data).unwrap();
        let t0 = std::time::Instant::now();
        let res = train(&cfg, &data, &out).unwrap();
        println!("tiny two-stage run: {:.2}s", t0.elapsed().as_secs_f64());
        let lines: Vec<&str> = res.log_csv.trim().lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + cfg.schedule.total_epochs);
        // Stage-1 epochs log SSC and zero SSA; later epochs the reverse.
        let row0: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        let row2: Vec<f64> = lines[3].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row0[6], 0.0, "L_ssa must be zero in stage 1");
        assert_eq!(row2[5], 0.0, "L_ssc must be zero in stages 2-3");
        assert!(out.join("stage1.ckpt").exists());
        assert!(out.join("stage2.ckpt").exists());
        assert!(out.join("final.ckpt").exists());
        assert!(res.final_miou.is_finite() && (0.0..=1.0).contains(&res.final_miou));

        // Pseudo-label export parses back as DOTA records.
        let labels = dir.path().join("pseudo");
        let n = export_pseudo_labels(&res.model, &cfg, &data, &labels).unwrap();
        assert!(n > 0);
        let text = std::fs::read_to_string(labels.join("0.dota")).unwrap();
        assert!(!crate::geom::dota_decode(&text).unwrap().is_empty());
    }

    #[test]
    fn e2e_smoke_run_and_detect() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("run");
        let mut cfg = tiny_cfg();
        cfg.e2e = true;
        generate_dataset(&cfg.scene, cfg.train.train_images, &data).unwrap();
        let res = train(&cfg, &data, &out).unwrap();
        let last: Vec<f64> =
            res.log_csv.trim().lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert!(last[7] > 0.0, "L_e2e must be logged in e2e mode");
        let item = Dataset::open(&data).unwrap().load(0).unwrap();
        let dets = detect(&res.model, &item.image, 0.01);
        for d in &dets {
            assert!(d.bbox.w > 0.0 && d.bbox.h > 0.0 && d.score > 0.0);
        }
    }

    #[test]
    fn detector_training_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cfg = tiny_cfg();
        generate_dataset(&cfg.scene, cfg.train.train_images, &data).unwrap();
        // Train the detector directly on the ground-truth DOTA labels.
        let labels = data.join("labels");
        let model = train_detector(&cfg, &data, &labels, &dir.path().join("det")).unwrap();
        let item = Dataset::open(&data).unwrap().load(0).unwrap();
        let _ = detect(&model, &item.image, 0.05);
        assert!(dir.path().join("det/detector.ckpt").exists());
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut cfg = tiny_cfg();
        cfg.schedule = StageSchedule { burn_in1: 1, burn_in2: 1, total_epochs: 1 };
        cfg.train.train_images = 2;
        generate_dataset(&cfg.scene, cfg.train.train_images, &data).unwrap();
        let a = train(&cfg, &data, &dir.path().join("a")).unwrap();
        let b = train(&cfg, &data, &dir.path().join("b")).unwrap();
        assert_eq!(a.log_csv, b.log_csv);
        assert_eq!(a.final_miou, b.final_miou);
    }
}
