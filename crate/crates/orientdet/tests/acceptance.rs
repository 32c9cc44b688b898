//! Acceptance suite: one test per release criterion. Each test is
//! self-contained and prints a PASS line on success (run with
//! `--nocapture` to see the measured numbers).
//!
//! The long-running criteria (5, 6, 7) cache their training artifacts
//! under `CARGO_TARGET_TMPDIR`, so a repeated invocation only re-checks
//! the metrics. Deleting `target/tmp` forces a full re-run. Every run is
//! seed-pinned and deterministic, so the cached artifacts are identical
//! to what a fresh run produces.

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use orientdet::angle::{assign_dense_positives, ds_match, level_angle, ssa_loss, SsaConfig};
use orientdet::e2e::{e2e_loss, fcos_assign, WeightingMode};
use orientdet::geom::{
    dota_decode, dota_encode, obb_to_corners, rotated_iou, DotaRecord, OrientedBox, PyramidSpec,
    ViewTransform,
};
use orientdet::mil::{mil_init_loss, mil_refined_loss};
use orientdet::netcore::{dense_angle_forward, extract_pyramid, BagScores, DetOutputs, Model};
use orientdet::nn::gradcheck::check_gradients;
use orientdet::nn::{Graph, Tensor};
use orientdet::ssc::{ssc_loss, SscConfig};
use orientdet::ssff::gating_scores;
use orientdet::synthdata::{generate_dataset, make_view, Dataset};
use orientdet::trainer::eval::evaluate_map50;
use orientdet::trainer::{
    dataset_miou, detect, export_pseudo_labels, stage_of, train, train_detector, ActiveView,
    RunConfig, StageSchedule,
};

const DEG: f64 = 180.0 / std::f64::consts::PI;

fn cache_root() -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&p).unwrap();
    p
}

// ---------------------------------------------------------------------------
// Criterion 1: rotated IoU vs. a 2048-row rasterization oracle
// ---------------------------------------------------------------------------

/// x-interval covered by a convex quad on the horizontal line `y`.
fn quad_row_interval(c: &[[f64; 2]; 4], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..4 {
        let p = c[i];
        let q = c[(i + 1) % 4];
        if (p[1] - y) * (q[1] - y) <= 0.0 && p[1] != q[1] {
            let x = p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1]);
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (hi > lo).then_some((lo, hi))
}

/// IoU by slab decomposition: 2048 horizontal rows over the union's
/// y-extent, exact x-interval coverage per row. Independent of the
/// polygon-clipping implementation under test.
fn raster_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ca = obb_to_corners(a);
    let cb = obb_to_corners(b);
    let y0 = ca.iter().chain(&cb).map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y1 = ca.iter().chain(&cb).map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let rows = 2048usize;
    let dy = (y1 - y0) / rows as f64;
    let (mut area_a, mut area_b, mut area_i) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        let y = y0 + (r as f64 + 0.5) * dy;
        let ia = quad_row_interval(&ca, y);
        let ib = quad_row_interval(&cb, y);
        if let Some((lo, hi)) = ia {
            area_a += hi - lo;
        }
        if let Some((lo, hi)) = ib {
            area_b += hi - lo;
        }
        if let (Some((alo, ahi)), Some((blo, bhi))) = (ia, ib) {
            let lo = alo.max(blo);
            let hi = ahi.min(bhi);
            if hi > lo {
                area_i += hi - lo;
            }
        }
    }
    let union = (area_a + area_b - area_i) * dy;
    if union <= 0.0 {
        return 0.0;
    }
    area_i * dy / union
}

fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox {
    OrientedBox::new(
        rng.gen_range(40.0..216.0),
        rng.gen_range(40.0..216.0),
        rng.gen_range(6.0..80.0),
        rng.gen_range(6.0..80.0),
        rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
    )
    .unwrap()
}

#[test]
fn criterion_1_geometry_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let a = random_box(&mut rng);
        // Every third pair is a perturbation of `a` so the high-IoU regime
        // is exercised as well as near-disjoint pairs.
        let b = if k % 3 == 0 {
            OrientedBox::new(
                a.cx + rng.gen_range(-6.0..6.0),
                a.cy + rng.gen_range(-6.0..6.0),
                (a.w * rng.gen_range(0.8..1.2)).max(1.0),
                (a.h * rng.gen_range(0.8..1.2)).max(1.0),
                a.theta + rng.gen_range(-0.2..0.2),
            )
            .unwrap()
        } else {
            random_box(&mut rng)
        };
        let got = rotated_iou(&a, &b);
        let want = raster_iou(&a, &b);
        worst = worst.max((got - want).abs());
    }
    assert!(worst <= 1e-3, "worst |IoU - oracle| = {worst:.2e} > 1e-3");
    // 45-degree rotated square.
    let sq = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
    let sq45 = OrientedBox::new(0.0, 0.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4).unwrap();
    let v = rotated_iou(&sq, &sq45);
    assert!((v - 0.7071).abs() <= 1e-3, "45-degree square IoU {v}");
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "geometry oracle took {secs:.1}s (budget 60s)");
    println!("criterion 1 PASS: worst oracle gap {worst:.2e}, square45 {v:.4}, {secs:.1}s");
}

// ---------------------------------------------------------------------------
// Criterion 2: finite-difference gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_suite() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let tol = 1e-4;

    // SSC: two bags of grouped scores in each view.
    let mk_pos = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(0.05..1.0);
        }
        t
    };
    let leaves = [
        mk_pos(&mut rng, &[4, 2]),
        mk_pos(&mut rng, &[4, 2]),
        mk_pos(&mut rng, &[4, 2]),
        mk_pos(&mut rng, &[4, 2]),
    ];
    let e_ssc = check_gradients(
        &leaves,
        |g, ids| {
            let o = BagScores { ins: ids[0], cls: ids[1] };
            let r = BagScores { ins: ids[2], cls: ids[3] };
            ssc_loss(g, &[o], &[r], 2, 2, &SscConfig::default())
        },
        16,
        &mut rng,
    );
    assert!(e_ssc < tol, "SSC grad rel err {e_ssc:.2e}");

    // SSA through the dense-map gather.
    let maps = [
        Tensor::randn(&[1, 4, 4], 0.3, &mut rng),
        Tensor::randn(&[1, 4, 4], 0.3, &mut rng),
    ];
    let cells = vec![(1usize, 1usize), (1, 2), (2, 1)];
    let t = ViewTransform::rotate(0.5, 64);
    let ssa_cfg = SsaConfig::default();
    let e_ssa = check_gradients(
        &maps,
        |g, ids| {
            let a = level_angle(g, ids[0], &cells);
            let b = level_angle(g, ids[1], &cells);
            ssa_loss(g, &[vec![a]], &[vec![b]], &t, &ssa_cfg)
        },
        16,
        &mut rng,
    );
    assert!(e_ssa < tol, "SSA grad rel err {e_ssa:.2e}");

    // Coarse MIL BCE on aggregated bag scores.
    let agg = [mk_pos(&mut rng, &[3, 5])];
    let e_bce = check_gradients(&agg, |g, ids| mil_init_loss(g, ids[0], &[0, 2, 4]), 16, &mut rng);
    assert!(e_bce < tol, "MIL BCE grad rel err {e_bce:.2e}");

    // Refined focal loss.
    let agg2 = [mk_pos(&mut rng, &[3, 5])];
    let e_focal =
        check_gradients(&agg2, |g, ids| mil_refined_loss(g, ids[0], &[1, 3, 0]), 16, &mut rng);
    assert!(e_focal < tol, "focal grad rel err {e_focal:.2e}");

    // Detection loss through all three head outputs.
    let b = OrientedBox::new(14.0, 14.0, 20.0, 14.0, -0.4).unwrap();
    let targets = fcos_assign(&[(b, 1)], &PyramidSpec::standard(), (32, 32));
    let mut leaves = Vec::new();
    for lt in &targets.levels {
        let (h, w) = lt.shape;
        leaves.push(Tensor::randn(&[2, h, w], 0.5, &mut rng));
        leaves.push(Tensor::randn(&[5, h, w], 0.5, &mut rng));
        leaves.push(Tensor::randn(&[1, h, w], 0.5, &mut rng));
    }
    let e_det = check_gradients(
        &leaves,
        |g, ids| {
            let outs: Vec<DetOutputs> = ids
                .chunks(3)
                .map(|c| DetOutputs { cls: c[0], bbox: c[1], ctr: c[2] })
                .collect();
            e2e_loss(g, &outs, &targets, &[0.7], WeightingMode::BoxCtr)
        },
        16,
        &mut rng,
    );
    assert!(e_det < tol, "detection grad rel err {e_det:.2e}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "gradient suite took {secs:.1}s (budget 300s)");
    println!(
        "criterion 2 PASS: rel errs ssc {e_ssc:.1e} ssa {e_ssa:.1e} bce {e_bce:.1e} \
         focal {e_focal:.1e} det {e_det:.1e}, {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: exact-zero identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_exact_zeros() {
    // Identical views (resize factor 1) give exactly zero consistency loss.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut g = Graph::new();
    let mut s = Tensor::zeros(&[8, 3]);
    for v in s.data_mut() {
        *v = rng.gen_range(0.01..1.0);
    }
    let o = BagScores { ins: g.constant(s.clone()), cls: g.constant(s.clone()) };
    let r = BagScores { ins: g.constant(s.clone()), cls: g.constant(s) };
    let l = ssc_loss(&mut g, &[o], &[r], 4, 2, &SscConfig::default());
    assert_eq!(g.value(l).item(), 0.0, "identical-view SSC loss must be exactly zero");

    // Hand-constructed equivariant angle fields: rotated view offset by the
    // view angle, flipped view negated; both residuals vanish.
    let cfg = SsaConfig::default();
    // Dyadic values keep the float arithmetic exact, so the residual is a
    // true zero rather than an epsilon.
    let theta_rot = 0.5;
    let mut g2 = Graph::new();
    let orig_vals = [0.25, -0.5, 1.0];
    let orig: Vec<_> =
        orig_vals.iter().map(|v| g2.constant(Tensor::scalar(*v))).collect();
    let aug_rot: Vec<_> =
        orig_vals.iter().map(|v| g2.constant(Tensor::scalar(v + theta_rot))).collect();
    let t = ViewTransform::rotate(theta_rot, 128);
    let l_rot = ssa_loss(&mut g2, &[orig.clone()], &[aug_rot], &t, &cfg);
    assert_eq!(g2.value(l_rot).item(), 0.0, "equivariant rotation residual must be zero");
    let aug_flip: Vec<_> =
        orig_vals.iter().map(|v| g2.constant(Tensor::scalar(-v))).collect();
    let tf = ViewTransform::vflip(128);
    let l_flip = ssa_loss(&mut g2, &[orig], &[aug_flip], &tf, &cfg);
    assert_eq!(g2.value(l_flip).item(), 0.0, "equivariant flip residual must be zero");

    // Fusion gating is a proper softmax: weights sum to 1 at every pixel.
    let mut cfg_m = orientdet::netcore::ModelConfig::default();
    cfg_m.channels = 8;
    cfg_m.gn_groups = 2;
    let model = Model::new(cfg_m, &mut rng);
    let mut g3 = Graph::new();
    let params = model.bind(&mut g3);
    let img = g3.constant(Tensor::randn(&[1, 64, 64], 0.3, &mut rng));
    let pyr = extract_pyramid(&mut g3, &model, &params, img);
    let gates = gating_scores(&mut g3, &model, &params, &pyr);
    let maps: Vec<&Tensor> = gates.iter().map(|n| g3.value(*n)).collect();
    let hw = maps[0].shape()[1] * maps[0].shape()[2];
    let mut worst = 0.0f64;
    for k in 0..hw {
        let sum: f64 = maps.iter().map(|m| m.data()[k]).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    assert!(worst <= 1e-6, "gating sums deviate from 1 by {worst:.2e}");
    println!("criterion 3 PASS: exact zeros hold, gating sum deviation {worst:.1e}");
}

// ---------------------------------------------------------------------------
// Criterion 4: schedule conformance for every epoch
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_schedule_conformance() {
    let sched = StageSchedule::default();
    assert_eq!((sched.burn_in1, sched.burn_in2, sched.total_epochs), (6, 8, 12));
    for epoch in 0..sched.total_epochs {
        let info = stage_of(epoch, &sched).unwrap();
        if epoch < 6 {
            assert_eq!((info.alpha, info.beta), (0.0, 1.0), "epoch {epoch}");
            assert_eq!(info.view, ActiveView::Resized);
            assert!(!info.ds_matching, "DS matching must be off before epoch 8");
        } else {
            assert_eq!((info.alpha, info.beta), (1.0, 0.0), "epoch {epoch}");
            assert_eq!(info.view, ActiveView::RotFlip);
            assert_eq!(info.ds_matching, epoch >= 8, "DS first active at epoch 8");
        }
    }
    assert!(stage_of(12, &sched).is_err(), "epoch past the schedule must error");
    println!("criterion 4 PASS: stage table conforms for all 12 epochs");
}

// ---------------------------------------------------------------------------
// Criteria 5 and 6: the full reference run
// ---------------------------------------------------------------------------

/// The committed reference configuration: library defaults, seed 0.
fn reference_config() -> RunConfig {
    RunConfig::default()
}

struct RefRun {
    cfg: RunConfig,
    data: PathBuf,
    out: PathBuf,
    train_seconds: f64,
}

fn reference_run() -> &'static RefRun {
    static REF: OnceLock<RefRun> = OnceLock::new();
    REF.get_or_init(|| {
        let cfg = reference_config();
        let root = cache_root().join("ref");
        let data = root.join("data");
        let out = root.join("out");
        let n = cfg.train.train_images + cfg.train.holdout_images;
        if !data.join("images/0.npyish").exists() {
            generate_dataset(&cfg.scene, n, &data).unwrap();
        }
        let time_file = out.join("train_seconds.txt");
        if !out.join("final.ckpt").exists() {
            let t0 = Instant::now();
            train(&cfg, &data, &out).unwrap();
            fs::write(&time_file, format!("{:.1}", t0.elapsed().as_secs_f64())).unwrap();
        }
        let train_seconds: f64 =
            fs::read_to_string(&time_file).unwrap().trim().parse().unwrap();
        RefRun { cfg, data, out, train_seconds }
    })
}

/// Level angle maps of one image under the current model.
fn angle_maps(model: &Model, image: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let img = g.constant(image.clone());
    let pyr = extract_pyramid(&mut g, model, &params, img);
    (0..pyr.levels.len())
        .map(|l| {
            let n = dense_angle_forward(&mut g, model, &params, &pyr, l);
            g.value(n).clone()
        })
        .collect()
}

fn min_k_residual_deg(diff: f64) -> f64 {
    (-2..=2)
        .map(|k| (diff - k as f64 * std::f64::consts::PI).abs())
        .fold(f64::INFINITY, f64::min)
        * DEG
}

#[test]
fn criterion_5_symmetry_learning() {
    let r = reference_run();
    assert!(
        r.train_seconds < 7200.0,
        "reference run took {:.0}s (budget 7200s)",
        r.train_seconds
    );
    let model = Model::load(r.cfg.model.clone(), &r.out.join("final.ckpt")).unwrap();
    let ds = Dataset::open(&r.data).unwrap();
    let spec = &model.cfg.pyramid;
    let holdout = r.cfg.train.train_images..ds.len();

    // Held-out angle error: read the dense angle over each GT box region
    // and compare with the GT symmetry axis. Every generated shape is
    // doubly symmetric (axes at theta and theta+pi/2), so the two axes are
    // indistinguishable to a symmetry learner and the error folds mod pi/2;
    // the proposal ratio set covers the matching (w,h) swap downstream.
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    for i in holdout.clone() {
        let item = ds.load(i).unwrap();
        let maps = angle_maps(&model, &item.image);
        for (b, _) in &item.boxes {
            let pred = ds_match(b, &maps, spec);
            let d = orientdet::geom::normalize_half_pi(pred - b.theta).abs();
            err_sum += d.min(std::f64::consts::FRAC_PI_2 - d) * DEG;
            err_n += 1;
        }
    }
    let mean_err = err_sum / err_n as f64;
    assert!(mean_err < 10.0, "held-out mean angle error {mean_err:.2} deg >= 10");

    // Flip/rotate consistency on held-out images: the per-point, per-level
    // angles of the augmented view must track the view transform.
    let ssa_cfg = SsaConfig::default();
    let mut res_sum = 0.0;
    let mut res_n = 0usize;
    for i in holdout.take(10) {
        let item = ds.load(i).unwrap();
        if item.points.is_empty() {
            continue;
        }
        let hw = (item.image.shape()[1], item.image.shape()[2]);
        let maps_o = angle_maps(&model, &item.image);
        let pos_o = assign_dense_positives(&item.points, spec, hw, &ssa_cfg);
        let theta_rot = std::f64::consts::FRAC_PI_6;
        for t in [
            ViewTransform::rotate(theta_rot, hw.0),
            ViewTransform::vflip(hw.0),
        ] {
            let view = make_view(&item.image, &item.boxes, &item.points, &t);
            let maps_a = angle_maps(&model, &view.image);
            let pos_a = assign_dense_positives(&view.points, spec, hw, &ssa_cfg);
            for (pi, _) in item.points.iter().enumerate() {
                // The prediction for a point is its per-cell angles averaged
                // within each level and then across the pyramid. Angles are
                // axial (period pi), so both means run on the doubled-angle
                // circle: an arithmetic mean breaks down when reads straddle
                // the +-pi/2 branch cut.
                let final_of = |maps: &[Tensor], pos: &[Vec<(usize, usize)>]| {
                    let (mut c, mut s) = (0.0f64, 0.0f64);
                    for lvl in 0..spec.strides.len() {
                        let m = &maps[lvl];
                        let w = m.shape()[2];
                        let (mut lc, mut ls) = (0.0f64, 0.0f64);
                        for (i, j) in &pos[lvl] {
                            let a = 2.0 * m.data()[i * w + j];
                            lc += a.cos();
                            ls += a.sin();
                        }
                        let nrm = lc.hypot(ls).max(1e-12);
                        c += lc / nrm;
                        s += ls / nrm;
                    }
                    0.5 * s.atan2(c)
                };
                let ao = final_of(&maps_o, &pos_o[pi]);
                let aa = final_of(&maps_a, &pos_a[pi]);
                let diff = match t.kind {
                    orientdet::geom::ViewKind::Rotate(th) => aa - ao - th,
                    _ => aa + ao,
                };
                res_sum += min_k_residual_deg(diff);
                res_n += 1;
            }
        }
    }
    let mean_res = res_sum / res_n as f64;
    assert!(mean_res < 10.0, "consistency residual {mean_res:.2} deg >= 10");
    println!(
        "criterion 5 PASS: train {:.0}s, angle err {mean_err:.2} deg, residual {mean_res:.2} deg",
        r.train_seconds
    );
}

#[test]
fn criterion_6_pseudo_label_quality() {
    let r = reference_run();
    let model = Model::load(r.cfg.model.clone(), &r.out.join("final.ckpt")).unwrap();
    let ds = Dataset::open(&r.data).unwrap();

    // Pseudo-label mIoU over the training images.
    let miou_file = r.out.join("train_miou.txt");
    let miou: f64 = if miou_file.exists() {
        fs::read_to_string(&miou_file).unwrap().trim().parse().unwrap()
    } else {
        let m =
            dataset_miou(&model, &r.cfg, &ds, r.cfg.train.train_images, r.cfg.use_ds).unwrap();
        fs::write(&miou_file, format!("{m:.6}")).unwrap();
        m
    };
    assert!(miou >= 0.50, "train pseudo-label mIoU {miou:.4} < 0.50");

    // Downstream detector: train on exported pseudo labels, evaluate mAP50
    // on the held-out images.
    let labels = r.out.join("pseudo");
    if !labels.join("0.dota").exists() {
        export_pseudo_labels(&model, &r.cfg, &r.data, &labels).unwrap();
    }
    let det_dir = r.out.join("detector");
    let detector = if det_dir.join("detector.ckpt").exists() {
        Model::load(r.cfg.model.clone(), &det_dir.join("detector.ckpt")).unwrap()
    } else {
        train_detector(&r.cfg, &r.data, &labels, &det_dir).unwrap()
    };
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for i in r.cfg.train.train_images..ds.len() {
        let item = ds.load(i).unwrap();
        dets.push(detect(&detector, &item.image, 0.05));
        gts.push(item.boxes.clone());
    }
    let map50 = evaluate_map50(&dets, &gts);
    assert!(map50 >= 0.45, "held-out detector mAP50 {map50:.4} < 0.45");
    println!("criterion 6 PASS: train mIoU {miou:.4} (floor 0.50), mAP50 {map50:.4} (floor 0.45)");
}

// ---------------------------------------------------------------------------
// Criterion 7: ablation directions over 3 seeds
// ---------------------------------------------------------------------------

/// Desk-scale ablation configuration: small images and a reduced image
/// count so 3-seed sweeps stay tractable, but the full 12-epoch schedule
/// so every component gets its reference-run training budget per stage.
fn ablation_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.scene.image_size = 128;
    c.scene.objects_min = 1;
    c.scene.objects_max = 3;
    c.scene.size_range = (12.0, 64.0);
    c.scene.seed = 7;
    c.train.train_images = 48;
    c.train.holdout_images = 8;
    c.train.warmup_iters = 48;
    c.train.seed = seed;
    c
}

struct AblResult {
    miou: f64,
    mil_final: f64,
    map50: f64,
}

/// Run (or reuse) one ablation training run and return its metrics.
fn ablation_run(key: &str, cfg: &RunConfig) -> AblResult {
    let root = cache_root().join("ablations");
    let data = root.join("data");
    fs::create_dir_all(&root).unwrap();
    if !data.join("images/0.npyish").exists() {
        let n = cfg.train.train_images + cfg.train.holdout_images;
        generate_dataset(&cfg.scene, n, &data).unwrap();
    }
    let res_file = root.join(format!("{key}.txt"));
    if let Ok(text) = fs::read_to_string(&res_file) {
        let vals: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
        return AblResult { miou: vals[0], mil_final: vals[1], map50: vals[2] };
    }
    let out = root.join(key);
    let res = train(cfg, &data, &out).unwrap();
    let last: Vec<f64> = res
        .log_csv
        .trim()
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let mil_final = last[2] + last[3];
    // Held-out detection quality of the jointly trained detection head
    // (only meaningful for e2e runs; cheap either way).
    let ds = Dataset::open(&data).unwrap();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for i in cfg.train.train_images..ds.len() {
        let item = ds.load(i).unwrap();
        dets.push(detect(&res.model, &item.image, 0.05));
        gts.push(item.boxes.clone());
    }
    let map50 = evaluate_map50(&dets, &gts);
    fs::write(&res_file, format!("{:.6} {:.6} {:.6}", res.final_miou, mil_final, map50)).unwrap();
    AblResult { miou: res.final_miou, mil_final, map50 }
}

fn mean3(f: impl Fn(u64) -> f64) -> f64 {
    (11..14).map(|s| f(s as u64)).sum::<f64>() / 3.0
}

#[test]
fn criterion_7_ablation_directions() {
    // Component removals: the full model must beat each single-component
    // removal on mean mIoU.
    let full = mean3(|s| ablation_run(&format!("full_s{s}"), &ablation_config(s)).miou);
    let no_ssc = mean3(|s| {
        let mut c = ablation_config(s);
        c.use_ssc = false;
        ablation_run(&format!("nossc_s{s}"), &c).miou
    });
    let no_ds = mean3(|s| {
        let mut c = ablation_config(s);
        c.use_ds = false;
        ablation_run(&format!("nods_s{s}"), &c).miou
    });
    let no_ssff = mean3(|s| {
        let mut c = ablation_config(s);
        c.fusion = orientdet::ssff::FusionMode::PerLevel;
        ablation_run(&format!("nossff_s{s}"), &c).miou
    });
    assert!(full > no_ssc, "+SSC must improve mIoU: full {full:.4} vs {no_ssc:.4}");
    assert!(full > no_ds, "+DS must improve mIoU: full {full:.4} vs {no_ds:.4}");
    assert!(full > no_ssff, "+SSFF must improve mIoU: full {full:.4} vs {no_ssff:.4}");

    // Gradual view introduction vs. switching everything on from epoch 0.
    let grad_miou = mean3(|s| ablation_run(&format!("full_s{s}"), &ablation_config(s)).miou);
    let grad_mil = mean3(|s| ablation_run(&format!("full_s{s}"), &ablation_config(s)).mil_final);
    let plain = |s: u64| {
        let mut c = ablation_config(s);
        c.schedule = StageSchedule { burn_in1: 0, burn_in2: 0, total_epochs: c.schedule.total_epochs };
        ablation_run(&format!("plain_s{s}"), &c)
    };
    let plain_miou = mean3(|s| plain(s).miou);
    let plain_mil = mean3(|s| plain(s).mil_final);
    assert!(
        grad_miou > plain_miou,
        "gradual must beat plain on mIoU: {grad_miou:.4} vs {plain_miou:.4}"
    );
    assert!(
        grad_mil < plain_mil,
        "gradual must beat plain on final MIL loss: {grad_mil:.4} vs {plain_mil:.4}"
    );

    // Instance-aware weighting vs. uniform weights in the e2e branch.
    let iaw = mean3(|s| {
        let mut c = ablation_config(s);
        c.e2e = true;
        ablation_run(&format!("iaw_s{s}"), &c).map50
    });
    let uniform = mean3(|s| {
        let mut c = ablation_config(s);
        c.e2e = true;
        c.iaw = false;
        ablation_run(&format!("uniform_s{s}"), &c).map50
    });
    assert!(iaw > uniform, "IAW must beat uniform on mAP50: {iaw:.4} vs {uniform:.4}");

    println!(
        "criterion 7 PASS: mIoU full {full:.4} > -ssc {no_ssc:.4}, -ds {no_ds:.4}, \
         -ssff {no_ssff:.4}; gradual {grad_miou:.4}/{grad_mil:.4} vs plain \
         {plain_miou:.4}/{plain_mil:.4}; mAP50 iaw {iaw:.4} > uniform {uniform:.4}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: DOTA format fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_format_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let records: Vec<DotaRecord> = (0..10_000)
        .map(|k| DotaRecord {
            bbox: OrientedBox::new(
                rng.gen_range(-500.0..500.0),
                rng.gen_range(-500.0..500.0),
                rng.gen_range(1.0..200.0),
                rng.gen_range(1.0..200.0),
                rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
            )
            .unwrap(),
            class_name: format!("c{}", k % 5),
            difficulty: (k % 3) as u32,
        })
        .collect();
    let text = dota_encode(&records);
    let decoded = dota_decode(&text).unwrap();
    assert_eq!(decoded.len(), records.len());
    let mut worst = 0.0f64;
    for (orig, dec) in records.iter().zip(&decoded) {
        assert_eq!(orig.class_name, dec.class_name);
        assert_eq!(orig.difficulty, dec.difficulty);
        let co = obb_to_corners(&orig.bbox);
        let cd = obb_to_corners(&dec.bbox);
        // The decoded box may enumerate corners from a different starting
        // vertex; match each original corner to its nearest counterpart.
        for p in &co {
            let gap = cd
                .iter()
                .map(|q| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(gap);
        }
    }
    assert!(worst <= 1e-4, "round-trip corner error {worst:.2e} > 1e-4");

    // Malformed lines carry their position.
    let bad_fields = dota_decode("0 0 1 0 1 1 0 1 c0 0\n1 2 3\n").unwrap_err();
    assert!(format!("{bad_fields}").contains("line 2"), "{bad_fields}");
    let bad_coord = dota_decode("0 0 1 0 1 1 0 x c0 0\n").unwrap_err();
    let msg = format!("{bad_coord}");
    assert!(msg.contains("line 1") && msg.contains("field 8"), "{msg}");
    let bad_diff = dota_decode("0 0 1 0 1 1 0 1 c0 soft\n").unwrap_err();
    assert!(format!("{bad_diff}").contains("difficulty"), "{bad_diff}");
    let degenerate = dota_decode("0 0 0 0 0 0 0 0 c0 0\n").unwrap_err();
    assert!(format!("{degenerate}").contains("degenerate"), "{degenerate}");

    println!("criterion 8 PASS: 10000 boxes round-trip, worst corner gap {worst:.2e}");
}
