//! Internal probe: SSA consistency loss in isolation. Trains a fresh model
//! with only the rotate/flip angle-consistency objective and tracks how the
//! holdout angle error and the loss evolve with step count.
use orientdet::angle::*;
use orientdet::geom::{normalize_half_pi, ViewTransform};
use orientdet::netcore::*;
use orientdet::nn::optim::{clip_grad_norm, Sgd};
use orientdet::nn::{Graph, NodeId, Tensor};
use orientdet::synthdata::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEG: f64 = 180.0 / std::f64::consts::PI;

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let img: usize = envf("IMG", 128.0) as usize;
    let n: u64 = envf("N", 48.0) as u64;
    let holdout: u64 = envf("HOLD", 8.0) as u64;
    let steps: usize = envf("STEPS", 2000.0) as usize;
    let lr: f64 = envf("LR", 0.001);
    let mult: f64 = envf("MULT", 10.0);

    let mut scfg = SceneConfig::default();
    scfg.image_size = img;
    scfg.objects_min = 1;
    scfg.objects_max = 3;
    scfg.size_range = (12.0, 64.0);
    scfg.seed = 7;
    let scenes: Vec<_> = (0..n + holdout).map(|i| generate_scene(&scfg, i).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<Vec<PointLabel>> = scenes
        .iter()
        .map(|s| s.boxes.iter().map(|(b, c)| jitter_point(b, *c, 0.1, &mut rng)).collect())
        .collect();

    let mut model = Model::new(ModelConfig::default(), &mut rng);
    let mut sgd = Sgd::new(&model.store, lr, 0.0, 1e-4);
    sgd.set_lr_mult(&model.store, "ang.", mult);
    let spec = model.cfg.pyramid.clone();
    let ssa_cfg = SsaConfig::default();

    let eval = |model: &Model| -> (f64, f64, f64, f64) {
        let mut err_sum = 0.0;
        let mut axis_sum = 0.0;
        let mut err_n = 0usize;
        let mut res_sum = 0.0;
        let mut res_n = 0usize;
        let mut fres_sum = 0.0;
        let mut fres_n = 0usize;
        for i in n as usize..(n + holdout) as usize {
            let maps: Vec<Tensor> = {
                let mut g = Graph::new();
                let params = model.bind(&mut g);
                let im = g.constant(scenes[i].image.clone());
                let pyr = extract_pyramid(&mut g, model, &params, im);
                (0..pyr.levels.len())
                    .map(|l| {
                        let nn = dense_angle_forward(&mut g, model, &params, &pyr, l);
                        g.value(nn).clone()
                    })
                    .collect()
            };
            for (b, _) in &scenes[i].boxes {
                let pred = ds_match(b, &maps, &spec);
                let d = normalize_half_pi(pred - b.theta).abs();
                err_sum += d * DEG;
                axis_sum += d.min(std::f64::consts::FRAC_PI_2 - d) * DEG;
                err_n += 1;
            }
            // Rotate-consistency residual at pi/6.
            let hw = (img, img);
            let t = ViewTransform::rotate(std::f64::consts::FRAC_PI_6, img);
            let view = make_view(&scenes[i].image, &scenes[i].boxes, &points[i], &t);
            let maps_a: Vec<Tensor> = {
                let mut g = Graph::new();
                let params = model.bind(&mut g);
                let im = g.constant(view.image.clone());
                let pyr = extract_pyramid(&mut g, model, &params, im);
                (0..pyr.levels.len())
                    .map(|l| {
                        let nn = dense_angle_forward(&mut g, model, &params, &pyr, l);
                        g.value(nn).clone()
                    })
                    .collect()
            };
            let pos_o = assign_dense_positives(&points[i], &spec, hw, &ssa_cfg);
            let pos_a = assign_dense_positives(&view.points, &spec, hw, &ssa_cfg);
            for pi in 0..points[i].len() {
                let read = |maps: &[Tensor], lvl: usize, cells: &[(usize, usize)]| {
                    let m = &maps[lvl];
                    let w = m.shape()[2];
                    cells.iter().map(|(i, j)| m.data()[i * w + j]).sum::<f64>()
                        / cells.len() as f64
                };
                let final_of = |maps: &[Tensor], pos: &[Vec<(usize, usize)>]| {
                    let (mut c, mut s) = (0.0f64, 0.0f64);
                    for lvl in 0..spec.strides.len() {
                        let a = read(maps, lvl, &pos[lvl]);
                        c += (2.0 * a).cos();
                        s += (2.0 * a).sin();
                    }
                    0.5 * s.atan2(c)
                };
                for lvl in 0..spec.strides.len() {
                    let ao = read(&maps, lvl, &pos_o[pi][lvl]);
                    let aa = read(&maps_a, lvl, &pos_a[pi][lvl]);
                    let diff = aa - ao - std::f64::consts::FRAC_PI_6;
                    let r = (-2..=2)
                        .map(|k| (diff - k as f64 * std::f64::consts::PI).abs())
                        .fold(f64::INFINITY, f64::min)
                        * DEG;
                    res_sum += r;
                    res_n += 1;
                }
                let fo = final_of(&maps, &pos_o[pi]);
                let fa = final_of(&maps_a, &pos_a[pi]);
                fres_sum +=
                    normalize_half_pi(fa - fo - std::f64::consts::FRAC_PI_6).abs() * DEG;
                fres_n += 1;
            }
        }
        (
            err_sum / err_n as f64,
            axis_sum / err_n as f64,
            res_sum / res_n as f64,
            fres_sum / fres_n as f64,
        )
    };

    let mut step_rng = ChaCha8Rng::seed_from_u64(99);
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    for step in 0..steps {
        let idx = step % n as usize;
        if points[idx].is_empty() {
            continue;
        }
        let hw = (img, img);
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let im = g.constant(scenes[idx].image.clone());
        let pyr = extract_pyramid(&mut g, &model, &params, im);
        let ang: Vec<NodeId> = (0..pyr.levels.len())
            .map(|l| dense_angle_forward(&mut g, &model, &params, &pyr, l))
            .collect();
        let rotate = step_rng.gen_range(0.0..1.0) < ssa_cfg.rotate_prob;
        let t = if rotate {
            ViewTransform::rotate(
                step_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                img,
            )
        } else {
            ViewTransform::vflip(img)
        };
        let view = make_view(&scenes[idx].image, &scenes[idx].boxes, &points[idx], &t);
        let keep: Vec<usize> = view
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.x >= 0.0 && p.y >= 0.0 && p.x <= img as f64 - 1.0 && p.y <= img as f64 - 1.0
            })
            .map(|(i, _)| i)
            .collect();
        if keep.is_empty() {
            continue;
        }
        let vimg = g.constant(view.image.clone());
        let vpyr = extract_pyramid(&mut g, &model, &params, vimg);
        let vang: Vec<NodeId> = (0..vpyr.levels.len())
            .map(|l| dense_angle_forward(&mut g, &model, &params, &vpyr, l))
            .collect();
        let opoints: Vec<PointLabel> = keep.iter().map(|i| points[idx][*i]).collect();
        let vpoints: Vec<PointLabel> = keep.iter().map(|i| view.points[*i]).collect();
        let opos = assign_dense_positives(&opoints, &spec, hw, &ssa_cfg);
        let vpos = assign_dense_positives(&vpoints, &spec, hw, &ssa_cfg);
        let oa: Vec<Vec<NodeId>> = opos
            .iter()
            .map(|cells| cells.iter().zip(&ang).map(|(c, m)| level_angle(&mut g, *m, c)).collect())
            .collect();
        let va: Vec<Vec<NodeId>> = vpos
            .iter()
            .map(|cells| cells.iter().zip(&vang).map(|(c, m)| level_angle(&mut g, *m, c)).collect())
            .collect();
        let loss = ssa_loss(&mut g, &oa, &va, &t, &ssa_cfg);
        loss_acc += g.value(loss).item();
        loss_n += 1;
        g.backward(loss);
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        for id in params.ids() {
            grads.push(g.take_grad(*id));
        }
        clip_grad_norm(&mut grads, 35.0);
        sgd.step(&mut model.store, &grads, 1.0);
        if (step + 1) % 250 == 0 {
            let (err, axis, res, fres) = eval(&model);
            println!(
                "step {:>5}: ssa loss {:.3}, err {:.2} / axis {:.2} deg, residual {:.2} / final {:.2} deg",
                step + 1,
                loss_acc / loss_n as f64,
                err,
                axis,
                res,
                fres
            );
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
}
