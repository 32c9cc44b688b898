//! Internal probe: small-scale training run measuring holdout angle error
//! and rotate/flip consistency residuals for a given angle branch lr mult.
use orientdet::angle::*;
use orientdet::geom::{normalize_half_pi, ViewTransform};
use orientdet::netcore::*;
use orientdet::nn::Graph;
use orientdet::nn::Tensor;
use orientdet::synthdata::*;
use orientdet::trainer::*;
use std::path::PathBuf;

const DEG: f64 = 180.0 / std::f64::consts::PI;

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

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mult: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let tag = args.get(2).cloned().unwrap_or_else(|| format!("m{mult}"));

    let mut cfg = RunConfig::default();
    cfg.scene.image_size = 128;
    cfg.scene.objects_min = 1;
    cfg.scene.objects_max = 3;
    cfg.scene.size_range = (12.0, 64.0);
    cfg.scene.seed = 7;
    cfg.train.train_images = 48;
    cfg.train.holdout_images = 8;
    cfg.train.warmup_iters = 48;
    cfg.train.seed = 11;
    cfg.train.angle_lr_mult = mult;

    let root = PathBuf::from("/root/runs/angleprobe");
    let data = root.join("data");
    if !data.join("images/0.npyish").exists() {
        generate_dataset(&cfg.scene, cfg.train.train_images + cfg.train.holdout_images, &data)
            .unwrap();
    }
    let out = root.join(&tag);
    let model = if out.join("final.ckpt").exists() {
        Model::load(cfg.model.clone(), &out.join("final.ckpt")).unwrap()
    } else {
        train(&cfg, &data, &out).unwrap().model
    };
    let ds = Dataset::open(&data).unwrap();
    let spec = &model.cfg.pyramid;

    let mut err_sum = 0.0;
    let mut axis_sum = 0.0;
    let mut err_n = 0usize;
    for i in cfg.train.train_images..ds.len() {
        let item = ds.load(i).unwrap();
        let maps = angle_maps(&model, &item.image);
        for (b, _) in &item.boxes {
            let pred = ds_match(b, &maps, spec);
            let d = normalize_half_pi(pred - b.theta).abs();
            err_sum += d * DEG;
            // Error to the nearest of the two symmetry axes (mod pi/2).
            axis_sum += d.min((d - std::f64::consts::FRAC_PI_2).abs()) * DEG;
            err_n += 1;
        }
    }
    println!(
        "mult {mult}: holdout angle err {:.2} deg (mod pi), {:.2} deg (mod pi/2) over {err_n} boxes",
        err_sum / err_n as f64,
        axis_sum / err_n as f64
    );

    let ssa_cfg = SsaConfig::default();
    let mut res_sum = 0.0;
    let mut res_n = 0usize;
    for i in cfg.train.train_images..ds.len() {
        let item = ds.load(i).unwrap();
        if item.points.is_empty() {
            continue;
        }
        let hw = (item.image.shape()[1], item.image.shape()[2]);
        let maps_o = angle_maps(&model, &item.image);
        let pos_o = assign_dense_positives(&item.points, spec, hw, &ssa_cfg);
        for t in [
            ViewTransform::rotate(std::f64::consts::FRAC_PI_6, hw.0),
            ViewTransform::vflip(hw.0),
        ] {
            let view = make_view(&item.image, &item.boxes, &item.points, &t);
            let maps_a = angle_maps(&model, &view.image);
            let pos_a = assign_dense_positives(&view.points, spec, hw, &ssa_cfg);
            for (pi, _) in item.points.iter().enumerate() {
                for lvl in 0..spec.strides.len() {
                    let read = |maps: &[Tensor], cells: &[(usize, usize)]| {
                        let m = &maps[lvl];
                        let w = m.shape()[2];
                        cells.iter().map(|(i, j)| m.data()[i * w + j]).sum::<f64>()
                            / cells.len() as f64
                    };
                    let ao = read(&maps_o, &pos_o[pi][lvl]);
                    let aa = read(&maps_a, &pos_a[pi][lvl]);
                    let diff = match t.kind {
                        orientdet::geom::ViewKind::Rotate(th) => aa - ao - th,
                        _ => aa + ao,
                    };
                    res_sum += min_k_residual_deg(diff);
                    res_n += 1;
                }
            }
        }
    }
    println!("mult {mult}: consistency residual {:.2} deg over {res_n} reads", res_sum / res_n as f64);
}
