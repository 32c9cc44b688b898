//! Internal probe: per-level / per-size angle-error breakdown of a trained
//! reference checkpoint on its holdout split.
use orientdet::angle::*;
use orientdet::geom::normalize_half_pi;
use orientdet::netcore::*;
use orientdet::nn::{Graph, Tensor};
use orientdet::synthdata::Dataset;
use orientdet::trainer::*;
use std::path::PathBuf;

const DEG: f64 = 180.0 / std::f64::consts::PI;

fn main() {
    let root = PathBuf::from("/root/crate/target/tmp/acceptance/ref");
    let cfg = RunConfig::default();
    let model = Model::load(cfg.model.clone(), &root.join("out/final.ckpt")).unwrap();
    let ds = Dataset::open(&root.join("data")).unwrap();
    let spec = &model.cfg.pyramid;
    let mut by_lvl = vec![(0.0f64, 0.0f64, 0usize); 4];
    let (mut es, mut axs, mut n) = (0.0, 0.0, 0usize);
    let (mut faxs, mut flvl) = (0.0, vec![(0.0f64, 0usize); 4]);
    let mut fcls = vec![(0.0f64, 0usize); 5];
    let mut pfield = (0.0f64, 0.0f64);
    let mut phead = (0.0f64, 0.0f64);
    for i in cfg.train.train_images..ds.len() {
        let item = ds.load(i).unwrap();
        let maps: Vec<Tensor> = {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let im = g.constant(item.image.clone());
            let pyr = extract_pyramid(&mut g, &model, &p, im);
            (0..pyr.levels.len())
                .map(|l| {
                    let nn = dense_angle_forward(&mut g, &model, &p, &pyr, l);
                    g.value(nn).clone()
                })
                .collect()
        };
        let field: Vec<Tensor> = spec
            .strides
            .iter()
            .map(|s| {
                let f = orientation_field(&item.image, *s);
                let (h, w) = (f.shape()[1], f.shape()[2]);
                let mut m = Tensor::zeros(&[1, h, w]);
                m.data_mut().copy_from_slice(&f.data()[2 * h * w..]);
                m
            })
            .collect();
        let circ = |maps: &[Tensor], x: f64, y: f64| {
            let pts = [orientdet::synthdata::PointLabel { x, y, class_id: 0 }];
            let pos = assign_dense_positives(&pts, spec, (item.image.shape()[1], item.image.shape()[2]), &SsaConfig::default());
            let (mut c, mut s) = (0.0f64, 0.0f64);
            for (lvl, cells) in pos[0].iter().enumerate() {
                let m = &maps[lvl];
                let w = m.shape()[2];
                let (mut lc, mut ls) = (0.0f64, 0.0f64);
                for (i, j) in cells {
                    let a = m.data()[i * w + j];
                    lc += (2.0 * a).cos();
                    ls += (2.0 * a).sin();
                }
                let nrm = (lc * lc + ls * ls).sqrt().max(1e-12);
                c += lc / nrm;
                s += ls / nrm;
            }
            0.5 * s.atan2(c)
        };
        for (b, cid) in &item.boxes {
            for (tag, maps2, acc) in [("field", &field, &mut pfield), ("head", &maps, &mut phead)] {
                let _ = tag;
                let pr = circ(maps2, b.cx, b.cy);
                let d = normalize_half_pi(pr - b.theta).abs();
                acc.0 += d * DEG;
                acc.1 += d.min(std::f64::consts::FRAC_PI_2 - d) * DEG;
            }
            let fpred = ds_match(b, &field, spec);
            let fd = normalize_half_pi(fpred - b.theta).abs();
            let fax = fd.min(std::f64::consts::FRAC_PI_2 - fd);
            faxs += fax * DEG;
            fcls[*cid].0 += fax * DEG;
            fcls[*cid].1 += 1;
            let pred = ds_match(b, &maps, spec);
            let d = normalize_half_pi(pred - b.theta).abs();
            let ax = d.min(std::f64::consts::FRAC_PI_2 - d);
            let lvl = orientdet::geom::assign_pyramid_level(b.w, b.h, spec).unwrap();
            es += d * DEG;
            axs += ax * DEG;
            n += 1;
            by_lvl[lvl].0 += d * DEG;
            by_lvl[lvl].1 += ax * DEG;
            by_lvl[lvl].2 += 1;
            flvl[lvl].0 += fax * DEG;
            flvl[lvl].1 += 1;
            if false {
                println!(
                    "  bad: size {:.0}x{:.0} lvl {} theta {:.2} pred {:.2} err {:.1} ax {:.1}",
                    b.w, b.h, lvl, b.theta * DEG, pred * DEG, d * DEG, ax * DEG
                );
            }
        }
    }
    println!("overall: err {:.2} axis {:.2} over {}", es / n as f64, axs / n as f64, n);
    println!("raw field axis: {:.2}", faxs / n as f64);
    println!("point-read field: err {:.2} axis {:.2}", pfield.0 / n as f64, pfield.1 / n as f64);
    println!("point-read head:  err {:.2} axis {:.2}", phead.0 / n as f64, phead.1 / n as f64);
    for (c, (e, k)) in fcls.iter().enumerate() {
        if *k > 0 {
            println!("raw field class {c}: axis {:.2} n {}", e / *k as f64, k);
        }
    }
    for (l, (e, c)) in flvl.iter().enumerate() {
        if *c > 0 {
            println!("raw field level {l}: axis {:.2} n {}", e / *c as f64, c);
        }
    }
    for (l, (e, a, c)) in by_lvl.iter().enumerate() {
        if *c > 0 {
            println!("level {l}: err {:.2} axis {:.2} n {}", e / *c as f64, a / *c as f64, c);
        }
    }
}
