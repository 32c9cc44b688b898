//! Internal probe: view-consistency residual of the trained head vs the raw
//! field on the reference holdout, per view kind and per level.
use orientdet::angle::*;
use orientdet::geom::{normalize_half_pi, ViewTransform};
use orientdet::netcore::*;
use orientdet::nn::{Graph, Tensor};
use orientdet::synthdata::{make_view, Dataset};
use orientdet::trainer::*;
use std::path::PathBuf;

const DEG: f64 = 180.0 / std::f64::consts::PI;

fn head_maps(model: &Model, image: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let im = g.constant(image.clone());
    let pyr = extract_pyramid(&mut g, model, &p, im);
    (0..pyr.levels.len())
        .map(|l| {
            let nn = dense_angle_forward(&mut g, model, &p, &pyr, l);
            g.value(nn).clone()
        })
        .collect()
}

fn field_maps(image: &Tensor, spec: &orientdet::geom::PyramidSpec) -> Vec<Tensor> {
    spec.strides
        .iter()
        .map(|s| {
            let f = orientation_field(image, *s);
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let mut m = Tensor::zeros(&[1, h, w]);
            m.data_mut().copy_from_slice(&f.data()[2 * h * w..]);
            m
        })
        .collect()
}

fn main() {
    let root = PathBuf::from("/root/crate/target/tmp/acceptance/ref");
    let cfg = RunConfig::default();
    let model = Model::load(cfg.model.clone(), &root.join("out/final.ckpt")).unwrap();
    let ds = Dataset::open(&root.join("data")).unwrap();
    let spec = model.cfg.pyramid.clone();
    let ssa_cfg = SsaConfig::default();
    // (source, view) -> (sum, n)
    let mut acc = std::collections::BTreeMap::new();
    let mut lvlacc = std::collections::BTreeMap::new();
    for i in cfg.train.train_images..cfg.train.train_images + 10 {
        let item = ds.load(i).unwrap();
        if item.points.is_empty() {
            continue;
        }
        let hw = (item.image.shape()[1], item.image.shape()[2]);
        let theta_rot = std::f64::consts::FRAC_PI_6;
        let pos_o = assign_dense_positives(&item.points, &spec, hw, &ssa_cfg);
        let hm_o = head_maps(&model, &item.image);
        let fm_o = field_maps(&item.image, &spec);
        for t in [ViewTransform::rotate(theta_rot, hw.0), ViewTransform::vflip(hw.0)] {
            let view = make_view(&item.image, &item.boxes, &item.points, &t);
            let pos_a = assign_dense_positives(&view.points, &spec, hw, &ssa_cfg);
            let hm_a = head_maps(&model, &view.image);
            let fm_a = field_maps(&view.image, &spec);
            let vname = match t.kind {
                orientdet::geom::ViewKind::Rotate(_) => "rot",
                _ => "flip",
            };
            for (src, mo, ma) in [("head", &hm_o, &hm_a), ("field", &fm_o, &fm_a)] {
                for pi in 0..item.points.len() {
                    let final_of = |maps: &Vec<Tensor>, pos: &Vec<Vec<(usize, usize)>>| {
                        let (mut c, mut s) = (0.0f64, 0.0f64);
                        for lvl in 0..spec.strides.len() {
                            let m = &maps[lvl];
                            let w = m.shape()[2];
                            let (mut lc, mut ls) = (0.0f64, 0.0f64);
                            for (i, j) in &pos[lvl] {
                                let a = m.data()[i * w + j];
                                lc += (2.0 * a).cos();
                                ls += (2.0 * a).sin();
                            }
                            let nrm = lc.hypot(ls).max(1e-12);
                            c += lc / nrm;
                            s += ls / nrm;
                        }
                        0.5 * s.atan2(c)
                    };
                    for lvl in 0..spec.strides.len() {
                        let rd = |maps: &Vec<Tensor>, pos: &Vec<Vec<(usize, usize)>>| {
                            let m = &maps[lvl];
                            let w = m.shape()[2];
                            pos[lvl].iter().map(|(i, j)| m.data()[i * w + j]).sum::<f64>()
                                / pos[lvl].len() as f64
                        };
                        let d = match t.kind {
                            orientdet::geom::ViewKind::Rotate(th) => {
                                rd(ma, &pos_a[pi]) - rd(mo, &pos_o[pi]) - th
                            }
                            _ => rd(ma, &pos_a[pi]) + rd(mo, &pos_o[pi]),
                        };
                        let e = lvlacc.entry((src, vname, lvl)).or_insert((0.0, 0usize));
                        e.0 += normalize_half_pi(d).abs() * DEG;
                        e.1 += 1;
                    }
                    let ao = final_of(mo, &pos_o[pi]);
                    let aa = final_of(ma, &pos_a[pi]);
                    let diff = match t.kind {
                        orientdet::geom::ViewKind::Rotate(th) => aa - ao - th,
                        _ => aa + ao,
                    };
                    let r = normalize_half_pi(diff).abs() * DEG;
                    let e = acc.entry((src, vname)).or_insert((0.0, 0usize));
                    e.0 += r;
                    e.1 += 1;
                }
            }
        }
    }
    for ((src, v, lvl), (sum, n)) in &lvlacc {
        println!("{src:>5} {v:>4} lvl {lvl}: residual {:.2} deg over {n}", sum / *n as f64);
    }
    for ((src, v), (sum, n)) in &acc {
        println!("{src:>5} {v:>4}: residual {:.2} deg over {n}", sum / *n as f64);
    }
}
