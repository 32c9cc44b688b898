//! Internal probe: oracle quality of the structure-tensor orientation field.
//! For each object, read 0.5*atan2 of the field at the point's positive
//! cells per level and compare with the GT angle modulo pi/2.
use orientdet::angle::{assign_dense_positives, SsaConfig};
use orientdet::netcore::orientation_field;
use orientdet::synthdata::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DEG: f64 = 180.0 / std::f64::consts::PI;

fn fold_quarter(d: f64) -> f64 {
    // Fold an angle difference into [0, pi/4] (distance to the nearest
    // multiple of pi/2).
    let q = std::f64::consts::FRAC_PI_2;
    let r = d.rem_euclid(q);
    r.min(q - r)
}

fn main() {
    let mut scfg = SceneConfig::default();
    scfg.image_size = 128;
    scfg.objects_min = 1;
    scfg.objects_max = 3;
    scfg.size_range = (12.0, 64.0);
    scfg.seed = 7;
    let spec = orientdet::geom::PyramidSpec::standard();
    let ssa_cfg = SsaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut per_level = vec![(0.0f64, 0usize); spec.strides.len()];
    let mut assigned = (0.0f64, 0usize);
    for idx in 0..32u64 {
        let scene = generate_scene(&scfg, idx).unwrap();
        let points: Vec<PointLabel> = scene
            .boxes
            .iter()
            .map(|(b, c)| jitter_point(b, *c, 0.1, &mut rng))
            .collect();
        let fields: Vec<_> = spec
            .strides
            .iter()
            .map(|s| orientation_field(&scene.image, *s))
            .collect();
        let pos = assign_dense_positives(&points, &spec, (scfg.image_size, scfg.image_size), &ssa_cfg);
        for (pi, (b, _)) in scene.boxes.iter().enumerate() {
            let alvl = orientdet::geom::assign_pyramid_level(b.w, b.h, &spec).unwrap();
            for lvl in 0..spec.strides.len() {
                let f = &fields[lvl];
                let (lh, lw) = (f.shape()[1], f.shape()[2]);
                let mut c_sum = 0.0;
                let mut s_sum = 0.0;
                for (i, j) in &pos[pi][lvl] {
                    c_sum += f.data()[i * lw + j];
                    s_sum += f.data()[lh * lw + i * lw + j];
                }
                let phi = 0.5 * s_sum.atan2(c_sum);
                let err = fold_quarter(phi - b.theta) * DEG;
                per_level[lvl].0 += err;
                per_level[lvl].1 += 1;
                if lvl == alvl {
                    assigned.0 += err;
                    assigned.1 += 1;
                    let s = (b.w * b.h).sqrt();
                    println!("  size {s:.0} aspect {:.2} lvl {lvl} err {err:.1}", b.w / b.h);
                }
            }
        }
    }
    for (lvl, (sum, n)) in per_level.iter().enumerate() {
        println!("level {lvl} (stride {}): mean field-vs-GT err {:.2} deg over {n}", spec.strides[lvl], sum / *n as f64);
    }
    println!("assigned level: mean err {:.2} deg over {}", assigned.0 / assigned.1 as f64, assigned.1);
}
