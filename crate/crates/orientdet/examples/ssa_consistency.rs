//! Self-supervised angle consistency: the SSA loss compares dense angle
//! predictions between an image and a rotated copy, up to the symmetry
//! ambiguity of k*pi.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orientdet::angle::{assign_dense_positives, level_angle, ssa_loss, SsaConfig};
use orientdet::geom::ViewTransform;
use orientdet::netcore::{dense_angle_forward, extract_pyramid, Model, ModelConfig};
use orientdet::nn::Graph;
use orientdet::synthdata::{generate_scene, make_view, SceneConfig};

fn main() {
    let mut scene_cfg = SceneConfig::default();
    scene_cfg.image_size = 96;
    let scene = generate_scene(&scene_cfg, 1).unwrap();
    let points: Vec<_> = scene
        .boxes
        .iter()
        .map(|(b, c)| orientdet::synthdata::PointLabel { x: b.cx, y: b.cy, class_id: *c })
        .collect();

    let t = ViewTransform::rotate(0.6, scene_cfg.image_size);
    let view = make_view(&scene.image, &scene.boxes, &points, &t);

    let mut mcfg = ModelConfig::default();
    mcfg.channels = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(mcfg, &mut rng);
    let mut g = Graph::new();
    let params = model.bind(&mut g);

    let cfg = SsaConfig::default();
    let hw = (scene_cfg.image_size, scene_cfg.image_size);
    let mut angles = Vec::new();
    for (image, pts) in [(&scene.image, &points), (&view.image, &view.points)] {
        let img = g.constant(image.clone());
        let pyr = extract_pyramid(&mut g, &model, &params, img);
        let maps: Vec<_> = (0..pyr.levels.len())
            .map(|l| dense_angle_forward(&mut g, &model, &params, &pyr, l))
            .collect();
        let pos = assign_dense_positives(pts, &model.cfg.pyramid, hw, &cfg);
        let per_point: Vec<Vec<_>> = pos
            .iter()
            .map(|cells| {
                cells.iter().zip(&maps).map(|(c, m)| level_angle(&mut g, *m, c)).collect()
            })
            .collect();
        angles.push(per_point);
    }

    for (i, (po, pa)) in angles[0].iter().zip(&angles[1]).enumerate() {
        let a0 = g.value(po[0]).item();
        let a1 = g.value(pa[0]).item();
        println!(
            "point {i}: finest-level angle {a0:+.4} (orig) vs {a1:+.4} (rotated by 0.6)"
        );
    }
    let loss = ssa_loss(&mut g, &angles[0], &angles[1], &t, &cfg);
    println!("SSA loss of the untrained network: {:.4}", g.value(loss).item());
}
