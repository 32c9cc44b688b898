//! Proposal bags around point labels and the two-stream MIL scoring that
//! picks the most reliable proposal per bag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orientdet::mil::{bag_aggregate, build_bag, select_reliable, BagConfig};
use orientdet::netcore::{extract_pyramid, mil_forward, Model, ModelConfig};
use orientdet::nn::Graph;
use orientdet::ssff::{extract_proposals, fuse_pyramid, FusionMode};
use orientdet::synthdata::{generate_scene, jitter_point, SceneConfig};

fn main() {
    let mut scene_cfg = SceneConfig::default();
    scene_cfg.image_size = 96;
    let scene = generate_scene(&scene_cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b0, c0) = scene.boxes[0];
    let point = jitter_point(&b0, c0, scene_cfg.point_range_frac, &mut rng);
    println!(
        "point label: ({:.1},{:.1}) class {} (true box {:.0}x{:.0})",
        point.x, point.y, point.class_id, b0.w, b0.h
    );

    let bag_cfg = BagConfig::default();
    let bag = build_bag(&point, &bag_cfg, None);
    println!(
        "bag: {} proposals ({} scales x {} ratios)",
        bag.proposals.len(),
        bag_cfg.groups(),
        bag_cfg.ratios.len()
    );

    let mut mcfg = ModelConfig::default();
    mcfg.channels = 8;
    let model = Model::new(mcfg, &mut rng);
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let img = g.constant(scene.image.clone());
    let pyr = extract_pyramid(&mut g, &model, &params, img);
    let fused = fuse_pyramid(&mut g, &model, &params, &pyr);
    let (feats, voids) = extract_proposals(
        &mut g,
        &model,
        &pyr,
        Some(fused),
        &bag.proposals,
        (96, 96),
        FusionMode::Gated,
    );
    println!("{} proposals fall fully outside the image", voids.iter().filter(|v| **v).count());

    let scores = mil_forward(&mut g, &model, &params, feats, false);
    let agg = bag_aggregate(&mut g, &scores);
    println!("bag class scores (untrained net): {:?}", g.value(agg).data());
    let top = select_reliable(g.value(scores.cls), g.value(scores.ins), point.class_id);
    let tb = bag.proposals[top];
    println!(
        "selected proposal {top}: {:.1}x{:.1} at ({:.1},{:.1})",
        tb.w, tb.h, tb.cx, tb.cy
    );
}
