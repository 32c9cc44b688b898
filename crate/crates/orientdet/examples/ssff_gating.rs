//! Scale-selection feature fusion: per-pixel gates over pyramid levels
//! sum to one, and the fused map is their gate-weighted combination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orientdet::netcore::{extract_pyramid, Model, ModelConfig};
use orientdet::nn::{Graph, Tensor};
use orientdet::ssff::{fuse_pyramid, gating_scores};

fn main() {
    let mut cfg = ModelConfig::default();
    cfg.channels = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::new(cfg, &mut rng);

    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let pixels: Vec<f64> = (0..64 * 64)
        .map(|i| ((i / 64 + i % 64) % 7) as f64 / 7.0)
        .collect();
    let image = Tensor::from_vec(&[1, 64, 64], pixels);
    let img = g.constant(image);
    let pyr = extract_pyramid(&mut g, &model, &params, img);
    println!("pyramid levels:");
    for (k, l) in pyr.levels.iter().enumerate() {
        let s = g.value(*l).shape().to_vec();
        println!("  level {k}: {s:?} (stride {})", model.cfg.pyramid.strides[k]);
    }

    let gates = gating_scores(&mut g, &model, &params, &pyr);
    let n = g.value(gates[0]).data().len();
    let mut worst = 0.0f64;
    for i in 0..n {
        let sum: f64 = gates.iter().map(|gt| g.value(*gt).data()[i]).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    println!("max |gate sum - 1| over {n} pixels: {worst:.2e}");

    let fused = fuse_pyramid(&mut g, &model, &params, &pyr);
    println!("fused map shape: {:?}", g.value(fused).shape());
}
