//! A complete (small) two-stage run: generate data, train with the
//! progressive schedule, export pseudo labels, and score them against
//! ground truth.

use orientdet::synthdata::generate_dataset;
use orientdet::trainer::{export_pseudo_labels, train, RunConfig, StageSchedule};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.scene.image_size = 96;
    cfg.model.channels = 8;
    cfg.schedule = StageSchedule { burn_in1: 2, burn_in2: 3, total_epochs: 4 };
    cfg.train.train_images = 12;
    cfg.train.warmup_iters = 20;

    let dir = std::env::temp_dir().join("orientdet_two_stage_example");
    let data = dir.join("data");
    generate_dataset(&cfg.scene, cfg.train.train_images, &data).unwrap();

    let out = dir.join("run");
    let res = train(&cfg, &data, &out).unwrap();
    println!("metrics log:\n{}", res.log_csv);
    println!("final pseudo-label mIoU: {:.4}", res.final_miou);

    let labels = dir.join("pseudo");
    let n = export_pseudo_labels(&res.model, &cfg, &data, &labels).unwrap();
    println!("exported {n} pseudo boxes to {}", labels.display());
}
