//! End-to-end variant: the detection head trains jointly on the MIL
//! pseudo boxes with instance-aware weights, then runs inference.

use orientdet::synthdata::{generate_dataset, Dataset};
use orientdet::trainer::{detect, train, RunConfig, StageSchedule};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.scene.image_size = 96;
    cfg.model.channels = 8;
    cfg.schedule = StageSchedule { burn_in1: 2, burn_in2: 3, total_epochs: 4 };
    cfg.train.train_images = 12;
    cfg.train.warmup_iters = 20;
    cfg.e2e = true;
    cfg.iaw = true;

    let dir = std::env::temp_dir().join("orientdet_e2e_example");
    let data = dir.join("data");
    generate_dataset(&cfg.scene, cfg.train.train_images, &data).unwrap();
    let res = train(&cfg, &data, &dir.join("run")).unwrap();
    println!("metrics log:\n{}", res.log_csv);

    let item = Dataset::open(&data).unwrap().load(0).unwrap();
    let dets = detect(&res.model, &item.image, 0.05);
    println!("image 0: {} ground-truth boxes, {} detections", item.boxes.len(), dets.len());
    for d in dets.iter().take(5) {
        println!(
            "  class {} score {:.3}: {:.1}x{:.1} at ({:.1},{:.1}) angle {:+.2}",
            d.class, d.score, d.bbox.w, d.bbox.h, d.bbox.cx, d.bbox.cy, d.bbox.theta
        );
    }
}
