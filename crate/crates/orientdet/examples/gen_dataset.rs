//! Generate a small synthetic dataset and print what landed on disk.

use orientdet::synthdata::{generate_dataset, Dataset, SceneConfig};

fn main() {
    let mut cfg = SceneConfig::default();
    cfg.image_size = 96;
    cfg.seed = 7;
    let dir = std::env::temp_dir().join("orientdet_example_data");
    generate_dataset(&cfg, 4, &dir).unwrap();

    let ds = Dataset::open(&dir).unwrap();
    println!("dataset at {} with {} images", dir.display(), ds.len());
    for i in 0..ds.len() {
        let item = ds.load(i).unwrap();
        println!(
            "image {i}: {}x{} pixels, {} boxes, {} point labels",
            item.image.shape()[2],
            item.image.shape()[1],
            item.boxes.len(),
            item.points.len()
        );
        for (b, c) in &item.boxes {
            println!(
                "  class {c}: center ({:.1},{:.1}) size {:.1}x{:.1} angle {:.1} deg",
                b.cx,
                b.cy,
                b.w,
                b.h,
                b.theta.to_degrees()
            );
        }
    }
}
