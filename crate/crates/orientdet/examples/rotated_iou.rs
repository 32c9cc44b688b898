//! Rotated IoU on a few hand-checkable box pairs, plus a DOTA round trip.

use orientdet::geom::{dota_decode, dota_encode, rotated_iou, DotaRecord, OrientedBox};

fn main() {
    let unit = OrientedBox { cx: 0.0, cy: 0.0, w: 2.0, h: 2.0, theta: 0.0 };
    let rot45 = OrientedBox { theta: std::f64::consts::FRAC_PI_4, ..unit };
    let shifted = OrientedBox { cx: 1.0, ..unit };
    let apart = OrientedBox { cx: 10.0, ..unit };

    println!("identical boxes:      IoU = {:.4}", rotated_iou(&unit, &unit));
    println!("square vs 45deg twin: IoU = {:.4}", rotated_iou(&unit, &rot45));
    println!("half-overlapping:     IoU = {:.4}", rotated_iou(&unit, &shifted));
    println!("disjoint:             IoU = {:.4}", rotated_iou(&unit, &apart));

    let rec = DotaRecord {
        bbox: OrientedBox { cx: 40.0, cy: 30.0, w: 20.0, h: 10.0, theta: 0.3 },
        class_name: "c2".into(),
        difficulty: 0,
    };
    let text = dota_encode(&[rec.clone()]);
    println!("\nDOTA line: {}", text.trim());
    let back = dota_decode(&text).unwrap();
    println!(
        "round-trip IoU with original = {:.6}",
        rotated_iou(&rec.bbox, &back[0].bbox)
    );
}
