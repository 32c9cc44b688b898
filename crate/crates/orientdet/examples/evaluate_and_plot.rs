//! Evaluation utilities: pseudo-label mIoU, rotated NMS, mAP50, and the
//! metrics-CSV plot renderer.

use orientdet::geom::OrientedBox;
use orientdet::trainer::plot::plot_csv;
use orientdet::trainer::{evaluate_map50, evaluate_miou, rotated_nms, Detection};

fn main() {
    let gt = OrientedBox { cx: 20.0, cy: 20.0, w: 10.0, h: 6.0, theta: 0.2 };
    let close = OrientedBox { cx: 21.0, ..gt };
    let off = OrientedBox { cx: 40.0, ..gt };

    let (miou, warnings) = evaluate_miou(&[vec![close, off]], &[vec![gt, gt]]);
    println!("pseudo-label mIoU {miou:.4} ({warnings} unpaired boxes)");

    let mut dets = vec![
        Detection { bbox: gt, score: 0.9, class: 0 },
        Detection { bbox: close, score: 0.6, class: 0 }, // suppressed duplicate
        Detection { bbox: off, score: 0.8, class: 0 },
    ];
    rotated_nms(&mut dets, 0.3);
    println!("{} detections survive NMS", dets.len());

    let map = evaluate_map50(&[dets], &[vec![(gt, 0), (off, 0)]]);
    println!("mAP50 = {map:.4}");

    let csv = "epoch,step,L_mil_ori,L_mil_ref,miou\n0,10,1.5,0.8,0.2\n1,20,1.1,0.6,0.5\n2,30,0.9,0.5,0.7\n";
    let out = std::env::temp_dir().join("orientdet_metrics.png");
    plot_csv(csv, &out).unwrap();
    println!("wrote {}", out.display());
}
