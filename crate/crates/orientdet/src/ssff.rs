//! Scale-gated pyramid fusion and oriented ROI feature extraction.
//!
//! The fused path predicts a per-pixel gate for every pyramid level (a
//! softmax across levels after upsampling to the finest grid) and sums the
//! gated, upsampled level features into one map. A classic per-level ROI
//! path is kept behind [`FusionMode::PerLevel`] for ablation.

use crate::geom::{assign_pyramid_level, OrientedBox};
use crate::netcore::{BoundParams, Model, Pyramid};
use crate::nn::{BilinearSample, Graph, NodeId, Tensor};

/// How proposal features are extracted from the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Fuse all levels into one finest-resolution map with learned gates.
    Gated,
    /// Classic: pick one level per box via the scale-to-level rule.
    PerLevel,
}

/// Per-level gating maps on the finest grid: `P` maps of shape `[1,H,W]`
/// that sum to one across levels at every pixel.
pub fn gating_scores(g: &mut Graph, m: &Model, p: &BoundParams, pyr: &Pyramid) -> Vec<NodeId> {
    let finest = g.value(pyr.levels[0]).shape().to_vec();
    let (h, w) = (finest[1], finest[2]);
    let raw: Vec<NodeId> = pyr
        .levels
        .iter()
        .enumerate()
        .map(|(lvl, feat)| {
            let gw = p.get(m, &format!("gate{lvl}.w"));
            let gb = p.get(m, &format!("gate{lvl}.b"));
            let s = g.conv2d(*feat, gw, gb, 1, 1);
            g.upsample_nearest(s, h, w)
        })
        .collect();
    let stacked = g.stack(&raw); // [P,1,H,W]
    let soft = g.softmax(stacked, 0);
    (0..raw.len()).map(|k| g.slice0(soft, k)).collect()
}

/// Fused feature map `[D,H,W]` on the finest grid: sum of gated, upsampled
/// level features.
pub fn fuse_pyramid(g: &mut Graph, m: &Model, p: &BoundParams, pyr: &Pyramid) -> NodeId {
    let gates = gating_scores(g, m, p, pyr);
    let finest = g.value(pyr.levels[0]).shape().to_vec();
    let (h, w) = (finest[1], finest[2]);
    let mut acc: Option<NodeId> = None;
    for (feat, gate) in pyr.levels.iter().zip(gates) {
        let up = g.upsample_nearest(*feat, h, w);
        let gated = g.mul_gate(up, gate);
        acc = Some(match acc {
            None => gated,
            Some(a) => g.add(a, gated),
        });
    }
    acc.unwrap()
}

/// Extracted ROI features plus an out-of-image flag.
pub struct RoiFeature {
    /// `[1, D*roi*roi]` flattened features, row-major over (channel, cell).
    pub feat: NodeId,
    /// True when the box lies entirely outside the image: the features are
    /// exactly zero and callers should treat the proposal as void.
    pub fully_outside: bool,
}

/// Sampling grids extend this factor beyond the box so the outer ring of
/// cells straddles the box boundary; a snug box then shows an
/// inside/outside contrast that pure-interior sampling cannot see.
pub const ROI_MARGIN: f64 = 1.45;

/// Sample an oriented `roi x roi` grid from a feature map with the given
/// stride. Cell centers are placed on a regular grid spanning `ROI_MARGIN`
/// times the box extent in the box frame and rotated by the box angle; each
/// cell takes one bilinear sample. Taps are clamped to the map border
/// (border-replicate), so a constant map pools to a constant output for any
/// box that overlaps the image.
pub fn roi_extract(
    g: &mut Graph,
    feat: NodeId,
    stride: f64,
    image_hw: (usize, usize),
    b: &OrientedBox,
    roi: usize,
) -> RoiFeature {
    let fv = g.value(feat).shape().to_vec();
    let (d, fh, fw) = (fv[0], fv[1], fv[2]);
    let (s, c) = b.theta.sin_cos();
    let (img_h, img_w) = image_hw;
    let mut samples = Vec::with_capacity(roi * roi);
    let mut any_inside = false;
    for i in 0..roi {
        for j in 0..roi {
            let u = ((j as f64 + 0.5) / roi as f64 - 0.5) * ROI_MARGIN * b.w;
            let v = ((i as f64 + 0.5) / roi as f64 - 0.5) * ROI_MARGIN * b.h;
            let x = b.cx + c * u - s * v;
            let y = b.cy + s * u + c * v;
            if x >= -0.5 && x <= img_w as f64 - 0.5 && y >= -0.5 && y <= img_h as f64 - 0.5 {
                any_inside = true;
            }
            samples.push(BilinearSample {
                cell: i * roi + j,
                x: ((x + 0.5) / stride - 0.5).clamp(0.0, fw as f64 - 1.0),
                y: ((y + 0.5) / stride - 0.5).clamp(0.0, fh as f64 - 1.0),
                weight: 1.0,
            });
        }
    }
    if !any_inside {
        let zero = g.constant(Tensor::zeros(&[1, d * roi * roi]));
        return RoiFeature { feat: zero, fully_outside: true };
    }
    let pooled = g.roi_bilinear(feat, samples, roi * roi); // [D, roi*roi]
    let flat = g.reshape(pooled, &[1, d * roi * roi]);
    RoiFeature { feat: flat, fully_outside: false }
}

/// Extract features for a batch of proposal boxes under the chosen mode,
/// returning `[N, D*roi*roi]` plus per-box void flags.
pub fn extract_proposals(
    g: &mut Graph,
    m: &Model,
    pyr: &Pyramid,
    fused: Option<NodeId>,
    boxes: &[OrientedBox],
    image_hw: (usize, usize),
    mode: FusionMode,
) -> (NodeId, Vec<bool>) {
    let roi = m.cfg.roi_size;
    let cells = roi * roi;
    // Fixed ring-mean weights over the roi grid: inner block, middle ring,
    // outer ring. Applied to the raw grid and its soft-binarized version.
    let mut ring_w = Tensor::zeros(&[3, cells]);
    {
        let (mut ni, mut nm, mut no) = (0.0f64, 0.0f64, 0.0f64);
        let ring = |i: usize, j: usize| -> usize {
            if i == 0 || i == roi - 1 || j == 0 || j == roi - 1 {
                2
            } else if i == 1 || i == roi - 2 || j == 1 || j == roi - 2 {
                1
            } else {
                0
            }
        };
        for i in 0..roi {
            for j in 0..roi {
                match ring(i, j) {
                    0 => ni += 1.0,
                    1 => nm += 1.0,
                    _ => no += 1.0,
                }
            }
        }
        for i in 0..roi {
            for j in 0..roi {
                let r = ring(i, j);
                let n = [ni, nm.max(1.0), no][r];
                ring_w.data_mut()[r * cells + i * roi + j] = 1.0 / n;
            }
        }
    }
    let ring_w = g.constant(ring_w);
    let ring_b = g.constant(Tensor::zeros(&[3]));
    let c_neg = g.constant(Tensor::filled(&[1, cells], -0.25));
    let c_one = g.constant(Tensor::filled(&[1, cells], 1.0));
    let fin = (g.value(pyr.levels[0]).shape()[0]) * cells + cells + 7;
    let mut rows = Vec::with_capacity(boxes.len());
    let mut voids = Vec::with_capacity(boxes.len());
    for b in boxes {
        let rf = match mode {
            FusionMode::Gated => {
                let fused = fused.expect("gated mode requires the fused map");
                roi_extract(g, fused, m.cfg.pyramid.strides[0] as f64, image_hw, b, roi)
            }
            FusionMode::PerLevel => {
                let lvl = assign_pyramid_level(b.w, b.h, &m.cfg.pyramid).expect("positive box size");
                roi_extract(
                    g,
                    pyr.levels[lvl],
                    m.cfg.pyramid.strides[lvl] as f64,
                    image_hw,
                    b,
                    roi,
                )
            }
        };
        if rf.fully_outside {
            rows.push(g.constant(Tensor::zeros(&[fin])));
            voids.push(true);
            continue;
        }
        // Stride-1 raw-intensity grid over the same oriented cells.
        let raw = roi_extract(g, pyr.image, 1.0, image_hw, b, roi).feat; // [1,cells]
        // Soft binarization: 0 below 0.25, 1 above 0.35, linear ramp between.
        // Built from ReLUs: 1 - relu(1 - 10*relu(v - 0.25)).
        let t = g.add(raw, c_neg);
        let t = g.relu(t);
        let t = g.scale(t, -10.0);
        let t = g.add(t, c_one);
        let t = g.relu(t);
        let t = g.scale(t, -1.0);
        let sb = g.add(t, c_one);
        let rings_raw = g.linear(raw, ring_w, ring_b); // [1,3]
        let rings_bin = g.linear(sb, ring_w, ring_b); // [1,3]
        // Objectness prior: high when the inner/middle cells are covered and
        // the outer ring is background — a snug-box signature. Stored as the
        // final feature column; the MIL head adds it to the instance-stream
        // logits as a fixed selection bias.
        let rb = g.value(rings_bin).data();
        let prior = 0.5 * (rb[0] + rb[1]) * (1.0 - rb[2]);
        let prior = g.constant(Tensor::from_vec(&[1], vec![prior]));
        let parts = [rf.feat, raw, rings_raw, rings_bin, prior];
        let flats: Vec<NodeId> = parts
            .iter()
            .map(|p| {
                let n = g.value(*p).numel();
                g.reshape(*p, &[n])
            })
            .collect();
        rows.push(g.concat0(&flats));
        voids.push(false);
    }
    (g.concat_rows(&rows), voids)
}
