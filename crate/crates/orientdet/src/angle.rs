//! Self-supervised angle learning: dense positive assignment around point
//! labels, per-level angle averaging, the rotate/flip consistency (SSA)
//! loss with k*pi periodicity, and dense-to-sparse matching of predicted
//! angles onto proposals.

use crate::geom::{assign_pyramid_level, normalize_half_pi, OrientedBox, PyramidSpec, ViewKind, ViewTransform};
use crate::nn::{Graph, NodeId, Tensor};
use crate::synthdata::PointLabel;

/// SSA configuration. `k_range` bounds the periodicity search
/// (`k in [-k_range, k_range]`); `central_radius` is the dense-positive
/// radius in grid cells; `rotate_prob` is the chance a training sample uses
/// the rotated (vs. flipped) view.
#[derive(Debug, Clone)]
pub struct SsaConfig {
    pub k_range: i32,
    pub smoothl1_beta: f64,
    pub central_radius: f64,
    pub rotate_prob: f64,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self { k_range: 2, smoothl1_beta: 1.0, central_radius: 1.5, rotate_prob: 0.95 }
    }
}

/// Feature-grid dimensions of every level for an `h x w` image.
pub fn level_shapes(spec: &PyramidSpec, h: usize, w: usize) -> Vec<(usize, usize)> {
    spec.strides
        .iter()
        .map(|s| (h.div_ceil(*s), w.div_ceil(*s)))
        .collect()
}

/// Image coordinates of the center of grid cell `(i,j)` at `stride`.
fn cell_center(i: usize, j: usize, stride: f64) -> (f64, f64) {
    ((j as f64 + 0.5) * stride - 0.5, (i as f64 + 0.5) * stride - 0.5)
}

/// Per-point, per-level positive cells: every cell whose center lies
/// within `central_radius * stride` of the point; if none, the single
/// nearest (clamped) cell. Never empty.
pub fn assign_dense_positives(
    points: &[PointLabel],
    spec: &PyramidSpec,
    image_hw: (usize, usize),
    cfg: &SsaConfig,
) -> Vec<Vec<Vec<(usize, usize)>>> {
    let shapes = level_shapes(spec, image_hw.0, image_hw.1);
    points
        .iter()
        .map(|p| {
            spec.strides
                .iter()
                .zip(&shapes)
                .map(|(stride, (lh, lw))| {
                    let s = *stride as f64;
                    let radius = cfg.central_radius * s;
                    let mut cells = Vec::new();
                    // Only scan the window that can contain positives.
                    let i0 = (((p.y - radius + 0.5) / s - 0.5).floor().max(0.0)) as usize;
                    let j0 = (((p.x - radius + 0.5) / s - 0.5).floor().max(0.0)) as usize;
                    let i1 = ((((p.y + radius + 0.5) / s - 0.5).ceil()) as usize).min(lh - 1);
                    let j1 = ((((p.x + radius + 0.5) / s - 0.5).ceil()) as usize).min(lw - 1);
                    for i in i0..=i1 {
                        for j in j0..=j1 {
                            let (cx, cy) = cell_center(i, j, s);
                            if (cx - p.x).hypot(cy - p.y) <= radius {
                                cells.push((i, j));
                            }
                        }
                    }
                    if cells.is_empty() {
                        let i = (((p.y + 0.5) / s - 0.5).round().max(0.0) as usize).min(lh - 1);
                        let j = (((p.x + 0.5) / s - 0.5).round().max(0.0) as usize).min(lw - 1);
                        cells.push((i, j));
                    }
                    cells
                })
                .collect()
        })
        .collect()
}

/// Average of a dense angle map `[1,H,W]` over the positive cells:
/// the per-level angle prediction for one point.
pub fn level_angle(g: &mut Graph, map: NodeId, cells: &[(usize, usize)]) -> NodeId {
    g.gather_mean(map, cells.to_vec())
}

/// Smooth-L1 of `diff - (k*pi + shift)` minimized over `k`; `k` is chosen
/// by forward value and fixed, so gradients follow the selected branch.
fn min_k_penalty(g: &mut Graph, diff: NodeId, shift: f64, cfg: &SsaConfig) -> NodeId {
    let d = g.value(diff).item();
    let mut best_k = 0i32;
    let mut best = f64::INFINITY;
    for k in -cfg.k_range..=cfg.k_range {
        let r = (d - (k as f64 * std::f64::consts::PI + shift)).abs();
        if r < best {
            best = r;
            best_k = k;
        }
    }
    let target = g.constant(Tensor::scalar(
        best_k as f64 * std::f64::consts::PI + shift,
    ));
    let residual = g.add_weighted(&[(diff, 1.0), (target, -1.0)]);
    g.smooth_l1_sum(residual, cfg.smoothl1_beta)
}

/// SSA loss between per-point, per-level angles of the original view
/// (`orig[point][level]`) and of the augmented view. For a rotation by
/// `theta'`: `min_k SmoothL1(theta_rot - theta - (k pi + theta'))`; for a
/// vertical flip: `min_k SmoothL1(theta_flip + theta - k pi)`. Summed over
/// levels, averaged over points.
pub fn ssa_loss(
    g: &mut Graph,
    orig: &[Vec<NodeId>],
    aug: &[Vec<NodeId>],
    transform: &ViewTransform,
    cfg: &SsaConfig,
) -> NodeId {
    assert_eq!(orig.len(), aug.len(), "point count mismatch between views");
    assert!(!orig.is_empty());
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let inv_points = 1.0 / orig.len() as f64;
    for (po, pa) in orig.iter().zip(aug) {
        assert_eq!(po.len(), pa.len(), "level count mismatch");
        for (to, ta) in po.iter().zip(pa) {
            let term = match transform.kind {
                ViewKind::Rotate(theta_aug) => {
                    let diff = g.add_weighted(&[(*ta, 1.0), (*to, -1.0)]);
                    min_k_penalty(g, diff, theta_aug, cfg)
                }
                ViewKind::VFlip => {
                    let diff = g.add(*ta, *to);
                    min_k_penalty(g, diff, 0.0, cfg)
                }
                ViewKind::Identity | ViewKind::Resize(_) => {
                    panic!("SSA loss requires a rotate or vflip view")
                }
            };
            terms.push((term, inv_points));
        }
    }
    g.add_weighted(&terms)
}

/// Dense-to-sparse matching: read the proposal's angle from the dense map
/// of its assigned pyramid level, averaging over cells whose centers fall
/// inside the central 50% x 50% sub-rectangle of the proposal (fallback:
/// the cell nearest the center). Result normalized to `[-pi/2, pi/2)`.
pub fn ds_match(
    proposal: &OrientedBox,
    maps: &[Tensor],
    spec: &PyramidSpec,
) -> f64 {
    let lvl = assign_pyramid_level(proposal.w, proposal.h, spec)
        .expect("proposal has positive size");
    let map = &maps[lvl];
    let (lh, lw) = (map.shape()[1], map.shape()[2]);
    let s = spec.strides[lvl] as f64;
    let (sin, cos) = proposal.theta.sin_cos();
    let (hw, hh) = (0.25 * proposal.w, 0.25 * proposal.h);
    let r = 0.5 * (proposal.w * proposal.w + proposal.h * proposal.h).sqrt();
    let i0 = (((proposal.cy - r + 0.5) / s - 0.5).floor().max(0.0)) as usize;
    let j0 = (((proposal.cx - r + 0.5) / s - 0.5).floor().max(0.0)) as usize;
    let i1 = ((((proposal.cy + r + 0.5) / s - 0.5).ceil()) as usize).min(lh - 1);
    let j1 = ((((proposal.cx + r + 0.5) / s - 0.5).ceil()) as usize).min(lw - 1);
    // Mean on the period-pi circle: predicted angles are axial, and an
    // arithmetic mean breaks down when cells straddle the +-pi/2 branch cut
    // (two reads of the same near-vertical axis average to horizontal).
    let (mut c_sum, mut s_sum) = (0.0f64, 0.0f64);
    let mut count = 0usize;
    for i in i0..=i1 {
        for j in j0..=j1 {
            let (cx, cy) = cell_center(i, j, s);
            let dx = cx - proposal.cx;
            let dy = cy - proposal.cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if u.abs() <= hw && v.abs() <= hh {
                let a = 2.0 * map.data()[i * lw + j];
                c_sum += a.cos();
                s_sum += a.sin();
                count += 1;
            }
        }
    }
    let theta = if count > 0 {
        0.5 * s_sum.atan2(c_sum)
    } else {
        let i = (((proposal.cy + 0.5) / s - 0.5).round().max(0.0) as usize).min(lh - 1);
        let j = (((proposal.cx + 0.5) / s - 0.5).round().max(0.0) as usize).min(lw - 1);
        map.data()[i * lw + j]
    };
    normalize_half_pi(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn spec() -> PyramidSpec {
        PyramidSpec::standard()
    }

    #[test]
    fn nine_cell_block_at_cell_center() {
        // Point exactly at an interior cell center, radius 1.5 strides:
        // the 3x3 block qualifies (distances 0, s, sqrt(2) s <= 1.5 s).
        let cfg = SsaConfig::default();
        let s = 4.0;
        let (px, py) = cell_center(10, 10, s);
        let p = PointLabel { x: px, y: py, class_id: 0 };
        let pos = assign_dense_positives(&[p], &spec(), (256, 256), &cfg);
        let lvl0 = &pos[0][0];
        assert_eq!(lvl0.len(), 9);
        for (i, j) in lvl0 {
            assert!((*i as i64 - 10).abs() <= 1 && (*j as i64 - 10).abs() <= 1);
        }
    }

    #[test]
    fn corner_point_nonempty_and_positives_in_radius() {
        let cfg = SsaConfig::default();
        let p = PointLabel { x: 0.0, y: 0.0, class_id: 0 };
        let pos = assign_dense_positives(&[p], &spec(), (256, 256), &cfg);
        for (lvl, cells) in pos[0].iter().enumerate() {
            assert!(!cells.is_empty(), "level {lvl} empty");
        }
        // Radius property on a generic point.
        let q = PointLabel { x: 77.3, y: 131.9, class_id: 0 };
        let pos = assign_dense_positives(&[q], &spec(), (256, 256), &cfg);
        for (lvl, cells) in pos[0].iter().enumerate() {
            let s = spec().strides[lvl] as f64;
            if cells.len() > 1 {
                for (i, j) in cells {
                    let (cx, cy) = cell_center(*i, *j, s);
                    assert!((cx - q.x).hypot(cy - q.y) <= 1.5 * s + 1e-9);
                }
            }
        }
    }

    #[test]
    fn level_angle_mean() {
        let mut g = Graph::new();
        let map = g.constant(Tensor::filled(&[1, 4, 4], 0.37));
        let a = level_angle(&mut g, map, &[(0, 0), (1, 2), (3, 3)]);
        assert!((g.value(a).item() - 0.37).abs() < 1e-12);
        let mut m = Tensor::zeros(&[1, 2, 2]);
        m.data_mut()[0] = 0.1;
        m.data_mut()[3] = 0.3;
        let map2 = g.constant(m);
        let a2 = level_angle(&mut g, map2, &[(0, 0), (1, 1)]);
        assert!((g.value(a2).item() - 0.2).abs() < 1e-12);
    }

    fn scalars(g: &mut Graph, vals: &[f64]) -> Vec<NodeId> {
        vals.iter().map(|v| g.constant(Tensor::scalar(*v))).collect()
    }

    #[test]
    fn ssa_exact_consistency_is_zero() {
        let cfg = SsaConfig::default();
        // Rotate by 30 deg: 0.6981 - 0.1745 = 0.5236 exactly.
        let mut g = Graph::new();
        let orig = vec![scalars(&mut g, &[0.1745, 0.1745])];
        let aug = vec![scalars(&mut g, &[0.6981, 0.6981])];
        let t = ViewTransform::rotate(0.5236, 256);
        let l = ssa_loss(&mut g, &orig, &aug, &t, &cfg);
        assert!(g.value(l).item() < 1e-12);
        // VFlip periodicity: 170 deg + 10 deg = 180 deg -> zero at k=1.
        let mut g2 = Graph::new();
        let orig = vec![scalars(&mut g2, &[170.0 * PI / 180.0])];
        let aug = vec![scalars(&mut g2, &[10.0 * PI / 180.0])];
        let t = ViewTransform::vflip(256);
        let l2 = ssa_loss(&mut g2, &orig, &aug, &t, &cfg);
        assert!(g2.value(l2).item() < 1e-12);
    }

    #[test]
    fn ssa_residual_oracle_and_min_k() {
        let cfg = SsaConfig::default();
        // Single level, rotate, best-k residual 0.2 -> 0.5 * 0.2^2 = 0.02.
        let mut g = Graph::new();
        let theta_aug = 0.4;
        let orig = vec![scalars(&mut g, &[0.1])];
        let aug = vec![scalars(&mut g, &[0.1 + theta_aug + 0.2])];
        let t = ViewTransform::rotate(theta_aug, 256);
        let l = ssa_loss(&mut g, &orig, &aug, &t, &cfg);
        assert!((g.value(l).item() - 0.02).abs() < 1e-12);
        // Brute-force k oracle: diff chosen so the best k is nonzero.
        let mut g2 = Graph::new();
        let orig = vec![scalars(&mut g2, &[1.2])];
        let aug = vec![scalars(&mut g2, &[1.2 + theta_aug + 0.15 - PI])];
        let l2 = ssa_loss(&mut g2, &vec![orig[0].clone()], &aug, &t, &cfg);
        let diff: f64 = -PI + theta_aug + 0.15 - theta_aug;
        let best = (-2..=2)
            .map(|k| (diff - (k as f64 * PI + 0.0)).abs())
            .fold(f64::INFINITY, f64::min);
        assert!((g2.value(l2).item() - 0.5 * best * best).abs() < 1e-12);
    }

    #[test]
    fn ssa_gradients_match_fd() {
        // Differentiate through gather_mean into the dense maps.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let maps = [
            Tensor::randn(&[1, 4, 4], 0.3, &mut rng),
            Tensor::randn(&[1, 4, 4], 0.3, &mut rng),
        ];
        let cells = vec![(1usize, 1usize), (1, 2), (2, 1)];
        let t = ViewTransform::rotate(0.5, 64);
        let cfg = SsaConfig::default();
        let err = check_gradients(
            &maps,
            |g, ids| {
                let a = level_angle(g, ids[0], &cells);
                let b = level_angle(g, ids[1], &cells);
                ssa_loss(g, &[vec![a]], &[vec![b]], &t, &cfg)
            },
            16,
            &mut rng,
        );
        assert!(err < 1e-6, "SSA grad rel err {err}");
    }

    #[test]
    fn ds_match_reads_assigned_level() {
        let spec = spec();
        // Distinct constants per level.
        let maps: Vec<Tensor> = [(64usize, 0.1f64), (32, 0.2), (16, 0.3), (8, 0.4)]
            .iter()
            .map(|(n, v)| Tensor::filled(&[1, *n, *n], *v))
            .collect();
        // sqrt(wh) = fs -> level 0.
        let small = OrientedBox::new(128.0, 128.0, 56.0, 56.0, 0.0).unwrap();
        assert!((ds_match(&small, &maps, &spec) - 0.1).abs() < 1e-12);
        // sqrt(wh) = 4 fs -> level 2.
        let big = OrientedBox::new(128.0, 128.0, 224.0, 224.0, 0.0).unwrap();
        assert!((ds_match(&big, &maps, &spec) - 0.3).abs() < 1e-12);
        // Tiny proposal: fallback nearest cell still returns the level-0
        // constant.
        let tiny = OrientedBox::new(3.0, 3.0, 5.0, 5.0, 0.9).unwrap();
        assert!((ds_match(&tiny, &maps, &spec) - 0.1).abs() < 1e-12);
    }
}
