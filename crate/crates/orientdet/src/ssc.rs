//! Scale-sensitive consistency loss: regroup bag scores by scale group,
//! compare the original-view and resized-view groups with a cosine
//! dissimilarity, and penalize with a smooth-L1 toward zero.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::netcore::BagScores;
use crate::nn::{Graph, NodeId, Op, Tensor};

/// Counts cosine evaluations that hit the zero-norm degenerate guard.
pub static ZERO_NORM_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// How an `N x C` score matrix is split into consistency groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingMode {
    /// One group per scale: rows of length R*C (the default).
    Scale,
    /// One group per aspect ratio: rows of length G*C.
    Ratio,
    /// One group per proposal: rows of length C.
    Proposal,
}

/// SSC loss configuration. `omega_ins`/`omega_cls` weight the instance and
/// class streams; `beta` is the smooth-L1 threshold.
#[derive(Debug, Clone)]
pub struct SscConfig {
    pub omega_ins: f64,
    pub omega_cls: f64,
    pub beta: f64,
    pub grouping: GroupingMode,
}

impl Default for SscConfig {
    fn default() -> Self {
        Self { omega_ins: 2.0, omega_cls: 1.0, beta: 1.0, grouping: GroupingMode::Scale }
    }
}

struct GatherPermOp {
    perm: Vec<usize>,
}

impl Op for GatherPermOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(parents[0].shape());
            for (k, src) in self.perm.iter().enumerate() {
                dx.data_mut()[*src] += grad_out.data()[k];
            }
            dx
        })]
    }
}

/// Regroup `S: [N,C]` (rows ordered by (scale group g, ratio r)) into the
/// grouped matrix for `mode`:
/// scale -> `[G, R*C]`, ratio -> `[R, G*C]`, proposal -> `[N, C]`.
pub fn regroup_scores(
    g: &mut Graph,
    s: NodeId,
    groups: usize,
    ratios: usize,
    mode: GroupingMode,
) -> NodeId {
    let sv = g.value(s);
    let (n, c) = (sv.shape()[0], sv.shape()[1]);
    assert_eq!(n, groups * ratios, "N must equal G*R");
    let (rows, cols, perm): (usize, usize, Vec<usize>) = match mode {
        GroupingMode::Scale => (groups, ratios * c, (0..n * c).collect()),
        GroupingMode::Proposal => (n, c, (0..n * c).collect()),
        GroupingMode::Ratio => {
            let mut perm = Vec::with_capacity(n * c);
            for r in 0..ratios {
                for grp in 0..groups {
                    let row = grp * ratios + r;
                    for k in 0..c {
                        perm.push(row * c + k);
                    }
                }
            }
            (ratios, groups * c, perm)
        }
    };
    let data: Vec<f64> = perm.iter().map(|k| sv.data()[*k]).collect();
    let v = Tensor::from_vec(&[rows, cols], data);
    g.push(Box::new(GatherPermOp { perm }), vec![s], v)
}

struct CosineRowsOp;

impl Op for CosineRowsOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (u, v) = (parents[0], parents[1]);
        let (rows, k) = (u.shape()[0], u.shape()[1]);
        let mut du = Tensor::zeros(u.shape());
        let mut dv = Tensor::zeros(v.shape());
        for r in 0..rows {
            let ur = &u.data()[r * k..(r + 1) * k];
            let vr = &v.data()[r * k..(r + 1) * k];
            let nu = ur.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu <= 1e-12 || nv <= 1e-12 {
                continue;
            }
            let dot: f64 = ur.iter().zip(vr).map(|(a, b)| a * b).sum();
            let go = grad_out.data()[r];
            // d(1 - dot/(nu nv)) / du = -(v/(nu nv) - dot u / (nu^3 nv))
            for i in 0..k {
                du.data_mut()[r * k + i] =
                    -go * (vr[i] / (nu * nv) - dot * ur[i] / (nu * nu * nu * nv));
                dv.data_mut()[r * k + i] =
                    -go * (ur[i] / (nu * nv) - dot * vr[i] / (nv * nv * nv * nu));
            }
        }
        vec![needs[0].then_some(du), needs[1].then_some(dv)]
    }
}

/// Row-wise cosine dissimilarity `1 - u.v / (|u||v|)` between two grouped
/// matrices; output `[rows]`. Zero-norm rows yield 0 and bump
/// [`ZERO_NORM_WARNINGS`].
pub fn cosine_dissim_rows(g: &mut Graph, u: NodeId, v: NodeId) -> NodeId {
    let (uv, vv) = (g.value(u), g.value(v));
    assert_eq!(uv.shape(), vv.shape(), "grouped shapes must match");
    let (rows, k) = (uv.shape()[0], uv.shape()[1]);
    let mut out = Tensor::zeros(&[rows]);
    for r in 0..rows {
        let ur = &uv.data()[r * k..(r + 1) * k];
        let vr = &vv.data()[r * k..(r + 1) * k];
        let nu = ur.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.data_mut()[r] = if nu <= 1e-12 || nv <= 1e-12 {
            ZERO_NORM_WARNINGS.fetch_add(1, Ordering::Relaxed);
            0.0
        } else if ur == vr {
            // Exact-zero identity for identical views (the gradient of the
            // cosine at parallel vectors is zero, so this is consistent).
            0.0
        } else {
            let dot: f64 = ur.iter().zip(vr).map(|(a, b)| a * b).sum();
            (1.0 - dot / (nu * nv)).max(0.0)
        };
    }
    g.push(Box::new(CosineRowsOp), vec![u, v], out)
}

/// Convenience scalar form for two K-vectors.
pub fn cosine_dissim(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len());
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= 1e-12 || nv <= 1e-12 {
        ZERO_NORM_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    if u == v {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (1.0 - dot / (nu * nv)).max(0.0)
}

/// SSC loss over paired bags: for every bag m and group g,
/// `omega_ins * SmoothL1(dissim_ins) + omega_cls * SmoothL1(dissim_cls)`,
/// summed over bags and groups. The resized-view bags must be built with
/// the sigma-scaled basic scales so group indices correspond.
pub fn ssc_loss(
    g: &mut Graph,
    orig: &[BagScores],
    resized: &[BagScores],
    groups: usize,
    ratios: usize,
    cfg: &SscConfig,
) -> NodeId {
    assert_eq!(orig.len(), resized.len(), "bag count mismatch between views");
    assert!(!orig.is_empty());
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    for (o, r) in orig.iter().zip(resized) {
        for (so, sr, weight) in [
            (o.ins, r.ins, cfg.omega_ins),
            (o.cls, r.cls, cfg.omega_cls),
        ] {
            let go = regroup_scores(g, so, groups, ratios, cfg.grouping);
            let gr = regroup_scores(g, sr, groups, ratios, cfg.grouping);
            let d = cosine_dissim_rows(g, go, gr);
            let sl = g.smooth_l1_sum(d, cfg.beta);
            terms.push((sl, weight));
        }
    }
    g.add_weighted(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regroup_examples() {
        let mut g = Graph::new();
        // G=2, R=2, C=1, rows ordered (g0r0, g0r1, g1r0, g1r1).
        let s = g.constant(Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let scale = regroup_scores(&mut g, s, 2, 2, GroupingMode::Scale);
        assert_eq!(g.value(scale).shape(), &[2, 2]);
        assert_eq!(g.value(scale).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ratio = regroup_scores(&mut g, s, 2, 2, GroupingMode::Ratio);
        assert_eq!(g.value(ratio).data(), &[1.0, 3.0, 2.0, 4.0]);
        let prop = regroup_scores(&mut g, s, 2, 2, GroupingMode::Proposal);
        assert_eq!(g.value(prop).shape(), &[4, 1]);
        // G=1: single row equals the flattened matrix.
        let one = regroup_scores(&mut g, s, 1, 4, GroupingMode::Scale);
        assert_eq!(g.value(one).shape(), &[1, 4]);
        assert_eq!(g.value(one).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_dissim(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((cosine_dissim(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        let want = 1.0 - 1.0 / 2f64.sqrt();
        assert!((cosine_dissim(&[1.0, 0.0], &[1.0, 1.0]) - want).abs() < 1e-12);
        // Scale-free: positive rescaling of either side changes nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let a = rng.gen_range(0.1..10.0);
            let b = rng.gen_range(0.1..10.0);
            let us: Vec<f64> = u.iter().map(|x| x * a).collect();
            let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
            assert!((cosine_dissim(&u, &v) - cosine_dissim(&us, &vs)).abs() < 1e-9);
        }
    }

    fn bag(g: &mut Graph, ins: Tensor, cls: Tensor) -> BagScores {
        BagScores { ins: g.constant(ins), cls: g.constant(cls) }
    }

    #[test]
    fn identical_views_zero_and_oracle() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = Tensor::zeros(&[8, 3]);
        for v in s.data_mut() {
            *v = rng.gen_range(0.01..1.0);
        }
        let a = bag(&mut g, s.clone(), s.clone());
        let b = bag(&mut g, s.clone(), s);
        let l = ssc_loss(&mut g, &[a], &[b], 4, 2, &SscConfig::default());
        assert_eq!(g.value(l).item(), 0.0);
        // Single bag, single group, dissim 0.2929 in both streams:
        // 2*0.5*d^2 + 1*0.5*d^2 = 0.1287.
        let mut g2 = Graph::new();
        let u = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]);
        let v = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]);
        let o = bag(&mut g2, u.clone(), u);
        let r = bag(&mut g2, v.clone(), v);
        let cfg = SscConfig::default();
        let l2 = ssc_loss(&mut g2, &[o], &[r], 1, 2, &cfg);
        let d = 1.0 - 1.0 / 2f64.sqrt();
        let want = 1.5 * d * d;
        assert!((g2.value(l2).item() - want).abs() < 1e-12);
        assert!((want - 0.1287).abs() < 1e-4);
        // Doubling both weights doubles the loss.
        let o2 = bag(&mut g2, Tensor::from_vec(&[2, 1], vec![1.0, 0.0]), Tensor::from_vec(&[2, 1], vec![1.0, 0.0]));
        let r2 = bag(&mut g2, Tensor::from_vec(&[2, 1], vec![1.0, 1.0]), Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
        let heavy = SscConfig { omega_ins: 4.0, omega_cls: 2.0, ..cfg };
        let l3 = ssc_loss(&mut g2, &[o2], &[r2], 1, 2, &heavy);
        assert!((g2.value(l3).item() - 2.0 * want).abs() < 1e-12);
    }

    #[test]
    fn loss_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let mut g = Graph::new();
            let mk = |rng: &mut ChaCha8Rng| {
                let mut t = Tensor::zeros(&[6, 2]);
                for v in t.data_mut() {
                    *v = rng.gen_range(0.01..1.0);
                }
                t
            };
            let a = bag(&mut g, mk(&mut rng), mk(&mut rng));
            let b = bag(&mut g, mk(&mut rng), mk(&mut rng));
            let l = ssc_loss(&mut g, &[a], &[b], 3, 2, &SscConfig::default());
            assert!(g.value(l).item() >= 0.0);
        }
    }

    #[test]
    fn ssc_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mk = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(&[4, 2]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.05..1.0);
            }
            t
        };
        let leaves = [mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let err = check_gradients(
            &leaves,
            |g, ids| {
                let o = BagScores { ins: ids[0], cls: ids[1] };
                let r = BagScores { ins: ids[2], cls: ids[3] };
                ssc_loss(g, &[o], &[r], 2, 2, &SscConfig::default())
            },
            24,
            &mut rng,
        );
        assert!(err < 1e-6, "SSC grad rel err {err}");
    }
}
