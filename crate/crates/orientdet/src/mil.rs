//! Proposal bags and the two MIL losses: bag construction around point
//! labels, two-stream score aggregation, the coarse binary cross-entropy
//! loss, reliable-proposal selection, refined-bag construction, and the
//! focal refined loss.

use crate::geom::OrientedBox;
use crate::netcore::BagScores;
use crate::nn::{Graph, NodeId, Op, Tensor};
use crate::synthdata::PointLabel;

/// Proposal-bag geometry. `basic_scales[g]` is the target sqrt(w*h) of
/// scale group `g`; `ratios[r]` is w/h. The refined bag jitters the
/// selected box by every (scale factor, ratio factor) pair.
#[derive(Debug, Clone)]
pub struct BagConfig {
    pub basic_scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub refined_jitter: Vec<f64>,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self {
            basic_scales: (0..8).map(|g| 8.0 * 2f64.powf(g as f64 / 2.0)).collect(),
            ratios: vec![1.0 / 3.0, 0.5, 1.0, 2.0, 3.0],
            refined_jitter: vec![0.8, 0.9, 1.0, 1.1, 1.2],
        }
    }
}

impl BagConfig {
    pub fn groups(&self) -> usize {
        self.basic_scales.len()
    }

    pub fn num_proposals(&self) -> usize {
        self.basic_scales.len() * self.ratios.len()
    }
}

/// Bag life-cycle stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagStage {
    Coarse,
    Refined,
}

/// A bag of candidate boxes owned by one point label. Coarse bags are
/// ordered by (scale group, ratio); every proposal is centered on the
/// owner point.
#[derive(Debug, Clone)]
pub struct ProposalBag {
    pub owner: PointLabel,
    pub proposals: Vec<OrientedBox>,
    pub stage: BagStage,
}

/// Build the coarse bag for a point. When `angle` is set (stage 3, after
/// dense-to-sparse matching) every proposal carries that orientation.
pub fn build_bag(point: &PointLabel, cfg: &BagConfig, angle: Option<f64>) -> ProposalBag {
    let theta = angle.unwrap_or(0.0);
    let mut proposals = Vec::with_capacity(cfg.num_proposals());
    for scale in &cfg.basic_scales {
        for ratio in &cfg.ratios {
            let w = scale * ratio.sqrt();
            let h = scale / ratio.sqrt();
            proposals.push(OrientedBox::new(point.x, point.y, w, h, theta).unwrap());
        }
    }
    ProposalBag { owner: *point, proposals, stage: BagStage::Coarse }
}

/// Scale every basic scale by `sigma` so that group `g` of a resized-view
/// bag covers the same image content as group `g` of the original bag.
pub fn scaled_config(cfg: &BagConfig, sigma: f64) -> BagConfig {
    BagConfig {
        basic_scales: cfg.basic_scales.iter().map(|s| s * sigma).collect(),
        ratios: cfg.ratios.clone(),
        refined_jitter: cfg.refined_jitter.clone(),
    }
}

struct SumAxis0Op;

impl Op for SumAxis0Op {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let (n, c) = (parents[0].shape()[0], parents[0].shape()[1]);
            let mut dx = Tensor::zeros(&[n, c]);
            for r in 0..n {
                dx.data_mut()[r * c..(r + 1) * c].copy_from_slice(grad_out.data());
            }
            dx
        })]
    }
}

fn sum_axis0(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = g.value(x);
    let (n, c) = (xv.shape()[0], xv.shape()[1]);
    let mut out = Tensor::zeros(&[c]);
    for r in 0..n {
        for k in 0..c {
            out.data_mut()[k] += xv.data()[r * c + k];
        }
    }
    let _ = n;
    g.push(Box::new(SumAxis0Op), vec![x], out)
}

/// Aggregate a bag's two-stream scores into the per-class bag score
/// `S = sum_n S_ins[n] * S_cls[n]` (length C, entries in [0,1]).
pub fn bag_aggregate(g: &mut Graph, scores: &BagScores) -> NodeId {
    let prod = g.mul(scores.ins, scores.cls);
    sum_axis0(g, prod)
}

const CLIP: f64 = 1e-6;

/// Guarded score: an affine squash of `[0,1]` onto `[CLIP, 1-CLIP]`. Unlike a
/// hard clamp this keeps a nonzero gradient everywhere, so a bag whose score
/// saturates against the guard can still recover.
#[inline]
fn squash(s: f64) -> f64 {
    CLIP + (1.0 - 2.0 * CLIP) * s
}

/// Binary cross-entropy of aggregated bag scores against one-hot labels,
/// averaged over bags (not classes). Scores are guarded into
/// `[1e-6, 1 - 1e-6]` by `squash`.
struct BceOp {
    targets: Vec<f64>,
}

impl Op for BceOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let s = parents[0];
            let bags = s.shape()[0] as f64;
            let go = grad_out.item();
            let mut dx = Tensor::zeros(s.shape());
            for (k, (sv, q)) in s.data().iter().zip(&self.targets).enumerate() {
                let sc = squash(*sv);
                dx.data_mut()[k] =
                    -go * (1.0 - 2.0 * CLIP) * (q / sc - (1.0 - q) / (1.0 - sc)) / bags;
            }
            dx
        })]
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut q = vec![0.0; labels.len() * classes];
    for (i, c) in labels.iter().enumerate() {
        assert!(*c < classes, "label class out of range");
        q[i * classes + c] = 1.0;
    }
    q
}

fn bce_forward(s: &Tensor, targets: &[f64]) -> f64 {
    let bags = s.shape()[0] as f64;
    let mut loss = 0.0;
    for (sv, q) in s.data().iter().zip(targets) {
        let sc = squash(*sv);
        loss -= q * sc.ln() + (1.0 - q) * (1.0 - sc).ln();
    }
    loss / bags
}

/// Coarse MIL loss: plain BCE between aggregated scores `[I,C]` and one-hot
/// class labels, averaged over the I bags.
pub fn mil_init_loss(g: &mut Graph, agg: NodeId, labels: &[usize]) -> NodeId {
    let s = g.value(agg);
    assert_eq!(s.shape()[0], labels.len(), "one bag score row per label");
    let targets = one_hot(labels, s.shape()[1]);
    let v = Tensor::scalar(bce_forward(s, &targets));
    g.push(Box::new(BceOp { targets }), vec![agg], v)
}

/// Focal BCE used by the refined head.
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

struct FocalOp {
    targets: Vec<f64>,
    gamma: f64,
    alpha: f64,
}

impl FocalOp {
    fn eval(&self, s: &Tensor) -> f64 {
        let bags = s.shape()[0] as f64;
        let mut loss = 0.0;
        for (sv, q) in s.data().iter().zip(&self.targets) {
            let sc = squash(*sv);
            loss -= self.alpha * q * (1.0 - sc).powf(self.gamma) * sc.ln()
                + (1.0 - self.alpha) * (1.0 - q) * sc.powf(self.gamma) * (1.0 - sc).ln();
        }
        loss / bags
    }
}

impl Op for FocalOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let s = parents[0];
            let bags = s.shape()[0] as f64;
            let go = grad_out.item();
            let (gm, al) = (self.gamma, self.alpha);
            let mut dx = Tensor::zeros(s.shape());
            for (k, (sv, q)) in s.data().iter().zip(&self.targets).enumerate() {
                let p = squash(*sv);
                // d/dp of -[a q (1-p)^g ln p + (1-a)(1-q) p^g ln(1-p)],
                // times dp/ds of the squash guard.
                let d_pos = -al * q * ((1.0 - p).powf(gm) / p
                    - gm * (1.0 - p).powf(gm - 1.0) * p.ln());
                let d_neg = -(1.0 - al)
                    * (1.0 - q)
                    * (gm * p.powf(gm - 1.0) * (1.0 - p).ln() - p.powf(gm) / (1.0 - p));
                dx.data_mut()[k] = go * (1.0 - 2.0 * CLIP) * (d_pos + d_neg) / bags;
            }
            dx
        })]
    }
}

/// Refined MIL loss: focal BCE (gamma 2.0, alpha 0.25) between aggregated
/// scores `[I,C]` and one-hot labels, averaged over bags.
pub fn mil_refined_loss(g: &mut Graph, agg: NodeId, labels: &[usize]) -> NodeId {
    let s = g.value(agg);
    assert_eq!(s.shape()[0], labels.len());
    let op = FocalOp {
        targets: one_hot(labels, s.shape()[1]),
        gamma: FOCAL_GAMMA,
        alpha: FOCAL_ALPHA,
    };
    let v = Tensor::scalar(op.eval(s));
    g.push(Box::new(op), vec![agg], v)
}

/// Pick the most reliable proposal for the labeled class: argmax over n of
/// `S_ins[n,c] * S_cls[n,c]`, ties broken by the lowest index.
pub fn select_reliable(cls: &Tensor, ins: &Tensor, class: usize) -> usize {
    let (n, c) = (cls.shape()[0], cls.shape()[1]);
    assert_eq!(ins.shape(), &[n, c]);
    assert!(class < c);
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..n {
        let v = cls.data()[i * c + class] * ins.data()[i * c + class];
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Jitter grid around the selected box: every (scale factor, ratio factor)
/// pair from `cfg.refined_jitter`, keeping center and angle.
pub fn build_refined_bag(top: &OrientedBox, owner: &PointLabel, cfg: &BagConfig) -> ProposalBag {
    let mut proposals = Vec::with_capacity(cfg.refined_jitter.len() * cfg.refined_jitter.len());
    for fs in &cfg.refined_jitter {
        for fr in &cfg.refined_jitter {
            let w = top.w * fs * fr.sqrt();
            let h = top.h * fs / fr.sqrt();
            proposals.push(OrientedBox::new(top.cx, top.cy, w, h, top.theta).unwrap());
        }
    }
    ProposalBag { owner: *owner, proposals, stage: BagStage::Refined }
}
