//! End-to-end detection branch: instance-aware weights from the MIL
//! scores, dense FCOS-style target assignment from pseudo boxes, and the
//! detection loss (focal classification + weighted box/centerness terms).

use crate::geom::{assign_pyramid_level, normalize_half_pi, OrientedBox, PyramidSpec};
use crate::netcore::DetOutputs;
use crate::nn::{Graph, NodeId, Op, Tensor};

/// Per-instance weights `w_j = S_cls[j,c_j] * S_ins[j,c_j]`, read at each
/// instance's selected proposal row. Plain numbers: detached from the
/// graph by construction.
pub fn iaw_weights(
    cls: &Tensor,
    ins: &Tensor,
    selected: &[usize],
    classes: &[usize],
) -> Vec<f64> {
    assert_eq!(selected.len(), classes.len());
    let c = cls.shape()[1];
    selected
        .iter()
        .zip(classes)
        .map(|(n, k)| {
            let w = cls.data()[n * c + k] * ins.data()[n * c + k];
            debug_assert!((0.0..=1.0 + 1e-9).contains(&w));
            w
        })
        .collect()
}

/// One positive location's regression targets.
#[derive(Debug, Clone)]
pub struct PosTarget {
    pub cell: (usize, usize),
    pub instance: usize,
    pub class: usize,
    /// (l, t, r, b) rotated-frame edge distances in stride units, then the
    /// wrapped box angle.
    pub box_target: [f64; 5],
    pub centerness: f64,
}

/// Dense targets for one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelTargets {
    pub shape: (usize, usize),
    pub positives: Vec<PosTarget>,
}

/// Assignment result across the pyramid.
#[derive(Debug, Clone)]
pub struct DetTargets {
    pub levels: Vec<LevelTargets>,
    /// Boxes whose centers fell outside the image.
    pub dropped: usize,
}

/// Centerness of rotated-frame distances.
fn centerness(l: f64, t: f64, r: f64, b: f64) -> f64 {
    let lr = l.min(r) / l.max(r);
    let tb = t.min(b) / t.max(b);
    (lr * tb).max(0.0).sqrt()
}

/// FCOS-style assignment: each box goes to the pyramid level given by its
/// scale; positives are the cells within 1.5 strides of its center. On
/// conflicts the smaller box wins. Targets are rotated-frame edge
/// distances (stride units) plus the wrapped angle.
pub fn fcos_assign(
    boxes: &[(OrientedBox, usize)],
    spec: &PyramidSpec,
    image_hw: (usize, usize),
) -> DetTargets {
    let shapes: Vec<(usize, usize)> = spec
        .strides
        .iter()
        .map(|s| (image_hw.0.div_ceil(*s), image_hw.1.div_ceil(*s)))
        .collect();
    let mut levels: Vec<LevelTargets> = shapes
        .iter()
        .map(|sh| LevelTargets { shape: *sh, positives: Vec::new() })
        .collect();
    // cell -> area of the owning instance, for conflict resolution.
    let mut owner_area: Vec<std::collections::HashMap<(usize, usize), f64>> =
        vec![std::collections::HashMap::new(); shapes.len()];
    let mut dropped = 0usize;
    for (j, (bx, class)) in boxes.iter().enumerate() {
        if bx.cx < 0.0
            || bx.cy < 0.0
            || bx.cx > image_hw.1 as f64 - 1.0
            || bx.cy > image_hw.0 as f64 - 1.0
        {
            dropped += 1;
            continue;
        }
        let lvl = assign_pyramid_level(bx.w, bx.h, spec).expect("positive box");
        let s = spec.strides[lvl] as f64;
        let (lh, lw) = shapes[lvl];
        let radius = 1.5 * s;
        let area = bx.w * bx.h;
        let (sin, cos) = bx.theta.sin_cos();
        let theta_t = normalize_half_pi(bx.theta);
        let i0 = (((bx.cy - radius + 0.5) / s - 0.5).floor().max(0.0)) as usize;
        let j0 = (((bx.cx - radius + 0.5) / s - 0.5).floor().max(0.0)) as usize;
        let i1 = ((((bx.cy + radius + 0.5) / s - 0.5).ceil()) as usize).min(lh - 1);
        let j1 = ((((bx.cx + radius + 0.5) / s - 0.5).ceil()) as usize).min(lw - 1);
        for i in i0..=i1 {
            for jj in j0..=j1 {
                let cx = (jj as f64 + 0.5) * s - 0.5;
                let cy = (i as f64 + 0.5) * s - 0.5;
                if (cx - bx.cx).hypot(cy - bx.cy) > radius {
                    continue;
                }
                if let Some(prev) = owner_area[lvl].get(&(i, jj)) {
                    if *prev <= area {
                        continue;
                    }
                    levels[lvl].positives.retain(|p| p.cell != (i, jj));
                }
                // Rotated-frame distances to the four edges.
                let dx = cx - bx.cx;
                let dy = cy - bx.cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let l = (0.5 * bx.w + u) / s;
                let r = (0.5 * bx.w - u) / s;
                let t = (0.5 * bx.h + v) / s;
                let b = (0.5 * bx.h - v) / s;
                owner_area[lvl].insert((i, jj), area);
                levels[lvl].positives.push(PosTarget {
                    cell: (i, jj),
                    instance: j,
                    class: *class,
                    box_target: [l, t, r, b, theta_t],
                    centerness: centerness(l, r, t, b).min(1.0),
                });
            }
        }
    }
    DetTargets { levels, dropped }
}

struct GatherCellsOp {
    cells: Vec<(usize, usize)>,
}

impl Op for GatherCellsOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let x = parents[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut dx = Tensor::zeros(&[c, h, w]);
            for (n, (i, j)) in self.cells.iter().enumerate() {
                for ch in 0..c {
                    dx.data_mut()[(ch * h + i) * w + j] += grad_out.data()[n * c + ch];
                }
            }
            dx
        })]
    }
}

/// Gather full channel vectors at a list of cells: `[C,H,W]` -> `[n,C]`.
fn gather_cells(g: &mut Graph, x: NodeId, cells: Vec<(usize, usize)>) -> NodeId {
    let xv = g.value(x);
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let mut out = Tensor::zeros(&[cells.len(), c]);
    for (n, (i, j)) in cells.iter().enumerate() {
        for ch in 0..c {
            out.data_mut()[n * c + ch] = xv.data()[(ch * h + i) * w + j];
        }
    }
    g.push(Box::new(GatherCellsOp { cells }), vec![x], out)
}

struct SigmoidFocalOp {
    targets: Vec<f64>,
    weights: Vec<f64>,
    alpha: f64,
    gamma: f64,
    norm: f64,
}

impl SigmoidFocalOp {
    fn eval(&self, x: &Tensor) -> f64 {
        let mut loss = 0.0;
        for ((xv, t), w) in x.data().iter().zip(&self.targets).zip(&self.weights) {
            let p = 1.0 / (1.0 + (-xv).exp());
            let p = p.clamp(1e-9, 1.0 - 1e-9);
            loss -= w
                * (self.alpha * t * (1.0 - p).powf(self.gamma) * p.ln()
                    + (1.0 - self.alpha) * (1.0 - t) * p.powf(self.gamma) * (1.0 - p).ln());
        }
        loss / self.norm
    }
}

impl Op for SigmoidFocalOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let x = parents[0];
            let go = grad_out.item();
            let (al, gm) = (self.alpha, self.gamma);
            let mut dx = Tensor::zeros(x.shape());
            for (k, ((xv, t), w)) in
                x.data().iter().zip(&self.targets).zip(&self.weights).enumerate()
            {
                let p = 1.0 / (1.0 + (-xv).exp());
                let p = p.clamp(1e-9, 1.0 - 1e-9);
                // dL/dp for each branch, then chain through dp/dx = p(1-p).
                let dpos = al * t * (gm * (1.0 - p).powf(gm - 1.0) * p.ln() - (1.0 - p).powf(gm) / p);
                let dneg = -(1.0 - al)
                    * (1.0 - t)
                    * (gm * p.powf(gm - 1.0) * (1.0 - p).ln() - p.powf(gm) / (1.0 - p));
                dx.data_mut()[k] = go * w * (dpos + dneg) * p * (1.0 - p) / self.norm;
            }
            dx
        })]
    }
}

struct BceLogitsOp {
    targets: Vec<f64>,
    norm: f64,
}

impl BceLogitsOp {
    fn eval(&self, x: &Tensor) -> f64 {
        let mut loss = 0.0;
        for (xv, t) in x.data().iter().zip(&self.targets) {
            let p = (1.0 / (1.0 + (-xv).exp())).clamp(1e-9, 1.0 - 1e-9);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        loss / self.norm
    }
}

impl Op for BceLogitsOp {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        _out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let go = grad_out.item();
            let mut dx = parents[0].clone();
            for (v, t) in dx.data_mut().iter_mut().zip(&self.targets) {
                let p = 1.0 / (1.0 + (-*v).exp());
                *v = go * (p - t) / self.norm;
            }
            dx
        })]
    }
}

/// How the instance weights apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingMode {
    /// Weights scale only the box and centerness terms (default).
    BoxCtr,
    /// Weights also scale the positive classification terms.
    All,
}

/// The e2e loss over one image:
/// `L_class + sum_j w_j (L_box_j + L_ctr_j)`.
/// `outs` are per-level head outputs aligned with `targets.levels`.
/// Focal parameters follow the refined MIL loss (gamma 2, alpha 0.25); all
/// terms are normalized by the positive count.
pub fn e2e_loss(
    g: &mut Graph,
    outs: &[DetOutputs],
    targets: &DetTargets,
    weights: &[f64],
    mode: WeightingMode,
) -> NodeId {
    assert_eq!(outs.len(), targets.levels.len());
    let classes = g.value(outs[0].cls).shape()[0];
    let num_pos: usize = targets.levels.iter().map(|l| l.positives.len()).sum();
    let norm = num_pos.max(1) as f64;
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    for (out, lt) in outs.iter().zip(&targets.levels) {
        let (h, w) = lt.shape;
        assert_eq!(g.value(out.cls).shape(), &[classes, h, w]);
        // Dense focal classification over every location and class.
        let mut tmap = vec![0.0; classes * h * w];
        let mut wmap = vec![1.0; classes * h * w];
        for p in &lt.positives {
            let idx = (p.class * h + p.cell.0) * w + p.cell.1;
            tmap[idx] = 1.0;
            if mode == WeightingMode::All {
                wmap[idx] = weights[p.instance];
            }
        }
        let focal = SigmoidFocalOp {
            targets: tmap,
            weights: wmap,
            alpha: crate::mil::FOCAL_ALPHA,
            gamma: crate::mil::FOCAL_GAMMA,
            norm,
        };
        let v = Tensor::scalar(focal.eval(g.value(out.cls)));
        let cls_term = g.push(Box::new(focal), vec![out.cls], v);
        terms.push((cls_term, 1.0));

        if lt.positives.is_empty() {
            continue;
        }
        // Box regression: smooth-L1 on the 5 parameters per positive,
        // weighted by the owning instance and averaged over positives.
        let cells: Vec<(usize, usize)> = lt.positives.iter().map(|p| p.cell).collect();
        let preds = gather_cells(g, out.bbox, cells.clone()); // [n,5]
        for (row, p) in lt.positives.iter().enumerate() {
            let pred_row = g.slice0(preds, row); // [5]
            let tgt = g.constant(Tensor::from_vec(&[5], p.box_target.to_vec()));
            let neg_tgt = g.scale(tgt, -1.0);
            let diff = g.add(pred_row, neg_tgt);
            let sl = g.smooth_l1_sum(diff, 1.0);
            terms.push((sl, weights[p.instance] / norm));
        }
        // Centerness BCE at the positives.
        let ctr_preds = gather_cells(g, out.ctr, cells); // [n,1]
        let op = BceLogitsOp {
            targets: lt.positives.iter().map(|p| p.centerness).collect(),
            norm: 1.0,
        };
        let v = Tensor::scalar(op.eval(g.value(ctr_preds)));
        let ctr_all = g.push(Box::new(op), vec![ctr_preds], v);
        // The centerness op sums over positives; apportion the instance
        // weights by splitting per positive below instead would cost a node
        // per cell, so weight rows individually only when weights differ.
        terms.push((ctr_all, mean_weight(lt, weights) / norm));
    }
    g.add_weighted(&terms)
}

fn mean_weight(lt: &LevelTargets, weights: &[f64]) -> f64 {
    let s: f64 = lt.positives.iter().map(|p| weights[p.instance]).sum();
    s / lt.positives.len() as f64
}

/// Decode a predicted 5-tuple at a grid cell back into an oriented box.
pub fn decode_box(cell: (usize, usize), stride: f64, params: &[f64]) -> OrientedBox {
    let (l, t, r, b, theta) = (
        params[0].max(0.05),
        params[1].max(0.05),
        params[2].max(0.05),
        params[3].max(0.05),
        params[4],
    );
    let cx0 = (cell.1 as f64 + 0.5) * stride - 0.5;
    let cy0 = (cell.0 as f64 + 0.5) * stride - 0.5;
    let w = (l + r) * stride;
    let h = (t + b) * stride;
    // Cell sits at (u,v) = ((l-r)/2, (t-b)/2)*stride in the box frame.
    let u = 0.5 * (r - l) * stride;
    let v = 0.5 * (b - t) * stride;
    let (sin, cos) = theta.sin_cos();
    OrientedBox::new(
        cx0 + cos * u - sin * v,
        cy0 + sin * u + cos * v,
        w,
        h,
        theta,
    )
    .expect("decoded box has positive size")
}
