//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records one forward pass as a topologically ordered list of
//! nodes. Every node holds its forward value; non-leaf nodes also hold the
//! [`Op`] that produced them. `backward` walks the tape in reverse and
//! accumulates gradients into every node that requires them. Everything is
//! single-threaded and evaluation order is fixed, so repeated runs are
//! bit-identical.

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// A differentiable operation. `backward` receives the output gradient, the
/// parent values, the output value, and a mask of which parents need a
/// gradient; it returns one optional gradient per parent.
pub trait Op {
    fn backward(
        &self,
        grad_out: &Tensor,
        parents: &[&Tensor],
        out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Op>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a leaf. Parameters use `needs_grad = true`; inputs and
    /// constants use `false`.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            parents: Vec::new(),
            op: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Insert an op node whose forward value has already been computed.
    pub fn push(&mut self, op: Box<dyn Op>, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        for p in &parents {
            assert!(p.0 < self.nodes.len(), "parent out of range");
        }
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            op: Some(op),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss"
        );
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad_out) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &before[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| before[p.0].needs_grad).collect();
            let op = node.op.as_ref().unwrap();
            let grads = op.backward(&grad_out, &parent_vals, &node.value, &needs);
            debug_assert_eq!(grads.len(), node.parents.len());
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(grads) {
                if let Some(g) = g {
                    debug_assert!(before[p.0].needs_grad);
                    match &mut before[p.0].grad {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            node.grad = Some(grad_out);
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

struct AddOp;
impl Op for AddOp {
    fn backward(
        &self,
        g: &Tensor,
        _p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.clone()),
        ]
    }
}

struct MulOp;
impl Op for MulOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let ga = needs[0].then(|| {
            let mut t = g.clone();
            for (a, b) in t.data_mut().iter_mut().zip(p[1].data()) {
                *a *= b;
            }
            t
        });
        let gb = needs[1].then(|| {
            let mut t = g.clone();
            for (a, b) in t.data_mut().iter_mut().zip(p[0].data()) {
                *a *= b;
            }
            t
        });
        vec![ga, gb]
    }
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn backward(
        &self,
        g: &Tensor,
        _p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let mut t = g.clone();
            t.scale_assign(self.0);
            t
        })]
    }
}

struct ReluOp;
impl Op for ReluOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let mut t = g.clone();
            for (a, x) in t.data_mut().iter_mut().zip(p[0].data()) {
                if *x <= 0.0 {
                    *a = 0.0;
                }
            }
            t
        })]
    }
}

struct ReshapeOp {
    old_shape: Vec<usize>,
}
impl Op for ReshapeOp {
    fn backward(
        &self,
        g: &Tensor,
        _p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.reshaped(&self.old_shape))]
    }
}

struct SumOp {
    n: usize,
}
impl Op for SumOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let _ = self.n;
            Tensor::filled(p[0].shape(), g.item())
        })]
    }
}

/// Weighted sum of scalar nodes.
struct AddWeightedOp {
    weights: Vec<f64>,
}
impl Op for AddWeightedOp {
    fn backward(
        &self,
        g: &Tensor,
        _p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let gv = g.item();
        self.weights
            .iter()
            .zip(needs)
            .map(|(w, n)| n.then(|| Tensor::scalar(gv * w)))
            .collect()
    }
}

struct SoftmaxOp {
    axis: usize,
}
impl Op for SoftmaxOp {
    fn backward(
        &self,
        g: &Tensor,
        _p: &[&Tensor],
        out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(out.shape());
            for_each_lane(out.shape(), self.axis, |base, stride, len| {
                let mut dot = 0.0;
                for k in 0..len {
                    let i = base + k * stride;
                    dot += g.data()[i] * out.data()[i];
                }
                for k in 0..len {
                    let i = base + k * stride;
                    dx.data_mut()[i] = out.data()[i] * (g.data()[i] - dot);
                }
            });
            dx
        })]
    }
}

/// Iterate over all 1-D lanes of `shape` along `axis`, invoking
/// `f(base_offset, stride, lane_len)`.
pub(crate) fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, stride, len);
        }
    }
}

struct Concat0Op;
impl Op for Concat0Op {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut start = 0;
        (0..p.len())
            .map(|r| {
                let n = p[r].numel();
                let out = needs[r].then(|| {
                    Tensor::from_vec(p[r].shape(), g.data()[start..start + n].to_vec())
                });
                start += n;
                out
            })
            .collect()
    }
}

struct ConcatRowsOp {
    row_len: usize,
}
impl Op for ConcatRowsOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        (0..p.len())
            .map(|r| {
                needs[r].then(|| {
                    let start = r * self.row_len;
                    Tensor::from_vec(
                        p[r].shape(),
                        g.data()[start..start + self.row_len].to_vec(),
                    )
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Neural-net ops
// ---------------------------------------------------------------------------

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, kcin, "conv2d channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for o in 0..cout {
        let ob = o * oh * ow;
        for row in od[ob..ob + oh * ow].iter_mut() {
            *row = b.data()[o];
        }
        for c in 0..cin {
            let xb = c * h * wid;
            for u in 0..kh {
                for v in 0..kw {
                    let wv = wd[((o * cin + c) * kh + u) * kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let xrow = xb + y as usize * wid;
                        let orow = ob + i * ow;
                        for j in 0..ow {
                            let xcol = (j * stride + v) as isize - pad as isize;
                            if xcol < 0 || xcol >= wid as isize {
                                continue;
                            }
                            od[orow + j] += wv * xd[xrow + xcol as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

impl Op for Conv2dOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let (stride, pad) = (self.stride, self.pad);

        let gx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            let dxd = dx.data_mut();
            let gd = g.data();
            let wd = w.data();
            for o in 0..cout {
                let gb = o * oh * ow;
                for c in 0..cin {
                    let xb = c * h * wid;
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = wd[((o * cin + c) * kh + u) * kw + v];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..oh {
                                let y = (i * stride + u) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let xrow = xb + y as usize * wid;
                                let grow = gb + i * ow;
                                for j in 0..ow {
                                    let xcol = (j * stride + v) as isize - pad as isize;
                                    if xcol < 0 || xcol >= wid as isize {
                                        continue;
                                    }
                                    dxd[xrow + xcol as usize] += wv * gd[grow + j];
                                }
                            }
                        }
                    }
                }
            }
            dx
        });

        let gw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            let dwd = dw.data_mut();
            let gd = g.data();
            let xd = x.data();
            for o in 0..cout {
                let gb = o * oh * ow;
                for c in 0..cin {
                    let xb = c * h * wid;
                    for u in 0..kh {
                        for v in 0..kw {
                            let mut acc = 0.0;
                            for i in 0..oh {
                                let y = (i * stride + u) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let xrow = xb + y as usize * wid;
                                let grow = gb + i * ow;
                                for j in 0..ow {
                                    let xcol = (j * stride + v) as isize - pad as isize;
                                    if xcol < 0 || xcol >= wid as isize {
                                        continue;
                                    }
                                    acc += gd[grow + j] * xd[xrow + xcol as usize];
                                }
                            }
                            dwd[((o * cin + c) * kh + u) * kw + v] = acc;
                        }
                    }
                }
            }
            dw
        });

        let gbias = needs[2].then(|| {
            let mut db = Tensor::zeros(&[cout]);
            for o in 0..cout {
                let gb = o * oh * ow;
                db.data_mut()[o] = g.data()[gb..gb + oh * ow].iter().sum();
            }
            db
        });

        vec![gx, gw, gbias]
    }
}

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl Op for GroupNormOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, gamma, _beta) = (p[0], p[1], p[2]);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let gs = c / self.groups;
        let n = gs * h * w;
        let hw = h * w;

        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dgamma = needs[1].then(|| Tensor::zeros(&[c]));
        let mut dbeta = needs[2].then(|| Tensor::zeros(&[c]));

        for grp in 0..self.groups {
            let lo = grp * gs * hw;
            let hi = lo + n;
            let xs = &x.data()[lo..hi];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + self.eps).sqrt();

            // t = dy * gamma per element; dx = inv_std*(t - mean(t) - xh*mean(t*xh))
            let mut t_sum = 0.0;
            let mut txh_sum = 0.0;
            for k in 0..n {
                let ch = grp * gs + k / hw;
                let t = g.data()[lo + k] * gamma.data()[ch];
                let xh = (xs[k] - mean) * inv_std;
                t_sum += t;
                txh_sum += t * xh;
                if let Some(dg) = dgamma.as_mut() {
                    dg.data_mut()[ch] += g.data()[lo + k] * xh;
                }
                if let Some(db) = dbeta.as_mut() {
                    db.data_mut()[ch] += g.data()[lo + k];
                }
            }
            if let Some(dx) = dx.as_mut() {
                let t_mean = t_sum / n as f64;
                let txh_mean = txh_sum / n as f64;
                for k in 0..n {
                    let ch = grp * gs + k / hw;
                    let t = g.data()[lo + k] * gamma.data()[ch];
                    let xh = (xs[k] - mean) * inv_std;
                    dx.data_mut()[lo + k] = inv_std * (t - t_mean - xh * txh_mean);
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

struct LinearOp;
impl Op for LinearOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        let fout = w.shape()[0];
        let gx = needs[0].then(|| {
            let mut dx = Tensor::zeros(&[n, fin]);
            for r in 0..n {
                for o in 0..fout {
                    let gv = g.data()[r * fout + o];
                    if gv == 0.0 {
                        continue;
                    }
                    let wrow = &w.data()[o * fin..(o + 1) * fin];
                    let dxrow = &mut dx.data_mut()[r * fin..(r + 1) * fin];
                    for (d, wv) in dxrow.iter_mut().zip(wrow) {
                        *d += gv * wv;
                    }
                }
            }
            dx
        });
        let gw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            for r in 0..n {
                let xrow = &x.data()[r * fin..(r + 1) * fin];
                for o in 0..fout {
                    let gv = g.data()[r * fout + o];
                    if gv == 0.0 {
                        continue;
                    }
                    let dwrow = &mut dw.data_mut()[o * fin..(o + 1) * fin];
                    for (d, xv) in dwrow.iter_mut().zip(xrow) {
                        *d += gv * xv;
                    }
                }
            }
            dw
        });
        let gb = needs[2].then(|| {
            let mut db = Tensor::zeros(&[fout]);
            for r in 0..n {
                for o in 0..fout {
                    db.data_mut()[o] += g.data()[r * fout + o];
                }
            }
            db
        });
        vec![gx, gw, gb]
    }
}

struct UpsampleNearestOp {
    in_h: usize,
    in_w: usize,
}
impl Op for UpsampleNearestOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let c = p[0].shape()[0];
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let mut dx = Tensor::zeros(p[0].shape());
            for ch in 0..c {
                for i in 0..oh {
                    let sy = (i * self.in_h) / oh;
                    for j in 0..ow {
                        let sx = (j * self.in_w) / ow;
                        let src = (ch * self.in_h + sy) * self.in_w + sx;
                        dx.data_mut()[src] += g.data()[(ch * oh + i) * ow + j];
                    }
                }
            }
            dx
        })]
    }
}

/// Broadcast-multiply a single-channel gate over all channels of a map.
struct MulGateOp;
impl Op for MulGateOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, gate) = (p[0], p[1]);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let gx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            for ch in 0..c {
                for k in 0..hw {
                    dx.data_mut()[ch * hw + k] = g.data()[ch * hw + k] * gate.data()[k];
                }
            }
            dx
        });
        let gg = needs[1].then(|| {
            let mut dg = Tensor::zeros(gate.shape());
            for ch in 0..c {
                for k in 0..hw {
                    dg.data_mut()[k] += g.data()[ch * hw + k] * x.data()[ch * hw + k];
                }
            }
            dg
        });
        vec![gx, gg]
    }
}

/// One bilinear sample point feeding an output cell with a weight.
#[derive(Debug, Clone, Copy)]
pub struct BilinearSample {
    pub cell: usize,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

struct RoiBilinearOp {
    samples: Vec<BilinearSample>,
    out_cells: usize,
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    // Taps with zero weight for out-of-bounds corners.
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut taps = [(0usize, 0usize, 0.0f64); 4];
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (k, (cy, cx, wt)) in corners.into_iter().enumerate() {
        if cy >= 0.0 && cy < h as f64 && cx >= 0.0 && cx < w as f64 {
            taps[k] = (cy as usize, cx as usize, wt);
        }
    }
    taps
}

impl Op for RoiBilinearOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let x = p[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut dx = Tensor::zeros(x.shape());
            for s in &self.samples {
                let taps = bilinear_taps(s.x, s.y, h, w);
                for ch in 0..c {
                    let gv = g.data()[ch * self.out_cells + s.cell] * s.weight;
                    if gv == 0.0 {
                        continue;
                    }
                    for (ty, tx, tw) in taps {
                        if tw != 0.0 {
                            dx.data_mut()[(ch * h + ty) * w + tx] += gv * tw;
                        }
                    }
                }
            }
            dx
        })]
    }
}

/// Mean of map values at a fixed set of grid cells (single-channel map).
struct GatherMeanOp {
    cells: Vec<(usize, usize)>,
}
impl Op for GatherMeanOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(p[0].shape());
            let w = p[0].shape()[2];
            let gv = g.item() / self.cells.len() as f64;
            for &(cy, cx) in &self.cells {
                dx.data_mut()[cy * w + cx] += gv;
            }
            dx
        })]
    }
}

struct StackOp {
    each: usize,
}
impl Op for StackOp {
    fn backward(
        &self,
        g: &Tensor,
        p: &[&Tensor],
        _o: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        (0..p.len())
            .map(|k| {
                needs[k].then(|| {
                    let start = k * self.each;
                    Tensor::from_vec(p[k].shape(), g.data()[start..start + self.each].to_vec())
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Graph construction helpers
// ---------------------------------------------------------------------------

impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Box::new(AddOp), vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push(Box::new(MulOp), vec![a, b], v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(c);
        self.push(Box::new(ScaleOp(c)), vec![a], v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(Box::new(ReluOp), vec![a], v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old_shape = self.value(a).shape().to_vec();
        let v = self.value(a).reshaped(shape);
        self.push(Box::new(ReshapeOp { old_shape }), vec![a], v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Box::new(SumOp { n }), vec![a], v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar nodes: `sum(w_i * terms_i)`.
    pub fn add_weighted(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let mut total = 0.0;
        for (id, w) in terms {
            total += self.value(*id).item() * w;
        }
        let parents = terms.iter().map(|(id, _)| *id).collect();
        let weights = terms.iter().map(|(_, w)| *w).collect();
        self.push(
            Box::new(AddWeightedOp { weights }),
            parents,
            Tensor::scalar(total),
        )
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        let shape = x.shape().to_vec();
        {
            let od = out.data_mut();
            for_each_lane(&shape, axis, |base, stride, len| {
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(od[base + k * stride]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (od[base + k * stride] - mx).exp();
                    od[base + k * stride] = e;
                    sum += e;
                }
                for k in 0..len {
                    od[base + k * stride] /= sum;
                }
            });
        }
        self.push(Box::new(SoftmaxOp { axis }), vec![a], out)
    }

    /// Stack row-vector nodes (all of equal length) into a matrix.
    pub fn concat_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty());
        let row_len = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for r in rows {
            assert_eq!(self.value(*r).numel(), row_len);
            data.extend_from_slice(self.value(*r).data());
        }
        let v = Tensor::from_vec(&[rows.len(), row_len], data);
        self.push(Box::new(ConcatRowsOp { row_len }), rows.to_vec(), v)
    }

    /// Concatenate tensors along their leading axis; trailing dimensions
    /// must match.
    pub fn concat0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut n0 = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat0 trailing shape mismatch");
            n0 += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n0];
        shape.extend_from_slice(&tail);
        let v = Tensor::from_vec(&shape, data);
        self.push(Box::new(Concat0Op), parts.to_vec(), v)
    }

    /// Stack same-shaped 3D maps along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let shape = self.value(parts[0]).shape().to_vec();
        let each = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * each);
        for p in parts {
            assert_eq!(self.value(*p).shape(), &shape[..]);
            data.extend_from_slice(self.value(*p).data());
        }
        let mut new_shape = vec![parts.len()];
        new_shape.extend_from_slice(&shape);
        let v = Tensor::from_vec(&new_shape, data);
        self.push(Box::new(StackOp { each }), parts.to_vec(), v)
    }

    /// Extract the `k`-th slice along the leading axis of a stacked tensor.
    pub fn slice0(&mut self, a: NodeId, k: usize) -> NodeId {
        let x = self.value(a);
        let n0 = x.shape()[0];
        assert!(k < n0);
        let each = x.numel() / n0;
        let sub_shape = x.shape()[1..].to_vec();
        let v = Tensor::from_vec(&sub_shape, x.data()[k * each..(k + 1) * each].to_vec());
        struct Slice0Op {
            k: usize,
            n0: usize,
            each: usize,
        }
        impl Op for Slice0Op {
            fn backward(
                &self,
                g: &Tensor,
                p: &[&Tensor],
                _o: &Tensor,
                needs: &[bool],
            ) -> Vec<Option<Tensor>> {
                vec![needs[0].then(|| {
                    let _ = self.n0;
                    let mut dx = Tensor::zeros(p[0].shape());
                    let start = self.k * self.each;
                    dx.data_mut()[start..start + self.each].copy_from_slice(g.data());
                    dx
                })]
            }
        }
        self.push(Box::new(Slice0Op { k, n0, each }), vec![a], v)
    }

    /// 2D convolution over a `[C,H,W]` input with zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(Box::new(Conv2dOp { stride, pad }), vec![x, w, b], v)
    }

    /// Group normalization over a `[C,H,W]` map.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let gs = c / groups;
        let n = gs * h * w;
        let hw = h * w;
        let mut out = xv.clone();
        {
            let (gamma_v, beta_v) = (self.value(gamma), self.value(beta));
            let od = out.data_mut();
            for grp in 0..groups {
                let lo = grp * gs * hw;
                let mean = od[lo..lo + n].iter().sum::<f64>() / n as f64;
                let var = od[lo..lo + n]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / n as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for k in 0..n {
                    let ch = grp * gs + k / hw;
                    od[lo + k] =
                        gamma_v.data()[ch] * (od[lo + k] - mean) * inv_std + beta_v.data()[ch];
                }
            }
        }
        self.push(Box::new(GroupNormOp { groups, eps }), vec![x, gamma, beta], out)
    }

    /// Fully connected layer: `x[n,fin] * w[fout,fin]^T + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        assert_eq!(wv.shape()[1], fin);
        assert_eq!(bv.shape(), &[fout]);
        let mut out = Tensor::zeros(&[n, fout]);
        for r in 0..n {
            let xrow = &xv.data()[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wrow = &wv.data()[o * fin..(o + 1) * fin];
                let mut acc = bv.data()[o];
                for (a, b) in xrow.iter().zip(wrow) {
                    acc += a * b;
                }
                out.data_mut()[r * fout + o] = acc;
            }
        }
        self.push(Box::new(LinearOp), vec![x, w, b], out)
    }

    /// Nearest-neighbor upsample of a `[C,H,W]` map to `(out_h, out_w)`.
    pub fn upsample_nearest(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let xv = self.value(x);
        let (c, in_h, in_w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        for ch in 0..c {
            for i in 0..out_h {
                let sy = (i * in_h) / out_h;
                for j in 0..out_w {
                    let sx = (j * in_w) / out_w;
                    out.data_mut()[(ch * out_h + i) * out_w + j] =
                        xv.data()[(ch * in_h + sy) * in_w + sx];
                }
            }
        }
        self.push(Box::new(UpsampleNearestOp { in_h, in_w }), vec![x], out)
    }

    /// Multiply every channel of `x[C,H,W]` by a single-channel `gate[1,H,W]`.
    pub fn mul_gate(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(gv.shape(), &[1, h, w]);
        let mut out = xv.clone();
        let hw = h * w;
        for ch in 0..c {
            for k in 0..hw {
                out.data_mut()[ch * hw + k] *= gv.data()[k];
            }
        }
        self.push(Box::new(MulGateOp), vec![x, gate], out)
    }

    /// Pool a `[C,H,W]` map through a fixed set of bilinear samples into
    /// `[C, out_cells]` (callers reshape to the ROI grid).
    pub fn roi_bilinear(
        &mut self,
        x: NodeId,
        samples: Vec<BilinearSample>,
        out_cells: usize,
    ) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[c, out_cells]);
        for s in &samples {
            let taps = bilinear_taps(s.x, s.y, h, w);
            for ch in 0..c {
                let mut acc = 0.0;
                for (ty, tx, tw) in taps {
                    if tw != 0.0 {
                        acc += tw * xv.data()[(ch * h + ty) * w + tx];
                    }
                }
                out.data_mut()[ch * out_cells + s.cell] += s.weight * acc;
            }
        }
        self.push(Box::new(RoiBilinearOp { samples, out_cells }), vec![x], out)
    }

    /// Summed elementwise smooth-L1 penalty toward zero:
    /// `sum_k f(x_k)` with `f(x) = 0.5 x^2 / beta` for `|x| < beta`, else
    /// `|x| - 0.5 beta`.
    pub fn smooth_l1_sum(&mut self, a: NodeId, beta: f64) -> NodeId {
        assert!(beta > 0.0);
        struct SmoothL1Op {
            beta: f64,
        }
        impl Op for SmoothL1Op {
            fn backward(
                &self,
                g: &Tensor,
                p: &[&Tensor],
                _o: &Tensor,
                needs: &[bool],
            ) -> Vec<Option<Tensor>> {
                vec![needs[0].then(|| {
                    let go = g.item();
                    let mut dx = p[0].clone();
                    for v in dx.data_mut() {
                        *v = go
                            * if v.abs() < self.beta {
                                *v / self.beta
                            } else {
                                v.signum()
                            };
                    }
                    dx
                })]
            }
        }
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .map(|v| {
                if v.abs() < beta {
                    0.5 * v * v / beta
                } else {
                    v.abs() - 0.5 * beta
                }
            })
            .sum();
        self.push(Box::new(SmoothL1Op { beta }), vec![a], Tensor::scalar(total))
    }

    /// Mean of a single-channel map `[1,H,W]` over a set of `(y,x)` cells.
    pub fn gather_mean(&mut self, x: NodeId, cells: Vec<(usize, usize)>) -> NodeId {
        assert!(!cells.is_empty());
        let xv = self.value(x);
        let w = xv.shape()[2];
        let mean =
            cells.iter().map(|&(cy, cx)| xv.data()[cy * w + cx]).sum::<f64>() / cells.len() as f64;
        self.push(Box::new(GatherMeanOp { cells }), vec![x], Tensor::scalar(mean))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]), true);
        let b = g.leaf(Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]), true);
        let m = g.mul(a, b);
        let s = g.sum_all(m);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv2d_shapes_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let rel = check_gradients(
            &[x, w, b],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
                g.sum_all(y)
            },
            16,
            &mut rng,
        );
        assert!(rel < 1e-6, "conv2d rel err {rel}");
    }

    #[test]
    fn group_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[4, 3, 3], 1.0, &mut rng);
        let gamma = Tensor::randn(&[4], 0.3, &mut rng);
        let beta = Tensor::randn(&[4], 0.3, &mut rng);
        let rel = check_gradients(
            &[x, gamma, beta],
            |g, ids| {
                let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
                // Non-linear readout so mean-subtraction terms matter.
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            16,
            &mut rng,
        );
        assert!(rel < 1e-6, "group_norm rel err {rel}");
    }

    #[test]
    fn softmax_lanes_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        for axis in 0..2 {
            let probe = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let rel = check_gradients(
                &[x.clone()],
                |g, ids| {
                    let y = g.softmax(ids[0], axis);
                    let p = g.constant(probe.clone());
                    let m = g.mul(y, p);
                    g.sum_all(m)
                },
                12,
                &mut rng,
            );
            assert!(rel < 1e-6, "softmax axis {axis} rel err {rel}");
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = g.softmax(x, 1);
        for r in 0..2 {
            let s: f64 = g.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_roi_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let samples = vec![
            BilinearSample { cell: 0, x: 1.3, y: 2.7, weight: 0.5 },
            BilinearSample { cell: 0, x: 1.9, y: 2.1, weight: 0.5 },
            BilinearSample { cell: 1, x: 3.2, y: 0.4, weight: 1.0 },
            // out of bounds on one side: partial taps
            BilinearSample { cell: 2, x: -0.4, y: 4.6, weight: 1.0 },
        ];
        let rel = check_gradients(
            &[x],
            |g, ids| {
                let y = g.roi_bilinear(ids[0], samples.clone(), 3);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            16,
            &mut rng,
        );
        assert!(rel < 1e-6, "roi rel err {rel}");

        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let rel = check_gradients(
            &[x, w, b],
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            16,
            &mut rng,
        );
        assert!(rel < 1e-6, "linear rel err {rel}");
    }

    #[test]
    fn upsample_and_gate_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let gate = Tensor::randn(&[1, 6, 6], 1.0, &mut rng);
        let rel = check_gradients(
            &[x, gate],
            |g, ids| {
                let up = g.upsample_nearest(ids[0], 6, 6);
                let gated = g.mul_gate(up, ids[1]);
                let sq = g.mul(gated, gated);
                g.sum_all(sq)
            },
            16,
            &mut rng,
        );
        assert!(rel < 1e-6, "upsample/gate rel err {rel}");
    }

    #[test]
    fn gather_mean_value() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.3, 0.5, 0.7]),
            true,
        );
        let m = g.gather_mean(x, vec![(0, 0), (0, 1)]);
        assert!((g.value(m).item() - 0.2).abs() < 1e-12);
        g.backward(m);
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5, 0.0, 0.0]);
    }
}
