//! Central finite-difference gradient verification.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Compare analytic gradients against central finite differences on up to
/// `probes` randomly chosen coordinates per leaf tensor. Returns the worst
/// relative error observed.
///
/// `build` must construct the scalar loss from the given leaves; it is
/// re-invoked for every perturbed evaluation, so it has to be deterministic.
pub fn check_gradients<F, R>(leaves: &[Tensor], build: F, probes: usize, rng: &mut R) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    R: Rng,
{
    let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        let v = g.value(loss).item();
        g.backward(loss);
        let grads = ids.iter().map(|id| g.take_grad(*id)).collect();
        (v, grads)
    };

    let (_, analytic) = eval(leaves);

    let mut worst: f64 = 0.0;
    let step = 1e-5;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let count = probes.min(n);
        for _ in 0..count {
            let k = rng.gen_range(0..n);
            let h = step * leaf.data()[k].abs().max(1.0);

            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += h;
            let (fp, _) = {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = plus.iter().map(|t| g.leaf(t.clone(), true)).collect();
                let loss = build(&mut g, &ids);
                (g.value(loss).item(), ())
            };

            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= h;
            let fm = {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = minus.iter().map(|t| g.leaf(t.clone(), true)).collect();
                let loss = build(&mut g, &ids);
                g.value(loss).item()
            };

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[li].as_ref().map_or(0.0, |t| t.data()[k]);
            let denom = an.abs().max(fd.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = (an - fd).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}
