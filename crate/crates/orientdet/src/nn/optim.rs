//! Parameter storage, SGD with momentum, and the checkpoint container.
//!
//! Checkpoint layout (little-endian):
//! `"ODCK"` magic, `u32` version (1), `u64` config hash, `u32` entry count,
//! then per entry: `u32` name length, name bytes (UTF-8), `u32` ndim,
//! `u32` dims..., and the tensor payload as `f32` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ODCK";
const VERSION: u32 = 1;

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors, insertion-ordered.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), t));
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter into `g` as a gradient-requiring leaf.
    /// The returned ids are aligned with [`ParamId`] order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), true))
            .collect()
    }

    /// Copy values from another store with identical layout.
    pub fn load_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.len(), other.len(), "parameter count mismatch");
        for (i, (name, t)) in self.entries.iter_mut().enumerate() {
            let (oname, ot) = &other.entries[i];
            assert_eq!(name, oname, "parameter name mismatch at {i}");
            assert_eq!(t.shape(), ot.shape(), "parameter shape mismatch for {name}");
            *t = ot.clone();
        }
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&config_hash.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> io::Result<(ParamStore, u64)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut h = [0u8; 8];
        r.read_exact(&mut h)?;
        let config_hash = u64::from_le_bytes(h);
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad name"))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            store.add(&name, Tensor::from_vec(&shape, data));
        }
        Ok((store, config_hash))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// SGD with momentum and decoupled-from-nothing classic weight decay,
/// matching the usual detection-training recipe.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
    /// Per-parameter learning-rate multipliers (1.0 unless a branch is
    /// given its own rate via [`Sgd::set_lr_mult`]).
    lr_mult: Vec<f64>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = (0..store.len())
            .map(|i| Tensor::zeros(store.tensor(ParamId(i)).shape()))
            .collect();
        Self {
            lr,
            momentum,
            weight_decay,
            velocity,
            lr_mult: vec![1.0; store.len()],
        }
    }

    /// Give every parameter whose name starts with `prefix` its own
    /// learning-rate multiplier.
    pub fn set_lr_mult(&mut self, store: &ParamStore, prefix: &str, mult: f64) {
        for (i, name) in store.names().enumerate() {
            if name.starts_with(prefix) {
                self.lr_mult[i] = mult;
            }
        }
    }

    /// Apply one step. `grads` is aligned with the store; `None` entries
    /// (parameters unused this step) are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr_scale: f64) {
        assert_eq!(grads.len(), store.len());
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let lr = self.lr * lr_scale * self.lr_mult[i];
            let p = store.tensor_mut(ParamId(i));
            let v = &mut self.velocity[i];
            for ((pv, gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.data_mut())
            {
                let g = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + g;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Scale accumulated gradients in place so their global L2 norm is at
/// most `max_norm` (no-op when `max_norm <= 0`). Returns the pre-clip
/// norm.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Linear learning-rate warmup factor for the first `warmup_iters` steps.
pub fn warmup_factor(iter: usize, warmup_iters: usize, start_factor: f64) -> f64 {
    if warmup_iters == 0 || iter >= warmup_iters {
        1.0
    } else {
        let t = iter as f64 / warmup_iters as f64;
        start_factor + (1.0 - start_factor) * t
    }
}
