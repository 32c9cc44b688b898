//! Network core: a small convolutional backbone with an FPN neck plus the
//! task heads (two-stream MIL, dense per-pixel angle, dense detection).
//!
//! All parameters live in one [`ParamStore`]; each forward pass binds them
//! into a fresh [`Graph`] so training steps stay functional and
//! deterministic.

use rand::Rng;
use std::path::Path;

use crate::geom::PyramidSpec;
use crate::nn::{Graph, NodeId, ParamStore, Tensor};

/// Model hyperparameters. `channels` is the width of every backbone and
/// head feature map.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub channels: usize,
    pub classes: usize,
    pub mil_hidden: usize,
    pub gn_groups: usize,
    pub roi_size: usize,
    pub pyramid: PyramidSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            classes: 5,
            mil_hidden: 64,
            gn_groups: 4,
            roi_size: 7,
            pyramid: PyramidSpec::standard(),
        }
    }
}

impl ModelConfig {
    /// Stable FNV-1a hash of the architecture-defining fields; stored in
    /// checkpoints so weights are never loaded into a mismatched model.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.channels as u64);
        eat(self.classes as u64);
        eat(self.mil_hidden as u64);
        eat(self.gn_groups as u64);
        eat(self.roi_size as u64);
        eat(self.pyramid.strides.len() as u64);
        for s in &self.pyramid.strides {
            eat(*s as u64);
        }
        eat(self.pyramid.finest_scale.to_bits());
        h
    }
}

/// The full model: config plus every parameter (backbone, neck, fusion
/// gates, MIL heads, angle head, detection head).
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

fn he_conv<R: Rng>(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut R) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    store.add(&format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
    store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn he_linear<R: Rng>(store: &mut ParamStore, name: &str, fout: usize, fin: usize, rng: &mut R) {
    let std = (2.0 / fin as f64).sqrt();
    store.add(&format!("{name}.w"), Tensor::randn(&[fout, fin], std, rng));
    store.add(&format!("{name}.b"), Tensor::zeros(&[fout]));
}

fn gn_params(store: &mut ParamStore, name: &str, c: usize) {
    store.add(&format!("{name}.g"), Tensor::filled(&[c], 1.0));
    store.add(&format!("{name}.beta"), Tensor::zeros(&[c]));
}

impl Model {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Self {
        let d = cfg.channels;
        let c = cfg.classes;
        let p = cfg.pyramid.strides.len();
        let mut store = ParamStore::new();
        // Backbone: two stride-2 stem convs to C2, then one stride-2 conv
        // per extra level.
        he_conv(&mut store, "stem1", d, 1, 3, rng);
        gn_params(&mut store, "stem1.gn", d);
        he_conv(&mut store, "stem2", d, d, 3, rng);
        gn_params(&mut store, "stem2.gn", d);
        for lvl in 1..p {
            he_conv(&mut store, &format!("down{lvl}"), d, d, 3, rng);
            gn_params(&mut store, &format!("down{lvl}.gn"), d);
        }
        // FPN: 1x1 laterals + 3x3 output convs.
        for lvl in 0..p {
            he_conv(&mut store, &format!("lat{lvl}"), d, d, 1, rng);
            he_conv(&mut store, &format!("fpn{lvl}"), d, d, 3, rng);
        }
        // Every pyramid level carries one extra channel: the raw image
        // resized to the level's resolution. Downstream consumers therefore
        // see d+1 channels.
        let dp = d + 1;
        // Scale-gate convs for pyramid fusion: independent per level.
        for lvl in 0..p {
            he_conv(&mut store, &format!("gate{lvl}"), 1, dp, 3, rng);
        }
        // Two-stream MIL heads: the coarse (initial) and refined heads have
        // disjoint parameters. Per-proposal input = pooled pyramid features
        // (d+1 channels), a stride-1 raw-intensity grid, 6 fixed ring
        // statistics of that grid, and 1 objectness prior (see
        // ssff::extract_proposals).
        let fin = dp * cfg.roi_size * cfg.roi_size + cfg.roi_size * cfg.roi_size + 7;
        for head in ["mil", "ref"] {
            he_linear(&mut store, &format!("{head}.fc"), cfg.mil_hidden, fin, rng);
            // Zero-initialized scoring layers: both softmax streams start
            // exactly uniform, so early proposal selection is driven by the
            // ROI features rather than initialization noise.
            store.add(&format!("{head}.cls.w"), Tensor::zeros(&[c, cfg.mil_hidden]));
            store.add(&format!("{head}.cls.b"), Tensor::zeros(&[c]));
            store.add(&format!("{head}.ins.w"), Tensor::zeros(&[c, cfg.mil_hidden]));
            store.add(&format!("{head}.ins.b"), Tensor::zeros(&[c]));
        }
        // Dense angle head, shared across pyramid levels. It reads the
        // 3-channel structure-tensor orientation field of the raw image
        // (see `orientation_field`); learned backbone features are kept out
        // of this head so the self-supervised objective only has to
        // calibrate already-equivariant evidence.
        he_conv(&mut store, "ang.c1", d, 3, 3, rng);
        he_conv(&mut store, "ang.c2", 1, d, 3, rng);
        // Dense detection head (classification / box / centerness), shared
        // across levels.
        he_conv(&mut store, "det.trunk", d, dp, 3, rng);
        gn_params(&mut store, "det.gn", d);
        he_conv(&mut store, "det.cls", c, d, 3, rng);
        he_conv(&mut store, "det.box", 5, d, 3, rng);
        he_conv(&mut store, "det.ctr", 1, d, 3, rng);
        // Rare-positive prior for the dense classifier.
        let id = store.by_name("det.cls.b").unwrap();
        for v in store.tensor_mut(id).data_mut() {
            *v = -2.0;
        }
        Self { cfg, store }
    }

    /// Bind every parameter into `g`; the result resolves names to nodes.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { ids: self.store.leaves(g) }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        self.store.save(path, self.cfg.hash())
    }

    /// Load weights from a checkpoint; the stored config hash must match.
    pub fn load(cfg: ModelConfig, path: &Path) -> std::io::Result<Self> {
        let (store, hash) = ParamStore::load(path)?;
        if hash != cfg.hash() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("checkpoint config hash {hash:#x} != expected {:#x}", cfg.hash()),
            ));
        }
        Ok(Self { cfg, store })
    }
}

/// Parameter leaves bound into one graph. Indexed by store name.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn get(&self, model: &Model, name: &str) -> NodeId {
        let id = model
            .store
            .by_name(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.ids[id.0]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// FPN feature maps, finest first, aligned with `cfg.pyramid.strides`.
pub struct Pyramid {
    pub levels: Vec<NodeId>,
    /// The input image node; ROI extraction samples it at stride 1 so the
    /// MIL head sees full-resolution intensity alongside learned features.
    pub image: NodeId,
    /// Per-level `[3,H,W]` structure-tensor orientation fields of the raw
    /// image (constants, no gradient); consumed by the dense angle head.
    pub orient: Vec<NodeId>,
}

fn conv_gn_relu(
    g: &mut Graph,
    m: &Model,
    p: &BoundParams,
    name: &str,
    x: NodeId,
    stride: usize,
) -> NodeId {
    let w = p.get(m, &format!("{name}.w"));
    let b = p.get(m, &format!("{name}.b"));
    let gamma = p.get(m, &format!("{name}.gn.g"));
    let beta = p.get(m, &format!("{name}.gn.beta"));
    let y = g.conv2d(x, w, b, stride, 1);
    let y = g.group_norm(y, gamma, beta, m.cfg.gn_groups, 1e-5);
    g.relu(y)
}

/// Backbone + FPN over a single-channel image `[1,H,W]`.
pub fn extract_pyramid(g: &mut Graph, m: &Model, p: &BoundParams, image: NodeId) -> Pyramid {
    let nlvl = m.cfg.pyramid.strides.len();
    let x = conv_gn_relu(g, m, p, "stem1", image, 2);
    let mut c = conv_gn_relu(g, m, p, "stem2", x, 2);
    let mut stages = vec![c];
    for lvl in 1..nlvl {
        c = conv_gn_relu(g, m, p, &format!("down{lvl}"), c, 2);
        stages.push(c);
    }
    // Top-down pathway.
    let mut laterals: Vec<NodeId> = stages
        .iter()
        .enumerate()
        .map(|(lvl, s)| {
            let w = p.get(m, &format!("lat{lvl}.w"));
            let b = p.get(m, &format!("lat{lvl}.b"));
            g.conv2d(*s, w, b, 1, 0)
        })
        .collect();
    for lvl in (0..nlvl - 1).rev() {
        let hi = laterals[lvl + 1];
        let shape = g.value(laterals[lvl]).shape().to_vec();
        let up = g.upsample_nearest(hi, shape[1], shape[2]);
        laterals[lvl] = g.add(laterals[lvl], up);
    }
    let levels = laterals
        .iter()
        .enumerate()
        .map(|(lvl, l)| {
            let w = p.get(m, &format!("fpn{lvl}.w"));
            let b = p.get(m, &format!("fpn{lvl}.b"));
            let feat = g.conv2d(*l, w, b, 1, 1);
            // Append the raw image (nearest-resized to this level) as an
            // extra channel, so ROI pooling always sees intensity contrast
            // regardless of what the learned features encode.
            let shape = g.value(feat).shape().to_vec();
            let img = g.upsample_nearest(image, shape[1], shape[2]);
            g.concat0(&[feat, img])
        })
        .collect();
    let img_val = g.value(image).clone();
    let orient = m
        .cfg
        .pyramid
        .strides
        .iter()
        .map(|s| {
            let f = orientation_field(&img_val, *s);
            g.constant(f)
        })
        .collect();
    Pyramid { levels, image, orient }
}

/// Two-stream MIL scores for one bag.
pub struct BagScores {
    /// `[N,C]`, softmax across classes (per proposal).
    pub cls: NodeId,
    /// `[N,C]`, softmax across proposals (per class).
    pub ins: NodeId,
}

/// Run the MIL head over flattened ROI features `[N, D*roi*roi]`.
/// `refined` selects the second (refinement) head's parameters.
pub fn mil_forward(
    g: &mut Graph,
    m: &Model,
    p: &BoundParams,
    feats: NodeId,
    refined: bool,
) -> BagScores {
    let head = if refined { "ref" } else { "mil" };
    let fw = p.get(m, &format!("{head}.fc.w"));
    let fb = p.get(m, &format!("{head}.fc.b"));
    let h = g.linear(feats, fw, fb);
    let h = g.relu(h);
    let cw = p.get(m, &format!("{head}.cls.w"));
    let cb = p.get(m, &format!("{head}.cls.b"));
    let cls_logits = g.linear(h, cw, cb);
    let iw = p.get(m, &format!("{head}.ins.w"));
    let ib = p.get(m, &format!("{head}.ins.b"));
    let ins_logits = g.linear(h, iw, ib);
    // Fixed selection bias: the last feature column is the objectness prior
    // (a pure function of the input image, so it carries no gradient). It
    // breaks the scale-selection symmetry of the instance stream toward
    // snug boxes; learned logits can still override it.
    let fv = g.value(feats);
    let (n, fin) = (fv.shape()[0], fv.shape()[1]);
    let c = g.value(cls_logits).shape()[1];
    let mut bias = Tensor::zeros(&[n, c]);
    for r in 0..n {
        let pr = fv.data()[r * fin + fin - 1];
        for k in 0..c {
            bias.data_mut()[r * c + k] = INS_PRIOR_BETA * pr;
        }
    }
    let bias = g.constant(bias);
    let ins_logits = g.add(ins_logits, bias);
    BagScores {
        cls: g.softmax(cls_logits, 1),
        ins: g.softmax(ins_logits, 0),
    }
}

/// Weight of the snug-box objectness prior added to instance-stream logits.
/// Classification provides no inherent preference among nested crops that
/// all contain the object; this bias makes scale selection identifiable.
pub const INS_PRIOR_BETA: f64 = 24.0;

/// Candidate box windows for the structure tensor, in grid cells of the
/// level being built: the most coherent window wins per cell, so small
/// objects are not drowned by background and large objects still get their
/// full boundary integrated.
pub const ORIENT_WINDOW_CELLS: [usize; 4] = [3, 5, 9, 13];

/// Pixel cap on the disc radius: beyond the largest object scale, wider
/// windows only pick up neighbors and view-border artifacts.
pub const ORIENT_MAX_RADIUS_PX: f64 = 64.0;

/// Denoising variants for the structure tensor: (smoothing passes,
/// gradient-magnitude gate). Pixels whose gradient falls below the gate are
/// treated as flat (isotropic sensor noise) and excluded from the tensor.
/// The light variant preserves the thin edges of small objects; the heavy
/// one suppresses noise along the long smooth boundaries of large ones.
/// Like the window extent, the variant is chosen per cell by coherence.
pub const ORIENT_DENOISE: [(usize, f64); 2] = [(1, 0.05), (3, 0.09)];

/// Structure-tensor orientation field of a raw image at one pyramid level:
/// `[3, ceil(H/s), ceil(W/s)]` holding `(cos 2psi, sin 2psi)` scaled by the
/// local coherence plus the decoded scalar estimate `psi + pi/2` (the edge
/// direction, normalized to `[-pi/2, pi/2)`), where `psi` is the dominant
/// gradient orientation over a box window around each cell. The field is a
/// fixed function of the image (no parameters): it rotates equivariantly
/// with the content and negates under a vertical flip (modulo pi), which is
/// exactly the structure the self-supervised angle objective needs as input
/// evidence.
pub fn orientation_field(image: &Tensor, stride: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (lh, lw) = (h.div_ceil(stride), w.div_ceil(stride));
    // 3x3 box smoothing at full resolution suppresses pixel noise before
    // differentiation; edges stay 2-3 px transitions.
    let box3 = |src: &[f64]| {
        let mut dst = vec![0.0f64; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut sum = 0.0;
                let mut n = 0usize;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (y, x) = (i as i64 + di, j as i64 + dj);
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            sum += src[y as usize * w + x as usize];
                            n += 1;
                        }
                    }
                }
                dst[i * w + j] = sum / n as f64;
            }
        }
        dst
    };
    // Full-resolution central-difference gradients (one-sided at the
    // borders) and integral images of their gated tensor products, one set
    // per denoising variant.
    let mut tensors: Vec<[Vec<f64>; 3]> = Vec::new();
    let mut smooth = image.data().to_vec();
    let mut done_passes = 0usize;
    for (passes, gate) in ORIENT_DENOISE {
        while done_passes < passes {
            smooth = box3(&smooth);
            done_passes += 1;
        }
        let at = |i: usize, j: usize| smooth[i * w + j];
        let mut ixx = vec![0.0f64; (h + 1) * (w + 1)];
        let mut iyy = vec![0.0f64; (h + 1) * (w + 1)];
        let mut ixy = vec![0.0f64; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                let gx = (at(i, (j + 1).min(w - 1)) - at(i, j.saturating_sub(1)))
                    / ((j + 1).min(w - 1) - j.saturating_sub(1)).max(1) as f64;
                let gy = (at((i + 1).min(h - 1), j) - at(i.saturating_sub(1), j))
                    / ((i + 1).min(h - 1) - i.saturating_sub(1)).max(1) as f64;
                let k = i * (w + 1) + j;
                let keep = if gx * gx + gy * gy < gate * gate { 0.0 } else { 1.0 };
                let (a, b, c) = (keep * gx * gx, keep * gy * gy, keep * gx * gy);
                ixx[k + w + 2] = a + ixx[k + 1] + ixx[k + w + 1] - ixx[k];
                iyy[k + w + 2] = b + iyy[k + 1] + iyy[k + w + 1] - iyy[k];
                ixy[k + w + 2] = c + ixy[k + 1] + ixy[k + w + 1] - ixy[k];
            }
        }
        tensors.push([ixx, iyy, ixy]);
    }
    // Disc sum via per-row chords of the integral image. Square windows are
    // not rotation-equivariant (their content changes when the image is
    // rotated); discs keep the consistency loss honest under rotated views.
    let disc_sum = |ii: &[f64], cy: f64, cx: f64, r: f64| {
        let i0 = ((cy - r).floor().max(0.0)) as usize;
        let i1 = ((cy + r).ceil() as usize).min(h);
        let mut sum = 0.0;
        for i in i0..i1 {
            let dy = i as f64 + 0.5 - cy;
            let d2 = r * r - dy * dy;
            if d2 <= 0.0 {
                continue;
            }
            let dx = d2.sqrt();
            let j0 = ((cx - dx).floor().max(0.0)) as usize;
            let j1 = ((cx + dx).ceil() as usize).min(w);
            if j1 <= j0 {
                continue;
            }
            sum += ii[(i + 1) * (w + 1) + j1] - ii[(i + 1) * (w + 1) + j0]
                - ii[i * (w + 1) + j1]
                + ii[i * (w + 1) + j0];
        }
        sum
    };
    // Per level cell: sum the products over a pixel window centered on the
    // cell; the most coherent candidate window wins.
    let mut out = Tensor::zeros(&[3, lh, lw]);
    const EPS: f64 = 1e-4;
    for i in 0..lh {
        for j in 0..lw {
            let cy = (i as f64 + 0.5) * stride as f64;
            let cx = (j as f64 + 0.5) * stride as f64;
            let mut best = (-1.0f64, 0.0f64, 0.0f64);
            for [ixx, iyy, ixy] in &tensors {
                for cells in ORIENT_WINDOW_CELLS {
                    let r = ((cells * stride) as f64 / 2.0).min(ORIENT_MAX_RADIUS_PX);
                    let sxx = disc_sum(ixx, cy, cx, r);
                    let syy = disc_sum(iyy, cy, cx, r);
                    let sxy = disc_sum(ixy, cy, cx, r);
                    let denom = sxx + syy + EPS;
                    let c = (sxx - syy) / denom;
                    let s = 2.0 * sxy / denom;
                    let coh = c.hypot(s);
                    if coh > best.0 {
                        best = (coh, c, s);
                    }
                }
            }
            out.data_mut()[i * lw + j] = best.1;
            out.data_mut()[lh * lw + i * lw + j] = best.2;
            // Decoded estimate: half the double-angle, shifted to the edge
            // (long-axis) direction. Branch cut at +-pi/2; the consistency
            // loss tolerates k*pi jumps.
            let psi = 0.5 * best.2.atan2(best.1);
            out.data_mut()[2 * lh * lw + i * lw + j] =
                crate::geom::normalize_half_pi(psi + std::f64::consts::FRAC_PI_2);
        }
    }
    out
}

/// Dense angle prediction for one pyramid level: `[1,H,W]` radians. The
/// head reads the precomputed orientation field of the level, so the
/// self-supervised objective only has to calibrate a raw scalar angle out
/// of already-equivariant evidence.
pub fn dense_angle_forward(g: &mut Graph, m: &Model, p: &BoundParams, pyr: &Pyramid, lvl: usize) -> NodeId {
    let feat = pyr.orient[lvl];
    let w1 = p.get(m, "ang.c1.w");
    let b1 = p.get(m, "ang.c1.b");
    let h = g.conv2d(feat, w1, b1, 1, 1);
    let h = g.relu(h);
    let w2 = p.get(m, "ang.c2.w");
    let b2 = p.get(m, "ang.c2.b");
    g.conv2d(h, w2, b2, 1, 1)
}

/// Dense detection maps for one pyramid level.
pub struct DetOutputs {
    /// `[C,H,W]` classification logits.
    pub cls: NodeId,
    /// `[5,H,W]` box regression (dx, dy, log w, log h, theta), in units of
    /// the level stride for the spatial channels.
    pub bbox: NodeId,
    /// `[1,H,W]` centerness logits.
    pub ctr: NodeId,
}

pub fn det_forward(g: &mut Graph, m: &Model, p: &BoundParams, feat: NodeId) -> DetOutputs {
    let t = conv_gn_relu_named(g, m, p, "det.trunk", "det.gn", feat);
    let mk = |g: &mut Graph, name: &str| {
        let w = p.get(m, &format!("{name}.w"));
        let b = p.get(m, &format!("{name}.b"));
        g.conv2d(t, w, b, 1, 1)
    };
    DetOutputs {
        cls: mk(g, "det.cls"),
        bbox: mk(g, "det.box"),
        ctr: mk(g, "det.ctr"),
    }
}

fn conv_gn_relu_named(
    g: &mut Graph,
    m: &Model,
    p: &BoundParams,
    conv: &str,
    gn: &str,
    x: NodeId,
) -> NodeId {
    let w = p.get(m, &format!("{conv}.w"));
    let b = p.get(m, &format!("{conv}.b"));
    let gamma = p.get(m, &format!("{gn}.g"));
    let beta = p.get(m, &format!("{gn}.beta"));
    let y = g.conv2d(x, w, b, 1, 1);
    let y = g.group_norm(y, gamma, beta, m.cfg.gn_groups, 1e-5);
    g.relu(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn tiny_model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Model::new(
            ModelConfig { channels: 8, mil_hidden: 16, ..Default::default() },
            &mut rng,
        )
    }

    #[test]
    fn pyramid_shapes() {
        let m = tiny_model();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let img = g.constant(Tensor::filled(&[1, 64, 64], 0.3));
        let pyr = extract_pyramid(&mut g, &m, &p, img);
        // channels + 1: each level carries the resized raw image as an
        // extra channel.
        let expect = [[9, 16, 16], [9, 8, 8], [9, 4, 4], [9, 2, 2]];
        assert_eq!(pyr.levels.len(), 4);
        for (lvl, want) in pyr.levels.iter().zip(expect.iter()) {
            assert_eq!(g.value(*lvl).shape(), want);
        }
    }

    #[test]
    fn orientation_field_shapes_and_coherence_range() {
        let img = Tensor::filled(&[1, 64, 48], 0.5);
        for stride in [4usize, 8, 16, 32] {
            let f = orientation_field(&img, stride);
            assert_eq!(
                f.shape(),
                &[3, 64usize.div_ceil(stride), 48usize.div_ceil(stride)]
            );
            // Channels 0/1 are coherence-scaled double angles; a flat image
            // has no gradient structure, so they vanish.
            let (h, w) = (f.shape()[1], f.shape()[2]);
            for v in &f.data()[..2 * h * w] {
                assert!(v.abs() < 1e-6, "flat image coherence {v}");
            }
            for v in &f.data()[2 * h * w..] {
                assert!((-FRAC_PI_2..FRAC_PI_2).contains(v));
            }
        }
    }

    #[test]
    fn orientation_field_recovers_bar_angle() {
        // A long thin bar at a known angle: the decoded angle channel at the
        // bar center must match the bar's long-axis direction.
        for &theta in &[0.0f64, 0.4, -0.7, 1.2] {
            let n = 96usize;
            let mut img = Tensor::zeros(&[1, n, n]);
            let (c, s) = (theta.cos(), theta.sin());
            for i in 0..n {
                for j in 0..n {
                    let dx = j as f64 - 47.5;
                    let dy = i as f64 - 47.5;
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    if u.abs() < 30.0 && v.abs() < 7.0 {
                        img.data_mut()[i * n + j] = 1.0;
                    }
                }
            }
            let f = orientation_field(&img, 4);
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let phi = f.data()[2 * h * w + (h / 2) * w + w / 2];
            let err = crate::geom::normalize_half_pi(phi - theta).abs();
            assert!(err < 0.06, "theta {theta}: field angle {phi}, err {err}");
        }
    }

    #[test]
    fn mil_softmax_normalization() {
        let mut m = tiny_model();
        // Nudge one refined-head parameter so the disjoint-parameter check
        // below is observable despite the zero-initialized scoring layers.
        let id = m.store.by_name("ref.cls.b").unwrap();
        m.store.tensor_mut(id).data_mut()[0] = 0.5;
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let fin = 9 * 49 + 49 + 7;
        let feats = g.constant(Tensor::randn(&[n, fin], 1.0, &mut rng));
        let scores = mil_forward(&mut g, &m, &p, feats, false);
        let cls = g.value(scores.cls).clone();
        let ins = g.value(scores.ins).clone();
        // Rows of cls sum to 1 (over classes); columns of ins sum to 1
        // (over proposals).
        for r in 0..n {
            let s: f64 = (0..5).map(|c| cls.data()[r * 5 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for c in 0..5 {
            let s: f64 = (0..n).map(|r| ins.data()[r * 5 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // The two heads have independent parameters: the nudge above only
        // affects the refined head.
        let refined = mil_forward(&mut g, &m, &p, feats, true);
        assert_ne!(g.value(refined.cls).data(), cls.data());
    }

    #[test]
    fn head_output_shapes() {
        let m = tiny_model();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let img = g.constant(Tensor::filled(&[1, 32, 32], 0.1));
        let pyr = extract_pyramid(&mut g, &m, &p, img);
        let ang = dense_angle_forward(&mut g, &m, &p, &pyr, 0);
        assert_eq!(g.value(ang).shape(), &[1, 8, 8]);
        let det = det_forward(&mut g, &m, &p, pyr.levels[1]);
        assert_eq!(g.value(det.cls).shape(), &[5, 4, 4]);
        assert_eq!(g.value(det.bbox).shape(), &[5, 4, 4]);
        assert_eq!(g.value(det.ctr).shape(), &[1, 4, 4]);
    }

    #[test]
    fn checkpoint_roundtrip_and_hash_guard() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let m2 = Model::load(m.cfg.clone(), &path).unwrap();
        let a = m.store.by_name("stem1.w").unwrap();
        let b = m2.store.by_name("stem1.w").unwrap();
        // f32 storage: values round-trip to f32 precision.
        for (x, y) in m.store.tensor(a).data().iter().zip(m2.store.tensor(b).data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let bad = ModelConfig { channels: 4, ..m.cfg.clone() };
        assert!(Model::load(bad, &path).is_err());
    }

    #[test]
    fn end_to_end_gradients_flow() {
        // A full forward pass to a scalar produces a gradient for every
        // backbone/neck parameter feeding the used heads.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::new(
            ModelConfig { channels: 4, mil_hidden: 8, ..Default::default() },
            &mut rng,
        );
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let img = g.constant(Tensor::randn(&[1, 32, 32], 0.5, &mut rng));
        let pyr = extract_pyramid(&mut g, &m, &p, img);
        // The angle head reads the fixed orientation field, not the learned
        // features, so drive the backbone through the pyramid itself.
        let ang = dense_angle_forward(&mut g, &m, &p, &pyr, 0);
        let a = g.mean_all(ang);
        let f = g.mean_all(pyr.levels[0]);
        let loss = g.add(a, f);
        g.backward(loss);
        for name in ["stem1.w", "stem2.w", "down1.gn.g", "lat0.w", "fpn0.b", "ang.c1.w", "ang.c2.w"] {
            let id = m.store.by_name(name).unwrap();
            let grad = g.grad(p.ids()[id.0]).expect(name);
            assert!(grad.data().iter().any(|v| *v != 0.0), "zero grad for {name}");
        }
    }
}
