//! Deterministic synthetic scenes: reflection-symmetric shapes on a noisy
//! background, point-annotation jittering, view construction, and the
//! on-disk dataset layout.
//!
//! Dataset directory layout:
//! - `images/{index}.npyish` — raw float32 little-endian pixels, preceded by
//!   an 8-byte header of H then W as u32 (row-major, single channel).
//! - `labels/{index}.dota`  — ground-truth boxes in the DOTA text format.
//! - `points/{index}.csv`   — point annotations, header `x,y,class_id`.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{
    dota_decode, dota_encode, rotated_iou, transform_box, DotaRecord, GeomError, OrientedBox,
    ViewKind, ViewTransform,
};
use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place objects after {0} rejection attempts")]
    PlacementFailed(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("{0}")]
    Format(String),
}

/// Shape families drawn into scenes. All are reflection-symmetric about
/// both box axes, so a symmetry axis at the ground-truth angle exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Capsule,
}

/// One class family: a shape kind plus an aspect-ratio range.
#[derive(Debug, Clone, Copy)]
pub struct ClassFamily {
    pub kind: ShapeKind,
    pub aspect: (f64, f64),
}

/// The five built-in class families (shape x aspect).
pub const CLASS_FAMILIES: [ClassFamily; 5] = [
    ClassFamily { kind: ShapeKind::Rectangle, aspect: (2.5, 3.5) },
    ClassFamily { kind: ShapeKind::Rectangle, aspect: (1.3, 1.8) },
    ClassFamily { kind: ShapeKind::Ellipse, aspect: (2.0, 3.0) },
    ClassFamily { kind: ShapeKind::Capsule, aspect: (2.5, 3.5) },
    ClassFamily { kind: ShapeKind::Ellipse, aspect: (1.3, 1.8) },
];

/// Scene generator configuration.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Range of sqrt(w*h) in pixels.
    pub size_range: (f64, f64),
    pub class_count: usize,
    pub seed: u64,
    /// Maximum pairwise GT IoU tolerated during placement.
    pub max_overlap_iou: f64,
    /// Additive Gaussian pixel noise sigma.
    pub noise_sigma: f64,
    /// Point-annotation jitter as a fraction of box width/height.
    pub point_range_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            objects_min: 2,
            objects_max: 6,
            size_range: (12.0, 96.0),
            class_count: 5,
            seed: 0,
            max_overlap_iou: 0.3,
            noise_sigma: 0.02,
            point_range_frac: 0.10,
        }
    }
}

/// A point annotation: position plus class id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLabel {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
}

/// A generated scene: single-channel image plus ground-truth boxes.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub boxes: Vec<(OrientedBox, usize)>,
}

fn mix_seed(seed: u64, index: u64, tag: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(index)
        .wrapping_add(tag.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Signed coverage test for a shape in its box frame (u along theta).
fn inside_shape(kind: ShapeKind, u: f64, v: f64, w: f64, h: f64) -> bool {
    let hw = 0.5 * w;
    let hh = 0.5 * h;
    match kind {
        ShapeKind::Rectangle => u.abs() <= hw && v.abs() <= hh,
        ShapeKind::Ellipse => {
            let a = u / hw;
            let b = v / hh;
            a * a + b * b <= 1.0
        }
        ShapeKind::Capsule => {
            // Rectangle body of length w-h with semicircular caps radius h/2.
            let half_body = (hw - hh).max(0.0);
            let du = (u.abs() - half_body).max(0.0);
            du * du + v * v <= hh * hh
        }
    }
}

/// Draw one shape into the image with 2x2 subsampled coverage blending.
fn draw_shape(img: &mut Tensor, b: &OrientedBox, kind: ShapeKind, intensity: f64) {
    let size = img.shape()[1];
    let (s, c) = b.theta.sin_cos();
    let r = 0.5 * (b.w * b.w + b.h * b.h).sqrt() + 1.5;
    let x0 = ((b.cx - r).floor().max(0.0)) as usize;
    let x1 = ((b.cx + r).ceil().min((size - 1) as f64)) as usize;
    let y0 = ((b.cy - r).floor().max(0.0)) as usize;
    let y1 = ((b.cy + r).ceil().min((size - 1) as f64)) as usize;
    let sub = [-0.25f64, 0.25];
    for py in y0..=y1 {
        for px in x0..=x1 {
            let mut cov = 0.0;
            for dy in sub {
                for dx in sub {
                    let gx = px as f64 + dx - b.cx;
                    let gy = py as f64 + dy - b.cy;
                    let u = c * gx + s * gy;
                    let v = -s * gx + c * gy;
                    if inside_shape(kind, u, v, b.w, b.h) {
                        cov += 0.25;
                    }
                }
            }
            if cov > 0.0 {
                let idx = py * size + px;
                let old = img.data()[idx];
                img.data_mut()[idx] = old + cov * (intensity - old);
            }
        }
    }
}

/// Generate scene `index` deterministically from `(config.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene, SynthError> {
    assert!(cfg.class_count >= 1 && cfg.class_count <= CLASS_FAMILIES.len());
    assert!(cfg.size_range.0 >= 4.0, "minimum object size is 4 px");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index, 1));
    let n_objects = if cfg.objects_max == 0 {
        0
    } else {
        rng.gen_range(cfg.objects_min..=cfg.objects_max)
    };

    let size = cfg.image_size as f64;
    let mut boxes: Vec<(OrientedBox, usize)> = Vec::new();
    let mut kinds: Vec<ShapeKind> = Vec::new();
    let mut attempts = 0usize;
    const MAX_ATTEMPTS: usize = 1000;
    while boxes.len() < n_objects {
        if attempts >= MAX_ATTEMPTS {
            return Err(SynthError::PlacementFailed(MAX_ATTEMPTS));
        }
        attempts += 1;
        let class_id = rng.gen_range(0..cfg.class_count);
        let fam = CLASS_FAMILIES[class_id];
        let aspect = rng.gen_range(fam.aspect.0..fam.aspect.1);
        let mut scale = rng.gen_range(cfg.size_range.0..cfg.size_range.1);
        let theta = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        // Keep the whole box inside the frame.
        let max_diag = (size - 4.0) / (aspect + 1.0 / aspect).sqrt();
        scale = scale.min(max_diag.max(cfg.size_range.0));
        let w = scale * aspect.sqrt();
        let h = scale / aspect.sqrt();
        let margin = 0.5 * (w * w + h * h).sqrt() + 1.0;
        if 2.0 * margin >= size {
            continue;
        }
        let cx = rng.gen_range(margin..size - margin);
        let cy = rng.gen_range(margin..size - margin);
        let b = OrientedBox::new(cx, cy, w, h, theta)?;
        if boxes
            .iter()
            .all(|(other, _)| rotated_iou(&b, other) <= cfg.max_overlap_iou)
        {
            boxes.push((b, class_id));
            kinds.push(fam.kind);
        }
    }

    let mut image = Tensor::filled(&[1, cfg.image_size, cfg.image_size], 0.05);
    for ((b, _), kind) in boxes.iter().zip(kinds.iter()) {
        let intensity = rng.gen_range(0.55..0.95);
        draw_shape(&mut image, b, *kind, intensity);
    }
    // Additive Gaussian noise, clamped back into [0,1].
    let normal = rand_distr::Normal::new(0.0, cfg.noise_sigma).unwrap();
    for v in image.data_mut() {
        *v = (*v + rand_distr::Distribution::sample(&normal, &mut rng)).clamp(0.0, 1.0);
    }
    Ok(Scene { image, boxes })
}

/// Sample a jittered point label inside the central region of a box:
/// uniform in `[-f*w, f*w] x [-f*h, f*h]` in the box frame, rotated out.
pub fn jitter_point<R: Rng>(
    b: &OrientedBox,
    class_id: usize,
    range_frac: f64,
    rng: &mut R,
) -> PointLabel {
    assert!((0.0..0.5).contains(&range_frac) || range_frac == 0.0);
    let (u, v) = if range_frac == 0.0 {
        (0.0, 0.0)
    } else {
        (
            rng.gen_range(-range_frac * b.w..range_frac * b.w),
            rng.gen_range(-range_frac * b.h..range_frac * b.h),
        )
    };
    let (s, c) = b.theta.sin_cos();
    PointLabel {
        x: b.cx + c * u - s * v,
        y: b.cy + s * u + c * v,
        class_id,
    }
}

/// A pair of views related by a transform. `valid_mask` is 1 where the
/// augmented pixels come from real image content, 0 where padding invented
/// them.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub image: Tensor,
    pub boxes: Vec<(OrientedBox, usize)>,
    pub points: Vec<PointLabel>,
    pub valid_mask: Tensor,
    pub transform: ViewTransform,
}

fn sample_bilinear_clamped(img: &Tensor, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let d = img.data();
    let v00 = d[y0 * w + x0];
    let v01 = d[y0 * w + x1];
    let v10 = d[y1 * w + x0];
    let v11 = d[y1 * w + x1];
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Reflect a coordinate into [0, n-1] (mirror padding about pixel centers).
fn reflect_coord(x: f64, n: usize) -> f64 {
    let hi = (n - 1) as f64;
    if hi <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * hi;
    let mut t = (x).rem_euclid(period);
    if t > hi {
        t = period - t;
    }
    t
}

/// Build the augmented view of a scene under `t`: pixels are resampled
/// bilinearly (rotation uses reflect padding), labels are transformed
/// geometrically.
pub fn make_view(
    image: &Tensor,
    boxes: &[(OrientedBox, usize)],
    points: &[PointLabel],
    t: &ViewTransform,
) -> ViewBundle {
    let in_h = image.shape()[1];
    let in_w = image.shape()[2];
    debug_assert_eq!(in_h, in_w);
    let (out_img, mask) = match t.kind {
        ViewKind::Identity => (
            image.clone(),
            Tensor::filled(&[1, in_h, in_w], 1.0),
        ),
        ViewKind::VFlip => {
            let mut out = Tensor::zeros(image.shape());
            for y in 0..in_h {
                let src = (in_h - 1 - y) * in_w;
                let dst = y * in_w;
                out.data_mut()[dst..dst + in_w]
                    .copy_from_slice(&image.data()[src..src + in_w]);
            }
            (out, Tensor::filled(&[1, in_h, in_w], 1.0))
        }
        ViewKind::Resize(sigma) => {
            let out_h = ((in_h as f64) * sigma).round().max(1.0) as usize;
            let out_w = ((in_w as f64) * sigma).round().max(1.0) as usize;
            let mut out = Tensor::zeros(&[1, out_h, out_w]);
            for y in 0..out_h {
                for x in 0..out_w {
                    out.data_mut()[y * out_w + x] =
                        sample_bilinear_clamped(image, x as f64 / sigma, y as f64 / sigma);
                }
            }
            (out, Tensor::filled(&[1, out_h, out_w], 1.0))
        }
        ViewKind::Rotate(_) => {
            let mut out = Tensor::zeros(image.shape());
            let mut mask = Tensor::zeros(&[1, in_h, in_w]);
            for y in 0..in_h {
                for x in 0..in_w {
                    let (sx, sy) = t.invert_point(x as f64, y as f64);
                    let in_bounds = sx >= -0.5
                        && sx <= (in_w as f64 - 0.5)
                        && sy >= -0.5
                        && sy <= (in_h as f64 - 0.5);
                    let rx = reflect_coord(sx, in_w);
                    let ry = reflect_coord(sy, in_h);
                    out.data_mut()[y * in_w + x] = sample_bilinear_clamped(image, rx, ry);
                    mask.data_mut()[y * in_w + x] = if in_bounds { 1.0 } else { 0.0 };
                }
            }
            (out, mask)
        }
    };

    let out_boxes = boxes
        .iter()
        .map(|(b, c)| (transform_box(b, t), *c))
        .collect();
    let out_points = points
        .iter()
        .map(|p| {
            let (x, y) = t.apply_point(p.x, p.y);
            PointLabel { x, y, class_id: p.class_id }
        })
        .collect();
    ViewBundle {
        image: out_img,
        boxes: out_boxes,
        points: out_points,
        valid_mask: mask,
        transform: *t,
    }
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

/// Class names used in DOTA files: `c0`..`c4`.
pub fn class_name(class_id: usize) -> String {
    format!("c{class_id}")
}

pub fn parse_class_name(name: &str) -> Result<usize, SynthError> {
    name.strip_prefix('c')
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| SynthError::Format(format!("bad class name '{name}'")))
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<(), SynthError> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    for v in img.data() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor, SynthError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let h = u32::from_le_bytes(b4) as usize;
    f.read_exact(&mut b4)?;
    let w = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        f.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    Ok(Tensor::from_vec(&[1, h, w], data))
}

/// One dataset item as stored on disk.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: Tensor,
    pub boxes: Vec<(OrientedBox, usize)>,
    pub points: Vec<PointLabel>,
}

/// Generate `count` scenes (with jittered points) and persist them under
/// `dir` in the documented layout.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    fs::create_dir_all(dir.join("points"))?;
    for index in 0..count {
        let scene = generate_scene(cfg, index as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64, 2));
        let points: Vec<PointLabel> = scene
            .boxes
            .iter()
            .map(|(b, c)| jitter_point(b, *c, cfg.point_range_frac, &mut rng))
            .collect();
        write_image(&dir.join(format!("images/{index}.npyish")), &scene.image)?;
        let records: Vec<DotaRecord> = scene
            .boxes
            .iter()
            .map(|(b, c)| DotaRecord {
                bbox: *b,
                class_name: class_name(*c),
                difficulty: 0,
            })
            .collect();
        fs::write(dir.join(format!("labels/{index}.dota")), dota_encode(&records))?;
        let mut csv = String::from("x,y,class_id\n");
        for p in &points {
            csv.push_str(&format!("{:.6},{:.6},{}\n", p.x, p.y, p.class_id));
        }
        fs::write(dir.join(format!("points/{index}.csv")), csv)?;
    }
    Ok(())
}

/// Lazily indexed on-disk dataset.
pub struct Dataset {
    dir: PathBuf,
    count: usize,
}

impl Dataset {
    /// Open a dataset directory; the item count is the number of images.
    pub fn open(dir: &Path) -> Result<Self, SynthError> {
        let images = dir.join("images");
        if !images.is_dir() {
            return Err(SynthError::Format(format!(
                "{} is not a dataset directory (missing images/)",
                dir.display()
            )));
        }
        let mut count = 0usize;
        while images.join(format!("{count}.npyish")).exists() {
            count += 1;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            count,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn load(&self, index: usize) -> Result<DatasetItem, SynthError> {
        let image = read_image(&self.dir.join(format!("images/{index}.npyish")))?;
        let text = fs::read_to_string(self.dir.join(format!("labels/{index}.dota")))?;
        let boxes = dota_decode(&text)?
            .into_iter()
            .map(|r| Ok((r.bbox, parse_class_name(&r.class_name)?)))
            .collect::<Result<Vec<_>, SynthError>>()?;
        let csv = fs::read_to_string(self.dir.join(format!("points/{index}.csv")))?;
        let mut points = Vec::new();
        for (lineno, line) in csv.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(SynthError::Format(format!(
                    "points line {}: expected 3 fields",
                    lineno + 1
                )));
            }
            points.push(PointLabel {
                x: parts[0]
                    .trim()
                    .parse()
                    .map_err(|_| SynthError::Format(format!("points line {}: bad x", lineno + 1)))?,
                y: parts[1]
                    .trim()
                    .parse()
                    .map_err(|_| SynthError::Format(format!("points line {}: bad y", lineno + 1)))?,
                class_id: parts[2].trim().parse().map_err(|_| {
                    SynthError::Format(format!("points line {}: bad class_id", lineno + 1))
                })?,
            });
        }
        Ok(DatasetItem { image, boxes, points })
    }
}
