//! Oriented-box geometry, view transforms and the DOTA interchange format.
//!
//! Boxes use the "le90" convention: `theta` in `[-pi/2, pi/2)` with `w`
//! measured along the `theta` direction. Image coordinates are x-right,
//! y-down with pixel centers at integer positions `0..size-1`; a positive
//! rotation angle therefore turns clockwise on screen.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid box: w={w}, h={h} must be positive")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("invalid resize factor {0}: must lie in [0.5, 1.5]")]
    BadSigma(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: degenerate polygon (near-zero area)")]
    DegeneratePolygon { line: usize },
}

/// Wrap an angle to `[-pi/2, pi/2)` (the le90 range, modulo pi).
pub fn normalize_half_pi(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(PI);
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Wrap an angle to `(-pi, pi]`.
pub fn normalize_pi(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Rotated rectangle `(cx, cy, w, h, theta)`, le90 normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Axis-aligned rectangle; equals an [`OrientedBox`] with `theta = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizontalBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl HorizontalBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        if w <= 0.0 || h <= 0.0 {
            return Err(GeomError::NonPositiveSize { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_oriented(self) -> OrientedBox {
        OrientedBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            theta: 0.0,
        }
    }
}

impl OrientedBox {
    /// Build a box, normalizing `theta` into `[-pi/2, pi/2)`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeomError> {
        if w <= 0.0 || h <= 0.0 {
            return Err(GeomError::NonPositiveSize { w, h });
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: normalize_half_pi(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The four rectangle vertices in clockwise order (y-down screen sense),
    /// starting from the `(-w/2, -h/2)` corner of the box frame.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        obb_to_corners(self)
    }
}

/// Corner reconstruction: rotate the box-frame corners by `theta` and
/// translate to the center.
pub fn obb_to_corners(b: &OrientedBox) -> [[f64; 2]; 4] {
    let (s, c) = b.theta.sin_cos();
    let hw = 0.5 * b.w;
    let hh = 0.5 * b.h;
    let local = [[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]];
    let mut out = [[0.0; 2]; 4];
    for (o, p) in out.iter_mut().zip(local.iter()) {
        o[0] = b.cx + c * p[0] - s * p[1];
        o[1] = b.cy + s * p[0] + c * p[1];
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        a += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    0.5 * a.abs()
}

/// Clip `subject` against the convex polygon `clip` (Sutherland-Hodgman).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]; 4]) -> Vec<[f64; 2]> {
    // Orientation sign of the clip quad decides which half-plane is inside.
    let mut signed = 0.0;
    for i in 0..4 {
        let j = (i + 1) % 4;
        signed += clip[i][0] * clip[j][1] - clip[j][0] * clip[i][1];
    }
    let sign = if signed >= 0.0 { 1.0 } else { -1.0 };

    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % 4];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let inside = |p: &[f64; 2]| sign * (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) >= 0.0;
        let input = std::mem::take(&mut poly);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = inside(&cur);
            let prev_in = inside(&prev);
            if cur_in != prev_in {
                // Intersection of segment prev->cur with the clip line.
                let dp = sign * (ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]));
                let dc = sign * (ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]));
                let t = dp / (dp - dc);
                poly.push([
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ]);
            }
            if cur_in {
                poly.push(cur);
            }
        }
    }
    poly
}

/// Exact rotated IoU via convex polygon clipping. Degenerate overlaps
/// (near-zero clipped area) return 0.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ca = obb_to_corners(a);
    let cb = obb_to_corners(b);
    let inter = clip_polygon(&ca, &cb);
    let ai = polygon_area(&inter);
    if ai <= 1e-12 {
        return 0.0;
    }
    let union = a.area() + b.area() - ai;
    if union <= 1e-12 {
        return 0.0;
    }
    ai / union
}

/// View transform kinds. `Resize` carries the scale factor sigma, `Rotate`
/// the clockwise angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViewKind {
    Identity,
    Resize(f64),
    Rotate(f64),
    VFlip,
}

/// A geometric view transform tied to a square image of side `image_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub kind: ViewKind,
    pub image_size: usize,
}

impl ViewTransform {
    pub fn identity(image_size: usize) -> Self {
        Self {
            kind: ViewKind::Identity,
            image_size,
        }
    }

    pub fn resize(sigma: f64, image_size: usize) -> Result<Self, GeomError> {
        if !(0.5..=1.5).contains(&sigma) {
            return Err(GeomError::BadSigma(sigma));
        }
        Ok(Self {
            kind: ViewKind::Resize(sigma),
            image_size,
        })
    }

    pub fn rotate(angle: f64, image_size: usize) -> Self {
        Self {
            kind: ViewKind::Rotate(angle),
            image_size,
        }
    }

    pub fn vflip(image_size: usize) -> Self {
        Self {
            kind: ViewKind::VFlip,
            image_size,
        }
    }

    /// Pixel-center of the image (rotation pivot / flip midline).
    fn center(&self) -> f64 {
        (self.image_size as f64 - 1.0) / 2.0
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        match self.kind {
            ViewKind::Identity => (x, y),
            ViewKind::Resize(s) => (x * s, y * s),
            ViewKind::Rotate(a) => {
                let c = self.center();
                let (sa, ca) = a.sin_cos();
                let dx = x - c;
                let dy = y - c;
                (c + ca * dx - sa * dy, c + sa * dx + ca * dy)
            }
            ViewKind::VFlip => (x, (self.image_size as f64 - 1.0) - y),
        }
    }

    /// Map a point in the transformed view back to the original view.
    pub fn invert_point(&self, x: f64, y: f64) -> (f64, f64) {
        match self.kind {
            ViewKind::Identity => (x, y),
            ViewKind::Resize(s) => (x / s, y / s),
            ViewKind::Rotate(a) => ViewTransform::rotate(-a, self.image_size).apply_point(x, y),
            ViewKind::VFlip => self.apply_point(x, y),
        }
    }
}

/// Apply a view transform to a box. Resize scales positions and sizes,
/// rotate moves the center about the image center and shifts `theta`,
/// vflip mirrors `cy` and negates `theta`.
pub fn transform_box(b: &OrientedBox, t: &ViewTransform) -> OrientedBox {
    let (cx, cy) = t.apply_point(b.cx, b.cy);
    let (w, h, theta) = match t.kind {
        ViewKind::Identity => (b.w, b.h, b.theta),
        ViewKind::Resize(s) => (b.w * s, b.h * s, b.theta),
        ViewKind::Rotate(a) => (b.w, b.h, normalize_half_pi(b.theta + a)),
        ViewKind::VFlip => (b.w, b.h, normalize_half_pi(-b.theta)),
    };
    OrientedBox { cx, cy, w, h, theta }
}

/// Feature-pyramid layout: per-level strides plus the finest scale used by
/// the level-assignment formula.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSpec {
    pub strides: Vec<usize>,
    pub finest_scale: f64,
}

impl PyramidSpec {
    pub fn new(strides: Vec<usize>, finest_scale: f64) -> Result<Self, GeomError> {
        assert!(strides.len() >= 2, "pyramid needs at least 2 levels");
        assert!(finest_scale > 0.0, "finest scale must be positive");
        for win in strides.windows(2) {
            assert!(
                win[1] == 2 * win[0],
                "strides must double per level: {:?}",
                strides
            );
        }
        Ok(Self {
            strides,
            finest_scale,
        })
    }

    /// Default: strides 4..32 with finest scale 56.
    pub fn standard() -> Self {
        Self::new(vec![4, 8, 16, 32], 56.0).unwrap()
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }
}

/// Map a box size to its pyramid level: `log2(sqrt(w*h)/fs + 1e-6)` rounded
/// to nearest and clamped to `[0, P-1]`.
pub fn assign_pyramid_level(w: f64, h: f64, spec: &PyramidSpec) -> Result<usize, GeomError> {
    if w <= 0.0 || h <= 0.0 {
        return Err(GeomError::NonPositiveSize { w, h });
    }
    let raw = ((w * h).sqrt() / spec.finest_scale + 1e-6).log2();
    let lvl = (raw + 0.5).floor();
    Ok(lvl.clamp(0.0, (spec.num_levels() - 1) as f64) as usize)
}

/// One object in the DOTA text format.
#[derive(Debug, Clone, PartialEq)]
pub struct DotaRecord {
    pub bbox: OrientedBox,
    pub class_name: String,
    pub difficulty: u32,
}

/// Encode records as DOTA lines: eight corner coordinates (6 decimals),
/// class name and difficulty, space separated, LF line endings.
pub fn dota_encode(records: &[DotaRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let c = obb_to_corners(&r.bbox);
        for p in &c {
            out.push_str(&format!("{:.6} {:.6} ", p[0], p[1]));
        }
        out.push_str(&format!("{} {}\n", r.class_name, r.difficulty));
    }
    out
}

/// Minimum-area enclosing rectangle of a point set (rotating calipers over
/// hull edges). Returns `None` for degenerate input.
fn min_area_rect(points: &[[f64; 2]]) -> Option<OrientedBox> {
    let hull = convex_hull(points);
    if hull.len() < 3 || polygon_area(&hull) < 1e-9 {
        return None;
    }
    let mut best: Option<(f64, OrientedBox)> = None;
    for i in 0..hull.len() {
        let j = (i + 1) % hull.len();
        let ang = (hull[j][1] - hull[i][1]).atan2(hull[j][0] - hull[i][0]);
        let (s, c) = ang.sin_cos();
        let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let u = c * p[0] + s * p[1];
            let v = -s * p[0] + c * p[1];
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let w = umax - umin;
        let h = vmax - vmin;
        let area = w * h;
        if best.as_ref().map_or(true, |(a, _)| area < *a) {
            let uc = 0.5 * (umin + umax);
            let vc = 0.5 * (vmin + vmax);
            let cx = c * uc - s * vc;
            let cy = s * uc + c * vc;
            // Keep w along the edge direction, then le90-normalize; a theta
            // outside [-pi/2, pi/2) swings back by pi which preserves the line.
            let bx = OrientedBox::new(cx, cy, w.max(1e-9), h.max(1e-9), ang).ok()?;
            best = Some((area, bx));
        }
    }
    best.map(|(_, b)| b)
}

fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    // Andrew's monotone chain: lower hull, then upper hull.
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 1e-12 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower
            && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 1e-12
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Decode DOTA lines; each box is re-fit as the minimum-area rectangle of
/// its four corner points. Blank lines are skipped.
pub fn dota_decode(text: &str) -> Result<Vec<DotaRecord>, GeomError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(GeomError::Parse {
                line: lineno,
                msg: format!("expected 10 fields, found {}", fields.len()),
            });
        }
        let mut coords = [0.0f64; 8];
        for (i, f) in fields[..8].iter().enumerate() {
            coords[i] = f.parse::<f64>().map_err(|_| GeomError::Parse {
                line: lineno,
                msg: format!("field {}: invalid coordinate '{}'", i + 1, f),
            })?;
        }
        let difficulty = fields[9].parse::<u32>().map_err(|_| GeomError::Parse {
            line: lineno,
            msg: format!("field 10: invalid difficulty '{}'", fields[9]),
        })?;
        let pts = [
            [coords[0], coords[1]],
            [coords[2], coords[3]],
            [coords[4], coords[5]],
            [coords[6], coords[7]],
        ];
        let bbox = min_area_rect(&pts).ok_or(GeomError::DegeneratePolygon { line: lineno })?;
        out.push(DotaRecord {
            bbox,
            class_name: fields[8].to_string(),
            difficulty,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bx(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> OrientedBox {
        OrientedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn corners_axis_aligned() {
        let c = obb_to_corners(&bx(0.0, 0.0, 2.0, 1.0, 0.0));
        let expect = [[-1.0, -0.5], [1.0, -0.5], [1.0, 0.5], [-1.0, 0.5]];
        for (a, b) in c.iter().zip(expect.iter()) {
            assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
            assert_relative_eq!(a[1], b[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn corners_quarter_turn() {
        // (0,0,2,1,pi/2) normalizes to theta=-pi/2 (same line); its corner
        // set must equal that of (0,0,1,2,0).
        let a = obb_to_corners(&bx(0.0, 0.0, 2.0, 1.0, FRAC_PI_2));
        let b = obb_to_corners(&bx(0.0, 0.0, 1.0, 2.0, 0.0));
        let mut sa: Vec<(i64, i64)> = a
            .iter()
            .map(|p| ((p[0] * 1e6).round() as i64, (p[1] * 1e6).round() as i64))
            .collect();
        let mut sb: Vec<(i64, i64)> = b
            .iter()
            .map(|p| ((p[0] * 1e6).round() as i64, (p[1] * 1e6).round() as i64))
            .collect();
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
    }

    #[test]
    fn corners_centroid() {
        let b = bx(3.7, -1.2, 5.0, 2.0, 0.7);
        let c = obb_to_corners(&b);
        let mx: f64 = c.iter().map(|p| p[0]).sum::<f64>() / 4.0;
        let my: f64 = c.iter().map(|p| p[1]).sum::<f64>() / 4.0;
        assert_relative_eq!(mx, b.cx, epsilon = 1e-9);
        assert_relative_eq!(my, b.cy, epsilon = 1e-9);
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(10.0, 10.0, 6.0, 3.0, 0.4);
        assert_relative_eq!(rotated_iou(&a, &a), 1.0, epsilon = 1e-9);
        let b = bx(110.0, 10.0, 6.0, 3.0, -0.8);
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_rotated_square() {
        // Unit square vs itself rotated 45 degrees: analytic value
        // (2*(sqrt(2)-1)) / (2 - 2*(sqrt(2)-1)).
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2.0f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert_relative_eq!(rotated_iou(&a, &b), expect, epsilon = 1e-9);
        assert_relative_eq!(rotated_iou(&a, &b), 0.7071, epsilon = 1e-3);
    }

    #[test]
    fn transform_involutions() {
        let b = bx(40.0, 70.0, 8.0, 3.0, 0.3);
        let f = ViewTransform::vflip(256);
        let back = transform_box(&transform_box(&b, &f), &f);
        assert_relative_eq!(back.cx, b.cx, epsilon = 1e-9);
        assert_relative_eq!(back.cy, b.cy, epsilon = 1e-9);
        assert_relative_eq!(back.theta, b.theta, epsilon = 1e-9);

        let r = ViewTransform::rotate(FRAC_PI_2, 256);
        let ri = ViewTransform::rotate(-FRAC_PI_2, 256);
        let back = transform_box(&transform_box(&b, &r), &ri);
        assert_relative_eq!(back.cx, b.cx, epsilon = 1e-9);
        assert_relative_eq!(back.cy, b.cy, epsilon = 1e-9);
        assert_relative_eq!(back.w, b.w, epsilon = 1e-9);
        assert_relative_eq!(back.theta, b.theta, epsilon = 1e-9);
    }

    #[test]
    fn transform_resize() {
        let b = bx(10.0, 10.0, 4.0, 2.0, 0.3);
        let t = ViewTransform::resize(1.5, 256).unwrap();
        let o = transform_box(&b, &t);
        assert_relative_eq!(o.cx, 15.0);
        assert_relative_eq!(o.cy, 15.0);
        assert_relative_eq!(o.w, 6.0);
        assert_relative_eq!(o.h, 3.0);
        assert_relative_eq!(o.theta, 0.3);
        assert!(ViewTransform::resize(2.0, 256).is_err());
    }

    #[test]
    fn level_assignment() {
        let spec = PyramidSpec::standard();
        assert_eq!(assign_pyramid_level(56.0, 56.0, &spec).unwrap(), 0);
        assert_eq!(assign_pyramid_level(224.0, 224.0, &spec).unwrap(), 2);
        // raw = log2(60/56 + 1e-6) ~ 0.0995 -> level 0
        assert_eq!(assign_pyramid_level(40.0, 90.0, &spec).unwrap(), 0);
        assert!(assign_pyramid_level(0.0, 5.0, &spec).is_err());
    }

    #[test]
    fn level_monotone() {
        let spec = PyramidSpec::standard();
        let mut prev = 0usize;
        let mut s = 4.0;
        while s < 600.0 {
            let l = assign_pyramid_level(s, s, &spec).unwrap();
            assert!(l >= prev);
            prev = l;
            s *= 1.07;
        }
    }

    #[test]
    fn dota_exact_line() {
        let rec = DotaRecord {
            bbox: bx(0.0, 0.0, 2.0, 1.0, 0.0),
            class_name: "ship".into(),
            difficulty: 0,
        };
        let line = dota_encode(&[rec]);
        assert_eq!(
            line,
            "-1.000000 -0.500000 1.000000 -0.500000 1.000000 0.500000 -1.000000 0.500000 ship 0\n"
        );
    }

    #[test]
    fn dota_errors() {
        assert!(matches!(
            dota_decode("1 2 3\n"),
            Err(GeomError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            dota_decode("0 0 1 1 2 2 3 3 ship 0\n"),
            Err(GeomError::DegeneratePolygon { line: 1 })
        ));
        let bad = "0 0 10 0 10 5 0 5 ship 0\n0 0 x 0 10 5 0 5 car 1\n";
        match dota_decode(bad) {
            Err(GeomError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("field 3"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dota_roundtrip_simple() {
        let recs = vec![
            DotaRecord {
                bbox: bx(100.0, 80.0, 30.0, 12.0, 0.6),
                class_name: "c0".into(),
                difficulty: 0,
            },
            DotaRecord {
                bbox: bx(40.0, 220.0, 18.0, 9.0, -1.1),
                class_name: "c3".into(),
                difficulty: 1,
            },
        ];
        let back = dota_decode(&dota_encode(&recs)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(back.iter()) {
            assert!(rotated_iou(&a.bbox, &b.bbox) > 0.999);
            assert_eq!(a.class_name, b.class_name);
            assert_eq!(a.difficulty, b.difficulty);
        }
    }
}
