//! Minimal PNG line plots of metrics-log CSV files.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
}

const COLORS: [[u8; 3]; 8] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
    [140, 86, 75],
    [64, 64, 64],
];

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Render every numeric column of a metrics CSV (besides `epoch`/`step`)
/// as one polyline over the row index, and write a PNG.
pub fn plot_csv(csv_text: &str, out: &Path) -> Result<(), PlotError> {
    let mut lines = csv_text.lines();
    let header = lines.next().ok_or_else(|| PlotError::Csv("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let skip: Vec<bool> = columns.iter().map(|c| *c == "epoch" || *c == "step").collect();
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(PlotError::Csv(format!(
                "row {}: {} fields, expected {}",
                idx + 2,
                fields.len(),
                columns.len()
            )));
        }
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                PlotError::Csv(format!("row {}: bad number '{f}'", idx + 2))
            })?;
            series[k].push(v);
        }
    }
    let rows = series.first().map(|s| s.len()).unwrap_or(0);
    if rows == 0 {
        return Err(PlotError::Csv("no data rows".into()));
    }
    let (w, h) = (900u32, 540u32);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 40.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    // Value range over plotted series.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (k, s) in series.iter().enumerate() {
        if skip[k] {
            continue;
        }
        for v in s {
            if v.is_finite() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
    }
    if !lo.is_finite() || hi <= lo {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    let px = |t: f64| ml + t * (w as f64 - ml - mr);
    let py = |v: f64| (h as f64 - mb) - (v - lo) / span * (h as f64 - mt - mb);
    // Axes.
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, ml, mt, ml, h as f64 - mb, axis);
    draw_line(&mut img, ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    let mut color_idx = 0usize;
    for (k, s) in series.iter().enumerate() {
        if skip[k] {
            continue;
        }
        let color = Rgb(COLORS[color_idx % COLORS.len()]);
        color_idx += 1;
        for i in 1..rows {
            let t0 = (i - 1) as f64 / (rows - 1).max(1) as f64;
            let t1 = i as f64 / (rows - 1).max(1) as f64;
            if s[i - 1].is_finite() && s[i].is_finite() {
                draw_line(&mut img, px(t0), py(s[i - 1]), px(t1), py(s[i]), color);
            }
        }
        // Legend swatch.
        let ly = mt as u32 + 14 * color_idx as u32;
        for dx in 0..10u32 {
            for dy in 0..10u32 {
                img.put_pixel(w - mr as u32 - 120 + dx, ly + dy, color);
            }
        }
    }
    img.save(out).map_err(|e| PlotError::Image(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_roundtrip() {
        let csv = "epoch,step,L_mil_ori,miou\n0,10,1.5,0.2\n1,20,1.0,0.4\n2,30,0.7,0.55\n";
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plot.png");
        plot_csv(csv, &out).unwrap();
        let img = image::open(&out).unwrap().to_rgb8();
        assert_eq!(img.width(), 900);
        // Malformed rows carry positions.
        let err = plot_csv("a,b\n1\n", &out).unwrap_err();
        assert!(format!("{err}").contains("row 2"));
    }
}
