//! Netpbm renderings: grayscale heatmaps and bar charts.

use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::feature_saliency::SaliencyMap;

/// Binary PGM of `s` scaled so its maximum is white; each cell becomes a
/// `scale`×`scale` block.
pub fn heatmap_pgm(s: &SaliencyMap, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (h, w) = (s.height(), s.width());
    let max = s.max();
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for r in 0..h {
        let row: Vec<u8> = (0..w)
            .flat_map(|c| {
                let v = s.values()[r * w + c];
                let g = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
                std::iter::repeat_n(g, scale)
            })
            .collect();
        for _ in 0..scale {
            out.extend_from_slice(&row);
        }
    }
    out
}

pub fn save_heatmap(s: &SaliencyMap, scale: usize, path: &Path) -> Result<()> {
    binio::write_atomic(path, &heatmap_pgm(s, scale))
}

/// Binary PPM bar chart of values in [0, 1]: one bar per value, `bar` pixels
/// wide, on a white background.
pub fn bar_chart_ppm(values: &[f64], bar: usize, height: usize) -> Result<Vec<u8>> {
    if values.is_empty() || bar == 0 || height == 0 {
        return Err(Error::InvalidParameter("bar chart needs values and positive size".into()));
    }
    let gap = (bar / 4).max(1);
    let width = values.len() * (bar + gap) + gap;
    let mut px = vec![255u8; width * height * 3];
    for (i, &v) in values.iter().enumerate() {
        let filled = (v.clamp(0.0, 1.0) * height as f64).round() as usize;
        let x0 = gap + i * (bar + gap);
        for y in height - filled..height {
            for x in x0..x0 + bar {
                let o = (y * width + x) * 3;
                px[o..o + 3].copy_from_slice(&[40, 90, 170]);
            }
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn save_bar_chart(values: &[f64], path: &Path) -> Result<()> {
    binio::write_atomic(path, &bar_chart_ppm(values, 16, 120)?)
}
