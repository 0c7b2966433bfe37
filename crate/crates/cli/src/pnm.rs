//! Binary graymap (P5) and pixmap (P6) writers with per-image min-max scaling.

use std::path::Path;

use anyhow::{ensure, Context, Result};

/// Maps `values` onto 0..=255; a constant image becomes all zeros.
pub fn min_max_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    ensure!(gray.len() == width * height, "graymap of {width}x{height} needs {} bytes, got {}", width * height, gray.len());
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    ensure!(rgb.len() == 3 * width * height, "pixmap of {width}x{height} needs {} bytes, got {}", 3 * width * height, rgb.len());
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Places equally tall panels left to right with a one-pixel gap.
/// Each panel is `(width, height, row-major values)` with `channels` per pixel.
pub fn side_by_side(panels: &[(usize, usize, Vec<u8>)], channels: usize) -> (usize, usize, Vec<u8>) {
    let height = panels.iter().map(|p| p.1).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.0).sum::<usize>() + panels.len().saturating_sub(1);
    let mut out = vec![0u8; width * height * channels];
    let mut x0 = 0;
    for (w, h, px) in panels {
        for y in 0..*h {
            let src = &px[y * w * channels..(y + 1) * w * channels];
            let dst = (y * width + x0) * channels;
            out[dst..dst + w * channels].copy_from_slice(src);
        }
        x0 += w + 1;
    }
    (width, height, out)
}
