//! PPM mosaics and CSV reports.

use std::path::Path;

use super::format::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Renders the first `rows·cols` images of an `[n, 3, h, w]` tensor as a binary
/// PPM (P6) mosaic. Each image is mapped linearly from its own min/max to
/// `[0, 255]`; a constant image maps to 128.
pub fn image_grid_ppm(images: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let (n, c, h, w) = images.nchw()?;
    if c != 3 {
        return Err(Error::config(format!("image grid needs RGB images, got {c} channels")));
    }
    if rows == 0 || cols == 0 || rows * cols > n {
        return Err(Error::config(format!("a {rows}x{cols} grid needs 1..={n} images")));
    }
    let (gw, gh) = (cols * w, rows * h);
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + gw * gh * 3, 0);
    let data = images.data();
    for idx in 0..rows * cols {
        let img = &data[idx * 3 * h * w..(idx + 1) * 3 * h * w];
        let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let map = |v: f32| -> u8 {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        };
        let (gy, gx) = (idx / cols, idx % cols);
        for y in 0..h {
            for x in 0..w {
                let px = header + ((gy * h + y) * gw + gx * w + x) * 3;
                for ch in 0..3 {
                    out[px + ch] = map(img[(ch * h + y) * w + x]);
                }
            }
        }
    }
    Ok(out)
}

pub fn export_image_grid(images: &Tensor, rows: usize, cols: usize, path: &Path) -> Result<()> {
    atomic_write(path, &image_grid_ppm(images, rows, cols)?)
}

/// Writes an RFC-4180 CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    atomic_write(path, &bytes)
}

/// Reads a CSV written by [`write_csv`], returning the header and records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
