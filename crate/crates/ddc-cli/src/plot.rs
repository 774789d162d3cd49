//! Plot artifacts: grayscale frame dumps and latent-map scatter plots.

use std::path::Path;

use ddc_core::env::Image;
use ddc_core::eval::LatentMapPoint;
use image::{GrayImage, Rgb, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encode: {0}")]
    Encode(#[from] image::ImageError),
}

/// Write a `[0,1]` grayscale image as an 8-bit PNG.
pub fn save_grayscale(img: &Image, path: &Path) -> Result<(), PlotError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let buf: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let gray = GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer matches dimensions");
    gray.save(path)?;
    Ok(())
}

/// Scatter plot of latent means, colored by the true state each latent came
/// from (red tracks the true x coordinate, green the true y), so topology
/// preservation is visible at a glance.
pub fn save_latent_map(
    points: &[LatentMapPoint],
    arena_size: f64,
    path: &Path,
) -> Result<(), PlotError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let side = 480u32;
    let mut canvas = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    if !points.is_empty() {
        let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            lo_x = lo_x.min(p.latent[0]);
            hi_x = hi_x.max(p.latent[0]);
            lo_y = lo_y.min(p.latent[1]);
            hi_y = hi_y.max(p.latent[1]);
        }
        let span_x = (hi_x - lo_x).max(1e-9);
        let span_y = (hi_y - lo_y).max(1e-9);
        let margin = 20.0;
        let scale = (side as f64 - 2.0 * margin) / span_x.max(span_y);
        for p in points {
            let px = margin + (p.latent[0] - lo_x) * scale;
            let py = margin + (p.latent[1] - lo_y) * scale;
            let color = Rgb([
                (p.state[0] / arena_size * 255.0).clamp(0.0, 255.0) as u8,
                (p.state[1] / arena_size * 255.0).clamp(0.0, 255.0) as u8,
                90,
            ]);
            let (cx, cy) = (px.round() as i64, py.round() as i64);
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    if dx * dx + dy * dy > 5 {
                        continue;
                    }
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as u32) < side && (y as u32) < side {
                        canvas.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_png_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(8, 8);
        img.pixels[12] = 1.0;
        let p1 = dir.path().join("frame.png");
        save_grayscale(&img, &p1).unwrap();
        assert!(p1.exists());
        let points = vec![
            LatentMapPoint {
                state: [5.0, 5.0],
                latent: vec![0.0, 0.0],
            },
            LatentMapPoint {
                state: [30.0, 30.0],
                latent: vec![1.0, 1.0],
            },
        ];
        let p2 = dir.path().join("map.png");
        save_latent_map(&points, 40.0, &p2).unwrap();
        assert!(p2.exists());
    }
}
