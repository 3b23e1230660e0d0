//! PNG import/export for images, heatmaps and prediction overlays.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geom::{BinaryMap, Point};
use crate::nn::Shape;
use crate::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a 1×3×H×W tensor with values in [0, 1] as 8-bit RGB.
pub fn write_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Config(format!("expected a 1×3×H×W image, got {s}")));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| quantize(image.at(0, c, y, x))))
    });
    img.save(path).map_err(img_err(path))
}

/// Reads an 8-bit PNG into a 1×3×H×W tensor scaled by 1/255.
pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(img_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Writes channel 0 of sample 0 as an 8-bit grayscale PNG, clamping to [0, 1].
pub fn write_heatmap_png(path: &Path, heatmap: &Tensor) -> Result<()> {
    let s = heatmap.shape();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
            Luma([quantize(heatmap.at(0, 0, y as usize, x as usize))])
        });
    img.save(path).map_err(img_err(path))
}

pub fn write_binary_png(path: &Path, map: &BinaryMap) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
            Luma([if map.get(y as usize, x as usize) { 255 } else { 0 }])
        });
    img.save(path).map_err(img_err(path))
}

/// Marker style for [`overlay`].
#[derive(Clone, Copy, Debug)]
pub enum Marker {
    /// Upward triangle whose apex sits on the point.
    Up([u8; 3]),
    /// Downward triangle whose apex sits on the point.
    Down([u8; 3]),
}

pub const GT_MARKER: Marker = Marker::Up([230, 30, 30]);
pub const ESD_MARKER: Marker = Marker::Down([30, 210, 30]);
pub const HSD_MARKER: Marker = Marker::Down([240, 220, 20]);

/// Renders `image` upscaled by `scale` with a triangle marker per point.
pub fn overlay(image: &Tensor, scale: u32, layers: &[(Marker, &[Point])]) -> RgbImage {
    let s = image.shape();
    let scale = scale.max(1);
    let mut img = RgbImage::from_fn(s.w as u32 * scale, s.h as u32 * scale, |x, y| {
        let (x, y) = ((x / scale) as usize, (y / scale) as usize);
        let c = |ch: usize| quantize(image.at(0, ch.min(s.c - 1), y, x));
        Rgb([c(0), c(1), c(2)])
    });
    let size = 3 * scale as i64;
    for (marker, points) in layers {
        let (color, dir) = match marker {
            Marker::Up(c) => (*c, 1i64),
            Marker::Down(c) => (*c, -1i64),
        };
        for p in points.iter() {
            let ax = p.col as i64 * scale as i64 + scale as i64 / 2;
            let ay = p.row as i64 * scale as i64 + scale as i64 / 2;
            for dy in 0..=size {
                let half = dy / 2;
                for dx in -half..=half {
                    let (x, y) = (ax + dx, ay + dir * dy);
                    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                        img.put_pixel(x as u32, y as u32, Rgb(color));
                    }
                }
            }
        }
    }
    img
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(img_err(path))
}
