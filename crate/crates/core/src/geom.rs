//! Pixel coordinates and binary maps shared by the generator, the cascade and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
}

impl Point {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// H×W grid of 0/1 values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w || data.iter().any(|&v| v > 1) {
            return Err(Error::Config(format!(
                "binary map {h}x{w} needs {} values in {{0,1}}",
                h * w
            )));
        }
        Ok(Self { h, w, data })
    }

    /// Ones at the given points (out-of-range points are ignored).
    pub fn from_points(h: usize, w: usize, points: &[Point]) -> Self {
        let mut m = Self::zeros(h, w);
        for p in points {
            if p.row < h && p.col < w {
                m.set(p.row, p.col, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.w + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.w + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn ones(&self) -> impl Iterator<Item = Point> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| Point::new(i / self.w, i % self.w))
    }

    /// Whether every 1 of `self` is also a 1 of `other`.
    pub fn is_subset_of(&self, other: &BinaryMap) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn check_same_dims(&self, other: &BinaryMap, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Config(format!(
                "{what}: maps of size {}x{} and {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }

    /// As a 1×1×H×W tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            crate::nn::Shape::new(1, 1, self.h, self.w),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("dims match")
    }
}

/// Single-channel f64 raster used while rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.w + c] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Replicates the plane into a 1×3×H×W tensor.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Tensor::from_vec(crate::nn::Shape::new(1, 3, self.h, self.w), data).expect("dims match")
    }
}

/// Normalized 1-D Gaussian taps of length `2·radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian smoothing of an H×W plane with replicated borders.
pub fn gaussian_smooth(plane: &[f64], h: usize, w: usize, sigma: f64, radius: usize) -> Vec<f64> {
    if sigma <= 0.0 || radius == 0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}
