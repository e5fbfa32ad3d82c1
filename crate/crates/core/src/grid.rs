//! Dense row-major multi-channel rasters.
//!
//! Every per-pixel quantity in the pipeline (images, depth, flow, feature
//! maps) is a [`Grid`]. Pixel `(x, y)` has its center at continuous
//! coordinate `(u, v) = (x, y)`.

use crate::error::{Error, Result};
use crate::geometry::SubPixel;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

/// RGB image with values in `[0, 1]`.
pub type Image = Grid;
/// Single-channel depth map in meters.
pub type DepthMap = Grid;
/// Two-channel `(du, dv)` displacement field in pixels.
pub type FlowField = Grid;

impl Grid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{width}x{height}x{channels} = {}", width * height * channels),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, out)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [f32]),
    ) -> Self {
        let mut grid = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                f(x, y, grid.pixel_mut(x, y));
            }
        }
        grid
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn same_size(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Rows of pixels, each `width * channels` values long.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.width * self.channels)
    }

    /// True when a bilinear read at `(u, v)` only touches in-bounds texels.
    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Bilinear read into `out` (length = channel count).
    ///
    /// Returns `false` when any texel with nonzero weight lies outside the
    /// grid; `out` then holds zeros. No clamping is performed.
    #[inline]
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f32]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        if !self.contains(u, v) {
            out.fill(0.0);
            return false;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let ax = (u - x0 as f64) as f32;
        let ay = (v - y0 as f64) as f32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let w00 = (1.0 - ax) * (1.0 - ay);
        let w10 = ax * (1.0 - ay);
        let w01 = (1.0 - ax) * ay;
        let w11 = ax * ay;
        let c = self.channels;
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        let p00 = &self.data[(row0 + x0) * c..(row0 + x0 + 1) * c];
        let p10 = &self.data[(row0 + x1) * c..(row0 + x1 + 1) * c];
        let p01 = &self.data[(row1 + x0) * c..(row1 + x0 + 1) * c];
        let p11 = &self.data[(row1 + x1) * c..(row1 + x1 + 1) * c];
        for k in 0..c {
            out[k] = w00 * p00[k] + w10 * p10[k] + w01 * p01[k] + w11 * p11[k];
        }
        true
    }

    /// True inside the area covered by the pixels (centers at integers).
    #[inline]
    pub fn in_footprint(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u <= self.width as f64 - 0.5 && v <= self.height as f64 - 0.5
    }

    /// Bilinear read that accepts any point inside the area covered by the
    /// pixels, `[-0.5, W - 0.5] x [-0.5, H - 0.5]`. Points in the outer
    /// half-pixel band read the clamped border.
    #[inline]
    pub fn sample_footprint_into(&self, u: f64, v: f64, out: &mut [f32]) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        if !self.in_footprint(u, v) {
            out.fill(0.0);
            return false;
        }
        self.sample_into(u.clamp(0.0, w - 1.0), v.clamp(0.0, h - 1.0), out)
    }

    /// Allocating convenience wrapper around [`Grid::sample_into`].
    pub fn sample(&self, at: SubPixel) -> (Vec<f32>, bool) {
        let mut out = vec![0.0; self.channels];
        let valid = self.sample_into(at.u, at.v, &mut out);
        (out, valid)
    }

    /// Copies one channel out as a single-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        Grid::from_fn(self.width, self.height, 1, |x, y, out| out[0] = self.at(x, y, c))
    }

    /// Horizontal mirror image.
    pub fn flip_horizontal(&self) -> Grid {
        Grid::from_fn(self.width, self.height, self.channels, |x, y, out| {
            out.copy_from_slice(self.pixel(self.width - 1 - x, y))
        })
    }
}
