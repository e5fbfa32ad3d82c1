//! Per-frame descriptor maps sampled during multi-view aggregation.

use crate::grid::{Grid, Image};

/// Per-pixel descriptors, `H x W x C`.
pub type FeatureMap = Grid;

/// Channel count of [`HandcraftedExtractor`].
pub const FEATURE_CHANNELS: usize = 11;

/// Anything that turns an RGB frame into a descriptor map.
pub trait FeatureExtractor: Send + Sync {
    fn channels(&self) -> usize;
    fn extract(&self, image: &Image) -> FeatureMap;
}

/// Fixed local descriptor:
///
/// | channels | content |
/// |----------|---------|
/// | 0..3 | RGB |
/// | 3 | luma |
/// | 4, 5 | Sobel `gx`, `gy` of luma (divided by 8, i.e. per-pixel slope) |
/// | 6, 7 | 3x3 luma mean and standard deviation |
/// | 8..11 | luma, `gx`, `gy` at half resolution, bilinearly upsampled |
///
/// Borders replicate the nearest pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct HandcraftedExtractor;

impl FeatureExtractor for HandcraftedExtractor {
    fn channels(&self) -> usize {
        FEATURE_CHANNELS
    }

    fn extract(&self, image: &Image) -> FeatureMap {
        extract_features(image)
    }
}

fn luma(image: &Image) -> Grid {
    Grid::from_fn(image.width(), image.height(), 1, |x, y, out| {
        let p = image.pixel(x, y);
        out[0] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    })
}

#[inline]
fn clamped(g: &Grid, x: isize, y: isize) -> f32 {
    let xi = x.clamp(0, g.width() as isize - 1) as usize;
    let yi = y.clamp(0, g.height() as isize - 1) as usize;
    g.at(xi, yi, 0)
}

fn sobel(g: &Grid) -> (Grid, Grid) {
    let gx = Grid::from_fn(g.width(), g.height(), 1, |x, y, out| {
        let (x, y) = (x as isize, y as isize);
        let right = clamped(g, x + 1, y - 1) + 2.0 * clamped(g, x + 1, y) + clamped(g, x + 1, y + 1);
        let left = clamped(g, x - 1, y - 1) + 2.0 * clamped(g, x - 1, y) + clamped(g, x - 1, y + 1);
        out[0] = (right - left) / 8.0;
    });
    let gy = Grid::from_fn(g.width(), g.height(), 1, |x, y, out| {
        let (x, y) = (x as isize, y as isize);
        let down = clamped(g, x - 1, y + 1) + 2.0 * clamped(g, x, y + 1) + clamped(g, x + 1, y + 1);
        let up = clamped(g, x - 1, y - 1) + 2.0 * clamped(g, x, y - 1) + clamped(g, x + 1, y - 1);
        out[0] = (down - up) / 8.0;
    });
    (gx, gy)
}

fn downsample(g: &Grid) -> Grid {
    let w = g.width().div_ceil(2);
    let h = g.height().div_ceil(2);
    Grid::from_fn(w, h, 1, |x, y, out| {
        let mut acc = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                acc += clamped(g, (2 * x + dx) as isize, (2 * y + dy) as isize);
            }
        }
        out[0] = acc / 4.0;
    })
}

/// Half-resolution sample for full-resolution pixel `x`, pixel centers aligned.
fn upsample_at(g: &Grid, x: usize, y: usize) -> f32 {
    let u = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (g.width() - 1) as f64);
    let v = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (g.height() - 1) as f64);
    let mut out = [0.0f32];
    g.sample_into(u, v, &mut out);
    out[0]
}

pub fn extract_features(image: &Image) -> FeatureMap {
    let (w, h) = (image.width(), image.height());
    let l = luma(image);
    let (gx, gy) = sobel(&l);
    let half = downsample(&l);
    let (hgx, hgy) = sobel(&half);

    Grid::from_fn(w, h, FEATURE_CHANNELS, |x, y, out| {
        out[..3].copy_from_slice(image.pixel(x, y));
        out[3] = l.at(x, y, 0);
        out[4] = gx.at(x, y, 0);
        out[5] = gy.at(x, y, 0);
        let (mut sum, mut sq) = (0.0f32, 0.0f32);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let s = clamped(&l, x as isize + dx, y as isize + dy);
                sum += s;
                sq += s * s;
            }
        }
        let mean = sum / 9.0;
        out[6] = mean;
        out[7] = (sq / 9.0 - mean * mean).max(0.0).sqrt();
        out[8] = upsample_at(&half, x, y);
        out[9] = upsample_at(&hgx, x, y);
        out[10] = upsample_at(&hgy, x, y);
    })
}
