//! Procedural surface textures: multi-octave value noise blended with a soft checkerboard.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Size of one noise lattice cell at the base octave, in meters.
    pub noise_scale: f64,
    pub octaves: u32,
    /// Checkerboard cell size in meters.
    pub checker_size: f64,
    /// Blend factor of the checkerboard against the noise, in `[0, 1]`.
    pub checker_weight: f64,
    /// Edge sharpness of the checkerboard; small values give soft edges.
    #[serde(default = "default_sharpness")]
    pub checker_sharpness: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub seed: u64,
}

fn default_sharpness() -> f64 {
    1.5
}

impl TextureSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.noise_scale > 0.0 && self.checker_size > 0.0) {
            return Err("texture scales must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.checker_weight) {
            return Err("checker_weight must lie in [0, 1]".into());
        }
        let colors_ok = self
            .color_a
            .iter()
            .chain(&self.color_b)
            .all(|c| (0.0..=1.0).contains(c));
        if !colors_ok {
            return Err("texture colors must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Color at surface coordinates `(s, t)` in meters.
    pub fn color(&self, s: f64, t: f64) -> [f64; 3] {
        let mut noise = 0.0;
        let mut amp_sum = 0.0;
        let mut amp = 1.0;
        let mut freq = 1.0 / self.noise_scale;
        for o in 0..self.octaves.max(1) {
            noise += amp * value_noise(s * freq, t * freq, self.seed.wrapping_add(o as u64));
            amp_sum += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        noise /= amp_sum;

        let k = std::f64::consts::PI / self.checker_size;
        let checker = 0.5 + 0.5 * (self.checker_sharpness * (k * s).sin() * (k * t).sin()).tanh();
        let v = (1.0 - self.checker_weight) * noise + self.checker_weight * checker;
        // Second, decorrelated noise modulates saturation so surfaces are not one-dimensional in color.
        let tint = value_noise(s * 0.7 / self.noise_scale, t * 0.7 / self.noise_scale, !self.seed);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let base = self.color_a[c] + (self.color_b[c] - self.color_a[c]) * v;
            let grey = self.color_a.iter().chain(&self.color_b).sum::<f64>() / 6.0;
            out[c] = (base + 0.25 * (tint - 0.5) * (base - grey)).clamp(0.0, 1.0);
        }
        out
    }
}

fn hash(i: i64, j: i64, seed: u64) -> f64 {
    // splitmix64 over the packed lattice coordinates
    let mut z = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Lattice value noise in `[0, 1]` with C2 quintic interpolation.
pub fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (i, j) = (xf as i64, yf as i64);
    let (sx, sy) = (fade(x - xf), fade(y - yf));
    let a = hash(i, j, seed);
    let b = hash(i + 1, j, seed);
    let c = hash(i, j + 1, seed);
    let d = hash(i + 1, j + 1, seed);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}
