//! Volume density from multi-view feature statistics.
//!
//! The features a 3D sample picks up in every window frame are reduced to an
//! elementwise mean and variance (so view order never matters) and fed to a
//! small MLP, `2C -> 64 -> 64 -> 1`, ELU hidden activations and a softplus
//! output. Gradients are hand-written and checked against finite differences.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hidden width of the default head.
pub const HIDDEN: usize = 64;

/// Variance channels are scaled by this before entering the MLP; raw feature
/// variances are O(1e-3) and would otherwise be invisible next to the means.
pub const VARIANCE_GAIN: f64 = 100.0;

const MAGIC: &[u8; 4] = b"RSTD";
const FORMAT_VERSION: u32 = 1;

/// Writes `[mean, variance]` of the given views into `out` (length `2C`).
///
/// Each channel is summed in sorted order, so the result is bit-identical for
/// any permutation of `views`. Returns `false` (and leaves `out` zeroed) when
/// there are no views; callers then force the sample's density to zero.
pub fn aggregate_views(views: &[&[f32]], out: &mut [f64]) -> bool {
    out.fill(0.0);
    let c = out.len() / 2;
    if views.is_empty() {
        return false;
    }
    let n = views.len() as f64;
    let mut column: Vec<f64> = Vec::with_capacity(views.len());
    for ch in 0..c {
        column.clear();
        column.extend(views.iter().map(|v| v[ch] as f64));
        column.sort_by(f64::total_cmp);
        let mean = column.iter().sum::<f64>() / n;
        let var = column.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        out[ch] = mean;
        out[c + ch] = var;
    }
    true
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

#[inline]
fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// The trainable head. Parameters live in one flat vector ordered
/// `W1, b1, W2, b2, W3, b3` (weights row-major, one row per output unit),
/// which is also the on-disk order.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHead {
    channels: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    x: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    z3: f64,
}

/// Parameter and input gradients of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl DensityHead {
    pub fn param_count(channels: usize, hidden: usize) -> usize {
        let n_in = 2 * channels;
        hidden * n_in + hidden + hidden * hidden + hidden + hidden + 1
    }

    /// Glorot-uniform weights and zero biases.
    /// Values are rounded to `f32` so a freshly initialized head round-trips
    /// through the file format unchanged.
    pub fn init(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = 2 * channels;
        let mut params = Vec::with_capacity(Self::param_count(channels, hidden));
        let mut layer = |params: &mut Vec<f64>, fan_in: usize, fan_out: usize, bias: f64| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-a..a) as f32 as f64);
            }
            params.extend(std::iter::repeat_n(bias as f32 as f64, fan_out));
        };
        layer(&mut params, n_in, hidden, 0.0);
        layer(&mut params, hidden, hidden, 0.0);
        layer(&mut params, hidden, 1, 0.0);
        Self {
            channels,
            hidden,
            params,
        }
    }

    pub fn from_params(channels: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let want = Self::param_count(channels, hidden);
        if params.len() != want {
            return Err(Error::DimensionMismatch {
                expected: format!("{want} parameters"),
                actual: format!("{}", params.len()),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("density head parameters must be finite".into()));
        }
        Ok(Self {
            channels,
            hidden,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn input_len(&self) -> usize {
        2 * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn offsets(&self) -> [usize; 6] {
        let (n_in, h) = (self.input_len(), self.hidden);
        let w1 = 0;
        let b1 = w1 + h * n_in;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        [w1, b1, w2, b2, w3, b3]
    }

    #[inline]
    fn scale(&self, i: usize) -> f64 {
        if i < self.channels {
            1.0
        } else {
            VARIANCE_GAIN
        }
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)
    }

    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> f64 {
        debug_assert_eq!(input.len(), self.input_len());
        let (n_in, h) = (self.input_len(), self.hidden);
        let [w1, b1, w2, b2, w3, b3] = self.offsets();
        let p = &self.params;

        cache.x.clear();
        cache.x.extend(input.iter().enumerate().map(|(i, v)| v * self.scale(i)));
        cache.z1.resize(h, 0.0);
        cache.h1.resize(h, 0.0);
        for j in 0..h {
            let row = &p[w1 + j * n_in..w1 + (j + 1) * n_in];
            let z = p[b1 + j] + row.iter().zip(&cache.x).map(|(w, x)| w * x).sum::<f64>();
            cache.z1[j] = z;
            cache.h1[j] = elu(z);
        }
        cache.z2.resize(h, 0.0);
        cache.h2.resize(h, 0.0);
        for j in 0..h {
            let row = &p[w2 + j * h..w2 + (j + 1) * h];
            let z = p[b2 + j] + row.iter().zip(&cache.h1).map(|(w, x)| w * x).sum::<f64>();
            cache.z2[j] = z;
            cache.h2[j] = elu(z);
        }
        let z3 = p[b3] + p[w3..w3 + h].iter().zip(&cache.h2).map(|(w, x)| w * x).sum::<f64>();
        cache.z3 = z3;
        softplus(z3)
    }

    /// Accumulates `upstream * d sigma / d theta` into `grad_params` and
    /// returns `upstream * d sigma / d input`. `cache` must come from
    /// [`forward_cached`](Self::forward_cached) on the same input.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: f64, grad_params: &mut [f64]) -> Vec<f64> {
        let (n_in, h) = (self.input_len(), self.hidden);
        let [w1, b1, w2, b2, w3, b3] = self.offsets();
        let p = &self.params;

        let g3 = upstream * sigmoid(cache.z3);
        grad_params[b3] += g3;
        let mut gz2 = vec![0.0; h];
        for j in 0..h {
            grad_params[w3 + j] += g3 * cache.h2[j];
            gz2[j] = g3 * p[w3 + j] * elu_grad(cache.z2[j]);
        }
        let mut gh1 = vec![0.0; h];
        for j in 0..h {
            let g = gz2[j];
            grad_params[b2 + j] += g;
            if g == 0.0 {
                continue;
            }
            let row = w2 + j * h;
            for k in 0..h {
                grad_params[row + k] += g * cache.h1[k];
                gh1[k] += g * p[row + k];
            }
        }
        let mut gx = vec![0.0; n_in];
        for j in 0..h {
            let g = gh1[j] * elu_grad(cache.z1[j]);
            grad_params[b1 + j] += g;
            if g == 0.0 {
                continue;
            }
            let row = w1 + j * n_in;
            for k in 0..n_in {
                grad_params[row + k] += g * cache.x[k];
                gx[k] += g * p[row + k];
            }
        }
        for (i, g) in gx.iter_mut().enumerate() {
            *g *= self.scale(i);
        }
        gx
    }

    pub fn backward(&self, input: &[f64], upstream: f64) -> Gradients {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache);
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_into(&cache, upstream, &mut params);
        Gradients { params, input }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a density head file (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported head version {version}")));
        }
        let (channels, hidden) = (word(8) as usize, word(12) as usize);
        if channels == 0 || hidden == 0 || channels > 1 << 16 || hidden > 1 << 16 {
            return Err(Error::format(path, format!("implausible head shape C={channels} hidden={hidden}")));
        }
        let n = Self::param_count(channels, hidden);
        if bytes.len() != 16 + 4 * n {
            return Err(Error::format(
                path,
                format!("expected {} bytes for C={channels} hidden={hidden}, found {}", 16 + 4 * n, bytes.len()),
            ));
        }
        let params = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_params(channels, hidden, params).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Training-free density: `scale * exp(-k * mean(variance channels))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticHead {
    pub scale: f64,
    pub k: f64,
}

impl Default for AnalyticHead {
    fn default() -> Self {
        Self { scale: 5.0, k: 10.0 }
    }
}

impl AnalyticHead {
    pub fn sigma(&self, input: &[f64]) -> f64 {
        let c = input.len() / 2;
        let mean_var = input[c..].iter().sum::<f64>() / c as f64;
        self.scale * (-self.k * mean_var).exp()
    }
}

/// Whichever density head the renderer is given.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityModel {
    Analytic(AnalyticHead),
    Mlp(DensityHead),
}

impl Default for DensityModel {
    fn default() -> Self {
        DensityModel::Analytic(AnalyticHead::default())
    }
}

impl DensityModel {
    #[inline]
    pub fn sigma(&self, input: &[f64]) -> f64 {
        match self {
            DensityModel::Analytic(a) => a.sigma(input),
            DensityModel::Mlp(h) => h.forward(input),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DensityModel::Analytic(_) => "analytic",
            DensityModel::Mlp(_) => "mlp",
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Relative-error denominator floor: gradients smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-7;

/// Compares analytic parameter and input gradients of `sigma` with central
/// differences (step `h`) on `trials` randomly initialized heads and inputs.
pub fn gradcheck(trials: usize, h: f64, seed: u64, channels: usize, hidden: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..trials {
        let mut head = DensityHead::init(channels, hidden, rng.random());
        // Spread the output bias so both the linear and saturated parts of softplus are exercised.
        let last = head.params.len() - 1;
        head.params[last] = rng.random_range(-2.0..2.0);
        let input: Vec<f64> = (0..2 * channels)
            .map(|i| {
                if i < channels {
                    rng.random_range(-1.0..1.0)
                } else {
                    rng.random_range(0.0..0.02)
                }
            })
            .collect();
        let g = head.backward(&input, 1.0);
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR);

        for i in 0..head.params.len() {
            let orig = head.params[i];
            head.params[i] = orig + h;
            let fp = head.forward(&input);
            head.params[i] = orig - h;
            let fm = head.forward(&input);
            head.params[i] = orig;
            max_rel = max_rel.max(rel(g.params[i], (fp - fm) / (2.0 * h)));
            checked += 1;
        }
        // Input steps are taken in the units the first layer sees, so the
        // variance gain does not inflate the truncation error.
        let mut x = input.clone();
        for i in 0..x.len() {
            let hi = h / head.scale(i);
            let orig = x[i];
            x[i] = orig + hi;
            let fp = head.forward(&x);
            x[i] = orig - hi;
            let fm = head.forward(&x);
            x[i] = orig;
            max_rel = max_rel.max(rel(g.input[i], (fp - fm) / (2.0 * hi)));
            checked += 1;
        }
    }
    GradcheckReport {
        trials,
        checked,
        max_rel_error: max_rel,
    }
}

/// Optimizer and sampling settings for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Rays per iteration.
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning rate is multiplied by `decay_rate` every `decay_steps` iterations (continuously).
    pub decay_rate: f64,
    pub decay_steps: usize,
    /// Stratified depth samples per training ray.
    pub samples: usize,
    /// Training rays are sampled within `mean * (1 -+ range_scale)` at least, so
    /// the head sees samples off the surface.
    pub range_scale: f64,
    /// Rays in the pre-gathered training pool.
    pub pool_rays: usize,
    /// Fixed rays on which the loss curve is measured.
    pub eval_rays: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            learning_rate: 5e-4,
            batch: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_rate: 0.1,
            decay_steps: 10_000,
            samples: 8,
            range_scale: 0.5,
            pool_rays: 16_384,
            eval_rays: 1024,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch == 0 || self.pool_rays == 0 || self.eval_rays == 0 || self.samples == 0 {
            return Err(Error::Config("batch and pool sizes must be at least 1".into()));
        }
        if !(self.decay_rate > 0.0) || self.decay_steps == 0 {
            return Err(Error::Config("decay rate and steps must be positive".into()));
        }
        if !(self.range_scale >= 0.0) {
            return Err(Error::Config("range scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.decay_rate.powf(iteration as f64 / self.decay_steps as f64)
    }
}

/// Loss measured on the fixed evaluation rays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: DensityHead,
    /// Evaluation loss at iteration 0 and every 100 iterations, plus the final iteration.
    pub curve: Vec<LossPoint>,
}

/// Fits the head by minimizing the squared color error of rendered training
/// rays against ground truth, with Adam and exponential decay.
pub fn train(
    head: DensityHead,
    pool: &crate::renderer::TrainingPool,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pool.input_len() != head.input_len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}-dimensional inputs", head.input_len()),
            actual: format!("{}", pool.input_len()),
        });
    }
    let mut head = head;
    let mut adam = Adam::new(head.params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut grad = vec![0.0; head.params.len()];
    let mut curve = Vec::new();
    let n_train = pool.train_len();
    if n_train == 0 {
        return Err(Error::Degenerate("no usable training rays".into()));
    }

    for it in 0..cfg.iterations {
        if it % 100 == 0 {
            let loss = pool.eval_loss(&head);
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it, loss });
            }
            curve.push(LossPoint { iteration: it, loss });
        }
        grad.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let r = rng.random_range(0..n_train);
            loss += pool.ray_loss_grad(&head, r, &mut grad);
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss });
        }
        let inv = 1.0 / cfg.batch as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        adam.step(&mut head.params, &grad, cfg.lr_at(it));
        if head.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss });
        }
    }
    head.round_to_f32();
    let loss = pool.eval_loss(&head);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iteration: cfg.iterations,
            loss,
        });
    }
    if curve.last().map(|p| p.iteration) != Some(cfg.iterations) {
        curve.push(LossPoint {
            iteration: cfg.iterations,
            loss,
        });
    }
    Ok(TrainOutcome { head, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn aggregate_examples() {
        let f = [0.5f32, -1.0, 2.0];
        let mut out = vec![0.0; 6];
        assert!(aggregate_views(&[&f, &f, &f], &mut out));
        assert_eq!(&out[..3], &[0.5, -1.0, 2.0]);
        assert_eq!(&out[3..], &[0.0; 3]);

        let g = [-0.5f32, 1.0, -2.0];
        aggregate_views(&[&f, &g], &mut out);
        assert_eq!(&out[..3], &[0.0; 3]);
        assert_eq!(&out[3..], &[0.25, 1.0, 4.0]);

        assert!(!aggregate_views(&[], &mut out));
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let views: Vec<Vec<f32>> = (0..13).map(|_| (0..11).map(|_| rng.random::<f32>()).collect()).collect();
        let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
        let mut a = vec![0.0; 22];
        aggregate_views(&refs, &mut a);
        for _ in 0..20 {
            let mut shuffled = refs.clone();
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let mut b = vec![0.0; 22];
            aggregate_views(&shuffled, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_weights_give_softplus_of_bias() {
        let mut head = DensityHead::init(11, HIDDEN, 1);
        head.params.fill(0.0);
        let b = 0.7;
        *head.params.last_mut().unwrap() = b;
        let x = vec![0.3; 22];
        assert_abs_diff_eq!(head.forward(&x), (1.0 + b.exp()).ln(), epsilon = 1e-15);
    }

    #[test]
    fn sigma_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut head = DensityHead::init(11, 16, 5);
        for _ in 0..10_000 {
            for p in head.params.iter_mut() {
                *p = rng.random_range(-3.0..3.0);
            }
            let x: Vec<f64> = (0..22).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s = head.forward(&x);
            assert!(s >= 0.0 && s.is_finite());
        }
    }

    /// Straight-line re-evaluation of the network, written independently of the
    /// row-slice arithmetic in `forward_cached`.
    fn oracle_forward(head: &DensityHead, x: &[f64]) -> f64 {
        let (c, h) = (head.channels, head.hidden);
        let n = 2 * c;
        let p = &head.params;
        let mut idx = 0;
        let mut take = |k: usize| {
            let s = p[idx..idx + k].to_vec();
            idx += k;
            s
        };
        let w1 = take(h * n);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(h);
        let b3 = take(1)[0];
        let xs: Vec<f64> = (0..n).map(|i| if i < c { x[i] } else { 100.0 * x[i] }).collect();
        let act = |z: f64| if z > 0.0 { z } else { z.exp() - 1.0 };
        let mut h1 = vec![0.0; h];
        for j in 0..h {
            let mut z = b1[j];
            for i in 0..n {
                z += w1[j * n + i] * xs[i];
            }
            h1[j] = act(z);
        }
        let mut h2 = vec![0.0; h];
        for j in 0..h {
            let mut z = b2[j];
            for i in 0..h {
                z += w2[j * h + i] * h1[i];
            }
            h2[j] = act(z);
        }
        let mut z = b3;
        for j in 0..h {
            z += w3[j] * h2[j];
        }
        (1.0 + z.exp()).ln()
    }

    #[test]
    fn forward_matches_oracle() {
        let head = DensityHead::init(11, HIDDEN, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let x: Vec<f64> = (0..22).map(|_| rng.random_range(0.0..1.0) * 0.1).collect();
            assert_abs_diff_eq!(head.forward(&x), oracle_forward(&head, &x), epsilon = 1e-12);
        }
    }

    #[test]
    fn gradcheck_passes() {
        let r = gradcheck(10, 1e-4, 9, 11, HIDDEN);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let head = DensityHead::init(11, HIDDEN, 4);
        let g = head.backward(&[0.1; 22], 0.0);
        assert!(g.params.iter().chain(&g.input).all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_softplus_has_vanishing_gradient() {
        let mut head = DensityHead::init(11, 8, 4);
        *head.params.last_mut().unwrap() = -60.0;
        let g = head.backward(&[0.1; 22], 1.0);
        assert!(g.params.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn serialization_round_trip() {
        let head = DensityHead::init(11, HIDDEN, 8);
        let bytes = head.to_bytes();
        assert_eq!(&bytes[..4], b"RSTD");
        assert_eq!(bytes.len(), 16 + 4 * DensityHead::param_count(11, HIDDEN));
        let back = DensityHead::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, head);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DensityHead::from_bytes(&bad, Path::new("x")).is_err());
        assert!(DensityHead::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn adam_with_zero_rate_is_a_no_op() {
        let mut p = vec![0.5, -0.25];
        let mut a = Adam::new(2, 0.9, 0.999, 1e-8);
        a.step(&mut p, &[1.0, -3.0], 0.0);
        assert_eq!(p, vec![0.5, -0.25]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut a = Adam::new(1, 0.9, 0.999, 1e-8);
        a.step(&mut p, &[4.0], 0.01);
        assert_abs_diff_eq!(p[0], -0.01, epsilon = 1e-9);
    }

    #[test]
    fn analytic_head() {
        let a = AnalyticHead::default();
        assert_abs_diff_eq!(a.sigma(&[0.3, 0.4, 0.0, 0.0]), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.sigma(&[0.3, 0.4, 0.1, 0.3]), 5.0 * (-2.0f64).exp(), epsilon = 1e-15);
    }
}
