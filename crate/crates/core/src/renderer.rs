//! Stabilized rendering.
//!
//! For each pixel of a target (smoothed) camera, a few depths are sampled
//! inside the pixel's ray range. Every sample is projected into the window
//! frames: features are read at the geometric projections and feed the
//! density head, colors are read at flow-corrected positions (or the
//! geometric ones with color correction off) and blended. The samples are
//! then alpha-composited front to back and normalized by the accumulated
//! weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, FrameBundle, Scene};
use crate::density::{aggregate_views, DensityHead, DensityModel, ForwardCache};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureMap, HandcraftedExtractor};
use crate::geometry::{Pose, Projector, SubPixel};
use crate::grid::{Grid, Image};
use crate::metrics;
use crate::rayrange::{
    ray_range_for_view, temporal_weights, RayRangeMap, SplatMode, SpreadFloor, TemporalWeights,
};
use crate::trajectory::{smooth_trajectory, PoseSequence};

/// Rendering knobs. Defaults follow the paper's implementation details
/// (13-frame window, 3 samples per ray, lambda = 0.5).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub window: usize,
    pub samples: usize,
    pub lambda: f64,
    /// Use `exp(lambda (t - T))` temporal weights instead of the symmetric form.
    pub literal_weights: bool,
    /// Feature-affinity sharpness of the color blend.
    pub gamma: f64,
    pub floor: SpreadFloor,
    /// Pixels with accumulated weight at or below this are background.
    pub eps_w: f64,
    pub splat: SplatMode,
    /// Even sampling over the global depth range instead of ray ranges.
    pub no_arr: bool,
    /// Read colors at geometric projections.
    pub no_cc: bool,
    /// Plain average of the window frames warped at the mean depth.
    pub blend_only: bool,
    /// Samples per ray when `no_arr` is set.
    pub even_samples: usize,
    pub background: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            window: 13,
            samples: 3,
            lambda: 0.5,
            literal_weights: false,
            gamma: 1.0,
            floor: SpreadFloor::default(),
            eps_w: 1e-3,
            splat: SplatMode::Average,
            no_arr: false,
            no_cc: false,
            blend_only: false,
            even_samples: 128,
            background: 0.5,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.samples == 0 || self.even_samples == 0 {
            return Err(Error::Config("window and sample counts must be at least 1".into()));
        }
        if !self.lambda.is_finite() || !(self.gamma >= 0.0) || !(self.eps_w >= 0.0) {
            return Err(Error::Config("lambda must be finite, gamma and eps_w non-negative".into()));
        }
        match self.floor {
            SpreadFloor::Absolute(s) | SpreadFloor::Relative(s) if !(s >= 0.0) => {
                Err(Error::Config("s_min must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// The frames fused for one output frame. Indices are 0-based positions in the sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub center: usize,
    pub members: Vec<usize>,
}

impl WindowSpec {
    /// `size` frames centered on `center`, truncated at the sequence ends.
    pub fn clamped(center: usize, size: usize, len: usize) -> Result<Self> {
        if size == 0 || center >= len {
            return Err(Error::Contract(format!(
                "window of size {size} around frame {center} in a sequence of {len}"
            )));
        }
        let lo = center.saturating_sub((size - 1) / 2);
        let hi = (center + size / 2).min(len - 1);
        Ok(Self {
            center,
            members: (lo..=hi).collect(),
        })
    }

    /// The same window without its center frame.
    pub fn leave_center_out(&self) -> Self {
        Self {
            center: self.center,
            members: self.members.iter().copied().filter(|m| *m != self.center).collect(),
        }
    }
}

/// `L` evenly spaced depths in `[near, far]`, endpoints included; the midpoint when `L = 1`.
pub fn sample_depths(near: f64, far: f64, samples: usize) -> Vec<f64> {
    match samples {
        0 => Vec::new(),
        1 => vec![0.5 * (near + far)],
        l => (0..l)
            .map(|i| near + (far - near) * i as f64 / (l - 1) as f64)
            .collect(),
    }
}

/// Follows the consecutive-frame flows from `x` in frame `from` to frame `to`
/// (0-based). `None` if an intermediate position leaves the area covered by
/// the image's pixels.
pub fn flow_correct(x: SubPixel, from: usize, to: usize, frames: &[FrameBundle]) -> Option<SubPixel> {
    let mut p = x;
    let mut f = [0.0f32; 2];
    if to > from {
        for s in from..to {
            let flow = frames[s].flow_to_next.as_ref()?;
            if !flow.sample_footprint_into(p.u, p.v, &mut f) {
                return None;
            }
            p = SubPixel::new(p.u + f[0] as f64, p.v + f[1] as f64);
        }
    } else {
        for s in (to + 1..=from).rev() {
            let flow = frames[s].flow_to_prev.as_ref()?;
            if !flow.sample_footprint_into(p.u, p.v, &mut f) {
                return None;
            }
            p = SubPixel::new(p.u + f[0] as f64, p.v + f[1] as f64);
        }
    }
    Some(p)
}

/// Fills `out[t - lo]` with the flow-corrected position of `x` in every
/// frame `t` of `lo..=hi`, walking outward from `center` once.
fn flow_chain(x: SubPixel, center: usize, lo: usize, frames: &[FrameBundle], out: &mut [Option<SubPixel>]) {
    let hi = lo + out.len() - 1;
    let mut f = [0.0f32; 2];
    out[center - lo] = Some(x);
    let mut p = Some(x);
    for s in center..hi {
        p = p.and_then(|q| {
            let flow = frames[s].flow_to_next.as_ref()?;
            flow.sample_footprint_into(q.u, q.v, &mut f)
                .then(|| SubPixel::new(q.u + f[0] as f64, q.v + f[1] as f64))
        });
        out[s + 1 - lo] = p;
    }
    let mut p = Some(x);
    for s in (lo + 1..=center).rev() {
        p = p.and_then(|q| {
            let flow = frames[s].flow_to_prev.as_ref()?;
            flow.sample_footprint_into(q.u, q.v, &mut f)
                .then(|| SubPixel::new(q.u + f[0] as f64, q.v + f[1] as f64))
        });
        out[s - 1 - lo] = p;
    }
}

/// Blend weights `tw_t * exp(-gamma |f_t - mean|^2)` over the views with
/// `Some` color, normalized. `mean` is the feature mean the density head saw.
pub fn blend_weights(
    temporal: &[f64],
    features: &[&[f32]],
    mean: &[f64],
    usable: &[bool],
    gamma: f64,
) -> Vec<f64> {
    let mut w: Vec<f64> = (0..temporal.len())
        .map(|k| {
            if !usable[k] {
                return 0.0;
            }
            let dist2: f64 = features[k]
                .iter()
                .zip(mean)
                .map(|(f, m)| (*f as f64 - m) * (*f as f64 - m))
                .sum();
            temporal[k] * (-gamma * dist2).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|v| *v /= sum);
    } else {
        // Every usable temporal weight underflowed; fall back to uniform.
        let n = usable.iter().filter(|u| **u).count() as f64;
        for (v, u) in w.iter_mut().zip(usable) {
            *v = if *u { 1.0 / n } else { 0.0 };
        }
    }
    w
}

/// Convex combination of the valid colors. The feature mean is taken over
/// all views that have a feature. `None` when no view has both a color and a feature.
pub fn blend_color(
    colors: &[Option<[f64; 3]>],
    features: &[Option<&[f32]>],
    temporal: &[f64],
    gamma: f64,
) -> Option<[f64; 3]> {
    let with_features: Vec<&[f32]> = features.iter().flatten().copied().collect();
    let c = with_features.first()?.len();
    let mut mean = vec![0.0; c];
    for f in &with_features {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= with_features.len() as f64);
    let usable: Vec<bool> = colors.iter().zip(features).map(|(c, f)| c.is_some() && f.is_some()).collect();
    if !usable.iter().any(|u| *u) {
        return None;
    }
    let empty = vec![0.0f32; c];
    let feats: Vec<&[f32]> = features.iter().map(|f| f.unwrap_or(&empty)).collect();
    let w = blend_weights(temporal, &feats, &mean, &usable, gamma);
    let mut out = [0.0; 3];
    for (wk, col) in w.iter().zip(colors) {
        if let Some(col) = col {
            for ch in 0..3 {
                out[ch] += wk * col[ch];
            }
        }
    }
    Some(out)
}

/// Compositing weights `w_i = A_i (1 - exp(-sigma_i))`, `A_i = exp(-sum_{j<i} sigma_j)`.
pub fn composite_weights(sigmas: &[f64]) -> Vec<f64> {
    let mut prefix = 0.0f64;
    sigmas
        .iter()
        .map(|s| {
            let w = (-prefix).exp() * -(-s).exp_m1();
            prefix += s;
            w
        })
        .collect()
}

/// Transmittance before each sample.
pub fn transmittance(sigmas: &[f64]) -> Vec<f64> {
    let mut prefix = 0.0f64;
    sigmas
        .iter()
        .map(|s| {
            let a = (-prefix).exp();
            prefix += s;
            a
        })
        .collect()
}

/// Front-to-back compositing. Returns the unnormalized color and the total weight.
pub fn composite(sigmas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], f64) {
    let w = composite_weights(sigmas);
    let mut c = [0.0; 3];
    for (wi, ci) in w.iter().zip(colors) {
        for k in 0..3 {
            c[k] += wi * ci[k];
        }
    }
    (c, w.iter().sum())
}

/// Gradient of a loss with respect to the densities, given its gradients
/// with respect to the composited color and total weight.
pub fn composite_backward(sigmas: &[f64], colors: &[[f64; 3]], d_color: [f64; 3], d_weight: f64) -> Vec<f64> {
    let w = composite_weights(sigmas);
    let a = transmittance(sigmas);
    let g: Vec<f64> = colors
        .iter()
        .map(|c| d_color[0] * c[0] + d_color[1] * c[1] + d_color[2] * c[2] + d_weight)
        .collect();
    let n = sigmas.len();
    let mut out = vec![0.0; n];
    let mut tail = 0.0;
    for k in (0..n).rev() {
        out[k] = g[k] * a[k] * (-sigmas[k]).exp() - tail;
        tail += g[k] * w[k];
    }
    out
}

/// Input frames with their feature maps.
pub struct SourceFrames<'a> {
    pub dataset: &'a Dataset,
    pub features: Vec<FeatureMap>,
    pub depth_bounds: (f64, f64),
}

impl<'a> SourceFrames<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self::with_extractor(dataset, &HandcraftedExtractor)
    }

    pub fn with_extractor(dataset: &'a Dataset, extractor: &dyn FeatureExtractor) -> Self {
        let features = dataset.frames.par_iter().map(|f| extractor.extract(&f.image)).collect();
        Self {
            dataset,
            features,
            depth_bounds: dataset.depth_bounds(),
        }
    }

    pub fn channels(&self) -> usize {
        self.features.first().map_or(0, |f| f.channels())
    }

    pub fn frames(&self) -> &[FrameBundle] {
        &self.dataset.frames
    }
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    /// Accumulated compositing weight per pixel.
    pub weight: Vec<f64>,
    /// `weight > eps_w`.
    pub valid: Vec<bool>,
}

/// What the window frames contribute at one 3D sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatheredSample {
    /// False when no frame saw the sample; its density is forced to zero.
    pub has_features: bool,
    /// `None` when no frame has both a feature and a color for it.
    pub color: Option<[f64; 3]>,
}

/// Reusable per-thread buffers.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    feats: Vec<f32>,
    fvalid: Vec<bool>,
    colors: Vec<[f32; 3]>,
    cvalid: Vec<bool>,
    chain: Vec<Option<SubPixel>>,
    /// Aggregated head input of the last gathered sample.
    pub input: Vec<f64>,
    usable: Vec<bool>,
    sigmas: Vec<f64>,
    sample_colors: Vec<[f64; 3]>,
}

/// Renders one target camera from one window.
pub struct ViewRenderer<'a> {
    src: &'a SourceFrames<'a>,
    head: &'a DensityModel,
    cfg: &'a RenderConfig,
    window: WindowSpec,
    tw: TemporalWeights,
    projectors: Vec<Projector>,
    to_center: Projector,
    /// `None` with `no_arr` (no range needed).
    ranges: Option<RayRangeMap>,
}

impl<'a> ViewRenderer<'a> {
    pub fn new(
        src: &'a SourceFrames<'a>,
        head: &'a DensityModel,
        cfg: &'a RenderConfig,
        window: WindowSpec,
        target: &Pose,
    ) -> Result<Self> {
        Self::with_floor(src, head, cfg, window, target, cfg.floor)
    }

    fn with_floor(
        src: &'a SourceFrames<'a>,
        head: &'a DensityModel,
        cfg: &'a RenderConfig,
        window: WindowSpec,
        target: &Pose,
        floor: SpreadFloor,
    ) -> Result<Self> {
        let frames = src.frames();
        if window.members.is_empty() {
            return Err(Error::EmptyWindow);
        }
        if window.center >= frames.len() || window.members.iter().any(|m| *m >= frames.len()) {
            return Err(Error::Contract("window refers to frames outside the sequence".into()));
        }
        let k = &src.dataset.intrinsics;
        // Temporal weights are defined on timestamps; members are 0-based positions.
        let tw = temporal_weights(&window.members, window.center, cfg.lambda, cfg.literal_weights)?;
        let projectors = window
            .members
            .iter()
            .map(|m| Projector::new(target, &frames[*m].pose, k))
            .collect();
        let to_center = Projector::new(target, &frames[window.center].pose, k);
        let ranges = if cfg.no_arr && !cfg.blend_only {
            None
        } else {
            let sources: Vec<(&Pose, &Grid)> =
                window.members.iter().map(|m| (&frames[*m].pose, &frames[*m].depth)).collect();
            Some(ray_range_for_view(target, &sources, &tw, k, floor, cfg.splat)?)
        };
        Ok(Self {
            src,
            head,
            cfg,
            window,
            tw,
            projectors,
            to_center,
            ranges,
        })
    }

    pub fn ranges(&self) -> Option<&RayRangeMap> {
        self.ranges.as_ref()
    }

    pub fn window(&self) -> &WindowSpec {
        &self.window
    }

    /// Depths sampled along the ray through pixel `(x, y)`.
    pub fn depths(&self, x: usize, y: usize) -> Vec<f64> {
        match &self.ranges {
            Some(r) if !self.cfg.no_arr => {
                let (near, far) = r.range(x, y);
                sample_depths(near, far, self.cfg.samples)
            }
            _ => {
                let (lo, hi) = self.src.depth_bounds;
                sample_depths(lo, hi, self.cfg.even_samples)
            }
        }
    }

    /// Projects the sample at `depth` on the ray through `x` into every
    /// window frame. The head input is left in `s.input`.
    pub fn gather(&self, x: SubPixel, depth: f64, cc: bool, s: &mut Scratch) -> GatheredSample {
        let frames = self.src.frames();
        let n = self.window.members.len();
        let c = self.src.channels();
        s.feats.resize(n * c, 0.0);
        s.fvalid.resize(n, false);
        s.colors.resize(n, [0.0; 3]);
        s.cvalid.resize(n, false);
        s.input.resize(2 * c, 0.0);

        let mut geo = [SubPixel::default(); 64];
        let mut geo_vec = Vec::new();
        let geo: &mut [SubPixel] = if n <= 64 {
            &mut geo[..n]
        } else {
            geo_vec.resize(n, SubPixel::default());
            &mut geo_vec
        };
        for (k, m) in self.window.members.iter().enumerate() {
            let p = self.projectors[k].project(x, depth);
            geo[k] = p.pixel;
            s.fvalid[k] = p.valid && self.src.features[*m].sample_footprint_into(p.pixel.u, p.pixel.v, &mut s.feats[k * c..(k + 1) * c]);
            if !p.valid {
                geo[k] = SubPixel::new(f64::NAN, f64::NAN);
            }
        }

        let mut used_flow = false;
        if cc {
            let pc = self.to_center.project(x, depth);
            let lo = self.window.members[0];
            let hi = *self.window.members.last().unwrap();
            let center_frame = &frames[self.window.center].image;
            let contiguous = hi + 1 - lo == n;
            if pc.valid
                && contiguous
                && (lo..=hi).contains(&self.window.center)
                && center_frame.in_footprint(pc.pixel.u, pc.pixel.v)
            {
                s.chain.resize(n, None);
                flow_chain(pc.pixel, self.window.center, lo, frames, &mut s.chain);
                for (k, m) in self.window.members.iter().enumerate() {
                    s.cvalid[k] = match s.chain[k] {
                        Some(q) => frames[*m].image.sample_footprint_into(q.u, q.v, &mut s.colors[k]),
                        None => false,
                    };
                }
                used_flow = true;
            }
        }
        if !used_flow {
            for (k, m) in self.window.members.iter().enumerate() {
                s.cvalid[k] = frames[*m].image.sample_footprint_into(geo[k].u, geo[k].v, &mut s.colors[k]);
            }
        }

        let views: Vec<&[f32]> = (0..n)
            .filter(|k| s.fvalid[*k])
            .map(|k| &s.feats[k * c..(k + 1) * c])
            .collect();
        let has_features = aggregate_views(&views, &mut s.input);
        if !has_features {
            return GatheredSample {
                has_features,
                color: None,
            };
        }
        s.usable.clear();
        s.usable.extend((0..n).map(|k| s.fvalid[k] && s.cvalid[k]));
        if !s.usable.iter().any(|u| *u) {
            return GatheredSample {
                has_features,
                color: None,
            };
        }
        let feats: Vec<&[f32]> = (0..n).map(|k| &s.feats[k * c..(k + 1) * c]).collect();
        let w = blend_weights(&self.tw.weights, &feats, &s.input[..c], &s.usable, self.cfg.gamma);
        let mut color = [0.0; 3];
        for k in 0..n {
            if s.usable[k] {
                for ch in 0..3 {
                    color[ch] += w[k] * s.colors[k][ch] as f64;
                }
            }
        }
        GatheredSample {
            has_features,
            color: Some(color),
        }
    }

    /// Unnormalized color and total weight of pixel `(x, y)`.
    pub fn render_pixel(&self, x: usize, y: usize, s: &mut Scratch) -> ([f64; 3], f64) {
        let px = SubPixel::new(x as f64, y as f64);
        if self.cfg.blend_only {
            return self.blend_pixel(px, x, y, s);
        }
        let depths = self.depths(x, y);
        s.sigmas.clear();
        s.sample_colors.clear();
        for d in depths {
            let g = self.gather(px, d, !self.cfg.no_cc, s);
            match g.color {
                Some(c) => {
                    s.sigmas.push(self.head.sigma(&s.input));
                    s.sample_colors.push(c);
                }
                None => {
                    s.sigmas.push(0.0);
                    s.sample_colors.push([0.0; 3]);
                }
            }
        }
        composite(&s.sigmas, &s.sample_colors)
    }

    fn blend_pixel(&self, px: SubPixel, x: usize, y: usize, s: &mut Scratch) -> ([f64; 3], f64) {
        let frames = self.src.frames();
        let r = self.ranges.as_ref().expect("ranges are computed in blend-only mode");
        let d = r.mean[y * r.width + x];
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        let mut c = [0.0f32; 3];
        for (k, m) in self.window.members.iter().enumerate() {
            let p = self.projectors[k].project(px, d);
            if p.valid && frames[*m].image.sample_footprint_into(p.pixel.u, p.pixel.v, &mut c) {
                for ch in 0..3 {
                    sum[ch] += c[ch] as f64;
                }
                n += 1;
            }
        }
        let _ = s;
        if n == 0 {
            return ([0.0; 3], 0.0);
        }
        (sum.map(|v| v / n as f64), 1.0)
    }

    /// Renders every pixel, rows in parallel. Output is independent of the thread count.
    pub fn render(&self) -> RenderedFrame {
        let k = &self.src.dataset.intrinsics;
        let (w, h) = (k.width, k.height);
        let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
            .into_par_iter()
            .map_init(Scratch::default, |s, y| (0..w).map(|x| self.render_pixel(x, y, s)).collect())
            .collect();
        let mut image = Grid::zeros(w, h, 3);
        let mut weight = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, (c, wsum)) in row.into_iter().enumerate() {
                let ok = wsum > self.cfg.eps_w;
                let px = image.pixel_mut(x, y);
                for ch in 0..3 {
                    px[ch] = if ok {
                        (c[ch] / wsum).clamp(0.0, 1.0) as f32
                    } else {
                        self.cfg.background
                    };
                }
                weight.push(wsum);
                valid.push(ok);
            }
        }
        RenderedFrame { image, weight, valid }
    }
}

/// Renders frame `i` of the sequence at `target` with its clamped window.
pub fn render_frame(
    src: &SourceFrames,
    head: &DensityModel,
    cfg: &RenderConfig,
    i: usize,
    target: &Pose,
) -> Result<RenderedFrame> {
    cfg.validate()?;
    let window = WindowSpec::clamped(i, cfg.window, src.frames().len())?;
    let r = ViewRenderer::new(src, head, cfg, window, target).map_err(|e| e.in_frame(src.frames()[i].timestamp))?;
    Ok(r.render())
}

/// Renders every frame at the given poses.
pub fn render_sequence(
    src: &SourceFrames,
    head: &DensityModel,
    cfg: &RenderConfig,
    poses: &[Pose],
) -> Result<Vec<RenderedFrame>> {
    if poses.len() != src.frames().len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} target poses", src.frames().len()),
            actual: format!("{}", poses.len()),
        });
    }
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| render_frame(src, head, cfg, i, p))
        .collect()
}

/// Trajectory smoothing plus rendering settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizeConfig {
    pub render: RenderConfig,
    pub smooth_window: usize,
    pub smooth_sigma: f64,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            smooth_window: 21,
            smooth_sigma: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub timestamp: usize,
    /// Against the exact render at the smoothed pose, when the scene is known.
    pub psnr: Option<f64>,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizeReport {
    pub head: String,
    pub frames: Vec<FrameReport>,
    pub cropping_ratio: f64,
    pub mean_psnr: Option<f64>,
}

pub struct Stabilized {
    pub poses: PoseSequence,
    pub frames: Vec<RenderedFrame>,
    pub report: StabilizeReport,
}

/// Smooths the camera path and renders every frame along it.
pub fn stabilize(dataset: &Dataset, head: &DensityModel, cfg: &StabilizeConfig) -> Result<Stabilized> {
    dataset.validate()?;
    cfg.render.validate()?;
    let input = dataset.poses()?;
    let poses = smooth_trajectory(&input, cfg.smooth_window, cfg.smooth_sigma)?;
    let src = SourceFrames::new(dataset);
    let frames = render_sequence(&src, head, &cfg.render, poses.poses())?;
    let scene = dataset.scene.as_ref().map(Scene::new).transpose()?;

    let mut reports = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let t = dataset.frames[i].timestamp;
        let psnr = match &scene {
            Some(sc) => Some(metrics::psnr(&f.image, &sc.render(&poses.poses()[i], t)?.image)?),
            None => None,
        };
        let n = f.weight.len() as f64;
        reports.push(FrameReport {
            timestamp: t,
            psnr,
            mean_weight: f.weight.iter().sum::<f64>() / n,
            min_weight: f.weight.iter().cloned().fold(f64::INFINITY, f64::min),
            valid_fraction: f.valid.iter().filter(|v| **v).count() as f64 / n,
        });
    }
    let masks: Vec<&[bool]> = frames.iter().map(|f| f.valid.as_slice()).collect();
    let mean_psnr = scene
        .as_ref()
        .map(|_| reports.iter().filter_map(|r| r.psnr).sum::<f64>() / reports.len() as f64);
    let report = StabilizeReport {
        head: head.name().to_string(),
        cropping_ratio: metrics::cropping_ratio(&masks)?,
        mean_psnr,
        frames: reports,
    };
    Ok(Stabilized { poses, frames, report })
}

/// One pre-gathered training ray.
#[derive(Debug, Clone)]
struct TrainRay {
    /// `L x 2C` head inputs.
    inputs: Vec<f64>,
    has_sigma: Vec<bool>,
    colors: Vec<[f64; 3]>,
    gt: [f64; 3],
}

/// Rays rendered at input poses from the other frames of their window, with
/// their gathered head inputs and colors. The density head is the only
/// thing that changes during training, so everything upstream of it is
/// gathered once.
///
/// The loss compares the raw composited color (no division by the total
/// weight) with the ground truth, so it also pushes rays toward full opacity.
pub struct TrainingPool {
    input_len: usize,
    train: Vec<TrainRay>,
    eval: Vec<TrainRay>,
}

impl TrainingPool {
    /// Draws `cfg.pool_rays + cfg.eval_rays` rays at random input frames and
    /// pixels. Each frame is rendered leave-one-out (its own image is the
    /// target) with color correction off, using `cfg.range_scale` as a
    /// relative range floor and stratified depths.
    pub fn build(
        src: &SourceFrames,
        render: &RenderConfig,
        cfg: &crate::density::TrainConfig,
    ) -> Result<Self> {
        render.validate()?;
        cfg.validate()?;
        let frames = src.frames();
        if frames.len() < 2 {
            return Err(Error::Degenerate("training needs at least two frames".into()));
        }
        let head = DensityModel::default();
        let floor = match render.floor {
            SpreadFloor::Relative(r) => SpreadFloor::Relative(r.max(cfg.range_scale)),
            abs => abs,
        };
        let renderers: Vec<ViewRenderer> = (0..frames.len())
            .map(|i| {
                let window = WindowSpec::clamped(i, render.window.max(2), frames.len())?.leave_center_out();
                ViewRenderer::with_floor(src, &head, render, window, &frames[i].pose, floor)
                    .map_err(|e| e.in_frame(frames[i].timestamp))
            })
            .collect::<Result<_>>()?;

        let k = &src.dataset.intrinsics;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut scratch = Scratch::default();
        let l = cfg.samples;
        let mut draw = |count: usize, rng: &mut ChaCha8Rng| -> Vec<TrainRay> {
            let mut rays = Vec::with_capacity(count);
            for _ in 0..count {
                let i = rng.random_range(0..frames.len());
                let (x, y) = (rng.random_range(0..k.width), rng.random_range(0..k.height));
                let r = &renderers[i];
                let (near, far) = r.ranges.as_ref().unwrap().range(x, y);
                let mut ray = TrainRay {
                    inputs: Vec::with_capacity(l * 2 * src.channels()),
                    has_sigma: Vec::with_capacity(l),
                    colors: Vec::with_capacity(l),
                    gt: [0.0; 3],
                };
                for j in 0..l {
                    let d = near + (far - near) * (j as f64 + rng.random::<f64>()) / l as f64;
                    let g = r.gather(SubPixel::new(x as f64, y as f64), d, false, &mut scratch);
                    ray.inputs.extend_from_slice(&scratch.input);
                    ray.has_sigma.push(g.color.is_some());
                    ray.colors.push(g.color.unwrap_or([0.0; 3]));
                }
                let px = frames[i].image.pixel(x, y);
                ray.gt = [px[0] as f64, px[1] as f64, px[2] as f64];
                rays.push(ray);
            }
            rays
        };
        let eval = draw(cfg.eval_rays, &mut rng);
        let train = draw(cfg.pool_rays, &mut rng);
        Ok(Self {
            input_len: 2 * src.channels(),
            train,
            eval,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    fn loss(&self, ray: &TrainRay, head: &DensityHead, grad: Option<&mut [f64]>) -> f64 {
        let l = ray.has_sigma.len();
        let n = self.input_len;
        let mut caches = vec![ForwardCache::default(); l];
        let sigmas: Vec<f64> = (0..l)
            .map(|j| {
                if ray.has_sigma[j] {
                    head.forward_cached(&ray.inputs[j * n..(j + 1) * n], &mut caches[j])
                } else {
                    0.0
                }
            })
            .collect();
        let (c, _) = composite(&sigmas, &ray.colors);
        let diff = [c[0] - ray.gt[0], c[1] - ray.gt[1], c[2] - ray.gt[2]];
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / 3.0;
        if let Some(grad) = grad {
            let d_color = diff.map(|d| 2.0 * d / 3.0);
            let d_sigma = composite_backward(&sigmas, &ray.colors, d_color, 0.0);
            for j in 0..l {
                if ray.has_sigma[j] && d_sigma[j] != 0.0 {
                    head.backward_into(&caches[j], d_sigma[j], grad);
                }
            }
        }
        loss
    }

    /// Loss of training ray `r`; its gradient is added to `grad`.
    pub fn ray_loss_grad(&self, head: &DensityHead, r: usize, grad: &mut [f64]) -> f64 {
        self.loss(&self.train[r], head, Some(grad))
    }

    /// Mean loss over the fixed evaluation rays.
    pub fn eval_loss(&self, head: &DensityHead) -> f64 {
        self.eval.iter().map(|r| self.loss(r, head, None)).sum::<f64>() / self.eval.len() as f64
    }
}
