//! Stabilization quality metrics: cropping ratio, distortion value,
//! stability score and PSNR.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::{project_world, Intrinsics, Pose, SubPixel};
use crate::grid::{DepthMap, Image};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` over all channels, for images in `[0, 1]`; capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}x{}", a.width(), a.height(), a.channels()),
            actual: format!("{}x{}x{}", b.width(), b.height(), b.channels()),
        });
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Contract("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean fraction of valid pixels per frame.
pub fn cropping_ratio(masks: &[&[bool]]) -> Result<f64> {
    if masks.is_empty() || masks.iter().any(|m| m.is_empty()) {
        return Err(Error::Contract("cropping ratio needs at least one non-empty mask".into()));
    }
    let sum: f64 = masks
        .iter()
        .map(|m| m.iter().filter(|v| **v).count() as f64 / m.len() as f64)
        .sum();
    Ok(sum / masks.len() as f64)
}

/// Point pair `(input, output)` in pixel coordinates.
pub type Correspondence = ([f64; 2], [f64; 2]);

fn hartley(points: impl Iterator<Item = [f64; 2]> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    if !(mean_dist > 1e-12) || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn collinear(points: &[[f64; 2]]) -> bool {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0] / n, b + p[1] / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    // Smallest eigenvalue of the scatter matrix relative to the largest.
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    !(lmax > 0.0) || lmin / lmax < 1e-10
}

/// Homography `H` with `output ~ H input`, by the normalized direct linear
/// transform. Errors on fewer than four pairs or (nearly) collinear points.
pub fn fit_homography(pairs: &[Correspondence]) -> Result<Matrix3<f64>> {
    if pairs.len() < 4 {
        return Err(Error::Degenerate(format!("{} correspondences, need 4", pairs.len())));
    }
    let src: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<[f64; 2]> = pairs.iter().map(|p| p.1).collect();
    if collinear(&src) || collinear(&dst) {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }
    let ts = hartley(src.iter().copied()).ok_or_else(|| Error::Degenerate("coincident points".into()))?;
    let td = hartley(dst.iter().copied()).ok_or_else(|| Error::Degenerate("coincident points".into()))?;
    let norm = |t: &Matrix3<f64>, p: [f64; 2]| {
        let v = t * Vector3::new(p[0], p[1], 1.0);
        (v.x, v.y)
    };
    // At least 9 rows (zero padding for 4 pairs) so the thin SVD keeps the null vector.
    let mut a = DMatrix::<f64>::zeros(2 * pairs.len().max(5), 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = norm(&ts, *s);
        let (u, v) = norm(&td, *d);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        a.row_mut(r + 1).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|i, j| sv[*i].total_cmp(&sv[*j]));
    let (smallest, next) = (order[0], order[1]);
    if !(sv[next] > 1e-9 * sv[order[sv.len() - 1]]) {
        return Err(Error::Degenerate("homography is not unique".into()));
    }
    let h = vt.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(|| Error::Degenerate("normalization".into()))?;
    let mut out = td_inv * hn * ts;
    let scale = out[(2, 2)];
    if !(scale.abs() > 1e-12) {
        return Err(Error::Degenerate("homography maps the origin to infinity".into()));
    }
    out /= scale;
    Ok(out)
}

/// `s2 / s1` of the singular values of the top-left 2x2 block of `h` (normalized so `h[2,2] = 1`).
pub fn anisotropy(h: &Matrix3<f64>) -> f64 {
    let h = h / h[(2, 2)];
    let a = Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
    let s = a.singular_values();
    let (s1, s2) = (s[0].max(s[1]), s[0].min(s[1]));
    if s1 > 0.0 {
        s2 / s1
    } else {
        0.0
    }
}

/// Worst (minimum) per-frame anisotropy of the input-to-output homography.
/// Frames with degenerate correspondences are skipped with a warning.
pub fn distortion_value(frames: &[Vec<Correspondence>]) -> Result<f64> {
    let mut worst: Option<f64> = None;
    for (i, pairs) in frames.iter().enumerate() {
        match fit_homography(pairs) {
            Ok(h) => {
                let s = anisotropy(&h);
                worst = Some(worst.map_or(s, |w| w.min(s)));
            }
            Err(e) => log::warn!("distortion: skipping frame {}: {e}", i + 1),
        }
    }
    worst.ok_or_else(|| Error::Degenerate("no frame has usable correspondences".into()))
}

/// Feature trajectories over a common run of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    tracks: Vec<Vec<[f64; 2]>>,
}

/// Shortest track accepted for spectral analysis.
pub const MIN_TRACK_LEN: usize = 32;

impl TrackSet {
    pub fn new(tracks: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::Contract("track set is empty".into()));
        }
        if let Some(t) = tracks.iter().find(|t| t.len() < MIN_TRACK_LEN) {
            return Err(Error::Contract(format!(
                "track of length {} is shorter than {MIN_TRACK_LEN}",
                t.len()
            )));
        }
        Ok(Self { tracks })
    }

    pub fn tracks(&self) -> &[Vec<[f64; 2]>] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

/// Frequency band of the stability score, as DFT bin indices (0 = DC).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityBand {
    pub low_first: usize,
    pub low_last: usize,
}

impl Default for StabilityBand {
    /// Bins 2-6 counted from 1 with DC as bin 1, i.e. the five lowest non-DC frequencies.
    fn default() -> Self {
        Self {
            low_first: 1,
            low_last: 5,
        }
    }
}

/// Low-band share of one mean-removed signal's spectral energy over bins
/// `low_first..=N/2`; `None` for a (numerically) constant signal.
pub fn low_band_ratio(signal: &[f64], band: StabilityBand, planner: &mut FftPlanner<f64>) -> Option<f64> {
    let n = signal.len();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let energy = |k: usize| buf[k].norm_sqr();
    let total: f64 = (band.low_first..=n / 2).map(energy).sum();
    let scale: f64 = signal.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if !(total > 1e-20 * scale * scale * n as f64) {
        return None;
    }
    let low: f64 = (band.low_first..=band.low_last.min(n / 2)).map(energy).sum();
    Some(low / total)
}

/// Mean low-frequency energy share over all tracks and both axes. Constant
/// tracks score 1.
pub fn stability_score(tracks: &TrackSet) -> f64 {
    stability_score_with(tracks, StabilityBand::default())
}

pub fn stability_score_with(tracks: &TrackSet, band: StabilityBand) -> f64 {
    let mut planner = FftPlanner::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in tracks.tracks() {
        for axis in 0..2 {
            let s: Vec<f64> = t.iter().map(|p| p[axis]).collect();
            sum += low_band_ratio(&s, band, &mut planner).unwrap_or(1.0);
            count += 1;
        }
    }
    sum / count as f64
}

/// Image trajectories of fixed world points seen through a camera path.
/// Points behind a camera at any frame are dropped.
pub fn tracks_from_points(points: &[Vector3<f64>], poses: &[Pose], k: &Intrinsics) -> Result<TrackSet> {
    let tracks = points
        .iter()
        .filter_map(|p| {
            poses
                .iter()
                .map(|pose| project_world(p, pose, k).map(|(x, _)| [x.u, x.v]))
                .collect::<Option<Vec<_>>>()
        })
        .collect();
    TrackSet::new(tracks)
}

/// World points under a regular pixel grid (every `stride` pixels) of a depth map.
pub fn grid_points(depth: &DepthMap, pose: &Pose, k: &Intrinsics, stride: usize) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (stride / 2..depth.height()).step_by(stride) {
        for x in (stride / 2..depth.width()).step_by(stride) {
            let d = depth.at(x, y, 0) as f64;
            if d > 0.0 {
                out.push(pose.transform_point(&k.lift(SubPixel::new(x as f64, y as f64), d)));
            }
        }
    }
    out
}

/// Exact correspondences of a static scene between an input view and an
/// output view: grid pixels of the input, lifted with their depth and
/// projected into the output camera. Pairs landing outside the output image are dropped.
pub fn pose_correspondences(
    depth: &DepthMap,
    input: &Pose,
    output: &Pose,
    k: &Intrinsics,
    stride: usize,
) -> Vec<Correspondence> {
    grid_points(depth, input, k, stride)
        .iter()
        .filter_map(|p| {
            let (a, _) = project_world(p, input, k)?;
            let (b, _) = project_world(p, output, k)?;
            let inside = b.u >= 0.0 && b.v >= 0.0 && b.u <= (k.width - 1) as f64 && b.v <= (k.height - 1) as f64;
            inside.then_some(([a.u, a.v], [b.u, b.v]))
        })
        .collect()
}
