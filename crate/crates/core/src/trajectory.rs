//! Gaussian smoothing of camera trajectories.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Ordered camera poses with strictly increasing frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    poses: Vec<Pose>,
    timestamps: Vec<usize>,
}

impl PoseSequence {
    pub fn new(poses: Vec<Pose>, timestamps: Vec<usize>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Contract("pose sequence must not be empty".into()));
        }
        if poses.len() != timestamps.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} timestamps", poses.len()),
                actual: format!("{}", timestamps.len()),
            });
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("timestamps must be strictly increasing".into()));
        }
        if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
            return Err(Error::Contract(format!("pose {i} is not finite")));
        }
        Ok(Self { poses, timestamps })
    }

    /// Frames numbered `1..=N`.
    pub fn from_poses(poses: Vec<Pose>) -> Result<Self> {
        let n = poses.len();
        Self::new(poses, (1..=n).collect())
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn timestamps(&self) -> &[usize] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Applies `g ∘ pose` to every pose.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
            timestamps: self.timestamps.clone(),
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Truncated Gaussian taps for offsets `-r..=r`, summing to one.
///
/// The radius is `ceil(3 sigma)` capped at half the window.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = window / 2;
    if half == 0 {
        return vec![1.0];
    }
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, half);
    let taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / sum).collect()
}

/// Low-pass filters a trajectory.
///
/// Translations are convolved with a truncated Gaussian (mirror padding at
/// the ends). Rotations are the kernel-weighted mean of the window's
/// quaternions, each flipped into the hemisphere of the center quaternion,
/// then renormalized.
pub fn smooth_trajectory(seq: &PoseSequence, window: usize, sigma: f64) -> Result<PoseSequence> {
    if seq.is_empty() {
        return Err(Error::Contract("cannot smooth an empty trajectory".into()));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::Contract(format!("smoothing window must be odd, got {window}")));
    }
    if window == 1 {
        return Ok(seq.clone());
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("smoothing sigma must be > 0, got {sigma}")));
    }
    let taps = gaussian_kernel(window, sigma);
    let radius = (taps.len() / 2) as isize;
    let n = seq.len();
    let poses = &seq.poses;

    let smoothed = (0..n)
        .map(|i| {
            let center = poses[i].rotation.coords;
            let mut t = Vector3::zeros();
            let mut q = Vector4::zeros();
            for (k, w) in taps.iter().enumerate() {
                let j = reflect(i as isize + k as isize - radius, n);
                t += *w * poses[j].translation;
                let c = poses[j].rotation.coords;
                let sign = if c.dot(&center) < 0.0 { -1.0 } else { 1.0 };
                q += (*w * sign) * c;
            }
            let rotation = UnitQuaternion::from_quaternion(Quaternion::from(q));
            Pose::new(rotation, t)
        })
        .collect();

    PoseSequence::new(smoothed, seq.timestamps.clone())
}

/// Sum of squared second differences of translation plus squared second
/// differences of the body-frame angular velocity.
pub fn jerk_energy(seq: &PoseSequence) -> Result<f64> {
    let p = seq.poses();
    if p.len() < 3 {
        return Err(Error::Contract("jerk energy needs at least 3 poses".into()));
    }
    let translation: f64 = p
        .windows(3)
        .map(|w| (w[2].translation - 2.0 * w[1].translation + w[0].translation).norm_squared())
        .sum();
    let angular: Vec<Vector3<f64>> = p
        .windows(2)
        .map(|w| (w[0].rotation.inverse() * w[1].rotation).scaled_axis())
        .collect();
    let rotation: f64 = angular.windows(2).map(|w| (w[1] - w[0]).norm_squared()).sum();
    Ok(translation + rotation)
}
