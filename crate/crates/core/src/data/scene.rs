//! Analytic shaky-video scenes: textured planes, moving quads and a jittered
//! camera path, rendered by exact ray casting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::texture::TextureSpec;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, SubPixel};
use crate::grid::{Grid, Image};

/// Infinite plane `{X : normal · X = offset}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
    pub texture: TextureSpec,
}

/// Rectangle `center + a·half_u + b·half_v`, `|a|, |b| ≤ 1`, moving rigidly
/// with constant per-frame velocity and spin about its normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub center: [f64; 3],
    pub half_u: [f64; 3],
    pub half_v: [f64; 3],
    pub texture: TextureSpec,
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Radians per frame.
    #[serde(default)]
    pub spin: f64,
}

impl QuadSpec {
    pub fn is_moving(&self) -> bool {
        self.velocity.iter().any(|v| *v != 0.0) || self.spin != 0.0
    }
}

/// Smooth base path plus band-limited jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start: [f64; 3],
    /// Translation per frame.
    pub velocity: [f64; 3],
    pub yaw_amplitude_deg: f64,
    /// Frames per yaw oscillation.
    pub yaw_period: f64,
    /// Peak rotational jitter (degrees).
    pub jitter_rotation_deg: f64,
    /// Peak translational jitter (meters).
    pub jitter_translation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub objects: Vec<QuadSpec>,
    pub trajectory: TrajectorySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Static,
    Dynamic,
    Parallax,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Static, Preset::Dynamic, Preset::Parallax];
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Static => "static",
            Preset::Dynamic => "dynamic",
            Preset::Parallax => "parallax",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Preset::Static),
            "dynamic" => Ok(Preset::Dynamic),
            "parallax" => Ok(Preset::Parallax),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

fn texture(seed: u64, noise_scale: f64, checker_size: f64, a: [f64; 3], b: [f64; 3]) -> TextureSpec {
    TextureSpec {
        noise_scale,
        octaves: 2,
        checker_size,
        checker_weight: 0.35,
        checker_sharpness: 1.5,
        color_a: a,
        color_b: b,
        seed,
    }
}

impl SceneSpec {
    /// 64x64, 30-frame fixtures used throughout the tests.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let wall = PlaneSpec {
            normal: [0.08, 0.0, 1.0],
            offset: 4.0,
            texture: texture(seed ^ 0x11, 1.0, 0.9, [0.15, 0.25, 0.55], [0.95, 0.8, 0.45]),
        };
        let floor = PlaneSpec {
            normal: [0.0, 1.0, 0.0],
            offset: 1.1,
            texture: texture(seed ^ 0x22, 1.2, 1.1, [0.2, 0.45, 0.2], [0.8, 0.7, 0.55]),
        };
        let mut spec = SceneSpec {
            seed,
            frames: 30,
            width: 64,
            height: 64,
            hfov_deg: 60.0,
            planes: vec![wall, floor],
            objects: vec![],
            trajectory: TrajectorySpec {
                start: [-0.45, 0.0, 0.0],
                velocity: [0.03, 0.0, 0.01],
                yaw_amplitude_deg: 1.5,
                yaw_period: 40.0,
                jitter_rotation_deg: 1.0,
                jitter_translation: 0.05,
            },
        };
        match preset {
            Preset::Static => {}
            Preset::Dynamic => spec.objects.push(QuadSpec {
                center: [0.45, 0.05, 2.5],
                half_u: [0.45, 0.0, 0.0],
                half_v: [0.0, 0.45, 0.0],
                texture: texture(seed ^ 0x33, 0.35, 0.3, [0.9, 0.2, 0.15], [1.0, 0.9, 0.8]),
                velocity: [-0.025, 0.004, 0.0],
                spin: 0.01,
            }),
            Preset::Parallax => {
                spec.objects.push(QuadSpec {
                    center: [0.35, -0.25, 2.0],
                    half_u: [0.3, 0.0, 0.0],
                    half_v: [0.0, 0.35, 0.0],
                    texture: texture(seed ^ 0x44, 0.35, 0.3, [0.7, 0.1, 0.6], [0.95, 0.95, 0.6]),
                    velocity: [0.0; 3],
                    spin: 0.0,
                });
                spec.objects.push(QuadSpec {
                    center: [-0.5, 0.3, 2.8],
                    half_u: [0.25, 0.0, 0.05],
                    half_v: [0.0, 0.3, 0.0],
                    texture: texture(seed ^ 0x55, 0.4, 0.35, [0.1, 0.5, 0.5], [0.9, 0.6, 0.3]),
                    velocity: [0.0; 3],
                    spin: 0.0,
                });
            }
        }
        spec
    }

    pub fn moving_objects(&self) -> usize {
        self.objects.iter().filter(|o| o.is_moving()).count()
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.width < 2 || self.height < 2 {
            return bad("scene needs at least one frame and a 2x2 image".into());
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 170.0) {
            return bad(format!("field of view {} out of range", self.hfov_deg));
        }
        if self.planes.is_empty() {
            return bad("scene needs at least one static plane".into());
        }
        let tr = &self.trajectory;
        if !(tr.jitter_rotation_deg >= 0.0 && tr.jitter_translation >= 0.0) {
            return bad("jitter amplitudes must be nonnegative".into());
        }
        let start = Vector3::from(tr.start);
        for (i, p) in self.planes.iter().enumerate() {
            let n = Vector3::from(p.normal);
            if !(n.norm() > 1e-9) || !p.offset.is_finite() {
                return bad(format!("plane {i} has a degenerate normal"));
            }
            if (n.normalize().dot(&start) - p.offset / n.norm()).abs() < 1e-6 {
                return bad(format!("plane {i} passes through the camera, every view ray lies in it"));
            }
            p.texture.validate().map_err(|m| Error::Config(format!("plane {i}: {m}")))?;
        }
        for (i, q) in self.objects.iter().enumerate() {
            let (u, v) = (Vector3::from(q.half_u), Vector3::from(q.half_v));
            if u.norm() < 1e-9 || v.norm() < 1e-9 || u.cross(&v).norm() < 1e-9 {
                return bad(format!("object {i} has degenerate extents"));
            }
            if u.normalize().dot(&v.normalize()).abs() > 1e-6 {
                return bad(format!("object {i} extents must be orthogonal"));
            }
            q.texture.validate().map_err(|m| Error::Config(format!("object {i}: {m}")))?;
        }
        Ok(())
    }
}

/// Which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Plane(usize),
    Object(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Camera-space depth of the hit.
    pub depth: f64,
    pub surface: Surface,
    /// Surface-local material coordinates in meters.
    pub local: (f64, f64),
}

struct CompiledPlane {
    normal: Vector3<f64>,
    offset: f64,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

/// Spec plus derived camera path, ready for ray casting.
pub struct Scene {
    spec: SceneSpec,
    k: Intrinsics,
    poses: Vec<Pose>,
    planes: Vec<CompiledPlane>,
}

/// Exact per-pixel correspondence field between two frames.
#[derive(Debug, Clone)]
pub struct GtFlow {
    pub width: usize,
    pub height: usize,
    /// `(du, dv)` per pixel, row-major.
    pub flow: Vec<[f64; 2]>,
    /// False where the corresponding point is hidden or outside the other frame.
    pub visible: Vec<bool>,
}

impl GtFlow {
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.flow[y * self.width + x]
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_fn(self.width, self.height, 2, |x, y, out| {
            let f = self.at(x, y);
            out[0] = f[0] as f32;
            out[1] = f[1] as f32;
        })
    }

    pub fn visibility_grid(&self) -> Grid {
        Grid::from_fn(self.width, self.height, 1, |x, y, out| {
            out[0] = if self.visible[y * self.width + x] { 1.0 } else { 0.0 }
        })
    }
}

/// One analytic frame.
pub struct RenderedView {
    pub image: Image,
    /// Exact camera-space depth per pixel, row-major.
    pub depth: Vec<f64>,
    pub surfaces: Vec<Surface>,
}

fn band_limited_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    fn blur(x: &[f64], sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let n = x.len() as isize;
        (0..n)
            .map(|i| {
                let (mut acc, mut norm) = (0.0, 0.0);
                for k in -r..=r {
                    let w = (-((k * k) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += w * x[(i + k).clamp(0, n - 1) as usize];
                    norm += w;
                }
                acc / norm
            })
            .collect()
    }
    let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let smooth = blur(&raw, 0.7);
    let trend = blur(&smooth, 4.0);
    smooth.iter().zip(&trend).map(|(a, b)| a - b).collect()
}

/// Rescales a vector series so its largest norm equals `amplitude`.
fn scale_peak(series: &mut [Vector3<f64>], amplitude: f64) {
    let peak = series.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let s = if peak > 0.0 { amplitude / peak } else { 0.0 };
    series.iter_mut().for_each(|v| *v *= s);
}

fn camera_path(spec: &SceneSpec) -> Vec<Pose> {
    let tr = &spec.trajectory;
    let n = spec.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut channels: Vec<Vec<f64>> = (0..6).map(|_| band_limited_noise(&mut rng, n)).collect();
    let mut rot: Vec<Vector3<f64>> =
        (0..n).map(|i| Vector3::new(channels[0][i], channels[1][i], channels[2][i])).collect();
    let mut trans: Vec<Vector3<f64>> =
        (0..n).map(|i| Vector3::new(channels[3][i], channels[4][i], channels[5][i])).collect();
    channels.clear();
    scale_peak(&mut rot, tr.jitter_rotation_deg.to_radians());
    scale_peak(&mut trans, tr.jitter_translation);

    (0..n)
        .map(|i| {
            let f = i as f64;
            let yaw = tr.yaw_amplitude_deg.to_radians()
                * (2.0 * std::f64::consts::PI * f / tr.yaw_period.max(1.0)).sin();
            let base_r = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
            let base_t = Vector3::from(tr.start) + f * Vector3::from(tr.velocity);
            Pose::new(base_r * UnitQuaternion::from_scaled_axis(rot[i]), base_t + trans[i])
        })
        .collect()
}

fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1).normalize();
    (e1, e2)
}

fn quantize(c: f64) -> f32 {
    (c.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.intrinsics()?;
        let planes = spec
            .planes
            .iter()
            .map(|p| {
                let raw = Vector3::from(p.normal);
                let normal = raw.normalize();
                let (e1, e2) = plane_basis(&normal);
                CompiledPlane {
                    normal,
                    offset: p.offset / raw.norm(),
                    e1,
                    e2,
                }
            })
            .collect();
        let scene = Self {
            spec: spec.clone(),
            k,
            poses: camera_path(spec),
            planes,
        };
        // Every pixel of the first frame must see a surface.
        let first = scene.poses[0];
        for y in 0..k.height {
            for x in 0..k.width {
                if scene.cast(&first, 1, SubPixel::new(x as f64, y as f64)).is_none() {
                    return Err(Error::Config(format!(
                        "pixel ({x}, {y}) of the first frame sees no surface (degenerate geometry)"
                    )));
                }
            }
        }
        Ok(scene)
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    /// Camera-to-world poses of frames `1..=N` (index 0 is frame 1).
    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.spec.frames {
            return Err(Error::Contract(format!(
                "timestamp {t} outside 1..={}",
                self.spec.frames
            )));
        }
        Ok(())
    }

    /// Object frame at timestamp `t`: center and rotated half extents.
    fn object_at(&self, i: usize, t: usize) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let q = &self.spec.objects[i];
        let steps = t as f64 - 1.0;
        let (u, v) = (Vector3::from(q.half_u), Vector3::from(q.half_v));
        let axis = nalgebra::Unit::new_normalize(u.cross(&v));
        let r = UnitQuaternion::from_axis_angle(&axis, q.spin * steps);
        let c = Vector3::from(q.center) + steps * Vector3::from(q.velocity);
        (c, r * u, r * v)
    }

    /// Nearest surface along the ray through pixel `x` of a camera at `pose`, at timestamp `t`.
    pub fn cast(&self, pose: &Pose, t: usize, x: SubPixel) -> Option<Hit> {
        let origin = pose.translation;
        // Camera-space direction with z = 1, so the ray parameter is the depth.
        let dir = pose.rotation * self.k.lift(x, 1.0);
        let mut best: Option<Hit> = None;
        let mut consider = |depth: f64, surface: Surface, local: (f64, f64)| {
            if depth > 1e-9 && best.is_none_or(|b| depth < b.depth) {
                best = Some(Hit {
                    depth,
                    surface,
                    local,
                });
            }
        };
        for (i, p) in self.planes.iter().enumerate() {
            let denom = p.normal.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let s = (p.offset - p.normal.dot(&origin)) / denom;
            let hit = origin + s * dir;
            consider(s, Surface::Plane(i), (hit.dot(&p.e1), hit.dot(&p.e2)));
        }
        for i in 0..self.spec.objects.len() {
            let (c, u, v) = self.object_at(i, t);
            let n = u.cross(&v);
            let denom = n.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let s = n.dot(&(c - origin)) / denom;
            let rel = origin + s * dir - c;
            let a = rel.dot(&u) / u.norm_squared();
            let b = rel.dot(&v) / v.norm_squared();
            if a.abs() <= 1.0 && b.abs() <= 1.0 {
                consider(s, Surface::Object(i), (a * u.norm(), b * v.norm()));
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let tex = match hit.surface {
            Surface::Plane(i) => &self.spec.planes[i].texture,
            Surface::Object(i) => &self.spec.objects[i].texture,
        };
        tex.color(hit.local.0, hit.local.1)
    }

    /// World position at timestamp `t` of the material point identified by a hit.
    fn material_point(&self, hit: &Hit, t: usize) -> Vector3<f64> {
        match hit.surface {
            Surface::Plane(i) => {
                let p = &self.planes[i];
                p.offset * p.normal + hit.local.0 * p.e1 + hit.local.1 * p.e2
            }
            Surface::Object(i) => {
                let (c, u, v) = self.object_at(i, t);
                c + hit.local.0 * u.normalize() + hit.local.1 * v.normalize()
            }
        }
    }

    /// Renders the scene as seen from `pose` at timestamp `t`, 8-bit quantized.
    pub fn render(&self, pose: &Pose, t: usize) -> Result<RenderedView> {
        self.check_time(t)?;
        if !pose.is_finite() {
            return Err(Error::Contract("render pose is not finite".into()));
        }
        let (w, h) = (self.k.width, self.k.height);
        let mut image = Grid::zeros(w, h, 3);
        let mut depth = Vec::with_capacity(w * h);
        let mut surfaces = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let hit = self.cast(pose, t, SubPixel::new(x as f64, y as f64)).ok_or_else(|| {
                    Error::Degenerate(format!("pixel ({x}, {y}) at t={t} sees no surface"))
                })?;
                let c = self.shade(&hit);
                let px = image.pixel_mut(x, y);
                for ch in 0..3 {
                    px[ch] = quantize(c[ch]);
                }
                depth.push(hit.depth);
                surfaces.push(hit.surface);
            }
        }
        Ok(RenderedView {
            image,
            depth,
            surfaces,
        })
    }

    /// Displacement from each pixel of frame `t1` to the same material point in frame `t2`.
    pub fn flow(&self, t1: usize, t2: usize) -> Result<GtFlow> {
        self.check_time(t1)?;
        self.check_time(t2)?;
        let (w, h) = (self.k.width, self.k.height);
        let (p1, p2) = (self.poses[t1 - 1], self.poses[t2 - 1]);
        let to_cam2 = p2.inverse();
        let mut flow = Vec::with_capacity(w * h);
        let mut visible = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let x1 = SubPixel::new(x as f64, y as f64);
                if t1 == t2 {
                    flow.push([0.0, 0.0]);
                    visible.push(true);
                    continue;
                }
                let hit = self.cast(&p1, t1, x1).ok_or_else(|| {
                    Error::Degenerate(format!("pixel ({x}, {y}) at t={t1} sees no surface"))
                })?;
                let cam = to_cam2.transform_point(&self.material_point(&hit, t2));
                if cam.z <= 0.0 {
                    flow.push([0.0, 0.0]);
                    visible.push(false);
                    continue;
                }
                let x2 = self.k.pixel_of(&cam);
                flow.push([x2.u - x1.u, x2.v - x1.v]);
                let in_view = x2.u >= 0.0
                    && x2.v >= 0.0
                    && x2.u <= (w - 1) as f64
                    && x2.v <= (h - 1) as f64;
                let seen = in_view
                    && self.cast(&p2, t2, x2).is_some_and(|h2| {
                        h2.surface == hit.surface && (h2.depth - cam.z).abs() <= 1e-6 * cam.z
                    });
                visible.push(seen);
            }
        }
        Ok(GtFlow {
            width: w,
            height: h,
            flow,
            visible,
        })
    }
}
