//! Frame bundles, synthetic ground-truth scenes and the on-disk dataset format.

pub mod io;
pub mod scene;
pub mod texture;

pub use scene::{GtFlow, Hit, PlaneSpec, Preset, QuadSpec, RenderedView, Scene, SceneSpec, Surface, TrajectorySpec};
pub use texture::TextureSpec;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{DepthMap, FlowField, Grid, Image};
use crate::trajectory::PoseSequence;

/// One input frame with its depth, optical flow and camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub timestamp: usize,
    pub image: Image,
    pub depth: DepthMap,
    /// Flow to the next frame (absent on the last frame).
    pub flow_to_next: Option<FlowField>,
    /// Flow to the previous frame (absent on the first frame).
    pub flow_to_prev: Option<FlowField>,
    /// Visibility of each pixel's forward correspondence (1 visible, 0 occluded), when known.
    pub visible_next: Option<Grid>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameBundle>,
    /// Generating scene, when the dataset is synthetic. Enables exact ground truth at any pose.
    pub scene: Option<SceneSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Result<PoseSequence> {
        PoseSequence::new(
            self.frames.iter().map(|f| f.pose).collect(),
            self.frames.iter().map(|f| f.timestamp).collect(),
        )
    }

    /// Checks shapes and value ranges of every frame.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frames.is_empty() {
            return Err(Error::Contract("dataset has no frames".into()));
        }
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let n = self.frames.len();
        for (i, f) in self.frames.iter().enumerate() {
            let check = |g: &Grid, c: usize, what: &str| -> Result<()> {
                if g.width() != w || g.height() != h || g.channels() != c {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{what} {w}x{h}x{c}"),
                        actual: format!("{}x{}x{}", g.width(), g.height(), g.channels()),
                    }
                    .in_frame(f.timestamp));
                }
                Ok(())
            };
            check(&f.image, 3, "image")?;
            check(&f.depth, 1, "depth")?;
            if let Some(g) = &f.flow_to_next {
                check(g, 2, "forward flow")?;
            } else if i + 1 < n {
                return Err(Error::Contract("missing forward flow".into()).in_frame(f.timestamp));
            }
            if let Some(g) = &f.flow_to_prev {
                check(g, 2, "backward flow")?;
            } else if i > 0 {
                return Err(Error::Contract("missing backward flow".into()).in_frame(f.timestamp));
            }
            if let Some(g) = &f.visible_next {
                check(g, 1, "visibility mask")?;
            }
            if f.depth.data().iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return Err(Error::Contract("depth must be positive".into()).in_frame(f.timestamp));
            }
            if f.image.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Contract("image values outside [0, 1]".into()).in_frame(f.timestamp));
            }
        }
        self.poses()?;
        Ok(())
    }

    /// Smallest and largest depth over all frames.
    pub fn depth_bounds(&self) -> (f64, f64) {
        self.frames
            .iter()
            .flat_map(|f| f.depth.data().iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(*d as f64), hi.max(*d as f64))
            })
    }
}

fn depth_grid(k: &Intrinsics, depth: &[f64]) -> DepthMap {
    Grid::from_fn(k.width, k.height, 1, |x, y, out| out[0] = depth[y * k.width + x] as f32)
}

/// Ray-casts every frame of the scene together with exact depth, bidirectional flow and visibility.
pub fn synth_scene(spec: &SceneSpec) -> Result<Dataset> {
    let scene = Scene::new(spec)?;
    let k = *scene.intrinsics();
    let n = spec.frames;
    let frames = (1..=n)
        .map(|t| {
            let pose = scene.poses()[t - 1];
            let view = scene.render(&pose, t)?;
            let (flow_to_next, visible_next) = if t < n {
                let f = scene.flow(t, t + 1)?;
                (Some(f.to_grid()), Some(f.visibility_grid()))
            } else {
                (None, None)
            };
            let flow_to_prev = if t > 1 { Some(scene.flow(t, t - 1)?.to_grid()) } else { None };
            Ok(FrameBundle {
                timestamp: t,
                image: view.image,
                depth: depth_grid(&k, &view.depth),
                flow_to_next,
                flow_to_prev,
                visible_next,
                pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        intrinsics: k,
        frames,
        scene: Some(spec.clone()),
    })
}

/// Exact render of the scene from an arbitrary pose at timestamp `t`.
pub fn render_ground_truth(spec: &SceneSpec, pose: &Pose, t: usize) -> Result<Image> {
    Ok(Scene::new(spec)?.render(pose, t)?.image)
}

/// Exact correspondence field from frame `t1` to frame `t2`.
pub fn gt_flow(spec: &SceneSpec, t1: usize, t2: usize) -> Result<GtFlow> {
    Scene::new(spec)?.flow(t1, t2)
}
