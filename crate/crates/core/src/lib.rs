//! Full-frame video stabilization by multi-frame volume rendering.
//!
//! A shaky clip (frames, depth maps, optical flow and camera poses) is
//! re-rendered along a smoothed camera path. Every output pixel is a short
//! ray whose depth interval comes from temporally weighted, splatted
//! neighbor depth maps; samples along it gather features and colors from a
//! window of input frames, a small density head scores their multi-view
//! consistency and the samples are alpha-composited.
//!
//! Module map:
//!
//! * [`geometry`]: pinhole camera, poses, reprojection
//! * [`trajectory`]: camera path smoothing
//! * [`data`]: frame bundles, synthetic scenes, file formats
//! * [`features`]: per-frame descriptor maps
//! * [`rayrange`]: per-pixel sampling intervals from depth priors
//! * [`density`]: trainable density head
//! * [`renderer`]: stabilized rendering and the sliding-window driver
//! * [`metrics`]: cropping ratio, distortion, stability, PSNR

pub mod data;
pub mod density;
pub mod error;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod rayrange;
pub mod renderer;
pub mod trajectory;

pub use data::{Dataset, FrameBundle, Preset, SceneSpec};
pub use error::{Error, Result};
pub use geometry::{Intrinsics, Pose, SubPixel};
pub use grid::{Grid, Image};
pub use trajectory::PoseSequence;
