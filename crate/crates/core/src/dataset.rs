//! In-memory training data: frames with poses, timestamps and dynamic masks,
//! plus ground truth reserved for evaluation.

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose, Vec3};

/// One training view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Normalized timestamp in `[0, 1]`.
    pub time: f64,
    pub pose: Pose,
    /// `[H·W, 3]` colors in `[0, 1]`, row-major pixel order.
    pub image: Matrix,
    /// `[H·W, 1]`, 1 on moving content.
    pub mask: Matrix,
}

/// Per-frame geometry used only by metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    /// `[H·W, 1]` expected termination distance.
    pub depth: Matrix,
    /// `[H·W, 3]` nearest analytic surface hit (zero where nothing is hit).
    pub surface: Matrix,
    /// `[H·W, 1]` 1 where a surface was hit.
    pub hit: Matrix,
    /// `[H·W, 3]` scene flow of the surface point to the next frame.
    pub flow_fwd: Matrix,
    /// `[H·W, 3]` scene flow of the surface point to the previous frame.
    pub flow_bwd: Matrix,
}

/// A held-out view: a fixed camera at another frame's timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalView {
    /// Frame whose timestamp is rendered.
    pub frame: usize,
    pub time: f64,
    pub pose: Pose,
    pub image: Matrix,
    pub mask: Matrix,
    pub depth: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
    pub frames: Vec<Frame>,
    pub truth: Vec<FrameTruth>,
    pub eval: Vec<EvalView>,
    /// Center and half-extent of the sampled volume, used to normalize
    /// field inputs.
    pub scene_center: Vec3,
    pub scene_scale: f64,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let n = self.camera.pixel_count();
        if self.frames.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 frames, got {}",
                self.frames.len()
            )));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::Config("near bound must be below far bound".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i || f.image.shape() != (n, 3) || f.mask.shape() != (n, 1) {
                return Err(Error::Config(format!("frame {i} has inconsistent shape or index")));
            }
            if !(0.0..=1.0).contains(&f.time) {
                return Err(Error::Config(format!("frame {i} time outside [0, 1]")));
            }
        }
        if !self.truth.is_empty() && self.truth.len() != self.frames.len() {
            return Err(Error::Config("ground truth must cover every frame".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized time between adjacent frames.
    pub fn time_step(&self) -> f64 {
        1.0 / (self.frames.len() - 1) as f64
    }

    /// Radius of the sampled volume, used to scale viewpoint perturbations.
    pub fn scene_radius(&self) -> f64 {
        self.scene_scale
    }

    /// Row-major pixel index.
    pub fn pixel_index(&self, u: usize, v: usize) -> usize {
        v * self.camera.width + u
    }
}
