//! Pinhole cameras, rigid poses, rays, projection and the patch inverse warp.
//!
//! Conventions: poses are camera-to-world (`x_world = R x_cam + t`), camera
//! frames are +z forward, +x right, +y down, and the ray for pixel `(u, v)`
//! passes through the integer pixel coordinate itself (no half-pixel offset).

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Camera-frame depth below which the warp treats a point as degenerate.
const MIN_WARP_DEPTH: f64 = 1e-6;
/// Slack, in patch pixels, for warped coordinates that land on the patch
/// border up to rounding; they sample the clamped border pixel.
pub const WARP_EDGE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Back-projected camera-frame direction `((u−cx)/fx, (v−cy)/fy, 1)`.
    pub fn backproject(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Factor converting distance along the unit ray through `(u, v)` into
    /// camera-frame z depth.
    pub fn z_per_distance(&self, u: f64, v: f64) -> f64 {
        1.0 / self.backproject(u, v).norm()
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::domain(format!(
                "rotation is not a proper orthonormal matrix (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis`, followed by translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12)
            .ok_or_else(|| Error::domain("rotation axis has zero length"))?;
        Self::new(*Rotation3::from_axis_angle(&axis, angle).matrix(), translation)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear toward the top of the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        Self::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// World point expressed in this camera's frame.
    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }

    /// `[R | t]` as twelve row-major values.
    pub fn to_row12(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_row12(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::domain(format!("pose row needs 12 values, got {}", v.len())));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::domain("ray direction must be unit length"));
        }
        if !(near >= 0.0 && near < far && far.is_finite()) {
            return Err(Error::domain(format!("invalid ray bounds [{near}, {far}]")));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }
}

/// Square grid of `size × size` pixels starting at `(u0, v0)`, every
/// `stride` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelPatch {
    pub u0: usize,
    pub v0: usize,
    pub size: usize,
    pub stride: usize,
}

impl PixelPatch {
    pub fn new(u0: usize, v0: usize, size: usize, stride: usize, camera: &Camera) -> Result<Self> {
        let patch = Self {
            u0,
            v0,
            size,
            stride,
        };
        patch.validate(camera)?;
        Ok(patch)
    }

    /// The whole image as one patch.
    pub fn full(camera: &Camera) -> Result<Self> {
        if camera.width != camera.height {
            return Err(Error::domain("full-frame patch requires a square image"));
        }
        Self::new(0, 0, camera.width, 1, camera)
    }

    pub fn validate(&self, camera: &Camera) -> Result<()> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::domain("patch size and stride must be positive"));
        }
        let span = (self.size - 1) * self.stride;
        if self.u0 + span >= camera.width || self.v0 + span >= camera.height {
            return Err(Error::domain(format!("patch {self:?} exceeds image bounds")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Image pixel coordinates in row-major patch order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.size).flat_map(move |j| {
            (0..self.size).map(move |i| (self.u0 + i * self.stride, self.v0 + j * self.stride))
        })
    }
}

/// Ray through pixel `(u, v)` with bounds `[near, far]`.
pub fn camera_ray(camera: &Camera, pose: &Pose, u: f64, v: f64, near: f64, far: f64) -> Result<Ray> {
    if !(u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64) {
        return Err(Error::domain(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let dir = pose.transform_vector(&camera.backproject(u, v)).normalize();
    Ray::new(pose.center(), dir, near, far)
}

/// Projects a world point to `(u, v, z)`.
pub fn project(camera: &Camera, pose: &Pose, x: &Vec3) -> Result<(f64, f64, f64)> {
    let p = pose.world_to_camera(x);
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    Ok((
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
        p.z,
    ))
}

/// Inverse warp recorded on a tape so gradients reach both the rendered
/// colors and the depth.
///
/// `rendered` holds the patch rendered at `pose_r` (`size²` rows, 3 columns);
/// `depth_z` holds camera-frame z depth of the same patch at `pose_m`. Returns
/// the warped colors (zero where invalid) and the validity mask.
pub fn inverse_warp_vars<'t>(
    rendered: Var<'t>,
    depth_z: Var<'t>,
    pose_r: &Pose,
    pose_m: &Pose,
    camera: &Camera,
    patch: &PixelPatch,
) -> Result<(Var<'t>, Matrix)> {
    patch.validate(camera)?;
    let n = patch.len();
    if rendered.rows() != n || depth_z.shape() != (n, 1) {
        return Err(Error::domain(format!(
            "warp inputs have {} color rows and {:?} depth shape for a {n}-pixel patch",
            rendered.rows(),
            depth_z.shape()
        )));
    }
    let tape = rendered.tape();
    let rel = pose_r.inverse().compose(pose_m);
    let rays: Vec<[f64; 3]> = patch
        .pixels()
        .map(|(u, v)| {
            let a = rel.transform_vector(&camera.backproject(u as f64, v as f64));
            [a.x, a.y, a.z]
        })
        .collect();
    let t = rel.translation();
    let points = depth_z * tape.constant(Matrix::from_rows(&rays))
        + tape.constant(Matrix::from_vec(1, 3, vec![t.x, t.y, t.z]));

    let z = points.col(2);
    let z_safe = z.clamp_min(MIN_WARP_DEPTH);
    let s = patch.stride as f64;
    let gx = (points.col(0) / z_safe).affine(camera.fx / s, (camera.cx - patch.u0 as f64) / s);
    let gy = (points.col(1) / z_safe).affine(camera.fy / s, (camera.cy - patch.v0 as f64) / s);
    let coords = Var::concat_cols(&[gx, gy]);

    let zv = z.value();
    let cv = coords.value();
    let hi = (patch.size - 1) as f64;
    let mask = Matrix::from_fn(n, 1, |i, _| {
        let (x, y) = (cv.get(i, 0), cv.get(i, 1));
        let within = |c: f64| c >= -WARP_EDGE_TOL && c <= hi + WARP_EDGE_TOL;
        let inside = within(x) && within(y);
        if zv.get(i, 0) > 0.0 && inside {
            1.0
        } else {
            0.0
        }
    });
    let warped = rendered.bilinear(coords, patch.size, patch.size).mul_const(&mask);
    Ok((warped, mask))
}

/// Plain-value inverse warp; see [`inverse_warp_vars`].
pub fn inverse_warp(
    rendered: &Matrix,
    depth_z: &Matrix,
    pose_r: &Pose,
    pose_m: &Pose,
    camera: &Camera,
    patch: &PixelPatch,
) -> Result<(Matrix, Matrix)> {
    let tape = Tape::new();
    let (warped, mask) = inverse_warp_vars(
        tape.constant(rendered.clone()),
        tape.constant(depth_z.clone()),
        pose_r,
        pose_m,
        camera,
        patch,
    )?;
    let out = (*warped.value()).clone();
    Ok((out, mask))
}
