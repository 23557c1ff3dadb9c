//! Analytic dynamic scenes: a moving sphere or box in front of a textured
//! background slab, with closed-form density, color, scene flow and
//! ray intersections. They generate training frames and serve as the
//! ground-truth oracle.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Var};
use crate::dataset::{Dataset, EvalView, Frame, FrameTruth};
use crate::error::{Error, Result};
use crate::fields::{frame_time, DynamicOutputVars, DynamicQuery};
use crate::geometry::{camera_ray, Camera, Pose, Ray, Vec3};
use crate::renderer::{sample_ray_with, FlowDirection, LAST_DELTA_FACTOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MoverShape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MoverTexture {
    /// Procedural stripes and gradients in object coordinates.
    Textured,
    /// One flat color everywhere on the object.
    Solid { rgb: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverConfig {
    pub shape: MoverShape,
    /// Center trajectory `c(t) = c0 + c1·t + c2·t²` over normalized time.
    pub trajectory: [[f64; 3]; 3],
    pub texture: MoverTexture,
    /// Size at `t = 1` relative to `t = 0`; 1 keeps the motion rigid.
    pub growth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundConfig {
    /// World z of the slab's mid-plane.
    pub depth: f64,
    pub thickness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub mover: MoverConfig,
    pub background: Option<BackgroundConfig>,
    pub sigma_solid: f64,
    pub near: f64,
    pub far: f64,
    pub oracle_samples: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            mover: MoverConfig {
                shape: MoverShape::Sphere { radius: 0.22 },
                trajectory: [[-0.485, -0.485, 2.0], [0.97, 0.97, 0.0], [0.0; 3]],
                texture: MoverTexture::Textured,
                growth: 1.0,
            },
            background: Some(BackgroundConfig {
                depth: 4.0,
                thickness: 0.1,
            }),
            sigma_solid: 200.0,
            near: 1.0,
            far: 5.5,
            oracle_samples: 512,
        }
    }
}

/// Named scene variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenePreset {
    /// Rigidly translating textured sphere.
    Rigid,
    /// Same motion with a flat-colored sphere.
    Textureless,
    /// Same motion while the sphere grows.
    Scaling,
    /// Rigidly translating textured box.
    Box,
}

impl ScenePreset {
    pub fn config(self) -> SceneConfig {
        let mut c = SceneConfig::default();
        match self {
            ScenePreset::Rigid => {}
            ScenePreset::Textureless => {
                c.mover.texture = MoverTexture::Solid {
                    rgb: [0.85, 0.25, 0.2],
                }
            }
            ScenePreset::Scaling => c.mover.growth = 2.0,
            ScenePreset::Box => {
                c.mover.shape = MoverShape::Box {
                    half_extents: [0.2, 0.16, 0.18],
                }
            }
        }
        c
    }
}

/// Camera rig: an arc of cameras looking at a common target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub target: [f64; 3],
    pub radius: f64,
    /// Total yaw swept by the rig, in degrees.
    pub yaw_span_deg: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            width: 64,
            height: 64,
            focal: 64.0,
            target: [0.0, 0.0, 4.0],
            radius: 4.0,
            yaw_span_deg: 6.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::Config("trajectory needs at least 3 frames".into()));
        }
        if self.width < 2 || self.height < 2 || !(self.focal > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config("invalid image size, focal length or rig radius".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        let target = Vec3::from(self.target);
        let span = self.yaw_span_deg.to_radians();
        (0..self.frames)
            .map(|n| {
                let theta = -span / 2.0 + span * frame_time(n, self.frames);
                let eye = target + self.radius * Vec3::new(theta.sin(), 0.0, -theta.cos());
                Pose::look_at(eye, target, Vec3::new(0.0, -1.0, 0.0))
            })
            .collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.frames).map(|n| frame_time(n, self.frames)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Body {
    Mover,
    Background,
}

/// Analytic scene built from a [`SceneConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
}

/// Oracle output for one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OraclePixel {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub mask: bool,
    /// Nearest analytic surface hit within the ray bounds.
    pub surface: Option<Vec3>,
}

/// Oracle images in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleImage {
    pub rgb: Matrix,
    pub depth: Matrix,
    pub mask: Matrix,
    pub surface: Matrix,
    pub hit: Matrix,
}

fn slab_interval(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d.abs() < 1e-15 {
        return (o >= lo && o <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let (a, b) = ((lo - o) / d, (hi - o) / d);
    Some((a.min(b), a.max(b)))
}

fn smooth_checker(a: f64, b: f64, period: f64) -> f64 {
    let s = (std::f64::consts::PI * a / period).sin() * (std::f64::consts::PI * b / period).sin();
    (3.0 * s).tanh()
}

impl SyntheticScene {
    pub fn new(config: SceneConfig) -> Result<Self> {
        let scene = Self { config };
        scene.validate()?;
        Ok(scene)
    }

    pub fn preset(preset: ScenePreset) -> Self {
        Self::new(preset.config()).expect("presets are valid")
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if !(c.sigma_solid > 0.0) || !(c.near >= 0.0 && c.near < c.far) || c.oracle_samples < 2 {
            return Err(Error::Config("invalid density, bounds or oracle sample count".into()));
        }
        if !(c.mover.growth > 0.0) {
            return Err(Error::Config("mover growth must be positive".into()));
        }
        let extent = match c.mover.shape {
            MoverShape::Sphere { radius } if radius > 0.0 => radius,
            MoverShape::Box { half_extents } if half_extents.iter().all(|h| *h > 0.0) => {
                Vec3::from(half_extents).norm()
            }
            _ => return Err(Error::Config("mover size must be positive".into())),
        };
        if let Some(bg) = c.background {
            if !(bg.thickness > 0.0) {
                return Err(Error::Config("background thickness must be positive".into()));
            }
            let min_chord = bg.thickness;
            if c.sigma_solid * min_chord < 5.0 {
                return Err(Error::Config("background slab is not effectively opaque".into()));
            }
            for i in 0..=20 {
                let t = i as f64 / 20.0;
                if self.center(t).z + extent * self.scale(t) >= bg.depth - bg.thickness / 2.0 {
                    return Err(Error::Config("mover intersects the background slab".into()));
                }
            }
        }
        Ok(())
    }

    pub fn center(&self, t: f64) -> Vec3 {
        let [c0, c1, c2] = self.config.mover.trajectory;
        Vec3::from(c0) + Vec3::from(c1) * t + Vec3::from(c2) * (t * t)
    }

    /// Mover size relative to `t = 0`.
    pub fn scale(&self, t: f64) -> f64 {
        1.0 + (self.config.mover.growth - 1.0) * t
    }

    pub fn is_rigid(&self) -> bool {
        self.config.mover.growth == 1.0
    }

    /// Object coordinates of `x` at time `t`, normalized so the surface is at
    /// unit sphere radius / unit box half-extent.
    fn local(&self, x: &Vec3, t: f64) -> Vec3 {
        let rel = (x - self.center(t)) / self.scale(t);
        match self.config.mover.shape {
            MoverShape::Sphere { radius } => rel / radius,
            MoverShape::Box { half_extents } => rel.component_div(&Vec3::from(half_extents)),
        }
    }

    pub fn inside_mover(&self, x: &Vec3, t: f64) -> bool {
        let l = self.local(x, t);
        match self.config.mover.shape {
            MoverShape::Sphere { .. } => l.norm_squared() <= 1.0 + 1e-12,
            MoverShape::Box { .. } => l.iter().all(|v| v.abs() <= 1.0 + 1e-12),
        }
    }

    fn inside_background(&self, x: &Vec3) -> bool {
        self.config
            .background
            .is_some_and(|bg| (x.z - bg.depth).abs() <= bg.thickness / 2.0)
    }

    pub fn mover_color(&self, x: &Vec3, t: f64) -> [f64; 3] {
        match self.config.mover.texture {
            MoverTexture::Solid { rgb } => rgb,
            MoverTexture::Textured => {
                let l = self.local(x, t);
                let stripes = smooth_checker(l.x, l.y, 0.5);
                [
                    (0.8 + 0.12 * stripes).clamp(0.0, 1.0),
                    (0.35 + 0.2 * l.y + 0.1 * stripes).clamp(0.0, 1.0),
                    (0.25 - 0.15 * l.x).clamp(0.0, 1.0),
                ]
            }
        }
    }

    pub fn background_color(&self, x: &Vec3) -> [f64; 3] {
        let gx = ((x.x + 3.0) / 6.0).clamp(0.0, 1.0);
        let gy = ((x.y + 3.0) / 6.0).clamp(0.0, 1.0);
        let checker = 0.06 * smooth_checker(x.x, x.y, 0.6);
        [
            (0.3 + 0.35 * gx + checker).clamp(0.0, 1.0),
            (0.45 + 0.25 * gy + checker).clamp(0.0, 1.0),
            (0.6 - 0.25 * gx + checker).clamp(0.0, 1.0),
        ]
    }

    /// Density and color at `x` and time `t`.
    pub fn scene_fields(&self, x: &Vec3, t: f64) -> (f64, [f64; 3]) {
        if self.inside_mover(x, t) {
            (self.config.sigma_solid, self.mover_color(x, t))
        } else if self.inside_background(x) {
            (self.config.sigma_solid, self.background_color(x))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Where the mover point at `x` (time `t`) is at time `t_prime`, minus `x`.
    pub fn mover_flow(&self, x: &Vec3, t: f64, t_prime: f64) -> Vec3 {
        let ratio = self.scale(t_prime) / self.scale(t);
        self.center(t_prime) + (x - self.center(t)) * ratio - x
    }

    /// Ground-truth scene flow toward the neighbor frame `step` away; zero
    /// outside the mover.
    pub fn scene_flow_gt(&self, x: &Vec3, t: f64, dir: FlowDirection, step: f64) -> Vec3 {
        if !self.inside_mover(x, t) {
            return Vec3::zeros();
        }
        let t_prime = match dir {
            FlowDirection::Forward => t + step,
            FlowDirection::Backward => t - step,
        };
        self.mover_flow(x, t, t_prime)
    }

    /// Ray-parameter interval inside the mover at time `t`.
    pub fn mover_interval(&self, ray: &Ray, t: f64) -> Option<(f64, f64)> {
        let c = self.center(t);
        let s = self.scale(t);
        match self.config.mover.shape {
            MoverShape::Sphere { radius } => {
                let r = radius * s;
                let oc = ray.origin - c;
                let b = ray.direction.dot(&oc);
                let disc = b * b - (oc.norm_squared() - r * r);
                if disc < 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                Some((-b - root, -b + root))
            }
            MoverShape::Box { half_extents } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for i in 0..3 {
                    let h = half_extents[i] * s;
                    let (a, b) = slab_interval(ray.origin[i], ray.direction[i], c[i] - h, c[i] + h)?;
                    lo = lo.max(a);
                    hi = hi.min(b);
                }
                (lo <= hi).then_some((lo, hi))
            }
        }
    }

    fn background_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let bg = self.config.background?;
        slab_interval(
            ray.origin.z,
            ray.direction.z,
            bg.depth - bg.thickness / 2.0,
            bg.depth + bg.thickness / 2.0,
        )
    }

    /// Solid spans along the ray, in increasing order and clipped to `s ≥ near`.
    fn spans(&self, ray: &Ray, t: f64) -> Vec<(f64, f64, Body)> {
        let mut spans: Vec<(f64, f64, Body)> = [
            self.mover_interval(ray, t).map(|(a, b)| (a, b, Body::Mover)),
            self.background_interval(ray).map(|(a, b)| (a, b, Body::Background)),
        ]
        .into_iter()
        .flatten()
        .filter(|(_, b, _)| *b >= ray.near)
        .map(|(a, b, body)| (a.max(ray.near), b, body))
        .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        spans
    }

    fn body_color(&self, body: Body, x: &Vec3, t: f64) -> [f64; 3] {
        match body {
            Body::Mover => self.mover_color(x, t),
            Body::Background => self.background_color(x),
        }
    }

    /// Renders one ray with `k` bins. Each bin's optical depth is integrated
    /// exactly from the analytic spans, and its color and depth are taken at
    /// the first solid point inside the bin.
    pub fn oracle_ray(&self, ray: &Ray, t: f64, k: usize) -> Result<OraclePixel> {
        let mut dummy = crate::rng::stream(0, &[]);
        let samples = sample_ray_with(ray, k, false, LAST_DELTA_FACTOR, &mut dummy)?;
        let spans = self.spans(ray, t);
        let sigma = self.config.sigma_solid;
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        for (s, d) in samples.distances.iter().zip(&samples.deltas) {
            let (lo, hi) = (*s, s + d);
            let mut length = 0.0;
            let mut first: Option<(f64, Body)> = None;
            for &(a, b, body) in &spans {
                let overlap = hi.min(b) - lo.max(a);
                if overlap > 0.0 {
                    length += overlap;
                    if first.is_none() {
                        first = Some((lo.max(a), body));
                    }
                }
            }
            let Some((entry, body)) = first else { continue };
            let alpha = -(-sigma * length).exp_m1();
            let w = trans * alpha;
            let color = self.body_color(body, &ray.at(entry), t);
            for c in 0..3 {
                rgb[c] += w * color[c];
            }
            depth += w * entry;
            trans *= 1.0 - alpha;
        }
        let nearest = spans.first().filter(|(a, _, _)| *a <= ray.far);
        Ok(OraclePixel {
            rgb,
            depth,
            mask: nearest.is_some_and(|(_, _, body)| *body == Body::Mover),
            surface: nearest.map(|(a, _, _)| ray.at(*a)),
        })
    }

    /// Renders a full image at time `t` with `k` bins per ray.
    pub fn oracle_render(&self, camera: &Camera, pose: &Pose, t: f64, k: usize) -> Result<OracleImage> {
        let n = camera.pixel_count();
        let mut rgb = Matrix::zeros(n, 3);
        let mut depth = Matrix::zeros(n, 1);
        let mut mask = Matrix::zeros(n, 1);
        let mut surface = Matrix::zeros(n, 3);
        let mut hit = Matrix::zeros(n, 1);
        for v in 0..camera.height {
            for u in 0..camera.width {
                let i = v * camera.width + u;
                let ray = camera_ray(camera, pose, u as f64, v as f64, self.config.near, self.config.far)?;
                let px = self.oracle_ray(&ray, t, k)?;
                rgb.row_mut(i).copy_from_slice(&px.rgb);
                depth.set(i, 0, px.depth);
                mask.set(i, 0, px.mask as u8 as f64);
                if let Some(s) = px.surface {
                    surface.row_mut(i).copy_from_slice(&[s.x, s.y, s.z]);
                    hit.set(i, 0, 1.0);
                }
            }
        }
        Ok(OracleImage {
            rgb,
            depth,
            mask,
            surface,
            hit,
        })
    }

    /// Center of the sampled volume and its half-extent.
    pub fn normalization(&self, traj: &TrajectoryConfig) -> (Vec3, f64) {
        let half = (self.config.far - self.config.near) / 2.0;
        let center = Vec3::new(0.0, 0.0, self.config.near + half);
        let fov = (traj.width.max(traj.height) as f64 / 2.0) / traj.focal;
        let lateral = self.config.far * fov * std::f64::consts::SQRT_2 / 2.0;
        (center, half.max(lateral))
    }
}

/// Quantizes to 8-bit levels, as stored in PNG frames.
pub fn quantize(m: &Matrix) -> Matrix {
    m.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Renders every frame, its ground truth and the held-out views.
pub fn make_dataset(scene: &SyntheticScene, traj: &TrajectoryConfig) -> Result<Dataset> {
    traj.validate()?;
    let camera = traj.camera()?;
    let poses = traj.poses()?;
    let times = traj.times();
    let k = scene.config.oracle_samples;
    let step = 1.0 / (traj.frames - 1) as f64;
    let mut frames = Vec::with_capacity(traj.frames);
    let mut truth = Vec::with_capacity(traj.frames);
    for (n, (pose, &t)) in poses.iter().zip(&times).enumerate() {
        let img = scene.oracle_render(&camera, pose, t, k)?;
        let px = camera.pixel_count();
        let mut flow_fwd = Matrix::zeros(px, 3);
        let mut flow_bwd = Matrix::zeros(px, 3);
        for i in 0..px {
            if img.mask.get(i, 0) == 0.0 {
                continue;
            }
            let x = Vec3::from(img.surface.row3(i));
            if n + 1 < traj.frames {
                let f = scene.mover_flow(&x, t, times[n + 1]);
                flow_fwd.row_mut(i).copy_from_slice(&[f.x, f.y, f.z]);
            }
            if n > 0 {
                let f = scene.mover_flow(&x, t, times[n - 1]);
                flow_bwd.row_mut(i).copy_from_slice(&[f.x, f.y, f.z]);
            }
        }
        debug_assert!((t - n as f64 * step).abs() < 1e-12);
        frames.push(Frame {
            index: n,
            time: t,
            pose: *pose,
            image: quantize(&img.rgb),
            mask: img.mask,
        });
        truth.push(FrameTruth {
            depth: img.depth,
            surface: img.surface,
            hit: img.hit,
            flow_fwd,
            flow_bwd,
        });
    }
    let eval = (1..traj.frames)
        .map(|n| -> Result<EvalView> {
            let img = scene.oracle_render(&camera, &poses[0], times[n], k)?;
            Ok(EvalView {
                frame: n,
                time: times[n],
                pose: poses[0],
                image: quantize(&img.rgb),
                mask: img.mask,
                depth: img.depth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (scene_center, scene_scale) = scene.normalization(traj);
    let ds = Dataset {
        camera,
        near: scene.config.near,
        far: scene.config.far,
        frames,
        truth,
        eval,
        scene_center,
        scene_scale,
    };
    ds.validate()?;
    Ok(ds)
}

/// How the analytic field supplies scene flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowInjection {
    /// Mover displacement applied at every point in space.
    Rigid,
    /// Ground-truth flow: mover points move with the mover, all else is still.
    ObjectOnly,
}

/// The analytic scene exposed through the dynamic-field interface, with
/// ground-truth flow in place of learned flow.
#[derive(Clone, Debug)]
pub struct AnalyticDynamic<'s> {
    pub scene: &'s SyntheticScene,
    /// Normalized time between frames.
    pub step: f64,
    pub injection: FlowInjection,
    /// Extra offset added to every forward flow.
    pub forward_offset: Vec3,
}

impl<'s> AnalyticDynamic<'s> {
    pub fn new(scene: &'s SyntheticScene, step: f64, injection: FlowInjection) -> Self {
        Self {
            scene,
            step,
            injection,
            forward_offset: Vec3::zeros(),
        }
    }

    pub fn with_forward_offset(mut self, offset: Vec3) -> Self {
        self.forward_offset = offset;
        self
    }

    fn flow(&self, x: &Vec3, t: f64, dir: FlowDirection) -> Vec3 {
        let t_prime = match dir {
            FlowDirection::Forward => t + self.step,
            FlowDirection::Backward => t - self.step,
        };
        let base = match self.injection {
            FlowInjection::Rigid => self.scene.center(t_prime) - self.scene.center(t),
            FlowInjection::ObjectOnly => self.scene.scene_flow_gt(x, t, dir, self.step),
        };
        match dir {
            FlowDirection::Forward => base + self.forward_offset,
            FlowDirection::Backward => base,
        }
    }
}

impl<'t> DynamicQuery<'t> for AnalyticDynamic<'_> {
    fn query(&self, x: Var<'t>, _dirs: &Matrix, times: &Matrix) -> DynamicOutputVars<'t> {
        let tape = x.tape();
        let xv = x.value();
        let n = xv.rows();
        let mut sigma = Matrix::zeros(n, 1);
        let mut rgb = Matrix::zeros(n, 3);
        let mut fwd = Matrix::zeros(n, 3);
        let mut bwd = Matrix::zeros(n, 3);
        let mut blend = Matrix::zeros(n, 1);
        for r in 0..n {
            let p = Vec3::from(xv.row3(r));
            let t = times.get(r, 0);
            let (s, c) = self.scene.scene_fields(&p, t);
            sigma.set(r, 0, s);
            rgb.row_mut(r).copy_from_slice(&c);
            let f = self.flow(&p, t, FlowDirection::Forward);
            let b = self.flow(&p, t, FlowDirection::Backward);
            fwd.row_mut(r).copy_from_slice(&[f.x, f.y, f.z]);
            bwd.row_mut(r).copy_from_slice(&[b.x, b.y, b.z]);
            blend.set(r, 0, self.scene.inside_mover(&p, t) as u8 as f64);
        }
        DynamicOutputVars {
            sigma: tape.constant(sigma),
            rgb: tape.constant(rgb),
            flow_fwd: tape.constant(fwd),
            flow_bwd: tape.constant(bwd),
            blend: tape.constant(blend),
        }
    }
}
