//! Two-stage optimization. The static field is fit to the pixels outside the
//! dynamic mask, then frozen while the dynamic field is fit with the full
//! objective, including the surface-consistency and patch multi-view terms.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::Unit;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fields::{
    DynamicFieldParams, EncodingConfig, FieldArch, ParamSet, StaticFieldParams, StaticQuery,
};
use crate::geometry::{camera_ray, inverse_warp_vars, PixelPatch, Pose, Ray, Vec3};
use crate::losses::{
    flow_regularizers, loss_depth_consistency, loss_dynamic, loss_entropy, loss_full, loss_mask, loss_patch,
    loss_static, loss_surface, surface_residuals, weighted_sum, LossReport, LossWeights, SURFACE_GATE,
};
use crate::renderer::{
    composite_vars, dynamic_pass, integrate, render_mode_vars, render_static_vars, RayTime, RenderMode,
    SampleBatch, LAST_DELTA_FACTOR,
};
use crate::rng::{stream, tag, StreamRng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which renderer the patch term supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchTarget {
    Composite,
    Dynamic,
}

impl PatchTarget {
    fn mode(self) -> RenderMode {
        match self {
            PatchTarget::Composite => RenderMode::Composite,
            PatchTarget::Dynamic => RenderMode::Dynamic,
        }
    }
}

/// Network shape shared by both fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoding: EncodingConfig,
    pub width: usize,
    pub depth: usize,
    pub skip: Option<usize>,
    pub max_flow: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = FieldArch::default();
        Self {
            encoding: arch.encoding,
            width: arch.width,
            depth: arch.depth,
            skip: arch.skip,
            max_flow: arch.max_flow,
        }
    }
}

impl ModelConfig {
    /// Small network that trains in minutes on one core.
    pub fn fast() -> Self {
        Self {
            encoding: EncodingConfig {
                pos_freqs: 6,
                dir_freqs: 2,
                time_freqs: 4,
            },
            width: 64,
            depth: 4,
            skip: Some(2),
            max_flow: 0.1,
        }
    }

    /// Architecture with the dataset's input normalization.
    pub fn arch(&self, dataset: &Dataset) -> Result<FieldArch> {
        let arch = FieldArch {
            encoding: self.encoding,
            width: self.width,
            depth: self.depth,
            skip: self.skip,
            max_flow: self.max_flow,
            scene_center: dataset.scene_center.into(),
            scene_scale: dataset.scene_scale,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub static_iters: usize,
    pub dynamic_iters: usize,
    pub batch_rays: usize,
    /// Rays per gradient chunk; bounds tape memory.
    pub chunk_rays: usize,
    pub lr: f64,
    /// Learning rate reached at the end of each stage.
    pub lr_final: f64,
    pub samples: usize,
    pub stratified: bool,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// The patch term runs on every `patch_every`-th dynamic iteration.
    pub patch_every: usize,
    pub patch_target: PatchTarget,
    pub novel_rotation_deg: f64,
    /// Maximum novel-view translation as a fraction of the scene radius.
    pub novel_translation: f64,
    pub surface_gate: f64,
    /// Share of each dynamic-stage batch drawn from motion-mask pixels; the
    /// rest is uniform over (frame, pixel).
    pub mask_ray_fraction: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Supplied by the run configuration rather than read from the file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            static_iters: 20_000,
            dynamic_iters: 40_000,
            batch_rays: 1024,
            chunk_rays: 64,
            lr: 5e-4,
            lr_final: 5e-5,
            samples: 64,
            stratified: true,
            patch_size: 16,
            patch_stride: 1,
            patch_every: 4,
            patch_target: PatchTarget::Composite,
            novel_rotation_deg: 5.0,
            novel_translation: 0.1,
            surface_gate: SURFACE_GATE,
            mask_ray_fraction: 0.0,
            log_every: 100,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for one CPU core.
    pub fn fast() -> Self {
        Self {
            model: ModelConfig::fast(),
            static_iters: 1500,
            dynamic_iters: 2500,
            batch_rays: 256,
            samples: 32,
            lr: 5e-3,
            lr_final: 5e-4,
            patch_size: 12,
            log_every: 50,
            checkpoint_every: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.batch_rays,
            self.chunk_rays,
            self.samples,
            self.patch_size,
            self.patch_stride,
            self.patch_every,
            self.log_every,
            self.checkpoint_every,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("batch, chunk, sample, patch and interval sizes must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config("need at least 2 samples per ray".into()));
        }
        if self.patch_size * self.patch_size > self.batch_rays {
            return Err(Error::Config(format!(
                "patch of {}² rays exceeds the batch of {} rays",
                self.patch_size, self.batch_rays
            )));
        }
        let positive = [self.lr, self.lr_final];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let nonneg = [self.novel_rotation_deg, self.novel_translation, self.surface_gate];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("perturbation scales and surface gate must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ray_fraction) {
            return Err(Error::Config("mask_ray_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let span = (self.patch_size - 1) * self.patch_stride;
        if span >= dataset.camera.width || span >= dataset.camera.height {
            return Err(Error::Config("patch does not fit in the image".into()));
        }
        Ok(())
    }

    /// Exponential decay from `lr` to `lr_final` over a stage of `total` steps.
    pub fn learning_rate(&self, iteration: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { iteration as f64 / total as f64 };
        self.lr * (self.lr_final / self.lr).powf(frac)
    }
}

/// Adaptive-moment optimizer state for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub steps: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::domain("gradient and parameter counts differ"));
        }
        if !grads.iter().all(Matrix::is_finite) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.steps += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Training rays with their supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub frames: Vec<usize>,
    pub pixels: Vec<usize>,
    pub rays: Vec<Ray>,
    /// `[R, 3]`
    pub colors: Matrix,
    /// `[R, 1]`
    pub mask: Matrix,
    pub times: Vec<RayTime>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Draws `count` rays keyed by stage and iteration. The first
/// `round(count · mask_fraction)` rays pick a uniform frame and then a uniform
/// pixel inside its motion mask (any pixel if the mask is empty); the rest are
/// uniform over (frame, pixel).
pub fn sample_ray_batch(
    dataset: &Dataset,
    count: usize,
    mask_fraction: f64,
    seed: u64,
    stage: u64,
    iteration: u64,
) -> Result<RayBatch> {
    let mut rng = stream(seed, &[tag::RAY_BATCH, stage, iteration]);
    let cam = &dataset.camera;
    let n = dataset.len();
    let masked = (count as f64 * mask_fraction.clamp(0.0, 1.0)).round() as usize;
    let mask_pixels: Vec<Vec<usize>> = if masked == 0 {
        Vec::new()
    } else {
        dataset
            .frames
            .iter()
            .map(|f| (0..cam.pixel_count()).filter(|&p| f.mask.get(p, 0) > 0.5).collect())
            .collect()
    };
    let mut frames = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count);
    let mut rays = Vec::with_capacity(count);
    let mut colors = Matrix::zeros(count, 3);
    let mut mask = Matrix::zeros(count, 1);
    let mut times = Vec::with_capacity(count);
    for i in 0..count {
        let f = rng.random_range(0..n);
        let px = match mask_pixels.get(f) {
            Some(inside) if i < masked && !inside.is_empty() => inside[rng.random_range(0..inside.len())],
            _ => rng.random_range(0..cam.pixel_count()),
        };
        let frame = &dataset.frames[f];
        let (u, v) = (px % cam.width, px / cam.width);
        rays.push(camera_ray(cam, &frame.pose, u as f64, v as f64, dataset.near, dataset.far)?);
        colors.row_mut(i).copy_from_slice(frame.image.row(px));
        mask.set(i, 0, frame.mask.get(px, 0));
        times.push(RayTime::frame(f, n));
        frames.push(f);
        pixels.push(px);
    }
    Ok(RayBatch {
        frames,
        pixels,
        rays,
        colors,
        mask,
        times,
    })
}

/// Perturbs `pose` by a rotation of at most `novel_rotation_deg` about a
/// uniformly random axis through the camera center, and a translation in a
/// uniformly random direction of at most `novel_translation · scene_radius`.
pub fn sample_novel_view(pose: &Pose, cfg: &TrainConfig, scene_radius: f64, rng: &mut StreamRng) -> Result<Pose> {
    let axis = random_direction(rng);
    let angle = rng.random_range(0.0..=1.0) * cfg.novel_rotation_deg.to_radians();
    let dir = random_direction(rng);
    let offset = dir * (rng.random_range(0.0..=1.0) * cfg.novel_translation * scene_radius);
    let turn = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    let rotation = pose.rotation() * turn.matrix();
    Pose::new(rotation, pose.translation() + offset)
}

fn random_direction(rng: &mut StreamRng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        let n = v.norm_squared();
        if n > 1e-6 && n <= 1.0 {
            return v / n.sqrt();
        }
    }
}

/// Patch term evaluated for one frame, with its gradient w.r.t. the
/// dynamic parameters.
#[derive(Clone, Debug)]
pub struct PatchOutcome {
    pub loss: f64,
    pub gradients: Vec<Matrix>,
    pub valid_pixels: usize,
    pub patch: PixelPatch,
    pub novel_pose: Pose,
}

/// Renders a patch of `frame` at its own pose and at a sampled novel pose,
/// inverse-warps the novel render into the input view through the rendered
/// depth, and scores the photometric disagreement.
pub fn patch_constraint_step(
    static_field: &StaticFieldParams,
    dynamic_field: &DynamicFieldParams,
    dataset: &Dataset,
    frame: usize,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<PatchOutcome> {
    let cam = &dataset.camera;
    let f = dataset
        .frames
        .get(frame)
        .ok_or_else(|| Error::domain(format!("frame {frame} out of range")))?;
    let span = (cfg.patch_size - 1) * cfg.patch_stride;
    if span >= cam.width || span >= cam.height {
        return Err(Error::Config("patch does not fit in the image".into()));
    }
    let u0 = rng.random_range(0..cam.width - span);
    let v0 = rng.random_range(0..cam.height - span);
    let patch = PixelPatch::new(u0, v0, cfg.patch_size, cfg.patch_stride, cam)?;
    let novel_pose = sample_novel_view(&f.pose, cfg, dataset.scene_radius(), rng)?;
    patch_loss_at(static_field, dynamic_field, dataset, frame, &patch, &novel_pose, cfg)
}

/// Patch term for a fixed patch and novel pose.
pub fn patch_loss_at(
    static_field: &StaticFieldParams,
    dynamic_field: &DynamicFieldParams,
    dataset: &Dataset,
    frame: usize,
    patch: &PixelPatch,
    novel_pose: &Pose,
    cfg: &TrainConfig,
) -> Result<PatchOutcome> {
    let cam = &dataset.camera;
    let f = &dataset.frames[frame];
    let pixels: Vec<(usize, usize)> = patch.pixels().collect();
    let batch_at = |pose: &Pose| -> Result<SampleBatch> {
        let rays = pixels
            .iter()
            .map(|&(u, v)| camera_ray(cam, pose, u as f64, v as f64, dataset.near, dataset.far))
            .collect::<Result<Vec<_>>>()?;
        SampleBatch::sample(&rays, cfg.samples, false, LAST_DELTA_FACTOR, |_| unreachable!())
    };
    let input_batch = batch_at(&f.pose)?;
    let novel_batch = batch_at(novel_pose)?;
    let z_factor = Matrix::column(
        &pixels
            .iter()
            .map(|&(u, v)| cam.z_per_distance(u as f64, v as f64))
            .collect::<Vec<_>>(),
    );

    let tape = Tape::new();
    let sf = static_field.bind(&tape, false)?;
    let df = dynamic_field.bind(&tape, true)?;
    let mode = cfg.patch_target.mode();
    let input = render_mode_vars(Some(&sf), Some(&df), &tape, &input_batch, f.time, mode)?;
    let novel = render_mode_vars(Some(&sf), Some(&df), &tape, &novel_batch, f.time, mode)?;
    let depth_z = input.render.depth.mul_const(&z_factor);
    let (warped, mask) = inverse_warp_vars(novel.render.color, depth_z, novel_pose, &f.pose, cam, patch)?;
    let loss = loss_patch(input.render.color, warped, &mask);
    let grads = tape.backward(loss);
    let gradients = df.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
    Ok(PatchOutcome {
        loss: loss.item(),
        gradients,
        valid_pixels: mask.data().iter().filter(|m| **m > 0.5).count(),
        patch: *patch,
        novel_pose: *novel_pose,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Static,
    Dynamic,
    Done,
}

impl Stage {
    fn key(self) -> u64 {
        match self {
            Stage::Static => 1,
            Stage::Dynamic => 2,
            Stage::Done => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Static => "static",
            Stage::Dynamic => "dynamic",
            Stage::Done => "done",
        }
    }
}

/// Everything needed to continue a run bit-identically: random streams are
/// derived from `(seed, stage, iteration)` and need no stored state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed iterations of the current stage.
    pub iteration: usize,
    pub static_field: StaticFieldParams,
    pub dynamic_field: DynamicFieldParams,
    /// Moments for the parameters of the current stage.
    pub optimizer: Adam,
    /// Sum of step reports since the last log line.
    pub interval: LossReport,
    pub interval_steps: usize,
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub stage: Stage,
    /// 1-based iteration within the stage.
    pub iteration: usize,
    pub report: LossReport,
    /// Mean report over the log interval, formatted, when one closes.
    pub log_line: Option<String>,
}

fn chunks(len: usize, size: usize) -> Vec<Range<usize>> {
    (0..len.div_ceil(size))
        .map(|c| c * size..((c + 1) * size).min(len))
        .collect()
}

fn add_into(acc: &mut [Matrix], part: &[Matrix], factor: f64) {
    for (a, p) in acc.iter_mut().zip(part) {
        for (x, y) in a.data_mut().iter_mut().zip(p.data()) {
            *x += factor * y;
        }
    }
}

fn zero_like(params: &ParamSet) -> Vec<Matrix> {
    params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect()
}

/// One formatted log line: stage, iteration and every report field.
pub fn format_log_line(stage: Stage, iteration: usize, report: &LossReport) -> String {
    let mut s = format!("{} {iteration}", stage.name());
    for (name, value) in LossReport::FIELDS.iter().zip(report.values()) {
        let _ = write!(s, " {name}={value:.9e}");
    }
    s
}

struct ChunkContext<'a> {
    dataset: &'a Dataset,
    batch: &'a RayBatch,
    cfg: &'a TrainConfig,
    weights: &'a LossWeights,
    stage: u64,
    iteration: u64,
}

impl ChunkContext<'_> {
    fn samples(&self, range: &Range<usize>) -> Result<SampleBatch> {
        let (seed, stage, iteration) = (self.cfg.seed, self.stage, self.iteration);
        let start = range.start;
        SampleBatch::sample(
            &self.batch.rays[range.clone()],
            self.cfg.samples,
            self.cfg.stratified,
            LAST_DELTA_FACTOR,
            |i| stream(seed, &[tag::RAY_JITTER, stage, iteration, (start + i) as u64]),
        )
    }

    fn targets(&self, range: &Range<usize>) -> (Matrix, Matrix) {
        let idx: Vec<usize> = range.clone().collect();
        (self.batch.colors.select_rows(&idx), self.batch.mask.select_rows(&idx))
    }
}

fn static_chunk(
    field: &StaticFieldParams,
    ctx: &ChunkContext<'_>,
    range: Range<usize>,
) -> Result<(Vec<Matrix>, LossReport)> {
    let samples = ctx.samples(&range)?;
    let (gt, mask) = ctx.targets(&range);
    let frac = range.len() as f64 / ctx.batch.len() as f64;
    let tape = Tape::new();
    let sf = field.bind(&tape, true)?;
    let (_, render) = render_static_vars(&sf, &tape, &samples);
    let loss = loss_static(render.color, &gt, &mask);
    let objective = loss.scale(ctx.weights.static_photo * frac);
    let grads = tape.backward(objective);
    let report = LossReport {
        static_photo: loss.item() * frac,
        ..LossReport::default()
    };
    Ok((sf.vars().iter().map(|v| grads.get_or_zeros(*v)).collect(), report))
}

fn dynamic_chunk(
    static_field: &StaticFieldParams,
    dynamic_field: &DynamicFieldParams,
    ctx: &ChunkContext<'_>,
    range: Range<usize>,
) -> Result<(Vec<Matrix>, LossReport)> {
    let samples = ctx.samples(&range)?;
    let (gt, mask) = ctx.targets(&range);
    let times = &ctx.batch.times[range.clone()];
    let n = range.len();
    let frac = n as f64 / ctx.batch.len() as f64;
    let w = ctx.weights;

    let tape = Tape::new();
    let sf = static_field.bind(&tape, false)?;
    let df = dynamic_field.bind(&tape, true)?;
    let pass = dynamic_pass(&df, &tape, &samples, times, ctx.dataset.time_step());

    let neighbors: Vec<(&[usize], Var)> = [&pass.forward, &pass.backward]
        .into_iter()
        .flatten()
        .map(|np| (np.rays.as_slice(), np.render.color))
        .collect();
    let l_dynamic = loss_dynamic(pass.center.color, &neighbors, &gt);

    let stat = sf.query(pass.positions, &samples.sample_dirs);
    let comp = composite_vars(&stat, &pass.out, pass.positions, &samples);
    let l_full = loss_full(comp.render.color, &gt);
    let l_mask = loss_mask(comp.blend, &mask);
    let l_entropy = loss_entropy(pass.center.weights);
    let regs = flow_regularizers(&pass, n * samples.samples_per_ray());
    let residuals = surface_residuals(&df, &samples, times, &pass, ctx.cfg.surface_gate);
    let l_surface = loss_surface(&residuals, n);
    let static_depth = integrate(stat.sigma, stat.rgb, pass.positions, &samples).depth.value();
    let l_depth = loss_depth_consistency(comp.render.depth, &static_depth, &mask);

    let objective = weighted_sum(&[
        (w.dynamic_photo, Some(l_dynamic)),
        (w.full_photo, Some(l_full)),
        (w.slow, regs.map(|r| r.0)),
        (w.cycle, regs.map(|r| r.1)),
        (w.entropy, Some(l_entropy)),
        (w.mask, Some(l_mask)),
        (w.surface, l_surface),
        (w.depth_consistency, Some(l_depth)),
    ]);
    let gradients = match objective {
        Some(obj) => {
            let grads = tape.backward(obj.scale(frac));
            df.vars().iter().map(|v| grads.get_or_zeros(*v)).collect()
        }
        None => zero_like(&dynamic_field.params),
    };
    let item = |v: Option<Var>| v.map_or(0.0, |v| v.item() * frac);
    let report = LossReport {
        dynamic_photo: item(Some(l_dynamic)),
        full_photo: item(Some(l_full)),
        slow: item(regs.map(|r| r.0)),
        cycle: item(regs.map(|r| r.1)),
        entropy: item(Some(l_entropy)),
        mask: item(Some(l_mask)),
        surface: item(l_surface),
        depth_consistency: item(Some(l_depth)),
        ..LossReport::default()
    };
    Ok((gradients, report))
}

/// Evaluates chunks (possibly in parallel) and sums them in chunk order.
fn reduce_chunks(
    params: &ParamSet,
    ranges: Vec<Range<usize>>,
    eval: impl Fn(Range<usize>) -> Result<(Vec<Matrix>, LossReport)> + Sync,
) -> Result<(Vec<Matrix>, LossReport)> {
    let parts = ranges.into_par_iter().map(|r| eval(r)).collect::<Result<Vec<_>>>()?;
    let mut grads = zero_like(params);
    let mut report = LossReport::default();
    for (g, r) in parts {
        add_into(&mut grads, &g, 1.0);
        report.accumulate(&r, 1.0);
    }
    Ok((grads, report))
}

impl TrainState {
    /// Fresh state with both fields initialized from the config seed.
    pub fn new(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_dataset(dataset)?;
        dataset.validate()?;
        let arch = cfg.model.arch(dataset)?;
        let static_field = StaticFieldParams::init(arch.clone(), cfg.seed)?;
        let dynamic_field = DynamicFieldParams::init(arch, cfg.seed)?;
        Self::from_fields(static_field, dynamic_field, Stage::Static, cfg)
    }

    /// State that starts the dynamic stage against an already trained static
    /// field.
    pub fn with_static(dataset: &Dataset, static_field: StaticFieldParams, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_dataset(dataset)?;
        dataset.validate()?;
        let arch = cfg.model.arch(dataset)?;
        if static_field.arch != arch {
            return Err(Error::Config("static field architecture does not match the config".into()));
        }
        let dynamic_field = DynamicFieldParams::init(arch, cfg.seed)?;
        Self::from_fields(static_field, dynamic_field, Stage::Dynamic, cfg)
    }

    fn from_fields(
        static_field: StaticFieldParams,
        dynamic_field: DynamicFieldParams,
        stage: Stage,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let optimizer = match stage {
            Stage::Static => Adam::new(&static_field.params),
            _ => Adam::new(&dynamic_field.params),
        };
        let mut state = Self {
            stage,
            iteration: 0,
            static_field,
            dynamic_field,
            optimizer,
            interval: LossReport::default(),
            interval_steps: 0,
        };
        state.advance_stage(cfg);
        Ok(state)
    }

    pub fn stage_length(&self, cfg: &TrainConfig) -> usize {
        match self.stage {
            Stage::Static => cfg.static_iters,
            Stage::Dynamic => cfg.dynamic_iters,
            Stage::Done => 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    /// Moves past finished stages, resetting the optimizer moments.
    fn advance_stage(&mut self, cfg: &TrainConfig) {
        while self.stage != Stage::Done && self.iteration >= self.stage_length(cfg) {
            self.stage = match self.stage {
                Stage::Static => Stage::Dynamic,
                _ => Stage::Done,
            };
            self.iteration = 0;
            self.interval = LossReport::default();
            self.interval_steps = 0;
            self.optimizer = Adam::new(&self.dynamic_field.params);
        }
    }

    /// Runs one iteration of the current stage.
    pub fn step(&mut self, dataset: &Dataset, cfg: &TrainConfig, weights: &LossWeights) -> Result<StepOutcome> {
        let stage = self.stage;
        let total = self.stage_length(cfg);
        let it = self.iteration as u64;
        let fraction = if stage == Stage::Dynamic { cfg.mask_ray_fraction } else { 0.0 };
        let batch = sample_ray_batch(dataset, cfg.batch_rays, fraction, cfg.seed, stage.key(), it)?;
        let ctx = ChunkContext {
            dataset,
            batch: &batch,
            cfg,
            weights,
            stage: stage.key(),
            iteration: it,
        };
        let ranges = chunks(batch.len(), cfg.chunk_rays);
        let lr = cfg.learning_rate(self.iteration, total);
        let mut report = match stage {
            Stage::Static => {
                let field = &self.static_field;
                let (grads, report) = reduce_chunks(&field.params, ranges, |r| static_chunk(field, &ctx, r))?;
                self.optimizer.step(&mut self.static_field.params, &grads, lr)?;
                report
            }
            Stage::Dynamic => {
                let (sf, df) = (&self.static_field, &self.dynamic_field);
                let (mut grads, mut report) =
                    reduce_chunks(&df.params, ranges, |r| dynamic_chunk(sf, df, &ctx, r))?;
                if weights.patch > 0.0 && self.iteration.is_multiple_of(cfg.patch_every) {
                    let mut rng = stream(cfg.seed, &[tag::PATCH, it]);
                    let frame = rng.random_range(0..dataset.len());
                    let outcome = patch_constraint_step(sf, df, dataset, frame, cfg, &mut rng)?;
                    add_into(&mut grads, &outcome.gradients, weights.patch);
                    report.patch = outcome.loss;
                }
                self.optimizer.step(&mut self.dynamic_field.params, &grads, lr)?;
                report
            }
            Stage::Done => return Err(Error::domain("training already finished")),
        };
        report = report.weighted(weights);
        self.iteration += 1;
        self.interval.accumulate(&report, 1.0);
        self.interval_steps += 1;
        let mut log_line = None;
        if self.iteration.is_multiple_of(cfg.log_every) {
            let mut mean = LossReport::default();
            mean.accumulate(&self.interval, 1.0 / self.interval_steps as f64);
            log_line = Some(format_log_line(stage, self.iteration, &mean));
            self.interval = LossReport::default();
            self.interval_steps = 0;
        }
        let outcome = StepOutcome {
            stage,
            iteration: self.iteration,
            report,
            log_line,
        };
        self.advance_stage(cfg);
        Ok(outcome)
    }

    /// Steps until training finishes, calling `observer` after every step.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        cfg: &TrainConfig,
        weights: &LossWeights,
        mut observer: impl FnMut(&TrainState, &StepOutcome) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let outcome = self.step(dataset, cfg, weights)?;
            observer(self, &outcome)?;
        }
        Ok(())
    }
}

/// Fits the static field alone; returns it with the log lines.
pub fn train_static(
    dataset: &Dataset,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(StaticFieldParams, Vec<String>)> {
    let mut state = TrainState::new(dataset, cfg)?;
    let mut log = Vec::new();
    while state.stage == Stage::Static {
        let out = state.step(dataset, cfg, weights)?;
        log.extend(out.log_line);
    }
    Ok((state.static_field, log))
}

/// Fits the dynamic field against a frozen static field.
pub fn train_dynamic(
    dataset: &Dataset,
    static_field: &StaticFieldParams,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(DynamicFieldParams, Vec<String>)> {
    let mut state = TrainState::with_static(dataset, static_field.clone(), cfg)?;
    let mut log = Vec::new();
    state.run(dataset, cfg, weights, |_, out| {
        log.extend(out.log_line.clone());
        Ok(())
    })?;
    Ok((state.dynamic_field, log))
}

/// Loss of the dynamic objective on one batch, without updating anything.
pub fn evaluate_dynamic_batch(
    static_field: &StaticFieldParams,
    dynamic_field: &DynamicFieldParams,
    dataset: &Dataset,
    batch: &RayBatch,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(Vec<Matrix>, LossReport)> {
    let ctx = ChunkContext {
        dataset,
        batch,
        cfg,
        weights,
        stage: Stage::Dynamic.key(),
        iteration: 0,
    };
    let (g, r) = reduce_chunks(&dynamic_field.params, chunks(batch.len(), cfg.chunk_rays), |r| {
        dynamic_chunk(static_field, dynamic_field, &ctx, r)
    })?;
    Ok((g, r.weighted(weights)))
}

/// Static objective on one batch, without updating anything.
pub fn evaluate_static_batch(
    static_field: &StaticFieldParams,
    dataset: &Dataset,
    batch: &RayBatch,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(Vec<Matrix>, LossReport)> {
    let ctx = ChunkContext {
        dataset,
        batch,
        cfg,
        weights,
        stage: Stage::Static.key(),
        iteration: 0,
    };
    let (g, r) = reduce_chunks(&static_field.params, chunks(batch.len(), cfg.chunk_rays), |r| {
        static_chunk(static_field, &ctx, r)
    })?;
    Ok((g, r.weighted(weights)))
}
