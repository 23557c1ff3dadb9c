//! Ray sampling, alpha-compositing quadrature and the static, dynamic,
//! cross-time and composite renderers.
//!
//! Batched renderers record onto a caller-owned tape so training can
//! differentiate through them; per-ray and per-patch wrappers evaluate
//! without gradients.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{
    DynamicFieldParams, DynamicOutputVars, DynamicQuery, StaticFieldParams, StaticOutputVars,
    StaticQuery,
};
use crate::geometry::{camera_ray, Camera, PixelPatch, Pose, Ray, Vec3};
use crate::rng::StreamRng;

/// Default length of the final, unbounded sample interval relative to the
/// ray segment.
pub const LAST_DELTA_FACTOR: f64 = 10.0;

/// Floor for the combined density when normalizing the composite color.
pub const COMPOSITE_EPS: f64 = 1e-9;

/// Regularizer for normalizing rendered blending probabilities.
pub const BLEND_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub distances: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// `K` samples on `[near, far]`: bin midpoints, or one uniform jitter per bin.
pub fn sample_ray(ray: &Ray, k: usize, stratified: bool, rng: &mut StreamRng) -> Result<RaySamples> {
    sample_ray_with(ray, k, stratified, LAST_DELTA_FACTOR, rng)
}

/// [`sample_ray`] with an explicit final-interval factor.
pub fn sample_ray_with(
    ray: &Ray,
    k: usize,
    stratified: bool,
    last_delta_factor: f64,
    rng: &mut StreamRng,
) -> Result<RaySamples> {
    if k < 2 {
        return Err(Error::domain(format!("need at least 2 samples per ray, got {k}")));
    }
    let span = ray.far - ray.near;
    let bin = span / k as f64;
    let distances: Vec<f64> = (0..k)
        .map(|i| {
            let offset = if stratified { rng.random::<f64>() } else { 0.5 };
            ray.near + (i as f64 + offset) * bin
        })
        .collect();
    let mut deltas: Vec<f64> = distances.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(last_delta_factor * span);
    let positions = distances.iter().map(|&s| ray.at(s)).collect();
    Ok(RaySamples {
        positions,
        distances,
        deltas,
    })
}

/// Transmittance and weights for one ray.
pub fn quadrature(sigma: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma.len() != deltas.len() {
        return Err(Error::domain("density and delta counts differ"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::domain(format!("negative or invalid density {s}")));
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::domain("sample deltas must be positive"));
    }
    let mut acc = 0.0f64;
    let mut trans = Vec::with_capacity(sigma.len());
    let mut weights = Vec::with_capacity(sigma.len());
    for (s, d) in sigma.iter().zip(deltas) {
        let t = (-acc).exp();
        let sd = s * d;
        trans.push(t);
        weights.push(t * -(-sd).exp_m1());
        acc += sd;
    }
    Ok((trans, weights))
}

/// Tape version of [`quadrature`] over `[R, K]` densities.
pub fn quadrature_vars<'t>(sigma: Var<'t>, deltas: &Matrix) -> (Var<'t>, Var<'t>) {
    let sd = sigma.mul_const(deltas);
    let trans = (-sd.exclusive_cumsum()).exp();
    let alpha = (-sd).exp().one_minus();
    (trans, trans * alpha)
}

/// Sample positions and spacing for a batch of `R` rays with `K` samples each.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    rays: usize,
    k: usize,
    /// `[R·K, 3]`
    pub positions: Matrix,
    /// `[R, K]`
    pub distances: Matrix,
    /// `[R, K]`
    pub deltas: Matrix,
    /// `[R·K, 3]`, each ray's direction repeated per sample.
    pub sample_dirs: Matrix,
    /// `[R, 3]`
    pub ray_dirs: Matrix,
}

impl SampleBatch {
    pub fn from_samples(rays: &[Ray], samples: &[RaySamples]) -> Result<Self> {
        if rays.len() != samples.len() || rays.is_empty() {
            return Err(Error::domain("ray and sample counts differ or are empty"));
        }
        let k = samples[0].len();
        if samples.iter().any(|s| s.len() != k) {
            return Err(Error::domain("all rays in a batch need the same sample count"));
        }
        let r = rays.len();
        let mut positions = Vec::with_capacity(r * k * 3);
        let mut dirs = Vec::with_capacity(r * k * 3);
        let mut distances = Vec::with_capacity(r * k);
        let mut deltas = Vec::with_capacity(r * k);
        for (ray, s) in rays.iter().zip(samples) {
            for p in &s.positions {
                positions.extend_from_slice(&[p.x, p.y, p.z]);
                dirs.extend_from_slice(&[ray.direction.x, ray.direction.y, ray.direction.z]);
            }
            distances.extend_from_slice(&s.distances);
            deltas.extend_from_slice(&s.deltas);
        }
        let ray_dirs = Matrix::from_fn(r, 3, |i, c| rays[i].direction[c]);
        Ok(Self {
            rays: r,
            k,
            positions: Matrix::from_vec(r * k, 3, positions),
            distances: Matrix::from_vec(r, k, distances),
            deltas: Matrix::from_vec(r, k, deltas),
            sample_dirs: Matrix::from_vec(r * k, 3, dirs),
            ray_dirs,
        })
    }

    /// Samples every ray; `rng_for(i)` supplies the stream for ray `i` when
    /// `stratified` is set.
    pub fn sample(
        rays: &[Ray],
        k: usize,
        stratified: bool,
        last_delta_factor: f64,
        mut rng_for: impl FnMut(usize) -> StreamRng,
    ) -> Result<Self> {
        let mut dummy = crate::rng::stream(0, &[]);
        let samples = rays
            .iter()
            .enumerate()
            .map(|(i, ray)| {
                if stratified {
                    let mut rng = rng_for(i);
                    sample_ray_with(ray, k, true, last_delta_factor, &mut rng)
                } else {
                    sample_ray_with(ray, k, false, last_delta_factor, &mut dummy)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(rays, &samples)
    }

    pub fn rays(&self) -> usize {
        self.rays
    }

    pub fn samples_per_ray(&self) -> usize {
        self.k
    }

    /// Sample rows belonging to the listed rays.
    pub fn sample_rows(&self, rays: &[usize]) -> Vec<usize> {
        rays.iter().flat_map(|&r| r * self.k..(r + 1) * self.k).collect()
    }

    /// Sub-batch made of the listed rays.
    pub fn select(&self, rays: &[usize]) -> SampleBatch {
        let rows = self.sample_rows(rays);
        SampleBatch {
            rays: rays.len(),
            k: self.k,
            positions: self.positions.select_rows(&rows),
            distances: self.distances.select_rows(rays),
            deltas: self.deltas.select_rows(rays),
            sample_dirs: self.sample_dirs.select_rows(&rows),
            ray_dirs: self.ray_dirs.select_rows(rays),
        }
    }
}

/// Rendered quantities for a batch, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars<'t> {
    /// `[R, 3]`
    pub color: Var<'t>,
    /// `[R, 1]` expected termination distance along the ray.
    pub depth: Var<'t>,
    /// `[R, 1]` accumulated opacity `Σw`.
    pub opacity: Var<'t>,
    /// `[R, K]`
    pub weights: Var<'t>,
    /// `[R, 3]` unnormalized expected surface point `Σ w x`.
    pub surface: Var<'t>,
}

/// Composites per-sample densities/colors over `batch`. `points` are the
/// positions averaged into the surface point (the warped ones for
/// cross-time passes).
pub fn integrate<'t>(
    sigma: Var<'t>,
    rgb: Var<'t>,
    points: Var<'t>,
    batch: &SampleBatch,
) -> RenderVars<'t> {
    let (r, k) = (batch.rays, batch.k);
    let tape = sigma.tape();
    let (_, weights) = quadrature_vars(sigma.reshape(r, k), &batch.deltas);
    let w_col = weights.reshape(r * k, 1);
    RenderVars {
        color: (rgb * w_col).sum_row_groups(k),
        depth: (weights * tape.constant(batch.distances.clone())).sum_cols(),
        opacity: weights.sum_cols(),
        weights,
        surface: (points * w_col).sum_row_groups(k),
    }
}

/// Static-field render.
pub fn render_static_vars<'t>(
    field: &dyn StaticQuery<'t>,
    tape: &'t Tape,
    batch: &SampleBatch,
) -> (StaticOutputVars<'t>, RenderVars<'t>) {
    let x = tape.constant(batch.positions.clone());
    let out = field.query(x, &batch.sample_dirs);
    let render = integrate(out.sigma, out.rgb, x, batch);
    (out, render)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDirection {
    Forward,
    Backward,
}

/// Per-ray frame timing: the normalized time and whether each neighbor
/// frame exists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayTime {
    pub t: f64,
    pub has_prev: bool,
    pub has_next: bool,
}

impl RayTime {
    /// Timing of frame `n` out of `count`.
    pub fn frame(n: usize, count: usize) -> Self {
        Self {
            t: crate::fields::frame_time(n, count),
            has_prev: n > 0,
            has_next: n + 1 < count,
        }
    }

    /// Timing for an arbitrary time, with neighbors available whenever they
    /// stay inside `[0, 1]`.
    pub fn at(t: f64, step: f64) -> Self {
        Self {
            t,
            has_prev: t - step >= -1e-9,
            has_next: t + step <= 1.0 + 1e-9,
        }
    }

    pub fn has(&self, dir: FlowDirection) -> bool {
        match dir {
            FlowDirection::Forward => self.has_next,
            FlowDirection::Backward => self.has_prev,
        }
    }

    pub fn neighbor(&self, dir: FlowDirection, step: f64) -> f64 {
        let t = match dir {
            FlowDirection::Forward => self.t + step,
            FlowDirection::Backward => self.t - step,
        };
        t.clamp(0.0, 1.0)
    }
}

fn per_sample_times(times: &[RayTime], k: usize, value: impl Fn(&RayTime) -> f64) -> Matrix {
    Matrix::from_vec(
        times.len() * k,
        1,
        times.iter().flat_map(|rt| std::iter::repeat_n(value(rt), k)).collect(),
    )
}

/// Cross-time render for the rays with a neighbor in one direction.
#[derive(Clone, Debug)]
pub struct NeighborPass<'t> {
    pub direction: FlowDirection,
    /// Batch indices of the participating rays.
    pub rays: Vec<usize>,
    /// Flow used to displace the samples, `[n·K, 3]`.
    pub flow: Var<'t>,
    /// Field outputs at the displaced samples and neighbor time.
    pub out: DynamicOutputVars<'t>,
    pub render: RenderVars<'t>,
}

/// Dynamic render at each ray's own time plus both cross-time renders.
#[derive(Clone, Debug)]
pub struct DynamicPass<'t> {
    pub positions: Var<'t>,
    pub out: DynamicOutputVars<'t>,
    pub center: RenderVars<'t>,
    pub forward: Option<NeighborPass<'t>>,
    pub backward: Option<NeighborPass<'t>>,
}

impl<'t> DynamicPass<'t> {
    pub fn neighbor(&self, dir: FlowDirection) -> Option<&NeighborPass<'t>> {
        match dir {
            FlowDirection::Forward => self.forward.as_ref(),
            FlowDirection::Backward => self.backward.as_ref(),
        }
    }
}

/// Dynamic render at the rays' own times only.
pub fn render_dynamic_vars<'t>(
    field: &dyn DynamicQuery<'t>,
    tape: &'t Tape,
    batch: &SampleBatch,
    times: &[RayTime],
) -> (Var<'t>, DynamicOutputVars<'t>, RenderVars<'t>) {
    assert_eq!(times.len(), batch.rays, "one time per ray");
    let x = tape.constant(batch.positions.clone());
    let t = per_sample_times(times, batch.k, |rt| rt.t);
    let out = field.query(x, &batch.sample_dirs, &t);
    let render = integrate(out.sigma, out.rgb, x, batch);
    (x, out, render)
}

/// Renders the displaced samples `x + f` at the neighbor time over the same
/// deltas, for the rays that have that neighbor.
pub fn neighbor_pass<'t>(
    field: &dyn DynamicQuery<'t>,
    batch: &SampleBatch,
    times: &[RayTime],
    positions: Var<'t>,
    center: &DynamicOutputVars<'t>,
    direction: FlowDirection,
    step: f64,
) -> Option<NeighborPass<'t>> {
    let rays: Vec<usize> = (0..batch.rays).filter(|&r| times[r].has(direction)).collect();
    if rays.is_empty() {
        return None;
    }
    let all = rays.len() == batch.rays;
    let sub = if all { batch.clone() } else { batch.select(&rays) };
    let rows = batch.sample_rows(&rays);
    let full_flow = match direction {
        FlowDirection::Forward => center.flow_fwd,
        FlowDirection::Backward => center.flow_bwd,
    };
    let (x, flow) = if all {
        (positions, full_flow)
    } else {
        (positions.select_rows(&rows), full_flow.select_rows(&rows))
    };
    let warped = x + flow;
    let sub_times: Vec<RayTime> = rays.iter().map(|&r| times[r]).collect();
    let t = per_sample_times(&sub_times, batch.k, |rt| rt.neighbor(direction, step));
    let out = field.query(warped, &sub.sample_dirs, &t);
    let render = integrate(out.sigma, out.rgb, warped, &sub);
    Some(NeighborPass {
        direction,
        rays,
        flow,
        out,
        render,
    })
}

/// Center render plus the forward and backward cross-time renders.
pub fn dynamic_pass<'t>(
    field: &dyn DynamicQuery<'t>,
    tape: &'t Tape,
    batch: &SampleBatch,
    times: &[RayTime],
    step: f64,
) -> DynamicPass<'t> {
    let (positions, out, center) = render_dynamic_vars(field, tape, batch, times);
    let forward = neighbor_pass(field, batch, times, positions, &out, FlowDirection::Forward, step);
    let backward = neighbor_pass(field, batch, times, positions, &out, FlowDirection::Backward, step);
    DynamicPass {
        positions,
        out,
        center,
        forward,
        backward,
    }
}

/// Composite render and its alpha-composited blending probability.
#[derive(Clone, Copy, Debug)]
pub struct CompositeVars<'t> {
    pub render: RenderVars<'t>,
    /// `[R, 1]`, `Σ w p / (Σ w + ε)`.
    pub blend: Var<'t>,
}

/// Blends static and dynamic samples with the additive density mixture
/// `σ = (1−p)σ_s + pσ_d` and density-weighted colors.
pub fn composite_vars<'t>(
    stat: &StaticOutputVars<'t>,
    dynamic: &DynamicOutputVars<'t>,
    positions: Var<'t>,
    batch: &SampleBatch,
) -> CompositeVars<'t> {
    let p = dynamic.blend;
    let s_part = p.one_minus() * stat.sigma;
    let d_part = p * dynamic.sigma;
    let sigma = s_part + d_part;
    let rgb = (stat.rgb * s_part + dynamic.rgb * d_part) / sigma.clamp_min(COMPOSITE_EPS);
    let render = integrate(sigma, rgb, positions, batch);
    let (r, k) = (batch.rays, batch.k);
    let blended = (render.weights * p.reshape(r, k)).sum_cols();
    let blend = blended / render.opacity.add_scalar(BLEND_EPS);
    CompositeVars { render, blend }
}

/// Plain per-ray render output.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
    pub surface: Vec3,
}

impl RenderResult {
    fn from_vars(render: &RenderVars<'_>, row: usize) -> Self {
        let color = render.color.value();
        let surface = render.surface.value();
        Self {
            color: color.row3(row),
            depth: render.depth.value().get(row, 0),
            opacity: render.opacity.value().get(row, 0),
            weights: render.weights.value().row(row).to_vec(),
            surface: Vec3::from(surface.row3(row)),
        }
    }
}

/// Results at `t − Δ`, `t`, `t + Δ`; neighbors are absent at boundary frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicTriple {
    pub backward: Option<RenderResult>,
    pub center: RenderResult,
    pub forward: Option<RenderResult>,
}

impl DynamicTriple {
    pub fn count(&self) -> usize {
        1 + self.backward.is_some() as usize + self.forward.is_some() as usize
    }
}

/// `Σ w_i x_i`, deliberately unnormalized.
pub fn surface_point(weights: &[f64], positions: &[Vec3]) -> Vec3 {
    weights
        .iter()
        .zip(positions)
        .fold(Vec3::zeros(), |acc, (w, x)| acc + x * *w)
}

fn single_batch(ray: &Ray, samples: &RaySamples) -> Result<SampleBatch> {
    if (ray.direction.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::domain("ray direction must be unit length"));
    }
    SampleBatch::from_samples(std::slice::from_ref(ray), std::slice::from_ref(samples))
}

fn ensure_finite(render: &RenderVars<'_>) -> Result<()> {
    let finite = render.color.value().is_finite()
        && render.depth.value().is_finite()
        && render.weights.value().is_finite();
    if finite {
        Ok(())
    } else {
        Err(Error::Numeric("render produced non-finite values".into()))
    }
}

pub fn render_ray_static(params: &StaticFieldParams, ray: &Ray, samples: &RaySamples) -> Result<RenderResult> {
    let batch = single_batch(ray, samples)?;
    let tape = Tape::new();
    let field = params.bind(&tape, false)?;
    let (_, render) = render_static_vars(&field, &tape, &batch);
    ensure_finite(&render)?;
    Ok(RenderResult::from_vars(&render, 0))
}

/// Renders at `t` and, where the neighbor frames exist, at `t ± Δ` by
/// querying the flowed samples.
pub fn render_ray_dynamic_triple(
    params: &DynamicFieldParams,
    ray: &Ray,
    samples: &RaySamples,
    time: RayTime,
    step: f64,
) -> Result<DynamicTriple> {
    if !(0.0..=1.0).contains(&time.t) {
        return Err(Error::domain(format!("timestamp {} outside [0, 1]", time.t)));
    }
    let batch = single_batch(ray, samples)?;
    let tape = Tape::new();
    let field = params.bind(&tape, false)?;
    let pass = dynamic_pass(&field, &tape, &batch, &[time], step);
    ensure_finite(&pass.center)?;
    Ok(DynamicTriple {
        backward: pass.backward.map(|n| RenderResult::from_vars(&n.render, 0)),
        center: RenderResult::from_vars(&pass.center, 0),
        forward: pass.forward.map(|n| RenderResult::from_vars(&n.render, 0)),
    })
}

pub fn render_ray_composite(
    static_params: &StaticFieldParams,
    dynamic_params: &DynamicFieldParams,
    ray: &Ray,
    samples: &RaySamples,
    t: f64,
) -> Result<RenderResult> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("timestamp {t} outside [0, 1]")));
    }
    let batch = single_batch(ray, samples)?;
    let tape = Tape::new();
    let sf = static_params.bind(&tape, false)?;
    let df = dynamic_params.bind(&tape, false)?;
    let (x, dout, _) = render_dynamic_vars(&df, &tape, &batch, &[RayTime::at(t, 0.0)]);
    let sout = sf.query(x, &batch.sample_dirs);
    let comp = composite_vars(&sout, &dout, x, &batch);
    ensure_finite(&comp.render)?;
    Ok(RenderResult::from_vars(&comp.render, 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Static,
    Dynamic,
    Composite,
}

/// Sampling controls for image rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub last_delta_factor: f64,
    pub chunk_rays: usize,
}

impl RenderOptions {
    pub fn new(samples: usize, near: f64, far: f64) -> Self {
        Self {
            samples,
            near,
            far,
            last_delta_factor: LAST_DELTA_FACTOR,
            chunk_rays: 256,
        }
    }
}

/// Borrowed model for rendering; which fields are required depends on the mode.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub static_field: Option<&'a StaticFieldParams>,
    pub dynamic_field: Option<&'a DynamicFieldParams>,
}

/// Per-pixel outputs in pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRender {
    /// `[n, 3]`
    pub rgb: Matrix,
    /// `[n, 1]` expected distance along each ray.
    pub depth: Matrix,
    /// `[n, 1]`
    pub opacity: Matrix,
    /// `[n, 1]` rendered blending probability (composite mode only).
    pub blend: Option<Matrix>,
    /// `[n, 3]` expected surface point of the rendered mode.
    pub surface: Matrix,
}

/// Tape-level render of one batch in the requested mode.
pub struct ModeRender<'t> {
    pub render: RenderVars<'t>,
    pub blend: Option<Var<'t>>,
}

pub fn render_mode_vars<'t>(
    static_field: Option<&dyn StaticQuery<'t>>,
    dynamic_field: Option<&dyn DynamicQuery<'t>>,
    tape: &'t Tape,
    batch: &SampleBatch,
    t: f64,
    mode: RenderMode,
) -> Result<ModeRender<'t>> {
    let missing = |what: &str| Error::domain(format!("{what} field required for {mode:?} rendering"));
    match mode {
        RenderMode::Static => {
            let sf = static_field.ok_or_else(|| missing("static"))?;
            let (_, render) = render_static_vars(sf, tape, batch);
            Ok(ModeRender { render, blend: None })
        }
        RenderMode::Dynamic => {
            let df = dynamic_field.ok_or_else(|| missing("dynamic"))?;
            let times = vec![RayTime::at(t, 0.0); batch.rays];
            let (_, _, render) = render_dynamic_vars(df, tape, batch, &times);
            Ok(ModeRender { render, blend: None })
        }
        RenderMode::Composite => {
            let sf = static_field.ok_or_else(|| missing("static"))?;
            let df = dynamic_field.ok_or_else(|| missing("dynamic"))?;
            let times = vec![RayTime::at(t, 0.0); batch.rays];
            let (x, dout, _) = render_dynamic_vars(df, tape, batch, &times);
            let sout = sf.query(x, &batch.sample_dirs);
            let comp = composite_vars(&sout, &dout, x, batch);
            Ok(ModeRender {
                render: comp.render,
                blend: Some(comp.blend),
            })
        }
    }
}

/// Renders the listed pixels without gradients, in deterministic chunks.
/// Sampling is at bin midpoints unless `jitter` supplies a per-pixel stream.
#[allow(clippy::too_many_arguments)]
pub fn render_pixels(
    model: Model<'_>,
    camera: &Camera,
    pose: &Pose,
    pixels: &[(usize, usize)],
    t: f64,
    mode: RenderMode,
    opts: &RenderOptions,
    jitter: Option<&(dyn Fn(usize, usize) -> StreamRng + Sync)>,
) -> Result<PixelRender> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("timestamp {t} outside [0, 1]")));
    }
    let rays = pixels
        .iter()
        .map(|&(u, v)| camera_ray(camera, pose, u as f64, v as f64, opts.near, opts.far))
        .collect::<Result<Vec<_>>>()?;
    let chunk = opts.chunk_rays.max(1);
    let parts = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, chunk_rays)| -> Result<PixelRender> {
            let base = ci * chunk;
            let batch = SampleBatch::sample(
                chunk_rays,
                opts.samples,
                jitter.is_some(),
                opts.last_delta_factor,
                |i| {
                    let (u, v) = pixels[base + i];
                    jitter.expect("jitter stream")(u, v)
                },
            )?;
            let tape = Tape::new();
            let sf = model.static_field.map(|p| p.bind(&tape, false)).transpose()?;
            let df = model.dynamic_field.map(|p| p.bind(&tape, false)).transpose()?;
            let out = render_mode_vars(
                sf.as_ref().map(|f| f as &dyn StaticQuery),
                df.as_ref().map(|f| f as &dyn DynamicQuery),
                &tape,
                &batch,
                t,
                mode,
            )?;
            ensure_finite(&out.render)?;
            Ok(PixelRender {
                rgb: (*out.render.color.value()).clone(),
                depth: (*out.render.depth.value()).clone(),
                opacity: (*out.render.opacity.value()).clone(),
                blend: out.blend.map(|b| (*b.value()).clone()),
                surface: (*out.render.surface.value()).clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(concat_renders(parts))
}

fn stack(parts: Vec<Matrix>) -> Matrix {
    let cols = parts.first().map_or(0, Matrix::cols);
    let rows = parts.iter().map(Matrix::rows).sum();
    let data = parts.into_iter().flat_map(Matrix::into_vec).collect();
    Matrix::from_vec(rows, cols, data)
}

fn concat_renders(parts: Vec<PixelRender>) -> PixelRender {
    let has_blend = parts.first().is_some_and(|p| p.blend.is_some());
    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    let mut opacity = Vec::new();
    let mut blend = Vec::new();
    let mut surface = Vec::new();
    for p in parts {
        rgb.push(p.rgb);
        depth.push(p.depth);
        opacity.push(p.opacity);
        surface.push(p.surface);
        if let Some(b) = p.blend {
            blend.push(b);
        }
    }
    PixelRender {
        rgb: stack(rgb),
        depth: stack(depth),
        opacity: stack(opacity),
        blend: has_blend.then(|| stack(blend)),
        surface: stack(surface),
    }
}

/// Renders a pixel patch deterministically (bin-midpoint samples).
pub fn render_patch(
    model: Model<'_>,
    camera: &Camera,
    pose: &Pose,
    patch: &PixelPatch,
    t: f64,
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<PixelRender> {
    patch.validate(camera)?;
    let pixels: Vec<_> = patch.pixels().collect();
    render_pixels(model, camera, pose, &pixels, t, mode, opts, None)
}

/// Renders the whole image in row-major pixel order.
pub fn render_view(
    model: Model<'_>,
    camera: &Camera,
    pose: &Pose,
    t: f64,
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<PixelRender> {
    let pixels: Vec<_> = (0..camera.height)
        .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
        .collect();
    render_pixels(model, camera, pose, &pixels, t, mode, opts, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{EncodingConfig, FieldArch, ParamSet};
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn ray_z(near: f64, far: f64) -> Ray {
        Ray::new(Vec3::zeros(), Vec3::z(), near, far).unwrap()
    }

    #[test]
    fn midpoint_samples() {
        let s = sample_ray(&ray_z(0.0, 1.0), 4, false, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(s.distances, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas[..3], [0.25, 0.25, 0.25]);
        assert_eq!(s.deltas[3], LAST_DELTA_FACTOR);
        assert!(sample_ray(&ray_z(0.0, 1.0), 1, false, &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_bins_and_repeat() {
        let ray = ray_z(1.0, 3.0);
        let a = sample_ray(&ray, 16, true, &mut rng::stream(5, &[1])).unwrap();
        let b = sample_ray(&ray, 16, true, &mut rng::stream(5, &[1])).unwrap();
        assert_eq!(a, b);
        for (i, s) in a.distances.iter().enumerate() {
            let lo = 1.0 + i as f64 * 2.0 / 16.0;
            assert!(*s >= lo && *s < lo + 2.0 / 16.0);
        }
        assert!(a.deltas.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn quadrature_examples() {
        let (t, w) = quadrature(&[0.0; 5], &[0.2; 5]).unwrap();
        assert!(t.iter().all(|v| *v == 1.0) && w.iter().all(|v| *v == 0.0));
        let (_, w) = quadrature(&[1e6, 3.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && w[1] < 1e-12 && w[2] < 1e-12);
        assert!(matches!(quadrature(&[1.0, -0.1], &[1.0, 1.0]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn homogeneous_medium_is_exact(sigma in 0.0f64..20.0, len in 0.01f64..10.0, k in 2usize..200) {
            let (_, w) = quadrature(&vec![sigma; k], &vec![len / k as f64; k]).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - (1.0 - (-sigma * len).exp())).abs() < 1e-12);
        }

        #[test]
        fn weights_and_transmittance_partition_unity(
            sigma in prop::collection::vec(0.0f64..50.0, 2..64),
            seed in any::<u64>(),
        ) {
            let mut r = rng::stream(seed, &[]);
            let deltas: Vec<f64> = sigma.iter().map(|_| r.random_range(0.001..0.2)).collect();
            let (_, w) = quadrature(&sigma, &deltas).unwrap();
            let od: f64 = sigma.iter().zip(&deltas).map(|(s, d)| s * d).sum();
            prop_assert!((w.iter().sum::<f64>() + (-od).exp() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn tape_quadrature_matches_plain() {
        let sigma = [0.5, 3.0, 0.0, 12.0, 1.0];
        let deltas = [0.1, 0.2, 0.05, 0.3, 2.0];
        let (t, w) = quadrature(&sigma, &deltas).unwrap();
        let tape = Tape::new();
        let (tv, wv) = quadrature_vars(
            tape.constant(Matrix::from_vec(1, 5, sigma.to_vec())),
            &Matrix::from_vec(1, 5, deltas.to_vec()),
        );
        for i in 0..5 {
            assert!((tv.value().get(0, i) - t[i]).abs() < 1e-15);
            assert!((wv.value().get(0, i) - w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn surface_point_examples() {
        let xs = [Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)];
        assert_eq!(surface_point(&[0.0, 1.0], &xs), xs[1]);
        assert_eq!(surface_point(&[0.0, 0.0], &xs), Vec3::zeros());
    }

    /// Constant-field adapter: every point has the same density and color.
    struct Uniform {
        sigma: f64,
        rgb: [f64; 3],
    }

    impl<'t> StaticQuery<'t> for Uniform {
        fn query(&self, x: Var<'t>, _dirs: &Matrix) -> StaticOutputVars<'t> {
            let n = x.rows();
            let tape = x.tape();
            StaticOutputVars {
                sigma: tape.constant(Matrix::filled(n, 1, self.sigma)),
                rgb: tape.constant(Matrix::from_fn(n, 3, |_, c| self.rgb[c])),
            }
        }
    }

    /// Opaque half-space `z ≥ plane` with a fixed color.
    struct HalfSpace {
        plane: f64,
    }

    impl<'t> StaticQuery<'t> for HalfSpace {
        fn query(&self, x: Var<'t>, _dirs: &Matrix) -> StaticOutputVars<'t> {
            let xv = x.value();
            let n = xv.rows();
            let tape = x.tape();
            StaticOutputVars {
                sigma: tape.constant(Matrix::from_fn(n, 1, |r, _| {
                    if xv.get(r, 2) >= self.plane {
                        1e4
                    } else {
                        0.0
                    }
                })),
                rgb: tape.constant(Matrix::filled(n, 3, 0.3)),
            }
        }
    }

    fn batch_for(rays: &[Ray], k: usize) -> SampleBatch {
        SampleBatch::sample(rays, k, false, LAST_DELTA_FACTOR, |_| unreachable!()).unwrap()
    }

    #[test]
    fn constant_color_factorizes() {
        let tape = Tape::new();
        let rays = [ray_z(0.5, 2.0)];
        let batch = batch_for(&rays, 32);
        let field = Uniform {
            sigma: 0.7,
            rgb: [0.2, 0.5, 0.9],
        };
        let (_, r) = render_static_vars(&field, &tape, &batch);
        let a = r.opacity.item();
        for c in 0..3 {
            assert!((r.color.value().get(0, c) - a * field.rgb[c]).abs() < 1e-14);
        }
        let vac = Uniform { sigma: 0.0, rgb: [1.0; 3] };
        let (_, r) = render_static_vars(&vac, &tape, &batch);
        assert_eq!(r.color.value().row(0), &[0.0; 3]);
        assert_eq!(r.opacity.item(), 0.0);
    }

    #[test]
    fn opaque_plane_depth_matches_intersection() {
        let tape = Tape::new();
        let k = 64;
        let (near, far) = (1.0, 5.0);
        let dirs = [Vec3::z(), Vec3::new(0.3, -0.2, 1.0).normalize(), Vec3::new(-0.1, 0.4, 1.0).normalize()];
        let rays: Vec<Ray> = dirs.iter().map(|d| Ray::new(Vec3::zeros(), *d, near, far).unwrap()).collect();
        let batch = batch_for(&rays, k);
        let (_, r) = render_static_vars(&HalfSpace { plane: 3.1 }, &tape, &batch);
        for (i, d) in dirs.iter().enumerate() {
            let exact = 3.1 / d.z;
            assert!((r.depth.value().get(i, 0) - exact).abs() <= 2.0 * (far - near) / k as f64);
            let surf = Vec3::from(r.surface.value().row3(i));
            assert!((surf - d * exact).norm() <= 2.0 * (far - near) / k as f64 * 1.01);
        }
    }

    fn tiny_arch() -> FieldArch {
        FieldArch {
            encoding: EncodingConfig {
                pos_freqs: 2,
                dir_freqs: 1,
                time_freqs: 1,
            },
            width: 8,
            depth: 2,
            skip: None,
            max_flow: 0.2,
            scene_center: [0.0, 0.0, 2.0],
            scene_scale: 1.5,
        }
    }

    fn randomize(mut p: ParamSet, seed: u64) -> ParamSet {
        let mut r = rng::stream(seed, &[]);
        for m in p.values_mut() {
            for v in m.data_mut() {
                *v = r.random_range(-0.8..0.8);
            }
        }
        p
    }

    fn random_fields(seed: u64) -> (StaticFieldParams, DynamicFieldParams) {
        let s = StaticFieldParams::init(tiny_arch(), seed).unwrap();
        let d = DynamicFieldParams::init(tiny_arch(), seed).unwrap();
        (
            StaticFieldParams::from_parts(s.arch, randomize(s.params, seed)).unwrap(),
            DynamicFieldParams::from_parts(d.arch, randomize(d.params, seed + 1)).unwrap(),
        )
    }

    fn set_const(p: &mut DynamicFieldParams, head: &str, bias: f64) {
        let w = p.params.get_mut(&format!("{head}.weight")).unwrap();
        *w = Matrix::zeros(w.rows(), w.cols());
        let b = p.params.get_mut(&format!("{head}.bias")).unwrap();
        *b = Matrix::filled(1, b.cols(), bias);
    }

    fn test_ray() -> (Ray, RaySamples) {
        let ray = Ray::new(Vec3::new(0.1, -0.1, 0.0), Vec3::new(0.1, 0.05, 1.0).normalize(), 1.0, 3.0).unwrap();
        let s = sample_ray(&ray, 16, false, &mut rng::stream(0, &[])).unwrap();
        (ray, s)
    }

    #[test]
    fn composite_limits() {
        let (s, mut d) = random_fields(3);
        let (ray, samples) = test_ray();
        set_const(&mut d, "blend", -1e3);
        let comp = render_ray_composite(&s, &d, &ray, &samples, 0.4).unwrap();
        let stat = render_ray_static(&s, &ray, &samples).unwrap();
        for c in 0..3 {
            assert!((comp.color[c] - stat.color[c]).abs() < 1e-12);
        }
        assert!((comp.depth - stat.depth).abs() < 1e-12);

        set_const(&mut d, "blend", 1e3);
        let comp = render_ray_composite(&s, &d, &ray, &samples, 0.4).unwrap();
        let dynamic = render_ray_dynamic_triple(&d, &ray, &samples, RayTime::at(0.4, 0.1), 0.1).unwrap();
        for c in 0..3 {
            assert!((comp.color[c] - dynamic.center.color[c]).abs() < 1e-12);
        }
        assert!((comp.depth - dynamic.center.depth).abs() < 1e-12);
    }

    #[test]
    fn composite_half_blend_of_identical_fields() {
        let tape = Tape::new();
        let (ray, samples) = test_ray();
        let batch = SampleBatch::from_samples(&[ray], &[samples]).unwrap();
        let x = tape.constant(batch.positions.clone());
        let n = x.rows();
        let sig = tape.constant(Matrix::from_fn(n, 1, |r, _| 0.3 * r as f64));
        let rgb = tape.constant(Matrix::from_fn(n, 3, |r, c| ((r + c) % 4) as f64 / 4.0));
        let stat = StaticOutputVars { sigma: sig, rgb };
        let zero = tape.constant(Matrix::zeros(n, 3));
        let dynamic = DynamicOutputVars {
            sigma: sig,
            rgb,
            flow_fwd: zero,
            flow_bwd: zero,
            blend: tape.constant(Matrix::filled(n, 1, 0.5)),
        };
        let comp = composite_vars(&stat, &dynamic, x, &batch);
        let plain = integrate(sig, rgb, x, &batch);
        for c in 0..3 {
            assert!((comp.render.color.value().get(0, c) - plain.color.value().get(0, c)).abs() < 1e-12);
        }
        assert!((comp.blend.item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_flow_time_constant_field_gives_identical_triple() {
        let (_, mut d) = random_fields(4);
        // remove time dependence by zeroing the time-encoding rows of the first layer
        let arch = d.arch.clone();
        let pos_dim = 3 * (2 * arch.encoding.pos_freqs + 1);
        let w = d.params.get_mut("trunk.0.weight").unwrap();
        for r in pos_dim..w.rows() {
            for c in 0..w.cols() {
                w.set(r, c, 0.0);
            }
        }
        set_const(&mut d, "flow_fwd", 0.0);
        set_const(&mut d, "flow_bwd", 0.0);
        let (ray, samples) = test_ray();
        let tri = render_ray_dynamic_triple(&d, &ray, &samples, RayTime::frame(3, 8), 1.0 / 7.0).unwrap();
        assert_eq!(tri.count(), 3);
        assert_eq!(tri.forward.as_ref().unwrap(), &tri.center);
        assert_eq!(tri.backward.as_ref().unwrap(), &tri.center);
    }

    #[test]
    fn boundary_frames_render_two_results() {
        let (_, d) = random_fields(5);
        let (ray, samples) = test_ray();
        let first = render_ray_dynamic_triple(&d, &ray, &samples, RayTime::frame(0, 8), 1.0 / 7.0).unwrap();
        assert_eq!(first.count(), 2);
        assert!(first.forward.is_some() && first.backward.is_none());
        let last = render_ray_dynamic_triple(&d, &ray, &samples, RayTime::frame(7, 8), 1.0 / 7.0).unwrap();
        assert!(last.forward.is_none() && last.backward.is_some());
    }

    #[test]
    fn patch_rendering_matches_per_ray() {
        let (s, d) = random_fields(6);
        let cam = Camera::new(8.0, 8.0, 4.0, 4.0, 8, 8).unwrap();
        let pose = Pose::identity();
        let mut opts = RenderOptions::new(12, 1.0, 3.0);
        opts.chunk_rays = 5;
        let model = Model {
            static_field: Some(&s),
            dynamic_field: Some(&d),
        };
        let patch = PixelPatch::new(1, 2, 3, 2, &cam).unwrap();
        let out = render_patch(model, &cam, &pose, &patch, 0.5, RenderMode::Composite, &opts).unwrap();
        for (i, (u, v)) in patch.pixels().enumerate() {
            let ray = camera_ray(&cam, &pose, u as f64, v as f64, 1.0, 3.0).unwrap();
            let samples = sample_ray(&ray, 12, false, &mut rng::stream(0, &[])).unwrap();
            let r = render_ray_composite(&s, &d, &ray, &samples, 0.5).unwrap();
            assert_eq!(out.rgb.row(i), &r.color);
            assert_eq!(out.depth.get(i, 0), r.depth);
        }
        let single = PixelPatch::new(4, 4, 1, 1, &cam).unwrap();
        let one = render_patch(model, &cam, &pose, &single, 0.5, RenderMode::Static, &opts).unwrap();
        let ray = camera_ray(&cam, &pose, 4.0, 4.0, 1.0, 3.0).unwrap();
        let samples = sample_ray(&ray, 12, false, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(one.rgb.row(0), &render_ray_static(&s, &ray, &samples).unwrap().color);
        let full = render_view(model, &cam, &pose, 0.5, RenderMode::Dynamic, &opts).unwrap();
        assert_eq!(full.rgb.rows(), 64);
    }

    #[test]
    fn renders_are_differentiable_wrt_params() {
        let (s, d) = random_fields(7);
        let rays = [
            test_ray().0,
            Ray::new(Vec3::zeros(), Vec3::new(-0.2, 0.1, 1.0).normalize(), 1.0, 3.0).unwrap(),
        ];
        let batch = batch_for(&rays, 8);
        let times = [RayTime::at(0.5, 0.25), RayTime::at(0.25, 0.25)];
        fn objective<'t>(
            sf: &crate::fields::StaticFieldVars<'t>,
            df: &crate::fields::DynamicFieldVars<'t>,
            tape: &'t Tape,
            batch: &SampleBatch,
            times: &[RayTime],
        ) -> Var<'t> {
            let pass = dynamic_pass(df, tape, batch, times, 0.25);
            let sout = sf.query(pass.positions, &batch.sample_dirs);
            let comp = composite_vars(&sout, &pass.out, pass.positions, batch);
            let f = pass.forward.unwrap().render;
            let b = pass.backward.unwrap().render;
            comp.render.color.sum()
                + comp.render.depth.sum().scale(0.3)
                + comp.blend.sum()
                + f.color.sum()
                + b.surface.sum().scale(0.2)
                + pass.center.depth.sum().scale(0.1)
        }
        let eval = |sp: &StaticFieldParams, dp: &DynamicFieldParams| -> f64 {
            let tape = Tape::new();
            let sf = sp.bind(&tape, false).unwrap();
            let df = dp.bind(&tape, false).unwrap();
            objective(&sf, &df, &tape, &batch, &times).item()
        };
        let tape = Tape::new();
        let sf = s.bind(&tape, true).unwrap();
        let df = d.bind(&tape, true).unwrap();
        let g = tape.backward(objective(&sf, &df, &tape, &batch, &times));
        for (k, var) in df.vars().iter().enumerate() {
            let base = d.params.values()[k].clone();
            let num = central_difference(
                |v| {
                    let mut q = d.clone();
                    q.params.values_mut()[k] = Matrix::from_vec(base.rows(), base.cols(), v.to_vec());
                    eval(&s, &q)
                },
                base.data(),
                1e-4,
            );
            let err = relative_error(g.get_or_zeros(*var).data(), &num);
            assert!(err < 1e-3, "dynamic {}: {err}", d.params.names()[k]);
        }
        for (k, var) in sf.vars().iter().enumerate() {
            let base = s.params.values()[k].clone();
            let num = central_difference(
                |v| {
                    let mut q = s.clone();
                    q.params.values_mut()[k] = Matrix::from_vec(base.rows(), base.cols(), v.to_vec());
                    eval(&q, &d)
                },
                base.data(),
                1e-4,
            );
            let err = relative_error(g.get_or_zeros(*var).data(), &num);
            assert!(err < 1e-3, "static {}: {err}", s.params.names()[k]);
        }
    }
}
