//! Positional encoding and the two learnable radiance fields.
//!
//! The static field maps an encoded position to density and, together with
//! the encoded view direction, to color. The dynamic field additionally takes
//! an encoded timestamp and emits forward/backward scene flow and a blending
//! probability. Density, flow and blending never see the view direction.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub time_freqs: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            time_freqs: 6,
        }
    }
}

/// Width of the encoding of a `k`-vector with `freqs` frequencies.
pub fn encoded_dim(k: usize, freqs: usize) -> usize {
    k * (2 * freqs + 1)
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]`, where each
/// block spans all `k` components.
pub fn positional_encode(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(x.len(), freqs));
    out.extend_from_slice(x);
    for l in 0..freqs {
        let w = PI * (1u64 << l) as f64;
        out.extend(x.iter().map(|v| (w * v).sin()));
        out.extend(x.iter().map(|v| (w * v).cos()));
    }
    out
}

/// Row-wise [`positional_encode`].
pub fn encode_rows(m: &Matrix, freqs: usize) -> Matrix {
    let width = encoded_dim(m.cols(), freqs);
    let mut data = Vec::with_capacity(m.rows() * width);
    for r in 0..m.rows() {
        data.extend(positional_encode(m.row(r), freqs));
    }
    Matrix::from_vec(m.rows(), width, data)
}

/// Normalized timestamp of frame `n` out of `count`.
pub fn frame_time(n: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else if n + 1 == count {
        1.0
    } else {
        n as f64 / (count - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldArch {
    pub encoding: EncodingConfig,
    pub width: usize,
    pub depth: usize,
    /// Trunk layer (0-based) that receives the encoded input concatenated to
    /// its hidden input.
    pub skip: Option<usize>,
    /// Scale applied to raw flow-head outputs.
    pub max_flow: f64,
    /// Positions are encoded as `(x − center) / scale`.
    pub scene_center: [f64; 3],
    pub scene_scale: f64,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            width: 128,
            depth: 8,
            skip: Some(5),
            max_flow: 0.1,
            scene_center: [0.0; 3],
            scene_scale: 1.0,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.depth == 0 {
            return Err(Error::Config("field width must be ≥ 2 and depth ≥ 1".into()));
        }
        if let Some(s) = self.skip {
            if s == 0 || s >= self.depth {
                return Err(Error::Config(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.depth
                )));
            }
        }
        if !(self.max_flow.is_finite() && self.max_flow > 0.0) {
            return Err(Error::Config("max_flow must be positive".into()));
        }
        if !(self.scene_scale.is_finite() && self.scene_scale > 0.0)
            || !self.scene_center.iter().all(|v| v.is_finite())
        {
            return Err(Error::Config("scene normalization must be finite and positive".into()));
        }
        Ok(())
    }

    fn input_dim(&self, dynamic: bool) -> usize {
        let pos = encoded_dim(3, self.encoding.pos_freqs);
        if dynamic {
            pos + encoded_dim(1, self.encoding.time_freqs)
        } else {
            pos
        }
    }

    fn dir_dim(&self) -> usize {
        encoded_dim(3, self.encoding.dir_freqs)
    }

    fn layers(&self, dynamic: bool) -> Vec<LayerSpec> {
        let input = self.input_dim(dynamic);
        let w = self.width;
        let mut layers = Vec::new();
        for i in 0..self.depth {
            let fan_in = if i == 0 {
                input
            } else if self.skip == Some(i) {
                w + input
            } else {
                w
            };
            layers.push(LayerSpec::new(format!("trunk.{i}"), fan_in, w, Init::Glorot));
        }
        layers.push(LayerSpec::new("sigma".into(), w, 1, Init::Glorot));
        layers.push(LayerSpec::new("feature".into(), w, w, Init::Glorot));
        layers.push(LayerSpec::new("color_hidden".into(), w + self.dir_dim(), w / 2, Init::Glorot));
        layers.push(LayerSpec::new("rgb".into(), w / 2, 3, Init::Glorot));
        if dynamic {
            layers.push(LayerSpec::new("flow_fwd".into(), w, 3, Init::Zero));
            layers.push(LayerSpec::new("flow_bwd".into(), w, 3, Init::Zero));
            layers.push(LayerSpec::new("blend".into(), w, 1, Init::Glorot));
        }
        layers
    }
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Zero,
}

struct LayerSpec {
    name: String,
    fan_in: usize,
    fan_out: usize,
    init: Init,
}

impl LayerSpec {
    fn new(name: String, fan_in: usize, fan_out: usize, init: Init) -> Self {
        Self {
            name,
            fan_in,
            fan_out,
            init,
        }
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Checks that names and shapes agree with `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

fn init_params(layers: &[LayerSpec], rng: &mut StreamRng) -> ParamSet {
    let mut set = ParamSet::new();
    for layer in layers {
        let weight = match layer.init {
            Init::Zero => Matrix::zeros(layer.fan_in, layer.fan_out),
            Init::Glorot => {
                let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
                Matrix::from_fn(layer.fan_in, layer.fan_out, |_, _| rng.random_range(-limit..limit))
            }
        };
        set.push(format!("{}.weight", layer.name), weight);
        set.push(format!("{}.bias", layer.name), Matrix::zeros(1, layer.fan_out));
    }
    set
}

fn check_layout(arch: &FieldArch, params: &ParamSet, dynamic: bool) -> Result<()> {
    let layers = arch.layers(dynamic);
    let ok = params.len() == 2 * layers.len()
        && layers.iter().enumerate().all(|(i, l)| {
            params.names[2 * i] == format!("{}.weight", l.name)
                && params.names[2 * i + 1] == format!("{}.bias", l.name)
                && params.values[2 * i].shape() == (l.fan_in, l.fan_out)
                && params.values[2 * i + 1].shape() == (1, l.fan_out)
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Config("parameter layout does not match the architecture".into()))
    }
}

fn check_finite(params: &ParamSet) -> Result<()> {
    match params.iter().find(|(_, m)| !m.is_finite()) {
        Some((name, _)) => Err(Error::Numeric(format!("parameter {name} is not finite"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticFieldParams {
    pub arch: FieldArch,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFieldParams {
    pub arch: FieldArch,
    pub params: ParamSet,
}

impl StaticFieldParams {
    pub fn init(arch: FieldArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT_STATIC]);
        let params = init_params(&arch.layers(false), &mut rng);
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: FieldArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_layout(&arch, &params, false)?;
        Ok(Self { arch, params })
    }

    /// Records the parameters on `tape`; `trainable` selects variables over
    /// constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<StaticFieldVars<'t>> {
        check_finite(&self.params)?;
        Ok(StaticFieldVars {
            arch: self.arch.clone(),
            vars: bind_all(tape, &self.params, trainable),
        })
    }
}

impl DynamicFieldParams {
    pub fn init(arch: FieldArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT_DYNAMIC]);
        let params = init_params(&arch.layers(true), &mut rng);
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: FieldArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_layout(&arch, &params, true)?;
        Ok(Self { arch, params })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<DynamicFieldVars<'t>> {
        check_finite(&self.params)?;
        Ok(DynamicFieldVars {
            arch: self.arch.clone(),
            vars: bind_all(tape, &self.params, trainable),
        })
    }
}

fn bind_all<'t>(tape: &'t Tape, params: &ParamSet, trainable: bool) -> Vec<Var<'t>> {
    params
        .values
        .iter()
        .map(|m| {
            if trainable {
                tape.variable(m.clone())
            } else {
                tape.constant(m.clone())
            }
        })
        .collect()
}

/// Static field outputs for a batch of points.
#[derive(Clone, Copy, Debug)]
pub struct StaticOutputVars<'t> {
    /// `[n, 1]`, nonnegative.
    pub sigma: Var<'t>,
    /// `[n, 3]`, in `[0, 1]`.
    pub rgb: Var<'t>,
}

/// Dynamic field outputs for a batch of points.
#[derive(Clone, Copy, Debug)]
pub struct DynamicOutputVars<'t> {
    pub sigma: Var<'t>,
    pub rgb: Var<'t>,
    /// `[n, 3]` displacement to the next frame.
    pub flow_fwd: Var<'t>,
    /// `[n, 3]` displacement to the previous frame.
    pub flow_bwd: Var<'t>,
    /// `[n, 1]` probability of belonging to the dynamic field.
    pub blend: Var<'t>,
}

/// Anything that can be queried like the static field.
pub trait StaticQuery<'t> {
    /// `x` is `[n, 3]` world positions; `dirs` holds one unit direction per row.
    fn query(&self, x: Var<'t>, dirs: &Matrix) -> StaticOutputVars<'t>;
}

/// Anything that can be queried like the dynamic field.
pub trait DynamicQuery<'t> {
    /// `times` is `[n, 1]` normalized timestamps.
    fn query(&self, x: Var<'t>, dirs: &Matrix, times: &Matrix) -> DynamicOutputVars<'t>;
}

/// Parameters recorded on a tape.
pub struct StaticFieldVars<'t> {
    arch: FieldArch,
    vars: Vec<Var<'t>>,
}

pub struct DynamicFieldVars<'t> {
    arch: FieldArch,
    vars: Vec<Var<'t>>,
}

impl<'t> StaticFieldVars<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl<'t> DynamicFieldVars<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

fn layer<'t>(vars: &[Var<'t>], i: usize, x: Var<'t>, act: Activation) -> Var<'t> {
    x.dense(vars[2 * i], vars[2 * i + 1], act)
}

fn encode_positions<'t>(arch: &FieldArch, x: Var<'t>) -> Var<'t> {
    let c = arch.scene_center;
    let center = x.tape().constant(Matrix::from_vec(1, 3, c.to_vec()));
    (x - center)
        .scale(1.0 / arch.scene_scale)
        .positional_encoding(arch.encoding.pos_freqs)
}

/// Shared trunk + density + color heads. Returns (trunk features, sigma, rgb).
fn radiance<'t>(
    arch: &FieldArch,
    vars: &[Var<'t>],
    input: Var<'t>,
    dirs: &Matrix,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let tape = input.tape();
    let mut h = input;
    for i in 0..arch.depth {
        if arch.skip == Some(i) {
            h = Var::concat_cols(&[h, input]);
        }
        h = layer(vars, i, h, Activation::Relu);
    }
    let d = arch.depth;
    let sigma = layer(vars, d, h, Activation::Identity).softplus();
    let feature = layer(vars, d + 1, h, Activation::Identity);
    let dir_enc = tape.constant(encode_rows(dirs, arch.encoding.dir_freqs));
    let hidden = layer(vars, d + 2, Var::concat_cols(&[feature, dir_enc]), Activation::Relu);
    let rgb = layer(vars, d + 3, hidden, Activation::Identity).sigmoid();
    (h, sigma, rgb)
}

impl<'t> StaticQuery<'t> for StaticFieldVars<'t> {
    fn query(&self, x: Var<'t>, dirs: &Matrix) -> StaticOutputVars<'t> {
        let input = encode_positions(&self.arch, x);
        let (_, sigma, rgb) = radiance(&self.arch, &self.vars, input, dirs);
        StaticOutputVars { sigma, rgb }
    }
}

impl<'t> DynamicQuery<'t> for DynamicFieldVars<'t> {
    fn query(&self, x: Var<'t>, dirs: &Matrix, times: &Matrix) -> DynamicOutputVars<'t> {
        let tape = x.tape();
        let pos = encode_positions(&self.arch, x);
        let time = tape.constant(encode_rows(times, self.arch.encoding.time_freqs));
        let input = Var::concat_cols(&[pos, time]);
        let (h, sigma, rgb) = radiance(&self.arch, &self.vars, input, dirs);
        let d = self.arch.depth;
        let m = self.arch.max_flow;
        let flow_fwd = layer(&self.vars, d + 4, h, Activation::Identity).scale(m);
        let flow_bwd = layer(&self.vars, d + 5, h, Activation::Identity).scale(m);
        let blend = layer(&self.vars, d + 6, h, Activation::Identity).sigmoid();
        DynamicOutputVars {
            sigma,
            rgb,
            flow_fwd,
            flow_bwd,
            blend,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StaticOutput {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicOutput {
    pub rgb: [f64; 3],
    pub sigma: f64,
    pub flow_fwd: [f64; 3],
    pub flow_bwd: [f64; 3],
    pub blend: f64,
}

fn check_direction(d: &Vec3) -> Result<()> {
    if (d.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("direction {d:?} is not unit length")));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("timestamp {t} outside [0, 1]")));
    }
    Ok(())
}

fn row3(m: &Matrix) -> [f64; 3] {
    m.row3(0)
}

fn point(x: &Vec3) -> Matrix {
    Matrix::from_vec(1, 3, vec![x.x, x.y, x.z])
}

/// Evaluates the static field at a single point.
pub fn query_static(params: &StaticFieldParams, x: &Vec3, d: &Vec3) -> Result<StaticOutput> {
    check_direction(d)?;
    let tape = Tape::new();
    let field = params.bind(&tape, false)?;
    let out = field.query(tape.constant(point(x)), &point(d));
    let result = StaticOutput {
        rgb: row3(&out.rgb.value()),
        sigma: out.sigma.item(),
    };
    if !(result.sigma.is_finite() && result.rgb.iter().all(|v| v.is_finite())) {
        return Err(Error::Numeric("static field produced a non-finite output".into()));
    }
    Ok(result)
}

/// Evaluates the dynamic field at a single point and time.
pub fn query_dynamic(params: &DynamicFieldParams, x: &Vec3, d: &Vec3, t: f64) -> Result<DynamicOutput> {
    check_direction(d)?;
    check_time(t)?;
    let tape = Tape::new();
    let field = params.bind(&tape, false)?;
    let out = field.query(tape.constant(point(x)), &point(d), &Matrix::scalar(t));
    let result = DynamicOutput {
        rgb: row3(&out.rgb.value()),
        sigma: out.sigma.item(),
        flow_fwd: row3(&out.flow_fwd.value()),
        flow_bwd: row3(&out.flow_bwd.value()),
        blend: out.blend.item(),
    };
    let finite = result.sigma.is_finite()
        && result.blend.is_finite()
        && result
            .rgb
            .iter()
            .chain(&result.flow_fwd)
            .chain(&result.flow_bwd)
            .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric("dynamic field produced a non-finite output".into()));
    }
    Ok(result)
}

/// Queries the dynamic field at the flowed point `x + f` and neighbor time `t_prime`.
pub fn query_dynamic_warped(
    params: &DynamicFieldParams,
    x: &Vec3,
    f: &Vec3,
    d: &Vec3,
    t_prime: f64,
) -> Result<DynamicOutput> {
    query_dynamic(params, &(x + f), d, t_prime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_arch() -> FieldArch {
        FieldArch {
            encoding: EncodingConfig {
                pos_freqs: 3,
                dir_freqs: 2,
                time_freqs: 2,
            },
            width: 16,
            depth: 3,
            skip: Some(2),
            max_flow: 0.1,
            scene_center: [0.1, -0.2, 2.0],
            scene_scale: 2.0,
        }
    }

    /// Gives every layer non-trivial weights and biases, including flow heads.
    fn randomized(mut params: ParamSet, seed: u64) -> ParamSet {
        let mut rng = rng::stream(seed, &[99]);
        for m in params.values_mut() {
            for v in m.data_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
        params
    }

    fn random_dynamic(seed: u64) -> DynamicFieldParams {
        let p = DynamicFieldParams::init(tiny_arch(), seed).unwrap();
        DynamicFieldParams::from_parts(p.arch, randomized(p.params, seed)).unwrap()
    }

    fn random_static(seed: u64) -> StaticFieldParams {
        let p = StaticFieldParams::init(tiny_arch(), seed).unwrap();
        StaticFieldParams::from_parts(p.arch, randomized(p.params, seed)).unwrap()
    }

    #[test]
    fn encoding_examples() {
        let zero = positional_encode(&[0.0, 0.0], 3);
        assert_eq!(zero.len(), 14);
        for l in 0..3 {
            assert_eq!(&zero[2 + 4 * l..4 + 4 * l], &[0.0, 0.0]);
            assert_eq!(&zero[4 + 4 * l..6 + 4 * l], &[1.0, 1.0]);
        }
        assert_eq!(positional_encode(&[0.3, -2.0], 0), vec![0.3, -2.0]);
        let e = positional_encode(&[0.5], 2);
        let expected = [0.5, 1.0, 0.0, 0.0, -1.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn encoding_dimension(k in 0usize..6, l in 0usize..8) {
            let x = vec![0.25; k];
            prop_assert_eq!(positional_encode(&x, l).len(), k * (2 * l + 1));
        }

        #[test]
        fn density_and_blend_ignore_direction(
            x in prop::array::uniform3(-1.0f64..1.0),
            d1 in prop::array::uniform3(-1.0f64..1.0),
            d2 in prop::array::uniform3(-1.0f64..1.0),
            t in 0.0f64..1.0,
        ) {
            let (d1, d2) = (Vec3::from(d1), Vec3::from(d2));
            prop_assume!(d1.norm() > 0.1 && d2.norm() > 0.1);
            let (d1, d2) = (d1.normalize(), d2.normalize());
            let x = Vec3::from(x);
            let s = random_static(1);
            prop_assert_eq!(
                query_static(&s, &x, &d1).unwrap().sigma,
                query_static(&s, &x, &d2).unwrap().sigma
            );
            let dy = random_dynamic(2);
            let a = query_dynamic(&dy, &x, &d1, t).unwrap();
            let b = query_dynamic(&dy, &x, &d2, t).unwrap();
            prop_assert_eq!(a.sigma, b.sigma);
            prop_assert_eq!(a.blend, b.blend);
            prop_assert_eq!(a.flow_fwd, b.flow_fwd);
        }
    }

    #[test]
    fn zero_output_layers_give_neutral_outputs() {
        let mut p = StaticFieldParams::init(tiny_arch(), 4).unwrap();
        for name in ["sigma.weight", "sigma.bias", "rgb.weight", "rgb.bias"] {
            let m = p.params.get_mut(name).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let out = query_static(&p, &Vec3::new(0.3, 0.1, 1.0), &Vec3::z()).unwrap();
        assert!((out.sigma - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.rgb, [0.5; 3]);
    }

    #[test]
    fn fresh_dynamic_field_has_zero_flow() {
        let mut p = DynamicFieldParams::init(tiny_arch(), 5).unwrap();
        let out = query_dynamic(&p, &Vec3::new(0.3, 0.1, 1.0), &Vec3::z(), 0.4).unwrap();
        assert_eq!(out.flow_fwd, [0.0; 3]);
        assert_eq!(out.flow_bwd, [0.0; 3]);
        for name in ["blend.weight", "blend.bias"] {
            let m = p.params.get_mut(name).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let out = query_dynamic(&p, &Vec3::new(0.3, 0.1, 1.0), &Vec3::z(), 0.4).unwrap();
        assert_eq!(out.blend, 0.5);
    }

    // Straight-line oracle: explicit loops over the same parameter layout.
    fn mat_vec(params: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
        let w = params.get(&format!("{name}.weight")).unwrap();
        let b = params.get(&format!("{name}.bias")).unwrap();
        assert_eq!(w.rows(), x.len());
        (0..w.cols())
            .map(|j| b.get(0, j) + (0..x.len()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn oracle(arch: &FieldArch, params: &ParamSet, x: &Vec3, d: &Vec3, t: Option<f64>) -> Vec<f64> {
        let xn: Vec<f64> = (0..3).map(|i| (x[i] - arch.scene_center[i]) / arch.scene_scale).collect();
        let mut input = positional_encode(&xn, arch.encoding.pos_freqs);
        if let Some(t) = t {
            input.extend(positional_encode(&[t], arch.encoding.time_freqs));
        }
        let mut h = input.clone();
        for i in 0..arch.depth {
            if arch.skip == Some(i) {
                h.extend_from_slice(&input);
            }
            h = relu(mat_vec(params, &format!("trunk.{i}"), &h));
        }
        let s = mat_vec(params, "sigma", &h)[0];
        let sigma = s.max(0.0) + (1.0 + (-s.abs()).exp()).ln();
        let mut feat = mat_vec(params, "feature", &h);
        feat.extend(positional_encode(&[d.x, d.y, d.z], arch.encoding.dir_freqs));
        let hidden = relu(mat_vec(params, "color_hidden", &feat));
        let mut out: Vec<f64> = mat_vec(params, "rgb", &hidden).into_iter().map(sig).collect();
        out.push(sigma);
        if t.is_some() {
            out.extend(mat_vec(params, "flow_fwd", &h).iter().map(|v| v * arch.max_flow));
            out.extend(mat_vec(params, "flow_bwd", &h).iter().map(|v| v * arch.max_flow));
            out.push(sig(mat_vec(params, "blend", &h)[0]));
        }
        out
    }

    #[test]
    fn static_query_matches_straight_line_oracle() {
        let p = random_static(6);
        let x = Vec3::new(0.4, -0.3, 1.7);
        let d = Vec3::new(0.2, 0.1, 1.0).normalize();
        let out = query_static(&p, &x, &d).unwrap();
        let expected = oracle(&p.arch, &p.params, &x, &d, None);
        let got = [out.rgb[0], out.rgb[1], out.rgb[2], out.sigma];
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dynamic_query_matches_straight_line_oracle() {
        let p = random_dynamic(7);
        let x = Vec3::new(-0.4, 0.3, 2.2);
        let d = Vec3::new(-0.2, 0.1, 1.0).normalize();
        let out = query_dynamic(&p, &x, &d, 0.35).unwrap();
        let expected = oracle(&p.arch, &p.params, &x, &d, Some(0.35));
        let mut got = out.rgb.to_vec();
        got.push(out.sigma);
        got.extend(out.flow_fwd);
        got.extend(out.flow_bwd);
        got.push(out.blend);
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn warped_query_is_query_at_displaced_point() {
        let p = random_dynamic(8);
        let x = Vec3::new(0.1, 0.2, 2.0);
        let f = Vec3::new(0.05, -0.02, 0.01);
        let d = Vec3::z();
        let a = query_dynamic_warped(&p, &x, &f, &d, 0.6).unwrap();
        let b = query_dynamic(&p, &(x + f), &d, 0.6).unwrap();
        assert_eq!(a, b);
        let zero = query_dynamic_warped(&p, &x, &Vec3::zeros(), &d, 0.6).unwrap();
        assert_eq!(zero, query_dynamic(&p, &x, &d, 0.6).unwrap());
    }

    #[test]
    fn invalid_queries_are_rejected() {
        let p = random_dynamic(9);
        let x = Vec3::zeros();
        assert!(matches!(query_dynamic(&p, &x, &Vec3::z(), 1.5), Err(Error::Domain(_))));
        assert!(query_dynamic(&p, &x, &Vec3::new(0.0, 0.0, 2.0), 0.5).is_err());
        let mut bad = p.clone();
        bad.params.values_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(query_dynamic(&bad, &x, &Vec3::z(), 0.5), Err(Error::Numeric(_))));
    }

    #[test]
    fn frame_times_hit_endpoints() {
        assert_eq!(frame_time(0, 12), 0.0);
        assert_eq!(frame_time(11, 12), 1.0);
        assert!((frame_time(3, 12) - 3.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn outputs_are_differentiable_wrt_params_and_positions() {
        let p = random_dynamic(10);
        let x0 = Matrix::from_rows(&[[0.1, 0.2, 1.9], [-0.3, 0.05, 2.3]]);
        let dirs = Matrix::from_rows(&[[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]);
        let times = Matrix::column(&[0.2, 0.7]);
        fn probe<'t>(out: &DynamicOutputVars<'t>) -> Var<'t> {
            let parts = [out.sigma, out.rgb, out.flow_fwd, out.flow_bwd, out.blend];
            let all = Var::concat_cols(&parts);
            let w = Matrix::from_fn(all.rows(), all.cols(), |r, c| 0.3 + ((r * 11 + c * 7) % 5) as f64);
            all.mul_const(&w).sum()
        }
        let eval = |params: &ParamSet, x: &Matrix| -> f64 {
            let dp = DynamicFieldParams::from_parts(p.arch.clone(), params.clone()).unwrap();
            let tape = Tape::new();
            let f = dp.bind(&tape, false).unwrap();
            probe(&f.query(tape.constant(x.clone()), &dirs, &times)).item()
        };
        let tape = Tape::new();
        let field = p.bind(&tape, true).unwrap();
        let xv = tape.variable(x0.clone());
        let g = tape.backward(probe(&field.query(xv, &dirs, &times)));

        let num_x = central_difference(|v| eval(&p.params, &Matrix::from_vec(2, 3, v.to_vec())), x0.data(), 1e-4);
        assert!(relative_error(g.get(xv).unwrap().data(), &num_x) < 1e-3);
        for (k, var) in field.vars().iter().enumerate() {
            let base = p.params.values()[k].clone();
            let num = central_difference(
                |v| {
                    let mut q = p.params.clone();
                    q.values_mut()[k] = Matrix::from_vec(base.rows(), base.cols(), v.to_vec());
                    eval(&q, &x0)
                },
                base.data(),
                1e-4,
            );
            let err = relative_error(g.get_or_zeros(*var).data(), &num);
            assert!(err < 1e-3, "{}: {err}", p.params.names()[k]);
        }
    }
}
