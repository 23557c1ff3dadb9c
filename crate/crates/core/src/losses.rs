//! Training objectives: photometric terms, flow and entropy regularizers, mask
//! supervision, the surface-consistency term and the patch multi-view term.
//!
//! Photometric errors are squared ℓ2 norms per ray averaged over the batch.
//! Every function records onto the tape of its inputs and returns a scalar.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Var};
use crate::error::{Error, Result};
use crate::fields::DynamicQuery;
use crate::renderer::{DynamicPass, FlowDirection, NeighborPass, RayTime, SampleBatch};

/// Regularizer inside the entropy normalization and logarithm.
pub const ENTROPY_EPS: f64 = 1e-9;
/// Rays whose accumulated weight is below this contribute no entropy.
pub const ENTROPY_MIN_OPACITY: f64 = 0.1;
/// Clamp for probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-6;
/// Default opacity gate for the surface term.
pub const SURFACE_GATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub static_photo: f64,
    pub dynamic_photo: f64,
    pub full_photo: f64,
    pub slow: f64,
    pub cycle: f64,
    pub entropy: f64,
    pub mask: f64,
    pub surface: f64,
    pub patch: f64,
    pub depth_consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            static_photo: 1.0,
            dynamic_photo: 1.0,
            full_photo: 1.0,
            slow: 0.01,
            cycle: 0.01,
            entropy: 0.001,
            mask: 0.1,
            surface: 0.1,
            patch: 0.1,
            depth_consistency: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and nonnegative".into()))
        }
    }

    fn as_array(&self) -> [f64; 10] {
        [
            self.static_photo,
            self.dynamic_photo,
            self.full_photo,
            self.slow,
            self.cycle,
            self.entropy,
            self.mask,
            self.surface,
            self.patch,
            self.depth_consistency,
        ]
    }
}

/// Unweighted value of every term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub static_photo: f64,
    pub dynamic_photo: f64,
    pub full_photo: f64,
    pub slow: f64,
    pub cycle: f64,
    pub entropy: f64,
    pub mask: f64,
    pub surface: f64,
    pub patch: f64,
    pub depth_consistency: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 11] = [
        "static",
        "dynamic",
        "full",
        "slow",
        "cycle",
        "entropy",
        "mask",
        "surface",
        "patch",
        "depth_cons",
        "total",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.static_photo,
            self.dynamic_photo,
            self.full_photo,
            self.slow,
            self.cycle,
            self.entropy,
            self.mask,
            self.surface,
            self.patch,
            self.depth_consistency,
            self.total,
        ]
    }

    /// Recomputes `total` from the terms.
    pub fn weighted(mut self, w: &LossWeights) -> Self {
        self.total = total_loss(&self, w);
        self
    }

    /// Adds `other` scaled by `factor` (used to merge chunk reports).
    pub fn accumulate(&mut self, other: &LossReport, factor: f64) {
        self.static_photo += factor * other.static_photo;
        self.dynamic_photo += factor * other.dynamic_photo;
        self.full_photo += factor * other.full_photo;
        self.slow += factor * other.slow;
        self.cycle += factor * other.cycle;
        self.entropy += factor * other.entropy;
        self.mask += factor * other.mask;
        self.surface += factor * other.surface;
        self.patch += factor * other.patch;
        self.depth_consistency += factor * other.depth_consistency;
        self.total += factor * other.total;
    }
}

/// `Σ λ · term`.
pub fn total_loss(report: &LossReport, w: &LossWeights) -> f64 {
    let terms = report.values();
    w.as_array().iter().zip(&terms).map(|(w, t)| w * t).sum()
}

/// Weighted sum of scalar term variables; absent terms contribute nothing.
pub fn weighted_sum<'t>(terms: &[(f64, Option<Var<'t>>)]) -> Option<Var<'t>> {
    terms
        .iter()
        .filter(|(w, v)| *w != 0.0 && v.is_some())
        .map(|(w, v)| v.unwrap().scale(*w))
        .reduce(|a, b| a + b)
}

fn squared_rows(diff: Var<'_>) -> Var<'_> {
    diff.square().sum_cols()
}

/// Mean over rays of `‖(Ĉ − C)(1 − M)‖²`; masked rays are dynamic.
pub fn loss_static<'t>(color: Var<'t>, gt: &Matrix, mask: &Matrix) -> Var<'t> {
    let keep = mask.map(|m| 1.0 - m);
    let tape = color.tape();
    squared_rows((color - tape.constant(gt.clone())).mul_const(&keep)).mean()
}

/// Mean over rays of `‖Ĉ − C‖²`.
pub fn loss_full<'t>(color: Var<'t>, gt: &Matrix) -> Var<'t> {
    let tape = color.tape();
    squared_rows(color - tape.constant(gt.clone())).mean()
}

/// Sum over the available timestamps of the per-ray squared error against
/// the frame-`t` pixel, averaged over all rays in the batch.
pub fn loss_dynamic<'t>(
    center: Var<'t>,
    neighbors: &[(&[usize], Var<'t>)],
    gt: &Matrix,
) -> Var<'t> {
    let tape = center.tape();
    let r = gt.rows() as f64;
    let mut total = squared_rows(center - tape.constant(gt.clone())).sum();
    for (rows, color) in neighbors {
        let target = tape.constant(gt.select_rows(rows));
        total = total + squared_rows(*color - target).sum();
    }
    total.scale(1.0 / r)
}

/// `(Σ‖f_f‖₁ + Σ‖f_b‖₁) / samples`, over the flows that exist.
pub fn loss_flow_slow<'t>(flows: &[Var<'t>], samples: usize) -> Var<'t> {
    flows
        .iter()
        .map(|f| f.abs().sum())
        .reduce(|a, b| a + b)
        .expect("at least one flow")
        .scale(1.0 / samples as f64)
}

/// `(Σ‖f + f_back‖₂) / samples` over `(flow, round-trip flow)` pairs.
pub fn loss_flow_cycle<'t>(pairs: &[(Var<'t>, Var<'t>)], samples: usize) -> Var<'t> {
    pairs
        .iter()
        .map(|(f, g)| (*f + *g).row_norm().sum())
        .reduce(|a, b| a + b)
        .expect("at least one flow pair")
        .scale(1.0 / samples as f64)
}

/// Mean over rays of the entropy of the normalized weights; rays with
/// accumulated weight below [`ENTROPY_MIN_OPACITY`] contribute zero.
pub fn loss_entropy<'t>(weights: Var<'t>) -> Var<'t> {
    let opacity = weights.sum_cols();
    let ov = opacity.value();
    let gate = ov.map(|a| if a >= ENTROPY_MIN_OPACITY { 1.0 } else { 0.0 });
    let w_hat = weights / opacity.add_scalar(ENTROPY_EPS);
    let h = -(w_hat * w_hat.add_scalar(ENTROPY_EPS).ln()).sum_cols();
    h.mul_const(&gate).mean()
}

/// Mean binary cross-entropy between the rendered blending probability and
/// the dynamic mask.
pub fn loss_mask<'t>(blend: Var<'t>, mask: &Matrix) -> Var<'t> {
    let p = blend.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let m = mask.clone();
    let not_m = mask.map(|v| 1.0 - v);
    -(p.ln().mul_const(&m) + p.one_minus().ln().mul_const(&not_m)).mean()
}

/// `Σ M|a − b| / (3 ΣM)`, zero when no pixel is valid.
pub fn loss_patch<'t>(rendered: Var<'t>, warped: Var<'t>, mask: &Matrix) -> Var<'t> {
    let valid: f64 = mask.data().iter().sum();
    let tape = rendered.tape();
    if valid == 0.0 {
        return tape.scalar(0.0);
    }
    (rendered - warped)
        .abs()
        .mul_const(mask)
        .sum()
        .scale(1.0 / (rendered.cols() as f64 * valid))
}

/// Mean over rays of `(1 − M)|D_composite − D_static|`.
pub fn loss_depth_consistency<'t>(composite_depth: Var<'t>, static_depth: &Matrix, mask: &Matrix) -> Var<'t> {
    let keep = mask.map(|m| 1.0 - m);
    let tape = composite_depth.tape();
    (composite_depth - tape.constant(static_depth.clone()))
        .abs()
        .mul_const(&keep)
        .mean()
}

/// Per-ray surface residuals `‖x̂_t + f(x̂_t) − x̂_{t±Δ}‖₁` for one direction.
#[derive(Clone, Debug)]
pub struct SurfaceResiduals<'t> {
    pub direction: FlowDirection,
    /// Batch indices of the gated rays.
    pub rays: Vec<usize>,
    /// `[n, 1]`
    pub values: Var<'t>,
}

/// Surface-consistency residuals for every opacity-gated ray with a
/// neighbor. `surface_field` supplies the flow queried at the expected
/// surface point itself (normally the same field that produced `pass`).
pub fn surface_residuals<'t>(
    surface_field: &dyn DynamicQuery<'t>,
    batch: &SampleBatch,
    times: &[RayTime],
    pass: &DynamicPass<'t>,
    gate: f64,
) -> Vec<SurfaceResiduals<'t>> {
    let opacity = pass.center.opacity.value();
    let gated: Vec<usize> = (0..batch.rays())
        .filter(|&r| opacity.get(r, 0) >= gate && (times[r].has_next || times[r].has_prev))
        .collect();
    if gated.is_empty() {
        return Vec::new();
    }
    let x_hat = pass.center.surface.select_rows(&gated);
    let dirs = batch.ray_dirs.select_rows(&gated);
    let t = Matrix::column(&gated.iter().map(|&r| times[r].t).collect::<Vec<_>>());
    let at_surface = surface_field.query(x_hat, &dirs, &t);

    let mut out = Vec::new();
    for np in [&pass.forward, &pass.backward].into_iter().flatten() {
        let (local, in_pass): (Vec<usize>, Vec<usize>) = gated
            .iter()
            .enumerate()
            .filter_map(|(i, r)| np.rays.binary_search(r).ok().map(|j| (i, j)))
            .unzip();
        if local.is_empty() {
            continue;
        }
        let flow = match np.direction {
            FlowDirection::Forward => at_surface.flow_fwd,
            FlowDirection::Backward => at_surface.flow_bwd,
        };
        let moved = x_hat.select_rows(&local) + flow.select_rows(&local);
        let target = np.render.surface.select_rows(&in_pass);
        out.push(SurfaceResiduals {
            direction: np.direction,
            rays: local.iter().map(|&i| gated[i]).collect(),
            values: (moved - target).abs().sum_cols(),
        });
    }
    out
}

/// Sum of surface residuals over both directions divided by the batch size.
pub fn loss_surface<'t>(residuals: &[SurfaceResiduals<'t>], batch_rays: usize) -> Option<Var<'t>> {
    residuals
        .iter()
        .map(|r| r.values.sum())
        .reduce(|a, b| a + b)
        .map(|s| s.scale(1.0 / batch_rays as f64))
}

/// Flow regularizer inputs gathered from a dynamic pass: forward/backward
/// flows at the samples and their round trips from the neighbor passes.
pub fn flow_regularizers<'t>(pass: &DynamicPass<'t>, samples: usize) -> Option<(Var<'t>, Var<'t>)> {
    let parts: Vec<&NeighborPass<'t>> = [&pass.forward, &pass.backward].into_iter().flatten().collect();
    if parts.is_empty() {
        return None;
    }
    let flows: Vec<Var<'t>> = parts.iter().map(|np| np.flow).collect();
    let pairs: Vec<(Var<'t>, Var<'t>)> = parts
        .iter()
        .map(|np| match np.direction {
            FlowDirection::Forward => (np.flow, np.out.flow_bwd),
            FlowDirection::Backward => (np.flow, np.out.flow_fwd),
        })
        .collect();
    Some((loss_flow_slow(&flows, samples), loss_flow_cycle(&pairs, samples)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn c<'t>(tape: &'t Tape, rows: &[[f64; 3]]) -> Var<'t> {
        tape.constant(Matrix::from_rows(rows))
    }

    #[test]
    fn static_loss_examples() {
        let tape = Tape::new();
        let gt = Matrix::from_rows(&[[0.2, 0.4, 0.6]]);
        assert_eq!(loss_static(c(&tape, &[[0.2, 0.4, 0.6]]), &gt, &Matrix::column(&[0.0])).item(), 0.0);
        assert_eq!(loss_static(c(&tape, &[[0.9, 0.0, 0.1]]), &gt, &Matrix::column(&[1.0])).item(), 0.0);
        let v = loss_static(c(&tape, &[[0.3, 0.4, 0.6]]), &gt, &Matrix::column(&[0.0])).item();
        assert!((v - 0.01).abs() < 1e-15);
    }

    #[test]
    fn dynamic_and_full_examples() {
        let tape = Tape::new();
        let gt = Matrix::from_rows(&[[0.5, 0.5, 0.5]]);
        let same = c(&tape, &[[0.5, 0.5, 0.5]]);
        assert_eq!(loss_dynamic(same, &[(&[0], same), (&[0], same)], &gt).item(), 0.0);
        let off = c(&tape, &[[0.7, 0.5, 0.5]]);
        assert!((loss_dynamic(same, &[(&[0], off)], &gt).item() - 0.04).abs() < 1e-15);
        assert!((loss_full(off, &gt).item() - 0.04).abs() < 1e-15);
        // boundary frame: center plus one neighbor, each off by 0.2
        assert!((loss_dynamic(off, &[(&[0], off)], &gt).item() - 0.08).abs() < 1e-15);
    }

    #[test]
    fn flow_examples() {
        let tape = Tape::new();
        let zero = c(&tape, &[[0.0; 3]]);
        assert_eq!(loss_flow_slow(&[zero, zero], 1).item(), 0.0);
        let f = c(&tape, &[[0.1, -0.2, 0.0]]);
        assert!((loss_flow_slow(&[f, zero], 1).item() - 0.3).abs() < 1e-15);
        assert!((loss_flow_slow(&[f.scale(2.0), zero], 1).item() - 0.6).abs() < 1e-15);
        let ff = c(&tape, &[[1.0, 0.0, 0.0]]);
        let fb = c(&tape, &[[-1.0, 0.0, 0.1]]);
        assert!((loss_flow_cycle(&[(ff, fb), (zero, zero)], 1).item() - 0.1).abs() < 1e-15);
        assert!((loss_flow_cycle(&[(zero, zero), (ff, fb)], 1).item() - 0.1).abs() < 1e-15);
        assert_eq!(loss_flow_cycle(&[(ff, -ff)], 1).item(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let tape = Tape::new();
        let one_hot = tape.constant(Matrix::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]));
        assert!(loss_entropy(one_hot).item().abs() < 1e-8);
        let uniform = tape.constant(Matrix::filled(1, 8, 0.1));
        assert!((loss_entropy(uniform).item() - 8f64.ln()).abs() < 1e-6);
        let half = tape.constant(Matrix::from_vec(1, 4, vec![0.5, 0.5, 0.0, 0.0]));
        assert!((loss_entropy(half).item() - 2f64.ln()).abs() < 1e-6);
        let faint = tape.constant(Matrix::filled(1, 4, 0.01));
        assert_eq!(loss_entropy(faint).item(), 0.0);
    }

    #[test]
    fn mask_examples() {
        let tape = Tape::new();
        let m = Matrix::column(&[1.0, 0.0]);
        assert!(loss_mask(tape.constant(m.clone()), &m).item() < 1e-5);
        let half = tape.constant(Matrix::column(&[0.5, 0.5]));
        assert!((loss_mask(half, &m).item() - 2f64.ln()).abs() < 1e-12);
        let p = tape.constant(Matrix::column(&[0.9]));
        assert!((loss_mask(p, &Matrix::column(&[1.0])).item() + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn patch_examples() {
        let tape = Tape::new();
        let a = c(&tape, &[[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]]);
        assert_eq!(loss_patch(a, a, &Matrix::column(&[1.0, 1.0])).item(), 0.0);
        let b = c(&tape, &[[0.9, 0.9, 0.9], [0.0, 0.0, 0.0]]);
        assert_eq!(loss_patch(a, b, &Matrix::column(&[0.0, 0.0])).item(), 0.0);
        let d = c(&tape, &[[0.4, 0.2, 0.3], [0.0, 0.0, 0.0]]);
        assert!((loss_patch(a, d, &Matrix::column(&[1.0, 0.0])).item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let report = LossReport {
            static_photo: 0.5,
            surface: 2.0,
            patch: 7.0,
            ..Default::default()
        };
        let zero = LossWeights {
            static_photo: 0.0,
            dynamic_photo: 0.0,
            full_photo: 0.0,
            slow: 0.0,
            cycle: 0.0,
            entropy: 0.0,
            mask: 0.0,
            surface: 0.0,
            patch: 0.0,
            depth_consistency: 0.0,
        };
        assert_eq!(total_loss(&report, &zero), 0.0);
        assert_eq!(total_loss(&report, &LossWeights { surface: 3.0, ..zero }), 6.0);
        let w = LossWeights { static_photo: 2.0, patch: 0.5, ..zero };
        assert_eq!(total_loss(&report, &w), 1.0 + 3.5);
        assert!(LossWeights { slow: -1.0, ..zero }.validate().is_err());
    }

    proptest! {
        #[test]
        fn static_loss_ignores_masked_targets(
            colors in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 4),
            gt in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 4),
            other in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 4),
            mask in prop::collection::vec(prop::bool::ANY, 4),
        ) {
            let tape = Tape::new();
            let m = Matrix::column(&mask.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>());
            let gt1 = Matrix::from_rows(&gt);
            let gt2 = Matrix::from_fn(4, 3, |r, ch| if mask[r] { other[r][ch] } else { gt[r][ch] });
            let col = c(&tape, &colors);
            prop_assert_eq!(loss_static(col, &gt1, &m).item(), loss_static(col, &gt2, &m).item());
        }

        #[test]
        fn patch_loss_is_permutation_invariant(
            a in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 6),
            b in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 6),
            mask in prop::collection::vec(prop::bool::ANY, 6),
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let tape = Tape::new();
            let m = Matrix::column(&mask.iter().map(|&v| v as u8 as f64).collect::<Vec<_>>());
            let base = loss_patch(c(&tape, &a), c(&tape, &b), &m).item();
            let ap = c(&tape, &a).select_rows(&perm);
            let bp = c(&tape, &b).select_rows(&perm);
            let permuted = loss_patch(ap, bp, &m.select_rows(&perm)).item();
            prop_assert!((base - permuted).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }
    }
}
