//! Scores a trained model on a dataset's held-out views and flow.

use crate::autodiff::Matrix;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fields::{query_dynamic, DynamicFieldParams};
use crate::geometry::{camera_ray, project, Vec3};
use crate::metrics::{self, EvalReport, FrameScores, Transfer, MAX_KEYPOINTS, PCK_ALPHA};
use crate::renderer::{render_pixels, render_view, Model, RenderMode, RenderOptions};

/// Opacity below which a rendered surface point is treated as undefined.
const MIN_SURFACE_OPACITY: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub render: RenderOptions,
    pub mode: RenderMode,
    pub keypoints: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl EvalOptions {
    pub fn new(dataset: &Dataset, samples: usize, seed: u64) -> Self {
        Self {
            render: RenderOptions::new(samples, dataset.near, dataset.far),
            mode: RenderMode::Composite,
            keypoints: MAX_KEYPOINTS,
            alpha: PCK_ALPHA,
            seed,
        }
    }
}

fn gt_target(dataset: &Dataset, frame: usize, pixel: usize) -> Result<[f64; 2]> {
    let truth = dataset
        .truth
        .get(frame)
        .ok_or_else(|| Error::domain("dataset carries no ground truth"))?;
    let x = Vec3::from(truth.surface.row3(pixel)) + Vec3::from(truth.flow_fwd.row3(pixel));
    let (u, v, _) = project(&dataset.camera, &dataset.frames[frame + 1].pose, &x)?;
    Ok([u, v])
}

/// Keypoints of `frame` carried forward by ground-truth surface points and
/// flow.
pub fn gt_transfers(dataset: &Dataset, frame: usize, keypoints: &[usize]) -> Result<Vec<Transfer>> {
    let truth = &dataset.truth[frame];
    keypoints
        .iter()
        .map(|&i| {
            Ok(Transfer {
                surface: Vec3::from(truth.surface.row3(i)),
                flow: Vec3::from(truth.flow_fwd.row3(i)),
                target: gt_target(dataset, frame, i)?,
            })
        })
        .collect()
}

/// Keypoints of `frame` carried forward by the dynamic field: the surface
/// point is the opacity-normalized expected point of the dynamic render and
/// the flow is queried there.
pub fn predicted_transfers(
    dynamic: &DynamicFieldParams,
    dataset: &Dataset,
    frame: usize,
    keypoints: &[usize],
    opts: &RenderOptions,
) -> Result<Vec<Transfer>> {
    let cam = &dataset.camera;
    let f = &dataset.frames[frame];
    let pixels: Vec<(usize, usize)> = keypoints.iter().map(|&i| (i % cam.width, i / cam.width)).collect();
    let model = Model {
        static_field: None,
        dynamic_field: Some(dynamic),
    };
    let render = render_pixels(model, cam, &f.pose, &pixels, f.time, RenderMode::Dynamic, opts, None)?;
    keypoints
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let opacity = render.opacity.get(r, 0).max(MIN_SURFACE_OPACITY);
            let surface = Vec3::from(render.surface.row3(r)) / opacity;
            let (u, v) = pixels[r];
            let dir = camera_ray(cam, &f.pose, u as f64, v as f64, dataset.near, dataset.far)?.direction;
            let out = query_dynamic(dynamic, &surface, &dir, f.time)?;
            Ok(Transfer {
                surface,
                flow: Vec3::from(out.flow_fwd),
                target: gt_target(dataset, frame, i)?,
            })
        })
        .collect()
}

/// PCK-T pooled over every frame that has a successor. `transfer` maps a
/// frame and its keypoints to transfers. Returns `None` when no frame has
/// dynamic pixels.
pub fn pooled_pck(
    dataset: &Dataset,
    opts: &EvalOptions,
    mut transfer: impl FnMut(usize, &[usize]) -> Result<Vec<Transfer>>,
) -> Result<Option<f64>> {
    let mut correct = 0.0;
    let mut total = 0usize;
    for n in 0..dataset.len() - 1 {
        let keys = metrics::sample_keypoints(&dataset.frames[n].mask, opts.keypoints, opts.seed, n);
        if keys.is_empty() {
            continue;
        }
        let transfers = transfer(n, &keys)?;
        let next = &dataset.frames[n + 1].pose;
        correct += metrics::pck_t(&dataset.camera, next, &transfers, opts.alpha)? * transfers.len() as f64;
        total += transfers.len();
    }
    Ok((total > 0).then(|| correct / total as f64))
}

/// Mean forward-flow error of the field at ground-truth surface points of
/// the keypoints.
pub fn flow_error(dynamic: &DynamicFieldParams, dataset: &Dataset, opts: &EvalOptions) -> Result<Option<f64>> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for n in 0..dataset.len() - 1 {
        let f = &dataset.frames[n];
        let truth = &dataset.truth[n];
        for i in metrics::sample_keypoints(&f.mask, opts.keypoints, opts.seed, n) {
            let x = Vec3::from(truth.surface.row3(i));
            let dir = (x - f.pose.center()).normalize();
            let out = query_dynamic(dynamic, &x, &dir, f.time)?;
            pred.extend(out.flow_fwd);
            gt.extend(truth.flow_fwd.row(i).iter().copied());
        }
    }
    if pred.is_empty() {
        return Ok(None);
    }
    let rows = pred.len() / 3;
    let ones = Matrix::filled(rows, 1, 1.0);
    Ok(Some(metrics::flow_epe(
        &Matrix::from_vec(rows, 3, pred),
        &Matrix::from_vec(rows, 3, gt),
        &ones,
    )?))
}

/// Renders every held-out view and scores it; adds flow metrics when the
/// model has a dynamic field and the dataset carries ground truth.
pub fn evaluate(model: Model<'_>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let cam = &dataset.camera;
    let mut frames = Vec::with_capacity(dataset.eval.len());
    for view in &dataset.eval {
        let render = render_view(model, cam, &view.pose, view.time, opts.mode, &opts.render)?;
        frames.push(FrameScores::compute(
            view.frame,
            view.time,
            (&render.rgb, &render.depth),
            (&view.image, &view.depth),
            &view.mask,
            cam.width,
            cam.height,
        )?);
    }
    let (pck_t, flow_epe) = match model.dynamic_field {
        Some(df) if !dataset.truth.is_empty() => (
            pooled_pck(dataset, opts, |n, keys| predicted_transfers(df, dataset, n, keys, &opts.render))?,
            flow_error(df, dataset, opts)?,
        ),
        _ => (None, None),
    };
    Ok(EvalReport {
        frames,
        pck_t,
        flow_epe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{make_dataset, ScenePreset, SyntheticScene, TrajectoryConfig};

    fn small() -> Dataset {
        let traj = TrajectoryConfig {
            frames: 5,
            width: 32,
            height: 32,
            focal: 32.0,
            ..TrajectoryConfig::default()
        };
        make_dataset(&SyntheticScene::preset(ScenePreset::Rigid), &traj).unwrap()
    }

    #[test]
    fn ground_truth_flow_transfers_every_keypoint() {
        let ds = small();
        let opts = EvalOptions::new(&ds, 16, 3);
        let pck = pooled_pck(&ds, &opts, |n, k| gt_transfers(&ds, n, k)).unwrap();
        assert_eq!(pck, Some(1.0));
    }

    #[test]
    fn zero_flow_misses_a_fast_mover() {
        let ds = small();
        let mut opts = EvalOptions::new(&ds, 16, 3);
        // per-frame motion is ≈ 0.34 world units ≈ 5 px at depth 2, well past
        // the 1.6 px threshold
        opts.alpha = 0.05;
        let pck = pooled_pck(&ds, &opts, |n, k| {
            Ok(gt_transfers(&ds, n, k)?
                .into_iter()
                .map(|t| Transfer {
                    flow: Vec3::zeros(),
                    ..t
                })
                .collect())
        })
        .unwrap()
        .unwrap();
        assert!(pck < 0.05, "pck {pck}");
    }
}
