//! Command implementations behind the `nsflow` binary: scene generation,
//! resumable training, rendering and evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::{Matrix, Tape};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::fields::{DynamicFieldParams, DynamicQuery};
use crate::geometry::{camera_ray, project, Camera, Pose, Vec3};
use crate::io::{
    depth_file_name, depth_to_gray, flow_to_rgb, load_checkpoint, load_dataset, read_text, save_checkpoint,
    save_dataset, write_atomic, write_gray_png, write_rgb_png, Checkpoint,
};
use crate::metrics::EvalReport;
use crate::renderer::{render_view, Model, RenderMode, RenderOptions};
use crate::synthscene::make_dataset;
use crate::trainer::{Stage, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const FLOW_MASK_THRESHOLD: f64 = 0.5;

/// Renders the configured scene and writes it as a dataset directory.
pub fn gen_scene(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let scene = cfg.scene.scene()?;
    let dataset = make_dataset(&scene, &cfg.trajectory)?;
    save_dataset(out, &dataset)?;
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub stage: Stage,
    pub iteration: usize,
    pub steps_run: usize,
    pub log_lines: usize,
}

fn truncate_log(path: &Path, keep: usize) -> Result<()> {
    let text = if path.exists() { read_text(path)? } else { String::new() };
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < keep {
        return Err(Error::format(path, "log is shorter than the checkpoint records"));
    }
    let mut kept = String::new();
    for l in &lines[..keep] {
        kept.push_str(l);
        kept.push('\n');
    }
    write_atomic(path, kept.as_bytes())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) both training stages. Checkpoints are written every
/// `checkpoint_every` iterations, at each stage boundary, and when
/// `max_steps` stops the run early.
pub fn train(
    cfg: &RunConfig,
    dataset_dir: &Path,
    run_dir: &Path,
    resume: bool,
    max_steps: Option<usize>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let tcfg = cfg.train_config();
    let dataset = load_dataset(dataset_dir)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let log_path = run_dir.join(LOG_FILE);

    let (mut state, mut log_lines) = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let expected = tcfg.model.arch(&dataset)?;
        if ckpt.state.dynamic_field.arch != expected {
            return Err(Error::Config("checkpoint architecture does not match the config".into()));
        }
        truncate_log(&log_path, ckpt.log_lines)?;
        (ckpt.state, ckpt.log_lines)
    } else {
        write_atomic(&log_path, b"")?;
        (TrainState::new(&dataset, &tcfg)?, 0)
    };

    let mut steps = 0;
    while !state.is_done() && max_steps.is_none_or(|m| steps < m) {
        let out = state.step(&dataset, &tcfg, &cfg.losses)?;
        steps += 1;
        if let Some(line) = &out.log_line {
            append_line(&log_path, line)?;
            log_lines += 1;
        }
        let stage_end = state.stage != out.stage;
        let stopping = max_steps.is_some_and(|m| steps >= m);
        if out.iteration % tcfg.checkpoint_every == 0 || stage_end || stopping || state.is_done() {
            save_checkpoint(
                &ckpt_path,
                &Checkpoint {
                    state: state.clone(),
                    log_lines,
                },
            )?;
        }
    }
    if steps == 0 {
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                state: state.clone(),
                log_lines,
            },
        )?;
    }
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        log: log_path,
        stage: state.stage,
        iteration: state.iteration,
        steps_run: steps,
        log_lines,
    })
}

/// Queries forward flow for a batch of points at one time.
pub fn query_flow_batch(field: &DynamicFieldParams, points: &Matrix, dirs: &Matrix, t: f64) -> Result<Matrix> {
    let tape = Tape::new();
    let vars = field.bind(&tape, false)?;
    let times = Matrix::filled(points.rows(), 1, t);
    let out = vars.query(tape.constant(points.clone()), dirs, &times);
    let flow = (*out.flow_fwd.value()).clone();
    if !flow.is_finite() {
        return Err(Error::Numeric("non-finite flow".into()));
    }
    Ok(flow)
}

/// Scene flow at each pixel's rendered dynamic surface point, projected to
/// image-plane displacement in the same camera.
pub fn projected_flow(
    field: &DynamicFieldParams,
    camera: &Camera,
    pose: &Pose,
    t: f64,
    opts: &RenderOptions,
) -> Result<Matrix> {
    let model = Model {
        static_field: None,
        dynamic_field: Some(field),
    };
    let render = render_view(model, camera, pose, t, RenderMode::Dynamic, opts)?;
    let n = camera.pixel_count();
    let mut points = Matrix::zeros(n, 3);
    let mut dirs = Matrix::zeros(n, 3);
    for i in 0..n {
        let opacity = render.opacity.get(i, 0).max(1e-6);
        let x = Vec3::from(render.surface.row3(i)) / opacity;
        points.row_mut(i).copy_from_slice(&[x.x, x.y, x.z]);
        let (u, v) = ((i % camera.width) as f64, (i / camera.width) as f64);
        let d = camera_ray(camera, pose, u, v, opts.near, opts.far)?.direction;
        dirs.row_mut(i).copy_from_slice(&[d.x, d.y, d.z]);
    }
    let flow = query_flow_batch(field, &points, &dirs, t)?;
    let mut out = Matrix::zeros(n, 2);
    for i in 0..n {
        let x = Vec3::from(points.row3(i));
        let f = Vec3::from(flow.row3(i));
        if let (Ok((u0, v0, _)), Ok((u1, v1, _))) = (project(camera, pose, &x), project(camera, pose, &(x + f))) {
            out.row_mut(i).copy_from_slice(&[u1 - u0, v1 - v0]);
        }
    }
    Ok(out)
}

/// Paths written by [`render`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFiles {
    pub color: PathBuf,
    pub depth: PathBuf,
    pub flow: PathBuf,
}

/// Renders color, normalized depth and a flow visualization for one view.
#[allow(clippy::too_many_arguments)]
pub fn render(
    cfg: &RunConfig,
    checkpoint: &Path,
    camera: &Camera,
    pose: &Pose,
    t: f64,
    mode: RenderMode,
    near_far: (f64, f64),
    out: &Path,
) -> Result<RenderedFiles> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let (near, far) = near_far;
    let opts = RenderOptions::new(cfg.render_samples, near, far);
    let s = &ckpt.state;
    let model = Model {
        static_field: Some(&s.static_field),
        dynamic_field: Some(&s.dynamic_field),
    };
    let (w, h) = (camera.width, camera.height);
    let view = render_view(model, camera, pose, t, mode, &opts)?;
    let composite = if mode == RenderMode::Composite {
        view.clone()
    } else {
        render_view(model, camera, pose, t, RenderMode::Composite, &opts)?
    };
    let blend = composite.blend.expect("composite renders carry blend");
    let mask = blend.map(|p| if p > FLOW_MASK_THRESHOLD { 1.0 } else { 0.0 });
    let flow = projected_flow(&s.dynamic_field, camera, pose, t, &opts)?;

    let files = RenderedFiles {
        color: out.join("color.png"),
        depth: out.join(depth_file_name(near, far)),
        flow: out.join("flow.png"),
    };
    write_rgb_png(&files.color, &view.rgb, w, h)?;
    write_gray_png(&files.depth, &depth_to_gray(&view.depth, near, far), w, h)?;
    write_rgb_png(&files.flow, &flow_to_rgb(&flow, &mask), w, h)?;
    Ok(files)
}

/// Renders a dataset frame's pose at time `t`.
pub fn render_frame(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    frame: usize,
    t: Option<f64>,
    mode: RenderMode,
    out: &Path,
) -> Result<RenderedFiles> {
    let dataset = load_dataset(dataset_dir)?;
    let f = dataset
        .frames
        .get(frame)
        .ok_or_else(|| Error::Config(format!("frame {frame} out of range")))?;
    render(
        cfg,
        checkpoint,
        &dataset.camera,
        &f.pose,
        t.unwrap_or(f.time),
        mode,
        (dataset.near, dataset.far),
        out,
    )
}

/// Evaluates held-out views and flow; writes `eval.txt` and `eval.tsv`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, dataset_dir: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let s = &ckpt.state;
    let model = Model {
        static_field: Some(&s.static_field),
        dynamic_field: Some(&s.dynamic_field),
    };
    let opts = EvalOptions::new(&dataset, cfg.render_samples, cfg.seed);
    let report = evaluate(model, &dataset, &opts)?;
    write_atomic(&out.join("eval.txt"), report.to_text().as_bytes())?;
    write_atomic(&out.join("eval.tsv"), report.to_table().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{ModelConfig, TrainConfig};

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::fast();
        cfg.trajectory.frames = 3;
        cfg.trajectory.width = 12;
        cfg.trajectory.height = 12;
        cfg.trajectory.focal = 12.0;
        cfg.scene.custom = Some(crate::synthscene::SceneConfig {
            oracle_samples: 64,
            ..cfg.scene.preset.config()
        });
        cfg.train = TrainConfig {
            model: ModelConfig {
                width: 8,
                depth: 2,
                skip: None,
                ..ModelConfig::fast()
            },
            static_iters: 3,
            dynamic_iters: 4,
            batch_rays: 16,
            samples: 4,
            patch_size: 3,
            patch_every: 2,
            log_every: 2,
            checkpoint_every: 2,
            ..TrainConfig::fast()
        };
        cfg.render_samples = 4;
        cfg
    }

    #[test]
    fn generated_scene_is_byte_identical() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_scene(&cfg, a.path()).unwrap();
        gen_scene(&cfg, b.path()).unwrap();
        for rel in ["manifest.toml", "frames/001.png", "masks/002.png", "gt/001_flow_fwd.arr"] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn training_resumes_bit_identically() {
        let cfg = tiny_config();
        let data = tempfile::tempdir().unwrap();
        gen_scene(&cfg, data.path()).unwrap();

        let full = tempfile::tempdir().unwrap();
        let s = train(&cfg, data.path(), full.path(), false, None).unwrap();
        assert_eq!(s.stage, Stage::Done);
        // 3 static + 4 dynamic iterations, one line every 2 per stage
        assert_eq!(s.log_lines, 1 + 2);

        let split = tempfile::tempdir().unwrap();
        let first = train(&cfg, data.path(), split.path(), false, Some(4)).unwrap();
        assert_eq!(first.steps_run, 4);
        // an interrupted log line past the checkpoint is discarded on resume
        append_line(&split.path().join(LOG_FILE), "partial").unwrap();
        train(&cfg, data.path(), split.path(), true, None).unwrap();

        for file in [CHECKPOINT_FILE, LOG_FILE] {
            assert_eq!(
                fs::read(full.path().join(file)).unwrap(),
                fs::read(split.path().join(file)).unwrap(),
                "{file}"
            );
        }
    }

    #[test]
    fn render_and_eval_write_outputs() {
        let cfg = tiny_config();
        let data = tempfile::tempdir().unwrap();
        let run = tempfile::tempdir().unwrap();
        gen_scene(&cfg, data.path()).unwrap();
        let s = train(&cfg, data.path(), run.path(), false, None).unwrap();
        let out = tempfile::tempdir().unwrap();
        let files = render_frame(&cfg, &s.checkpoint, data.path(), 1, None, RenderMode::Composite, out.path()).unwrap();
        assert!(files.color.exists() && files.flow.exists());
        let again = tempfile::tempdir().unwrap();
        let files2 =
            render_frame(&cfg, &s.checkpoint, data.path(), 1, None, RenderMode::Composite, again.path()).unwrap();
        assert_eq!(fs::read(&files.color).unwrap(), fs::read(&files2.color).unwrap());
        assert_eq!(fs::read(&files.depth).unwrap(), fs::read(&files2.depth).unwrap());

        let report = eval(&cfg, &s.checkpoint, data.path(), out.path()).unwrap();
        assert_eq!(report.frames.len(), 2);
        let table = read_text(&out.path().join("eval.tsv")).unwrap();
        assert_eq!(table.lines().count(), 2 + 2);
    }

    #[test]
    fn zero_flow_checkpoint_renders_white_flow_inside_mask() {
        let cfg = tiny_config();
        let data = tempfile::tempdir().unwrap();
        let run = tempfile::tempdir().unwrap();
        gen_scene(&cfg, data.path()).unwrap();
        // static stage only: the dynamic field keeps its zero flow heads
        let mut c = cfg.clone();
        c.train.dynamic_iters = 0;
        let s = train(&c, data.path(), run.path(), false, None).unwrap();
        let ds = load_dataset(data.path()).unwrap();
        let ckpt = load_checkpoint(&s.checkpoint).unwrap();
        let opts = RenderOptions::new(4, ds.near, ds.far);
        let flow = projected_flow(&ckpt.state.dynamic_field, &ds.camera, &ds.frames[0].pose, 0.0, &opts).unwrap();
        assert!(flow.data().iter().all(|v| *v == 0.0));
        let rgb = flow_to_rgb(&flow, &Matrix::filled(flow.rows(), 1, 1.0));
        assert!(rgb.data().iter().all(|v| *v == 1.0));
    }
}
