use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nsflow::commands;
use nsflow::config::RunConfig;
use nsflow::geometry::Pose;
use nsflow::renderer::RenderMode;

#[derive(Parser)]
#[command(name = "nsflow", version, about = "Dynamic view synthesis with neural scene flow fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults to the fast preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    GenScene {
        #[command(flatten)]
        common: Common,
    },
    /// Train both stages, writing checkpoints and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to the configured one).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Render color, depth and flow images for one view.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose frame pose is rendered (with --frame).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Explicit camera-to-world pose as 12 comma-separated row-major values.
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
        /// Time in [0, 1]; defaults to the frame's time.
        #[arg(long)]
        time: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Composite)]
        mode: Mode,
    },
    /// Score held-out views and flow against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Static,
    Dynamic,
    Composite,
}

impl From<Mode> for RenderMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Static => RenderMode::Static,
            Mode::Dynamic => RenderMode::Dynamic,
            Mode::Composite => RenderMode::Composite,
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::fast(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, fallback: &Path) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| fallback.to_path_buf());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenScene { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg.output.dataset_dir)?;
            let ds = commands::gen_scene(&cfg, &out)?;
            println!("wrote {} frames to {}", ds.len(), out.display());
        }
        Command::Train {
            common,
            dataset,
            resume,
            max_steps,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg.output.run_dir)?;
            let data = dataset.unwrap_or_else(|| cfg.output.dataset_dir.clone());
            let s = commands::train(&cfg, &data, &out, resume, max_steps)?;
            println!(
                "{} iteration {} after {} steps; checkpoint {}",
                s.stage.name(),
                s.iteration,
                s.steps_run,
                s.checkpoint.display()
            );
        }
        Command::Render {
            common,
            checkpoint,
            dataset,
            frame,
            pose,
            time,
            mode,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg.output.run_dir.join("render"))?;
            let files = match pose {
                Some(text) => {
                    let rows = text
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .context("--pose expects comma-separated numbers")?;
                    let pose = Pose::from_row12(&rows)?;
                    let Some(t) = time else { bail!("--time is required with --pose") };
                    let scene = cfg.scene.scene()?;
                    let camera = cfg.trajectory.camera()?;
                    let near_far = (scene.config.near, scene.config.far);
                    commands::render(&cfg, &checkpoint, &camera, &pose, t, mode.into(), near_far, &out)?
                }
                None => {
                    let data = dataset.unwrap_or_else(|| cfg.output.dataset_dir.clone());
                    commands::render_frame(&cfg, &checkpoint, &data, frame, time, mode.into(), &out)?
                }
            };
            println!("wrote {}, {}, {}", files.color.display(), files.depth.display(), files.flow.display());
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg.output.run_dir)?;
            let data = dataset.unwrap_or_else(|| cfg.output.dataset_dir.clone());
            let report = commands::eval(&cfg, &checkpoint, &data, &out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("nsflow: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
