use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use gibr::commands;
use gibr::config::{RawConfig, RunConfig};
use gibr_diffcore::Precision;

/// Generative image-based-planes scene models on synthetic multi-view data.
///
/// Settings come from built-in defaults, then the config file, then
/// `--set`, then command flags, then the GIBR_SEED environment variable.
/// `gibr config` prints every setting with its default.
#[derive(Parser)]
#[command(name = "gibr", version)]
struct Cli {
    /// Config file of `key = value` lines under `[section]` headers [default: none, built-in values]
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=1e-4`; repeatable [default: none]
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: views, poses, depths, masks and a split manifest.
    GenData {
        /// Output directory [default: data.dir = data]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of scenes [default: data.scenes = 16]
        #[arg(long)]
        scenes: Option<usize>,
        /// Views per scene [default: data.views = 6]
        #[arg(long)]
        views: Option<usize>,
        /// Image width [default: data.width = 32]
        #[arg(long)]
        width: Option<usize>,
        /// Image height [default: data.height = 32]
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train the denoiser; writes ckpt_latest, ckpt_ema and train.log.
    Train {
        /// Steps to run in this invocation; 0 writes the initial checkpoint [default: train.steps = 1000]
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from <out>/ckpt_latest [default: false]
        #[arg(long)]
        resume: bool,
        /// Output directory [default: train.out = run]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory [default: data.dir = data]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample scenes unconditionally at orbit poses.
    Sample {
        /// Checkpoint (ckpt_ema or ckpt_latest)
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of scenes [default: sample.n = 2]
        #[arg(short, long)]
        n: Option<usize>,
        /// Views per scene [default: sample.views = 4]
        #[arg(long)]
        views: Option<usize>,
        /// DDIM steps [default: sample.ddim_steps = 250]
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory [default: sample.out = samples]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a scene from conditioning views, best of K samples.
    Reconstruct {
        /// Checkpoint (ckpt_ema or ckpt_latest)
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with view_NNN.ppm and view_NNN.pose.txt
        #[arg(long)]
        input: PathBuf,
        /// Leading views used as conditioning [default: reconstruct.cond = 1]
        #[arg(long)]
        cond: Option<usize>,
        /// Following poses to generate [default: reconstruct.noisy = 3]
        #[arg(long)]
        noisy: Option<usize>,
        /// Samples K [default: reconstruct.samples = 4]
        #[arg(short = 'k', long)]
        samples: Option<usize>,
        /// DDIM steps [default: reconstruct.ddim_steps = 50]
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory [default: reconstruct.out = recon]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a stored scene at new poses and resolutions.
    Render {
        /// Scene file or a sample directory holding scene.ckpt
        #[arg(long)]
        scene: PathBuf,
        /// Pose files, or directories of *.pose.txt files
        #[arg(long, required = true, num_args = 1..)]
        poses: Vec<PathBuf>,
        /// Resolution multiplier [default: render.scale = 1]
        #[arg(long)]
        scale: Option<usize>,
        /// Output directory [default: render.out = renders]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-of-K reconstruction metrics over a dataset split.
    Evaluate {
        /// Checkpoint (ckpt_ema or ckpt_latest)
        #[arg(long)]
        ckpt: PathBuf,
        /// train, val or test [default: eval.split = test]
        #[arg(long)]
        split: Option<String>,
        /// Dataset directory [default: data.dir = data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scenes to evaluate, 0 = all [default: eval.max_scenes = 0]
        #[arg(long)]
        max_scenes: Option<usize>,
        /// Output directory [default: eval.out = eval]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration, every setting documented.
    Config,
}

fn put<V: ToString>(raw: &mut RawConfig, key: &str, v: &Option<V>) -> Result<()> {
    if let Some(v) = v {
        raw.set(key, &v.to_string())?;
    }
    Ok(())
}

fn put_path(raw: &mut RawConfig, key: &str, v: &Option<PathBuf>) -> Result<()> {
    put(raw, key, &v.as_ref().map(|p| p.display()))
}

fn apply_flags(raw: &mut RawConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            scenes,
            views,
            width,
            height,
        } => {
            put_path(raw, "data.dir", out)?;
            put(raw, "data.scenes", scenes)?;
            put(raw, "data.views", views)?;
            put(raw, "data.width", width)?;
            put(raw, "data.height", height)?;
        }
        Command::Train { steps, out, data, .. } => {
            put(raw, "train.steps", steps)?;
            put_path(raw, "train.out", out)?;
            put_path(raw, "data.dir", data)?;
        }
        Command::Sample {
            n, views, steps, out, ..
        } => {
            put(raw, "sample.n", n)?;
            put(raw, "sample.views", views)?;
            put(raw, "sample.ddim_steps", steps)?;
            put_path(raw, "sample.out", out)?;
        }
        Command::Reconstruct {
            cond,
            noisy,
            samples,
            steps,
            out,
            ..
        } => {
            put(raw, "reconstruct.cond", cond)?;
            put(raw, "reconstruct.noisy", noisy)?;
            put(raw, "reconstruct.samples", samples)?;
            put(raw, "reconstruct.ddim_steps", steps)?;
            put_path(raw, "reconstruct.out", out)?;
        }
        Command::Render { scale, out, .. } => {
            put(raw, "render.scale", scale)?;
            put_path(raw, "render.out", out)?;
        }
        Command::Evaluate {
            split,
            data,
            max_scenes,
            out,
            ..
        } => {
            put(raw, "eval.split", split)?;
            put_path(raw, "data.dir", data)?;
            put(raw, "eval.max_scenes", max_scenes)?;
            put_path(raw, "eval.out", out)?;
        }
        Command::Config => {}
    }
    Ok(())
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let mut raw = RawConfig::load(cli.config.as_deref())?;
    for s in &cli.set {
        raw.assign(s)?;
    }
    apply_flags(&mut raw, &cli.command)?;
    raw.apply_env()?;
    if let Command::Config = cli.command {
        print!("{}", raw.to_text());
        return Ok(());
    }
    let cfg: RunConfig = raw.resolve()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    }
    log::debug!("config hash {}", cfg.hash);
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Train { resume, .. } => with_precision!(cfg, train(&cfg, *resume)),
        Command::Sample { ckpt, .. } => with_precision!(cfg, sample(&cfg, ckpt)),
        Command::Reconstruct { ckpt, input, .. } => with_precision!(cfg, reconstruct(&cfg, ckpt, input)),
        Command::Render { scene, poses, .. } => with_precision!(cfg, render(&cfg, scene, poses)),
        Command::Evaluate { ckpt, .. } => with_precision!(cfg, evaluate(&cfg, ckpt)),
        Command::Config => unreachable!(),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
