//! Command-line entry point: `generate`, `train`, `infer`, `eval`, `filter`.
//!
//! Settings come from an optional JSON [`RunConfig`] file, then flags. The
//! effective configuration is written to `<out>/config.json`. Diagnostics go
//! to stderr as one JSON object per line.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_filter, cmd_generate, cmd_infer, cmd_train, EvalReport, FilterManifest, Manifest, ManifestEntry,
    PredictionMeta,
};
pub use config::{EvalSection, FilterSection, GenerateConfig, InferSection, RunConfig, TrainSection};

/// Structured stderr diagnostics.
pub fn emit(level: &str, event: &str, fields: serde_json::Value) {
    let mut line = serde_json::json!({ "level": level, "event": event });
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[derive(Debug, Parser)]
#[command(name = "depthflow", version, about = "Video depth estimation by flow matching, at toy scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of this command's randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train the base model, or fine-tune the interpolation model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Fine-tune the keyframe interpolation model from `--base`.
        #[arg(long)]
        interp: bool,
        /// Base checkpoint to start from.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Predict depth for an image, a clip directory or a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        interp_checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ensemble: Option<usize>,
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Remove dataset segments that fail both filter checks.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        similarity_threshold: Option<f64>,
        #[arg(long)]
        delta1_threshold: Option<f64>,
    },
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Applies flags on top of the config file and returns the effective config
/// with the output directory.
pub fn resolve(command: Command) -> anyhow::Result<(String, RunConfig, PathBuf)> {
    let (name, cfg, out) = match command {
        Command::Generate { common, count, frames, height, width } => {
            let mut cfg = base_config(&common)?;
            let g = &mut cfg.generate;
            set(&mut g.seed, common.seed);
            set(&mut g.count, count);
            set(&mut g.scene.frames, frames);
            set(&mut g.scene.height, height);
            set(&mut g.scene.width, width);
            ("generate", cfg, common.out)
        }
        Command::Train { common, data, steps, lr, interp, base } => {
            let mut cfg = base_config(&common)?;
            let t = &mut cfg.train;
            set(&mut t.config.seed, common.seed);
            set_path(&mut t.data, data);
            set(&mut t.config.steps, steps);
            set(&mut t.config.optimizer.lr, lr);
            t.interp |= interp;
            set_path(&mut t.base_checkpoint, base);
            ("train", cfg, common.out)
        }
        Command::Infer { common, checkpoint, interp_checkpoint, input, steps, ensemble, max_frames } => {
            let mut cfg = base_config(&common)?;
            let i = &mut cfg.infer;
            set(&mut i.config.seed, common.seed);
            set_path(&mut i.checkpoint, checkpoint);
            set_path(&mut i.interp_checkpoint, interp_checkpoint);
            set_path(&mut i.input, input);
            set(&mut i.config.steps, steps);
            set(&mut i.config.ensemble, ensemble);
            set(&mut i.config.max_frames_per_pass, max_frames);
            ("infer", cfg, common.out)
        }
        Command::Eval { common, pred, gt } => {
            let mut cfg = base_config(&common)?;
            set_path(&mut cfg.eval.predictions, pred);
            set_path(&mut cfg.eval.ground_truth, gt);
            ("eval", cfg, common.out)
        }
        Command::Filter { common, data, checkpoint, similarity_threshold, delta1_threshold } => {
            let mut cfg = base_config(&common)?;
            let f = &mut cfg.filter;
            set(&mut f.seed, common.seed);
            set_path(&mut f.data, data);
            set_path(&mut f.checkpoint, checkpoint);
            set(&mut f.thresholds.similarity, similarity_threshold);
            set(&mut f.thresholds.delta1, delta1_threshold);
            ("filter", cfg, common.out)
        }
    };
    Ok((name.to_string(), cfg, out))
}

/// Runs one subcommand with an already resolved configuration.
pub fn execute(name: &str, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    match name {
        "generate" => cmd_generate(cfg, out),
        "train" => cmd_train(cfg, out),
        "infer" => cmd_infer(cfg, out),
        "eval" => cmd_eval(cfg, out).map(|_| ()),
        "filter" => cmd_filter(cfg, out),
        other => anyhow::bail!("unknown command {other}"),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit("error", "usage", serde_json::json!({ "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    let outcome = resolve(cli.command).and_then(|(name, cfg, out)| {
        emit("info", "start", serde_json::json!({ "command": name, "out": out }));
        execute(&name, &cfg, &out).map(|_| name)
    });
    match outcome {
        Ok(name) => {
            emit("info", "done", serde_json::json!({ "command": name }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit("error", "failed", serde_json::json!({ "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
