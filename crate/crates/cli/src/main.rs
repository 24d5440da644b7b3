mod commands;
mod manifest;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsmc_core::config::{ModelConfig, Toggle};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("FSMC_GIT_DESCRIBE"), ")");

#[derive(Debug, Parser)]
#[command(name = "fsmc-pose", version = VERSION, about = "Cattle pose estimation: toy training, evaluation, profiling and visualization")]
pub struct Cli {
    /// Model configuration (TOML); defaults to the desk configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for benchmarking.
    #[arg(long, global = true, env = "FSMC_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Output directory for all artifacts and the run manifest.
    #[arg(long, global = true, default_value = "fsmc-out")]
    pub out: PathBuf,

    /// Disable a block: no-sfe, no-ra or no-sc2head. Repeatable.
    #[arg(long, global = true, value_parser = parse_toggle)]
    pub toggle: Vec<Toggle>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_toggle(s: &str) -> Result<Toggle, String> {
    s.parse().map_err(|e: fsmc_core::Error| e.to_string())
}

/// Where instances come from: a COCO file plus image directory, or the synthetic generator.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// COCO-style keypoint annotation file.
    #[arg(long, conflicts_with = "synthetic")]
    pub annotations: Option<PathBuf>,

    /// Directory holding the images named in the annotation file.
    #[arg(long, requires = "annotations")]
    pub images: Option<PathBuf>,

    /// Generate N synthetic images from --seed instead of reading files.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch and write a checkpoint plus per-iteration loss log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Size of the held-out synthetic slice used for PCK@0.1.
        #[arg(long, default_value_t = 16)]
        holdout: usize,
    },
    /// Top-down evaluation on ground-truth boxes: AP/AR report and COCO results file.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Trained checkpoint; without it the model is the initialization from --seed.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Score an existing COCO results file instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Time end-to-end inference on a fixed random batch.
    Bench {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Per-layer parameter and MAC table.
    Profile {
        /// Input resolution as WIDTHxHEIGHT; defaults to the configured one.
        #[arg(long, value_parser = parse_resolution)]
        resolution: Option<(usize, usize)>,
    },
    /// Keypoint visibility counts per split.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Tab-separated `image_id<TAB>split` lines.
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
    /// Skeleton overlays and, with a checkpoint, marginal heat strips as PPM files.
    Viz {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic dataset (annotations.json plus PGM images).
    Synth {
        #[arg(long, default_value_t = 32)]
        count: usize,
    },
    /// Assign images to train/val/test and write the split file.
    Split {
        #[arg(long)]
        annotations: PathBuf,
        /// Train, val and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Profile { .. } => "profile",
            Command::Stats { .. } => "stats",
            Command::Viz { .. } => "viz",
            Command::Synth { .. } => "synth",
            Command::Split { .. } => "split",
        }
    }
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad dimension {v:?}: {e}"));
    Ok((dim(w)?, dim(h)?))
}

impl Cli {
    /// Configuration file (or desk default) with toggles applied, validated.
    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::desk(),
        };
        for &t in &self.toggle {
            cfg = cfg.with_toggle(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// 1 for bad input, 2 for internal invariant violations and numerical blow-ups.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<fsmc_core::Error>())
        .map_or(1, |e| if e.is_user_error() { 1 } else { 2 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_parses() {
        assert_eq!(parse_resolution("512x384"), Ok((512, 384)));
        assert!(parse_resolution("512").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let user: anyhow::Error = fsmc_core::Error::Config("x".into()).into();
        let internal: anyhow::Error = fsmc_core::Error::Invariant("x".into()).into();
        let nonfinite = anyhow::Error::from(fsmc_core::Error::NonFinite("x".into())).context("training");
        assert_eq!(exit_code(&user), 1);
        assert_eq!(exit_code(&internal), 2);
        assert_eq!(exit_code(&nonfinite), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
