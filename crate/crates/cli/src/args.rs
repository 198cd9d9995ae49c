use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use strata::harness::TrainConfig;
use strata::losses::LossWeights;

use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "strata", version, about = "Vegetation stratum occupancy from LiDAR plots")]
pub struct Cli {
    /// `key=value` file providing defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with exact labels and reference rasters.
    Synth(SynthArgs),
    /// Fit the ground / non-ground elevation mixture.
    FitGamma(FitGammaArgs),
    /// Train the segmentation network on every labeled plot.
    Train(TrainArgs),
    /// Predict occupancies and rasters with a trained network.
    Predict(PredictArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Cross-validate the segmentation network.
    Cv(CvArgs),
    /// Cross-validate a baseline.
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub plots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pulses per square meter.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub raster_k: Option<usize>,
    /// Largest ground slope drawn per plot.
    #[arg(long)]
    pub max_tilt: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitGammaArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Mixture JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mixture JSON to start from instead of the moment-matched splits.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

/// Hyperparameters shared by the training subcommands.
#[derive(Args, Debug, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub m_points: Option<usize>,
    #[arg(long)]
    pub raster_k: Option<usize>,
    /// Weight of the elevation loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the entropy loss.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Folds trained in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use this mixture instead of fitting one.
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Plot CSV holding one or more plots.
    #[arg(long, conflicts_with = "data")]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory, the working directory by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub m_points: Option<usize>,
    #[arg(long)]
    pub raster_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions in the labels CSV schema.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Labels CSV, or a data directory holding `labels.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum BaselineKind {
    Handcrafted,
    Regression,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<BaselineKind>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

const CONFIG_KEYS: &[&str] = &[
    "plots", "seed", "out", "data", "density", "raster-k", "max-tilt", "init", "epochs", "batch", "m-points",
    "lambda", "mu", "lr", "jobs", "mixture", "model", "plot", "predictions", "method",
];

/// Values from a `key=value` config file; flags given on the command line
/// take precedence.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
            let key = key.trim().trim_start_matches("--").replace('_', "-");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", n + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// The flag value, else the config value, else `None`.
    pub fn get<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config value `{v}` is not valid for `{key}`"))),
        }
    }

    pub fn or<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        self.get(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Display>(v: T, name: &str) -> Result<T, CliError> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
    }
}

fn non_negative(v: f64, name: &str) -> Result<f64, CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("--{name} must be >= 0, got {v}")))
    }
}

/// Training configuration from flags, config file and defaults.
pub fn train_config(h: &HyperArgs, cfg: &ConfigFile) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let raster_k = cfg.or(h.raster_k, "raster-k", d.raster_k)?;
    if raster_k < 2 {
        return Err(CliError::Usage(format!("--raster-k must be >= 2, got {raster_k}")));
    }
    let lr = cfg.or(h.lr, "lr", d.learning_rate)?;
    if !lr.is_finite() {
        return Err(CliError::Usage(format!("--lr must be finite, got {lr}")));
    }
    Ok(TrainConfig {
        epochs: positive(cfg.or(h.epochs, "epochs", d.epochs)?, "epochs")?,
        batch_size: positive(cfg.or(h.batch, "batch", d.batch_size)?, "batch")?,
        m_points: positive(cfg.or(h.m_points, "m-points", d.m_points)?, "m-points")?,
        raster_k,
        weights: LossWeights {
            elevation: non_negative(cfg.or(h.lambda, "lambda", d.weights.elevation)?, "lambda")?,
            entropy: non_negative(cfg.or(h.mu, "mu", d.weights.entropy)?, "mu")?,
        },
        learning_rate: positive(lr, "lr")?,
        seed: cfg.or(h.seed, "seed", d.seed)?,
        folds: d.folds,
        jobs: positive(cfg.or(h.jobs, "jobs", d.jobs)?, "jobs")?,
    })
}
