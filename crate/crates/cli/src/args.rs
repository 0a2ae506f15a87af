use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flowimg::marketdata::StreamFormat;
use flowimg::models::ModelKind;
use flowimg::pipeline::{PipelineConfig, SynthSettings};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "flowimg", version, about = "Order-flow images and realized-volatility models from tick data")]
pub struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replace an existing output instead of skipping or refusing.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for parallel stages (default: logical processors).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse exchange trade and depth streams into per-day files.
    Ingest {
        #[arg(long)]
        trades: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long, default_value = "csv")]
        format: StreamFormat,
        /// Tolerated backwards timestamp step in milliseconds.
        #[arg(long, default_value_t = 0)]
        ts_tolerance_ms: i64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic days.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Encode every walk-forward window into the image tensor.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png_dir: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compute the feature table of every walk-forward window.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build the labeled sample store with its chronological split.
    Dataset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png_dir: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit models on the training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Model names separated by commas, or `all`.
        #[arg(long, default_value = "all")]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write predictions of a checkpoint for every sample.
    Predict {
        #[arg(long)]
        model_ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export CNN latents as a tensor file.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score checkpoints on the validation and test splits.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        model_ckpt: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Summarize a directory, tensor file or checkpoint.
    Inspect {
        path: PathBuf,
        /// Dump stored dataset images as PNG files here.
        #[arg(long)]
        png_dir: Option<PathBuf>,
        /// Sample range to dump, `start..end`.
        #[arg(long, default_value = "0..16")]
        range: String,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seconds per day.
    #[arg(long)]
    pub duration: Option<i64>,
    #[arg(long)]
    pub days: Option<u32>,
    /// Use the built-in three-level regime-switching schedule.
    #[arg(long)]
    pub regime_switching: bool,
    #[arg(long)]
    pub sigma: Option<f64>,
}

/// Flags shared by the stages that read the pipeline config.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub horizon: Option<i64>,
    /// Image columns.
    #[arg(long)]
    pub n: Option<usize>,
    /// Image rows.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub t_unit: Option<u32>,
    #[arg(long)]
    pub v_unit: Option<f64>,
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long)]
    pub clip_q: Option<f64>,
    /// Seconds between window starts.
    #[arg(long)]
    pub epsilon: Option<u32>,
    /// Skip the image tensor.
    #[arg(long)]
    pub no_images: bool,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub train_seed: Option<u64>,
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", p.display(), e.message())))
        }
    }
}

impl CommonArgs {
    pub fn apply(&self, c: &mut PipelineConfig) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            horizon => horizon_s,
            n => encoding.n,
            m => encoding.m,
            t_unit => encoding.t_unit_s,
            v_unit => encoding.v_unit,
            pad => encoding.pad,
            clip_q => encoding.clip_q,
            epsilon => encoding.epsilon_s,
            epochs => train.epochs,
            batch_size => train.batch_size,
            lr => train.learning_rate,
            patience => train.patience,
            train_seed => train.seed,
        );
        if self.no_images {
            c.images = false;
        }
        if let Some(p) = &self.catalog {
            c.catalog_path = Some(p.clone());
        }
    }
}

impl SynthArgs {
    pub fn apply(&self, c: &mut PipelineConfig) {
        if self.regime_switching {
            let days = c.synth.days;
            let duration = c.synth.duration_s;
            c.synth =
                SynthSettings { start_ts_s: c.synth.start_ts_s, ..SynthSettings::regime_switching(days, duration) };
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.duration {
            c.synth.duration_s = v;
        }
        if let Some(v) = self.days {
            c.synth.days = v;
        }
        if let Some(v) = self.sigma {
            c.synth.sigma = v;
        }
    }
}

/// `all` or a comma-separated list of model names.
pub fn parse_models(spec: &str) -> Result<Vec<ModelKind>, CliError> {
    if spec == "all" {
        return Ok(ModelKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in spec.split(',') {
        let kind: ModelKind = name.trim().parse().map_err(CliError::Usage)?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    Ok(out)
}

pub fn parse_range(spec: &str) -> Result<std::ops::Range<usize>, CliError> {
    let bad = || CliError::Usage(format!("range must look like START..END, got {spec:?}"));
    let (a, b) = spec.split_once("..").ok_or_else(bad)?;
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    if b < a {
        return Err(bad());
    }
    Ok(a..b)
}
