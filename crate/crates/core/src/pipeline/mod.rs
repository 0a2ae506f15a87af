//! End-to-end orchestration: raw day directories, datasets, checkpoints
//! and reports, each stamped with a manifest.

mod dataset;
mod fit;
mod raw;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{EncoderError, EncodingParams};
use crate::eval::EvalError;
use crate::export::TensorError;
use crate::features::{FeatureCatalog, FeatureError};
use crate::labeler::LabelError;
use crate::marketdata::{MarketDataError, Regime};
use crate::models::{ModelError, TrainConfig};
use crate::window::WindowError;

pub use dataset::{
    build_dataset_dir, dump_pngs, encode_dir, featurize_dir, Dataset, SampleRow, DATASET_FILES, DATASET_KIND,
};
pub use fit::{
    checkpoint_path, evaluate_checkpoints, export_embeddings, load_model, model_list, predict_checkpoint, train_models,
    write_report, LoadedModel, PredictionRow, EVAL_KIND, TRAIN_KIND,
};
pub use raw::{ingest, load_day, synth, RawDay, RawDir, RAW_KIND};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("{0} has no manifest; run the producing step first")]
    Incomplete(PathBuf),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

/// How a failure should be reported to a caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Internal,
}

impl PipelineError {
    /// Short machine-readable name of the failure.
    pub fn name(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "InvalidConfig",
            PipelineError::Io { .. } => "IoError",
            PipelineError::BadFile { .. } => "BadFile",
            PipelineError::Incomplete(_) => "IncompleteInput",
            PipelineError::Invariant(_) => "InvariantViolation",
            PipelineError::MarketData(e) => match e {
                MarketDataError::MalformedRow { .. } => "MalformedRow",
                MarketDataError::NonMonotoneTimestamp { .. } => "NonMonotoneTimestamp",
                MarketDataError::CrossedBook { .. } => "CrossedBook",
                MarketDataError::NoSnapshotCoverage { .. } => "NoSnapshotCoverage",
                MarketDataError::InvalidConfig(_) => "InvalidConfig",
                MarketDataError::Io(_) => "IoError",
            },
            PipelineError::Encoder(EncoderError::InvalidParams(_)) => "InvalidConfig",
            PipelineError::Encoder(_) => "EncoderError",
            PipelineError::Feature(FeatureError::NonFiniteFeature(_)) => "NonFiniteFeature",
            PipelineError::Feature(_) => "FeatureError",
            PipelineError::Label(e) => match e {
                LabelError::DayTooShort { .. } => "DayTooShort",
                LabelError::Leakage { .. } => "Leakage",
                LabelError::MixedCatalogVersions { .. } => "MixedCatalogVersions",
                LabelError::TooFewSamples { .. } => "TooFewSamples",
                _ => "LabelError",
            },
            PipelineError::Model(e) => match e {
                ModelError::NonFiniteLoss { .. } => "NonFiniteLoss",
                ModelError::InvalidConfig(_) => "InvalidConfig",
                ModelError::Checkpoint(_) => "BadCheckpoint",
                ModelError::ShapeMismatch { .. } => "ShapeMismatch",
                _ => "ModelError",
            },
            PipelineError::Eval(e) => match e {
                EvalError::EmptyAfterExclusion => "EmptyAfterExclusion",
                EvalError::LengthMismatch { .. } => "LengthMismatch",
                EvalError::LineageMismatch { .. } => "LineageMismatch",
            },
            PipelineError::Tensor(e) => match e {
                TensorError::CrcMismatch { .. } => "CrcMismatch",
                TensorError::BadMagic => "BadMagic",
                _ => "TensorError",
            },
            PipelineError::Window(WindowError::DayTooShort { .. }) => "DayTooShort",
            PipelineError::Window(_) => "WindowError",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_) => ErrorClass::Usage,
            PipelineError::Encoder(EncoderError::InvalidParams(_)) => ErrorClass::Usage,
            PipelineError::MarketData(MarketDataError::InvalidConfig(_)) => ErrorClass::Usage,
            PipelineError::Model(ModelError::InvalidConfig(_)) => ErrorClass::Usage,
            PipelineError::Invariant(_) => ErrorClass::Internal,
            PipelineError::Model(ModelError::NonFiniteLoss { .. }) => ErrorClass::Internal,
            PipelineError::Label(LabelError::Leakage { .. }) => ErrorClass::Internal,
            _ => ErrorClass::Data,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.to_path_buf();
    move |source| PipelineError::Io { path, source }
}

/// Knobs of the synthetic generator exposed to configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub days: u32,
    pub duration_s: i64,
    pub start_ts_s: i64,
    pub base_price: f64,
    /// Per-second log-price volatility of a steady day.
    pub sigma: f64,
    /// When non-empty, days switch between these regimes.
    pub regimes: Vec<Regime>,
    pub mean_dwell_s: f64,
    pub flow_lead_s: i64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            days: 1,
            duration_s: 86_400,
            start_ts_s: 1_609_459_200,
            base_price: 29_000.0,
            sigma: 1e-4,
            regimes: Vec::new(),
            mean_dwell_s: 600.0,
            flow_lead_s: 0,
        }
    }
}

impl SynthSettings {
    /// Three volatility levels with trade intensity and size rising with
    /// volatility; flow switches a minute ahead of volatility.
    pub fn regime_switching(days: u32, duration_s: i64) -> Self {
        let level = |sigma: f64, trade_rate: f64, mean_trade_size: f64, depth_scale: f64| Regime {
            duration_s: 1,
            sigma,
            trade_rate,
            mean_trade_size,
            depth_scale,
        };
        Self {
            days,
            duration_s,
            regimes: vec![level(2e-5, 0.5, 0.03, 1.5), level(6e-5, 2.0, 0.08, 1.0), level(1.8e-4, 6.0, 0.25, 0.5)],
            mean_dwell_s: 300.0,
            flow_lead_s: 60,
            ..Self::default()
        }
    }
}

/// Everything that determines pipeline outputs apart from the input and
/// output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub horizon_s: i64,
    pub encoding: EncodingParams,
    /// Write the image tensor; feature-only datasets skip it.
    pub images: bool,
    /// Feature catalog JSON; the built-in catalog when absent.
    pub catalog_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub synth: SynthSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon_s: 60,
            encoding: EncodingParams::default(),
            images: true,
            catalog_path: None,
            train: TrainConfig::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.encoding.validate()?;
        self.train.validate()?;
        if self.horizon_s < 2 {
            return Err(PipelineError::Config("horizon_s must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical JSON form; hashing it stamps every artifact.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn catalog(&self) -> Result<FeatureCatalog, PipelineError> {
        match &self.catalog_path {
            None => Ok(FeatureCatalog::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                Ok(FeatureCatalog::from_json(&text)?)
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Written last into every output directory; its presence marks the
/// directory complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to content hash.
    pub outputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            kind: kind.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Hashes the named files in `dir` into `outputs`.
    pub fn record_outputs(&mut self, dir: &Path, names: &[String]) -> Result<(), PipelineError> {
        for name in names {
            self.outputs.insert(name.clone(), sha256_file(&dir.join(name))?);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        write_json(&dir.join(MANIFEST), self)
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(PipelineError::Incomplete(dir.to_path_buf()));
        }
        read_json(&path)
    }

    /// Hash of the manifest file itself, used as an input reference.
    pub fn file_hash(dir: &Path) -> Result<String, PipelineError> {
        sha256_file(&dir.join(MANIFEST))
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Invariant(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::BadFile { path: path.to_path_buf(), reason: e.to_string() })
}

/// Outcome of preparing an output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prepared {
    /// The directory is empty and ready.
    Fresh,
    /// A complete output from the same config is already there.
    Complete,
}

/// Creates `dir`, or reports it complete when its manifest carries the same
/// kind, config hash and inputs. With `force`, prior contents are removed.
pub fn prepare_output(
    dir: &Path,
    kind: &str,
    config_hash: &str,
    inputs: &BTreeMap<String, String>,
    force: bool,
) -> Result<Prepared, PipelineError> {
    if dir.exists() {
        if !force {
            if let Ok(m) = Manifest::read(dir) {
                if m.kind == kind && m.config_hash == config_hash && &m.inputs == inputs {
                    return Ok(Prepared::Complete);
                }
            }
            let occupied = std::fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
            if occupied {
                return Err(PipelineError::Config(format!(
                    "{} is not empty and holds no matching {kind} output; pass --force to replace it",
                    dir.display()
                )));
            }
        } else {
            std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(Prepared::Fresh)
}
