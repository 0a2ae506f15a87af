//! Volatility predictors: naive guess, GARCH(1,1), MLP, Naive-CNN and CNN-Aggr.

mod checkpoint;
mod cnn;
mod garch;
mod mlp;
pub mod nn;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::TensorError;
use crate::labeler::RVLabel;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cnn::{Cnn, LATENT};
pub use garch::{conditional_variances, garch_fit, garch_forecast, horizon_forecast, GarchFit, GarchParams};
pub use mlp::Mlp;
pub use nn::{BatchStats, Dims, Grads, Param, ParamStore};
pub use train::{gradient_check, predict_all, train, EpochStats, GradCheck, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("loss became non-finite at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("expected input shape {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("return series has zero variance")]
    DegenerateSeries,
    #[error("return series has {len} points, at least {min} needed")]
    TooShort { len: usize, min: usize },
    #[error("return series contains non-finite values")]
    NonFiniteInput,
    #[error("invalid GARCH parameters {0:?}")]
    InvalidGarch(GarchParams),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Naive,
    Garch,
    Mlp,
    NaiveCnn,
    CnnAggr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Naive, ModelKind::Garch, ModelKind::Mlp, ModelKind::NaiveCnn, ModelKind::CnnAggr];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Naive => "naive",
            ModelKind::Garch => "garch",
            ModelKind::Mlp => "mlp",
            ModelKind::NaiveCnn => "naive-cnn",
            ModelKind::CnnAggr => "cnn-aggr",
        }
    }

    pub fn uses_images(self) -> bool {
        matches!(self, ModelKind::NaiveCnn | ModelKind::CnnAggr)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, ModelKind::Mlp | ModelKind::CnnAggr)
    }

    pub fn is_network(self) -> bool {
        self.uses_images() || self.uses_features()
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown model {s}"))
    }
}

/// The naive guess: last minute's realized volatility.
pub fn naive_predict(label: &RVLabel) -> f64 {
    label.naive_rv
}

/// In-memory training inputs. Images are `[n, c, h, w]` f32, features are
/// standardized `[n, feat_dim]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelData {
    pub image_dims: Option<Dims>,
    pub images: Vec<f32>,
    pub feat_dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

impl ModelData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_batch(&self, idx: &[usize]) -> Vec<f64> {
        let len = self.image_dims.map_or(0, |d| d.len());
        idx.iter().flat_map(|&i| self.images[i * len..(i + 1) * len].iter().map(|&v| v as f64)).collect()
    }

    pub fn feature_batch(&self, idx: &[usize]) -> Vec<f64> {
        let f = self.feat_dim;
        idx.iter().flat_map(|&i| self.features[i * f..(i + 1) * f].iter().copied()).collect()
    }

    pub fn label_batch(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Mean of the positive labels among `idx`, 1 when there are none.
    pub fn target_scale(&self, idx: &[usize]) -> f64 {
        let pos: Vec<f64> = idx.iter().map(|&i| self.labels[i]).filter(|&y| y > 0.0).collect();
        if pos.is_empty() {
            1.0
        } else {
            pos.iter().sum::<f64>() / pos.len() as f64
        }
    }
}

/// A trainable regressor with a softplus output.
pub trait Network: Sync {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Training-mode mean squared percentage error over `idx`; gradients are
    /// added into `grads`.
    fn loss_and_grad(&self, data: &ModelData, idx: &[usize], grads: &mut Grads) -> (f64, Vec<BatchStats>);
    /// Folds training batch statistics into running statistics.
    fn absorb_batch_stats(&mut self, _stats: &[BatchStats]) {}
    /// Evaluation-mode predictions.
    fn predict(&self, data: &ModelData, idx: &[usize]) -> Vec<f64>;
}

/// Mean squared percentage error over positive labels and its gradient
/// with respect to the predictions. Zero labels get zero weight.
pub fn mspe(preds: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = labels.iter().filter(|&&y| y > 0.0).count();
    if n == 0 {
        return (0.0, vec![0.0; preds.len()]);
    }
    let mut loss = 0.0;
    let grad = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y > 0.0 {
                let e = (p - y) / y;
                loss += e * e;
                2.0 * e / (y * n as f64)
            } else {
                0.0
            }
        })
        .collect();
    (loss / n as f64, grad)
}

/// `scale * softplus(z)` and its derivative with respect to `z`.
pub(crate) fn positive_output(z: &[f64], scale: f64) -> (Vec<f64>, Vec<f64>) {
    (z.iter().map(|&v| scale * nn::softplus(v)).collect(), z.iter().map(|&v| scale * nn::sigmoid(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_is_identity() {
        let l = RVLabel { window_start_s: 0, horizon_s: 60, rv: 0.5, naive_rv: 0.002 };
        assert_eq!(naive_predict(&l), 0.002);
    }

    #[test]
    fn mspe_excludes_zero_labels() {
        let (loss, g) = mspe(&[1.0, 3.0, 5.0], &[2.0, 2.0, 0.0]);
        assert!((loss - 0.25).abs() < 1e-15);
        assert_eq!(g[2], 0.0);
        assert!((g[0] + 0.25).abs() < 1e-15);
        assert_eq!(mspe(&[1.0], &[0.0]).0, 0.0);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
    }
}
