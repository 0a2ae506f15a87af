//! RMSPE scoring with per-day aggregation and report rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ModelKind;
use crate::window::WalkForward;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no pairs left after excluding zero targets")]
    EmptyAfterExclusion,
    #[error("{predictions} predictions for {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("model was trained on split {model}, dataset has {dataset}")]
    LineageMismatch { model: String, dataset: String },
}

/// `sqrt(mean(((p - y) / y)^2))` over pairs with `y != 0`.
pub fn rmspe(predictions: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    rmspe_counted(predictions, targets).map(|(v, _)| v)
}

/// [`rmspe`] plus the number of excluded zero targets.
pub fn rmspe_counted(predictions: &[f64], targets: &[f64]) -> Result<(f64, usize), EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), targets: targets.len() });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, y) in predictions.iter().zip(targets) {
        if *y != 0.0 {
            sum += ((p - y) / y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyAfterExclusion);
    }
    Ok(((sum / n as f64).sqrt(), targets.len() - n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayScore {
    pub day_id: String,
    pub samples: usize,
    pub excluded: usize,
    /// `None` when every target of the day is zero.
    pub rmspe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub rmspe_mean: f64,
    /// Population standard deviation across days.
    pub rmspe_std: f64,
    pub excluded_zero_label_count: usize,
    pub days: Vec<DayScore>,
}

/// Scores each day separately (days in order of first appearance), then
/// takes mean and standard deviation across the scorable days.
pub fn score_by_day(predictions: &[f64], targets: &[f64], day_ids: &[String]) -> Result<SplitScore, EvalError> {
    if predictions.len() != targets.len() || day_ids.len() != targets.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), targets: targets.len() });
    }
    let mut order: Vec<&str> = Vec::new();
    for d in day_ids {
        if order.last() != Some(&d.as_str()) && !order.contains(&d.as_str()) {
            order.push(d);
        }
    }
    let mut days = Vec::with_capacity(order.len());
    for day in order {
        let (p, y): (Vec<f64>, Vec<f64>) = day_ids
            .iter()
            .zip(predictions.iter().zip(targets))
            .filter(|(d, _)| *d == day)
            .map(|(_, (p, y))| (*p, *y))
            .unzip();
        let excluded = y.iter().filter(|&&v| v == 0.0).count();
        let rmspe = match rmspe(&p, &y) {
            Ok(v) => Some(v),
            Err(EvalError::EmptyAfterExclusion) => None,
            Err(e) => return Err(e),
        };
        days.push(DayScore { day_id: day.to_string(), samples: y.len(), excluded, rmspe });
    }
    let scores: Vec<f64> = days.iter().filter_map(|d| d.rmspe).collect();
    if scores.is_empty() {
        return Err(EvalError::EmptyAfterExclusion);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();
    Ok(SplitScore {
        rmspe_mean: mean,
        rmspe_std: std,
        excluded_zero_label_count: days.iter().map(|d| d.excluded).sum(),
        days,
    })
}

/// Fails unless the model was trained on the dataset's training split.
pub fn check_lineage(model_split_hash: &str, dataset_split_hash: &str) -> Result<(), EvalError> {
    if model_split_hash == dataset_split_hash {
        Ok(())
    } else {
        Err(EvalError::LineageMismatch { model: model_split_hash.to_string(), dataset: dataset_split_hash.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: ModelKind,
    pub validation: SplitScore,
    pub test: SplitScore,
}

/// Walk-forward sample count of a full day next to the reference count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardNote {
    pub day_length_s: i64,
    pub window_s: i64,
    pub stride_s: i64,
    pub horizon_s: i64,
    pub samples_per_day: usize,
    pub reference_count: usize,
    pub note: String,
}

pub const REFERENCE_DAY_COUNT: usize = 8616;

impl WalkForwardNote {
    pub fn full_day(plan: &WalkForward) -> Self {
        const DAY: i64 = 86_400;
        let reference = WalkForward { window_s: 240, stride_s: 10, horizon_s: 60 };
        let samples = plan.count(DAY).unwrap_or(0);
        let default_samples = reference.count(DAY).unwrap_or(0);
        let diff = REFERENCE_DAY_COUNT as i64 - default_samples as i64;
        let formula = |p: &WalkForward, n: usize| {
            format!("floor(({DAY} - {} - {}) / {}) + 1 = {n}", p.window_s, p.horizon_s, p.stride_s)
        };
        let mut note = String::new();
        if *plan != reference {
            note += &format!("{} windows per day with this plan; with the default plan ", formula(plan, samples));
        }
        note += &format!(
            "{} windows per day; the reference count {REFERENCE_DAY_COUNT} differs by {diff}, \
             which would need {} s less reserved at the end of the day",
            formula(&reference, default_samples),
            diff * reference.stride_s,
        );
        Self {
            day_length_s: DAY,
            window_s: plan.window_s,
            stride_s: plan.stride_s,
            horizon_s: plan.horizon_s,
            samples_per_day: samples,
            reference_count: REFERENCE_DAY_COUNT,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub walk_forward: WalkForwardNote,
    pub models: Vec<ModelScore>,
}

impl EvalReport {
    pub fn score(&self, model: ModelKind) -> Option<&ModelScore> {
        self.models.iter().find(|m| m.model == model)
    }

    /// Aligned columns: model, validation mean ± std, test mean ± std.
    pub fn text_table(&self) -> String {
        let cell = |s: &SplitScore| format!("{:.3} ± {:.3}", s.rmspe_mean, s.rmspe_std);
        let rows: Vec<[String; 3]> =
            self.models.iter().map(|m| [m.model.to_string(), cell(&m.validation), cell(&m.test)]).collect();
        let header = ["model".to_string(), "validation RMSPE".to_string(), "test RMSPE".to_string()];
        let width = |i: usize| rows.iter().chain([&header]).map(|r| r[i].chars().count()).max().unwrap_or(0);
        let widths = [width(0), width(1), width(2)];
        let line = |r: &[String; 3]| {
            let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
            format!("{}  {}  {}", pad(&r[0], widths[0]), pad(&r[1], widths[1]), r[2]).trim_end().to_string()
        };
        let mut out = line(&header) + "\n";
        out += &format!("{}\n", "-".repeat(widths[0] + widths[1] + widths[2] + 4));
        for r in &rows {
            out += &line(r);
            out.push('\n');
        }
        out += &format!("\n{}\n", self.walk_forward.note);
        out
    }
}
