//! Realized-volatility labels and leakage-safe walk-forward datasets.

mod rv;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode_window, EncoderError, EncodingParams, FlowImage};
use crate::features::{compute_features, FeatureCatalog, FeatureError, FeatureVector};
use crate::marketdata::{Day, SecondRecord};
use crate::window::{walk_windows, WindowError};

pub use rv::{log_returns, realized_volatility, realized_volatility_of};

/// Seconds at the end of a window used by the naive predictor.
pub const NAIVE_S: usize = 60;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("non-positive price {price} at second {ts_s}")]
    NonPositivePrice { ts_s: i64, price: f64 },
    #[error("day covers {len_s} s but one window plus horizon needs {needed_s} s")]
    DayTooShort { len_s: i64, needed_s: i64 },
    #[error("{n} samples cannot be split 3:1:1")]
    TooFewSamples { n: usize },
    #[error("samples are not in time order at index {index}")]
    NotTimeOrdered { index: usize },
    #[error("feature catalog {got} mixed into a dataset built with {expected}")]
    MixedCatalogVersions { expected: String, got: String },
    #[error("label of window {window_start_s} reads second {ts_s}")]
    Leakage { window_start_s: i64, ts_s: i64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("labels file: {0}")]
    Csv(#[from] csv::Error),
}

impl From<WindowError> for LabelError {
    fn from(e: WindowError) -> Self {
        match e {
            WindowError::DayTooShort { len_s, needed_s } => LabelError::DayTooShort { len_s, needed_s },
            other => LabelError::Encoder(EncoderError::Window(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RVLabel {
    pub window_start_s: i64,
    pub horizon_s: i64,
    /// Realized volatility of the `horizon_s` seconds after the window.
    pub rv: f64,
    /// Realized volatility of the window's last 60 seconds.
    pub naive_rv: f64,
}

/// Seconds whose vwap enters the label of the window starting at
/// `window_start_s`: `(window end, window end + horizon_s]`.
pub fn label_sources(
    day: &Day,
    window_start_s: i64,
    window_s: i64,
    horizon_s: i64,
) -> Result<&[SecondRecord], LabelError> {
    let from = window_start_s - day.start_s + window_s;
    let to = from + horizon_s;
    if from < window_s || to > day.len_s() {
        return Err(LabelError::DayTooShort { len_s: day.len_s(), needed_s: to.max(window_s + horizon_s) });
    }
    Ok(&day.records[from as usize..to as usize])
}

fn vwap_points(records: &[SecondRecord]) -> Vec<(i64, f64)> {
    records.iter().map(|r| (r.ts_s, r.vwap)).collect()
}

/// Label for the window of `window_s` seconds starting at `window_start_s`.
pub fn label_window(day: &Day, window_start_s: i64, window_s: i64, horizon_s: i64) -> Result<RVLabel, LabelError> {
    let future = label_sources(day, window_start_s, window_s, horizon_s)?;
    let start = (window_start_s - day.start_s) as usize;
    let end = start + window_s as usize;
    let tail = &day.records[end.saturating_sub(NAIVE_S).max(start)..end];
    Ok(RVLabel {
        window_start_s,
        horizon_s,
        rv: realized_volatility(&vwap_points(future))?,
        naive_rv: realized_volatility(&vwap_points(tail))?,
    })
}

/// One walk-forward window with everything derived from it.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub image: Option<FlowImage>,
    pub features: FeatureVector,
    pub label: RVLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub parallel: bool,
    pub encode_images: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { parallel: true, encode_images: true }
    }
}

/// Streams every walk-forward window of `day` to `sink` in time order and
/// returns the number of samples.
pub fn build_dataset<S, E>(
    day: &Day,
    params: &EncodingParams,
    catalog: &FeatureCatalog,
    horizon_s: i64,
    opts: BuildOptions,
    sink: S,
) -> Result<usize, E>
where
    S: FnMut(WindowSample) -> Result<(), E>,
    E: Send + From<LabelError> + From<WindowError>,
{
    params.validate().map_err(LabelError::from)?;
    catalog.validate().map_err(LabelError::from)?;
    let window_s = params.window_s() as i64;
    walk_windows(
        day,
        &params.walk_forward(horizon_s),
        opts.parallel,
        |w| {
            let sample = || -> Result<WindowSample, LabelError> {
                let image = if opts.encode_images { Some(encode_window(w, params)?) } else { None };
                Ok(WindowSample {
                    image,
                    features: compute_features(w, catalog)?,
                    label: label_window(day, w.start_s, window_s, horizon_s)?,
                })
            };
            sample().map_err(E::from)
        },
        sink,
    )
}

/// Checks that every label reads only seconds strictly after its window and
/// within the horizon, and that its value is reproduced from those seconds.
pub fn audit_labels(day: &Day, labels: &[RVLabel], window_s: i64) -> Result<(), LabelError> {
    for l in labels {
        let end = l.window_start_s + window_s - 1;
        let sources = label_sources(day, l.window_start_s, window_s, l.horizon_s)?;
        if let Some(r) = sources.iter().find(|r| r.ts_s <= end || r.ts_s > end + l.horizon_s) {
            return Err(LabelError::Leakage { window_start_s: l.window_start_s, ts_s: r.ts_s });
        }
        let rv = realized_volatility(&vwap_points(sources))?;
        if rv != l.rv {
            let ts_s = sources.first().map_or(end, |r| r.ts_s);
            return Err(LabelError::Leakage { window_start_s: l.window_start_s, ts_s });
        }
    }
    Ok(())
}

/// Rejects feature vectors whose catalog version differs from the first.
pub fn check_catalog_versions<'a>(vectors: impl IntoIterator<Item = &'a FeatureVector>) -> Result<(), LabelError> {
    let mut expected: Option<&str> = None;
    for v in vectors {
        match expected {
            None => expected = Some(&v.catalog_version),
            Some(e) if e != v.catalog_version => {
                return Err(LabelError::MixedCatalogVersions {
                    expected: e.to_string(),
                    got: v.catalog_version.clone(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// A stored sample: `index` addresses its row in the image tensor and the
/// feature and label tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub day_id: String,
    pub label: RVLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub ratio: (usize, usize, usize),
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Train gets the first `floor(3N/5)` samples, validation the next
/// `floor(N/5)`, test the rest.
pub fn split_time_ordered(samples: &[Sample]) -> Result<DatasetSplit, LabelError> {
    let n = samples.len();
    if n < 5 {
        return Err(LabelError::TooFewSamples { n });
    }
    if let Some(i) = samples.windows(2).position(|w| w[1].label.window_start_s <= w[0].label.window_start_s) {
        return Err(LabelError::NotTimeOrdered { index: i + 1 });
    }
    let n_train = 3 * n / 5;
    let n_val = n / 5;
    let idx = |r: std::ops::Range<usize>| r.map(|i| samples[i].index).collect();
    Ok(DatasetSplit {
        train: idx(0..n_train),
        validation: idx(n_train..n_train + n_val),
        test: idx(n_train + n_val..n),
        ratio: (3, 1, 1),
    })
}

/// Per-column affine standardization fitted on the training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero spread get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for row in rows {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            }
            for (j, &x) in row.iter().enumerate() {
                sum[j] += x;
                sq[j] += x * x;
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }
}

pub fn write_labels_csv(out: impl Write, labels: &[RVLabel]) -> Result<(), LabelError> {
    let mut w = csv::Writer::from_writer(out);
    for l in labels {
        w.serialize(l)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_labels_csv(input: impl Read) -> Result<Vec<RVLabel>, LabelError> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(LabelError::from)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::marketdata::{gen_synthetic_flow, Level, LobSnapshot, SynthConfig, DEPTH};

    fn synth_day(seconds: i64, sigma: f64, seed: u64) -> Day {
        let (trades, snaps) = gen_synthetic_flow(&SynthConfig::steady(seconds, sigma), seed).unwrap();
        Day::from_streams(None, &trades, snaps).unwrap()
    }

    fn small_params() -> EncodingParams {
        EncodingParams { n: 30, m: 20, t_unit_s: 2, v_unit: 5.0, epsilon_s: 10, ..Default::default() }
    }

    fn fake_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                index: i,
                day_id: "d".into(),
                label: RVLabel { window_start_s: 10 * i as i64, horizon_s: 60, rv: 0.0, naive_rv: 0.0 },
            })
            .collect()
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_time_ordered(&fake_samples(5)).unwrap().sizes(), (3, 1, 1));
        assert_eq!(split_time_ordered(&fake_samples(8611)).unwrap().sizes(), (5166, 1722, 1723));
        assert!(matches!(split_time_ordered(&fake_samples(4)), Err(LabelError::TooFewSamples { n: 4 })));
        let mut s = fake_samples(6);
        s.swap(2, 3);
        assert!(matches!(split_time_ordered(&s), Err(LabelError::NotTimeOrdered { index: 3 })));
    }

    proptest! {
        #[test]
        fn split_is_ordered_partition(n in 5usize..3000) {
            let s = split_time_ordered(&fake_samples(n)).unwrap();
            let all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(!s.validation.is_empty() && !s.test.is_empty());
        }

        #[test]
        fn rv_scale_free(prices in prop::collection::vec(1.0f64..1000.0, 2..50), c in 0.01f64..100.0) {
            let a = realized_volatility_of(&prices);
            let scaled: Vec<f64> = prices.iter().map(|p| p * c).collect();
            let b = realized_volatility_of(&scaled);
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-3));
        }

        #[test]
        fn rv_variance_additive(prices in prop::collection::vec(1.0f64..1000.0, 3..50), cut in 1usize..48) {
            let b = cut.min(prices.len() - 2);
            let left = realized_volatility_of(&prices[..=b]);
            let right = realized_volatility_of(&prices[b..]);
            let whole = realized_volatility_of(&prices);
            prop_assert!((left.powi(2) + right.powi(2) - whole.powi(2)).abs() <= 1e-9 * whole.powi(2).max(1e-12));
        }
    }

    #[test]
    fn dataset_count_and_labels() {
        let day = synth_day(600, 3e-4, 4);
        let params = small_params();
        let mut got = Vec::new();
        let n = build_dataset(
            &day,
            &params,
            &FeatureCatalog::default(),
            60,
            BuildOptions::default(),
            |s| -> Result<(), LabelError> {
                got.push(s);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(n, params.walk_forward(60).count(600).unwrap());
        assert_eq!(n, got.len());
        for (k, s) in got.iter().enumerate() {
            let start = day.start_s + 10 * k as i64;
            assert_eq!(s.label.window_start_s, start);
            assert_eq!(s.features.window_start_s, start);
            assert_eq!(s.image.as_ref().unwrap().window_start_s, start);
            let future: Vec<(i64, f64)> = day
                .records
                .iter()
                .filter(|r| r.ts_s > start + 59 && r.ts_s <= start + 119)
                .map(|r| (r.ts_s, r.vwap))
                .collect();
            assert_eq!(future.len(), 60);
            assert_eq!(s.label.rv, realized_volatility(&future).unwrap());
        }
        let labels: Vec<RVLabel> = got.iter().map(|s| s.label).collect();
        audit_labels(&day, &labels, 60).unwrap();
    }

    #[test]
    fn constant_day_has_zero_labels() {
        let snaps: Vec<LobSnapshot> = (0..200)
            .map(|s| {
                let bids = (0..DEPTH).map(|i| Level::new(99.5 - i as f64, 1.0)).collect();
                let asks = (0..DEPTH).map(|i| Level::new(100.5 + i as f64, 1.0)).collect();
                LobSnapshot::new(s * 1000, bids, asks).unwrap()
            })
            .collect();
        let day = Day::from_streams(None, &[], snaps).unwrap();
        let opts = BuildOptions { parallel: false, encode_images: false };
        build_dataset(&day, &small_params(), &FeatureCatalog::default(), 60, opts, |s| -> Result<(), LabelError> {
            assert_eq!((s.label.rv, s.label.naive_rv), (0.0, 0.0));
            assert!(s.image.is_none());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn labels_ignore_mutations_inside_window() {
        let day = synth_day(400, 3e-4, 8);
        let base = label_window(&day, day.start_s + 20, 60, 60).unwrap();
        let mut mutated = day.clone();
        for r in &mut mutated.records[..80] {
            r.vwap *= 1.37;
        }
        assert_eq!(label_window(&mutated, day.start_s + 20, 60, 60).unwrap().rv, base.rv);
        mutated.records[80].vwap *= 1.01;
        assert_ne!(label_window(&mutated, day.start_s + 20, 60, 60).unwrap().rv, base.rv);
    }

    #[test]
    fn naive_rv_is_rv_of_the_final_minute() {
        let day = synth_day(400, 3e-4, 3);
        let l = label_window(&day, day.start_s + 100, 120, 60).unwrap();
        let pts: Vec<(i64, f64)> = day.records[160..220].iter().map(|r| (r.ts_s, r.vwap)).collect();
        assert_eq!(l.naive_rv, realized_volatility(&pts).unwrap());
        // The window ending 60 s earlier is labeled from exactly those seconds.
        let shifted = label_window(&day, day.start_s + 40, 120, 60).unwrap();
        assert_eq!(shifted.rv, l.naive_rv);
    }

    #[test]
    fn too_short_day() {
        let day = synth_day(100, 1e-4, 1);
        let err = build_dataset(&day, &small_params(), &FeatureCatalog::default(), 60, BuildOptions::default(), |_| {
            Ok::<(), LabelError>(())
        });
        assert!(matches!(err, Err(LabelError::DayTooShort { len_s: 100, needed_s: 120 })));
    }

    #[test]
    fn mixed_catalogs_rejected() {
        let v = |ver: &str| FeatureVector { values: vec![], catalog_version: ver.into(), window_start_s: 0 };
        assert!(check_catalog_versions(&[v("a"), v("a")]).is_ok());
        assert!(matches!(check_catalog_versions(&[v("a"), v("b")]), Err(LabelError::MixedCatalogVersions { .. })));
    }

    #[test]
    fn standardizer_uses_given_rows() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 6.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn labels_csv_round_trip() {
        let labels = vec![RVLabel { window_start_s: 7, horizon_s: 60, rv: 0.0123, naive_rv: 1e-5 }];
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &labels).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("window_start_s,horizon_s,rv,naive_rv\n"));
        assert_eq!(read_labels_csv(&buf[..]).unwrap(), labels);
    }
}
