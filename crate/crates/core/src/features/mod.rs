//! Tabular window features for the aggregation branch.

mod catalog;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::clip_threshold;
use crate::labeler::realized_volatility_of;
use crate::marketdata::{SecondRecord, Side, DEPTH};
use crate::window::OrderFlowWindow;

pub use catalog::{
    raw_name, CatalogEntry, Extractor, FeatureCatalog, PriceBand, Stat, DEFAULT_CATALOG_VERSION, RAW_WIDTH,
};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature {0} is not finite")]
    NonFiniteFeature(String),
    #[error("invalid feature catalog: {0}")]
    InvalidCatalog(String),
    #[error("feature file: {0}")]
    Csv(#[from] csv::Error),
    #[error("feature file row {row}: {reason}")]
    BadRow { row: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub catalog_version: String,
    pub window_start_s: i64,
}

/// Ask prices, ask sizes, bid prices, bid sizes (20 levels each), then vwap,
/// order count, total size, buy size and sell size.
pub fn raw_second_vector(rec: &SecondRecord) -> [f64; RAW_WIDTH] {
    let mut v = [0.0; RAW_WIDTH];
    for (i, level) in rec.snapshot.asks.iter().take(DEPTH).enumerate() {
        v[i] = level.price;
        v[DEPTH + i] = level.size;
    }
    for (i, level) in rec.snapshot.bids.iter().take(DEPTH).enumerate() {
        v[2 * DEPTH + i] = level.price;
        v[3 * DEPTH + i] = level.size;
    }
    let tail = [rec.vwap, rec.order_count as f64, rec.total_size, rec.buy_size, rec.sell_size];
    v[4 * DEPTH..].copy_from_slice(&tail);
    v
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std_pop(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// OLS slope of `xs` against `0..len`.
fn slope(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let tm = (n as f64 - 1.0) / 2.0;
    let ym = mean(xs);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in xs.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (y - ym);
        sxx += dt * dt;
    }
    sxy / sxx
}

fn stat(xs: &[f64], s: Stat) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    match s {
        Stat::Mean => mean(xs),
        Stat::Std => std_pop(xs),
        Stat::Last => xs[xs.len() - 1],
        Stat::Slope => slope(xs),
        Stat::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
        Stat::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Population standardized moment of order `k`, zero for a flat series.
fn standardized_moment(xs: &[f64], k: i32) -> f64 {
    let sd = std_pop(xs);
    if sd <= 0.0 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| ((x - m) / sd).powi(k)).sum::<f64>() / xs.len() as f64
}

fn log_diff(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
}

fn ratio_or(num: f64, den: f64, fallback: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        fallback
    }
}

/// Per-second series shared by the extractors of one window.
struct Series {
    raw: Vec<[f64; RAW_WIDTH]>,
    vwap: Vec<f64>,
    spread: Vec<f64>,
    mid_ret: Vec<f64>,
    vwap_ret: Vec<f64>,
    buy_ratio: Vec<f64>,
    vwap_mid: Vec<f64>,
    depth_bid: Vec<f64>,
    depth_ask: Vec<f64>,
    since_trade: Vec<f64>,
    book_levels: Vec<f64>,
    trade_sizes: Vec<f64>,
}

impl Series {
    fn new(window: &OrderFlowWindow<'_>, band: PriceBand) -> Self {
        let recs = window.records;
        let mids: Vec<f64> = recs.iter().map(|r| r.mid()).collect();
        let vwap: Vec<f64> = recs.iter().map(|r| r.vwap).collect();
        let lo = window.first_mid() - band.rows as f64 / 2.0 * band.v_unit;
        let hi = lo + band.rows as f64 * band.v_unit;
        let mut since = 0.0;
        let mut since_trade = Vec::with_capacity(recs.len());
        for r in recs {
            since = if r.has_trades() { 0.0 } else { since + 1.0 };
            since_trade.push(since);
        }
        Self {
            raw: recs.iter().map(raw_second_vector).collect(),
            spread: recs.iter().map(|r| r.snapshot.best_ask() - r.snapshot.best_bid()).collect(),
            mid_ret: log_diff(&mids),
            vwap_ret: log_diff(&vwap),
            buy_ratio: recs.iter().map(|r| ratio_or(r.buy_size, r.buy_size + r.sell_size, 0.5)).collect(),
            vwap_mid: recs.iter().zip(&mids).map(|(r, m)| r.vwap - m).collect(),
            depth_bid: recs.iter().map(|r| r.snapshot.bids.iter().map(|l| l.size).sum()).collect(),
            depth_ask: recs.iter().map(|r| r.snapshot.asks.iter().map(|l| l.size).sum()).collect(),
            since_trade,
            book_levels: window.books.iter().map(|b| b.depth_in_range(lo, hi).len() as f64).collect(),
            trade_sizes: recs.iter().flat_map(|r| r.trades.iter().map(|t| t.size)).collect(),
            vwap,
        }
    }

    fn raw_column(&self, index: usize) -> Vec<f64> {
        self.raw.iter().map(|r| r[index]).collect()
    }

    fn segment(&self, segment: usize, segments: usize) -> std::ops::Range<usize> {
        let n = self.vwap.len();
        (segment * n / segments)..((segment + 1) * n / segments)
    }

    fn imbalance(&self, depth: usize) -> Vec<f64> {
        self.raw
            .iter()
            .map(|r| {
                let ask: f64 = r[DEPTH..DEPTH + depth].iter().sum();
                let bid: f64 = r[3 * DEPTH..3 * DEPTH + depth].iter().sum();
                ratio_or(bid - ask, bid + ask, 0.0)
            })
            .collect()
    }

    fn eval(&self, ex: &Extractor) -> f64 {
        let col = |i: usize| self.raw_column(i);
        let sum = |i: usize| self.raw.iter().map(|r| r[i]).sum::<f64>();
        match *ex {
            Extractor::Raw { index, stat: s } => stat(&col(index), s),
            Extractor::Spread { stat: s } => stat(&self.spread, s),
            Extractor::MidReturn { stat: s } => stat(&self.mid_ret, s),
            Extractor::RealizedVol { last_s } => {
                realized_volatility_of(&self.vwap[self.vwap.len().saturating_sub(last_s)..])
            }
            Extractor::Imbalance { depth, stat: s } => stat(&self.imbalance(depth), s),
            Extractor::BuySellRatio { stat: s } => stat(&self.buy_ratio, s),
            Extractor::TradeCountTrend { segments } => {
                let counts = col(4 * DEPTH + 1);
                let per: Vec<f64> = (0..segments).map(|k| counts[self.segment(k, segments)].iter().sum()).collect();
                slope(&per)
            }
            Extractor::VwapMidDeviation { stat: s } => stat(&self.vwap_mid, s),
            Extractor::SegmentRealizedVol { segment, segments } => {
                realized_volatility_of(&self.vwap[self.segment(segment, segments)])
            }
            Extractor::QuotedDepth { side: Side::Bid, stat: s } => stat(&self.depth_bid, s),
            Extractor::QuotedDepth { side: Side::Ask, stat: s } => stat(&self.depth_ask, s),
            Extractor::SignedVolume => sum(4 * DEPTH + 3) - sum(4 * DEPTH + 4),
            Extractor::MaxTradeSize => self.trade_sizes.iter().copied().fold(0.0, f64::max),
            Extractor::LargeTradeCount { q } => match clip_threshold(&self.trade_sizes, q) {
                Some(t) => self.trade_sizes.iter().filter(|&&s| s > t).count() as f64,
                None => 0.0,
            },
            Extractor::TimeSinceTrade { stat: s } => stat(&self.since_trade, s),
            Extractor::BookLevelCount { stat: s } => stat(&self.book_levels, s),
            Extractor::HighLowRange => stat(&self.vwap, Stat::Max) - stat(&self.vwap, Stat::Min),
            Extractor::CloseOpenReturn => (self.vwap[self.vwap.len() - 1] / self.vwap[0]).ln(),
            Extractor::ReturnKurtosis => {
                if std_pop(&self.vwap_ret) > 0.0 {
                    standardized_moment(&self.vwap_ret, 4) - 3.0
                } else {
                    0.0
                }
            }
            Extractor::ReturnSkewness => standardized_moment(&self.vwap_ret, 3),
            Extractor::TradeCount => sum(4 * DEPTH + 1),
            Extractor::TradedVolume => sum(4 * DEPTH + 2),
        }
    }
}

/// Evaluates every catalog entry on `window`. Seconds before the first trade
/// of the window count time-since-trade from the window start.
pub fn compute_features(window: &OrderFlowWindow<'_>, catalog: &FeatureCatalog) -> Result<FeatureVector, FeatureError> {
    let series = Series::new(window, catalog.band);
    let mut values = Vec::with_capacity(catalog.len());
    for entry in &catalog.entries {
        let v = series.eval(&entry.extractor);
        if !v.is_finite() {
            return Err(FeatureError::NonFiniteFeature(entry.id.clone()));
        }
        values.push(v);
    }
    Ok(FeatureVector { values, catalog_version: catalog.version.clone(), window_start_s: window.start_s })
}

/// Sidecar describing the columns of a feature CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub catalog_version: String,
    pub feature_ids: Vec<String>,
    pub catalog: FeatureCatalog,
}

impl FeatureManifest {
    pub fn for_catalog(catalog: &FeatureCatalog) -> Self {
        Self { catalog_version: catalog.version.clone(), feature_ids: catalog.ids(), catalog: catalog.clone() }
    }
}

/// CSV with header `window_start_s,f_000,...`.
pub struct FeatureCsvWriter<W: Write> {
    out: csv::Writer<W>,
    width: usize,
    version: String,
}

impl<W: Write> FeatureCsvWriter<W> {
    pub fn new(out: W, catalog: &FeatureCatalog) -> Result<Self, FeatureError> {
        let mut out = csv::Writer::from_writer(out);
        let mut header = vec!["window_start_s".to_string()];
        header.extend((0..catalog.len()).map(|i| format!("f_{i:03}")));
        out.write_record(&header)?;
        Ok(Self { out, width: catalog.len(), version: catalog.version.clone() })
    }

    pub fn write(&mut self, v: &FeatureVector) -> Result<(), FeatureError> {
        if v.values.len() != self.width || v.catalog_version != self.version {
            return Err(FeatureError::InvalidCatalog(format!(
                "vector of {} values from catalog {} does not match {} x {}",
                v.values.len(),
                v.catalog_version,
                self.version,
                self.width
            )));
        }
        let mut row = Vec::with_capacity(self.width + 1);
        row.push(v.window_start_s.to_string());
        row.extend(v.values.iter().map(|x| x.to_string()));
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, FeatureError> {
        self.out.flush().map_err(csv::Error::from)?;
        self.out.into_inner().map_err(|e| FeatureError::Csv(csv::Error::from(e.into_error())))
    }
}

/// Reads a feature CSV back into vectors tagged with `catalog_version`.
pub fn read_features_csv(input: impl Read, catalog_version: &str) -> Result<Vec<FeatureVector>, FeatureError> {
    let mut rdr = csv::Reader::from_reader(input);
    let width = rdr.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| FeatureError::BadRow { row: row + 1, reason };
        if rec.len() != width + 1 {
            return Err(bad(format!("expected {} fields, got {}", width + 1, rec.len())));
        }
        let window_start_s = rec[0].parse().map_err(|e| bad(format!("window_start_s: {e}")))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{f}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(FeatureVector { values, catalog_version: catalog_version.to_string(), window_start_s });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::bookstate::{BookTimeline, BookView};
    use crate::labeler::realized_volatility;
    use crate::marketdata::{gen_synthetic_flow, Day, Level, LobSnapshot, SynthConfig};

    fn head_window(day: &Day, len: usize) -> OrderFlowWindow<'_> {
        let views: Vec<Arc<BookView>> = BookTimeline::new(day).take(len).collect();
        OrderFlowWindow::new(&day.records[..len], views).unwrap()
    }

    fn synth_day(seconds: i64, sigma: f64, seed: u64) -> Day {
        let cfg = SynthConfig::steady(seconds, sigma);
        let (trades, snaps) = gen_synthetic_flow(&cfg, seed).unwrap();
        Day::from_streams(None, &trades, snaps).unwrap()
    }

    fn flat_book(ts_ms: i64, shift: f64) -> LobSnapshot {
        let bids = (0..DEPTH).map(|i| Level::new(100.0 + shift - 0.5 - i as f64, 1.0 + i as f64)).collect();
        let asks = (0..DEPTH).map(|i| Level::new(100.0 + shift + 0.5 + i as f64, 2.0)).collect();
        LobSnapshot::new(ts_ms, bids, asks).unwrap()
    }

    fn id_index(catalog: &FeatureCatalog, id: &str) -> usize {
        catalog.entries.iter().position(|e| e.id == id).unwrap()
    }

    #[test]
    fn raw_vector_layout() {
        let snaps: Vec<LobSnapshot> = (0..3).map(|s| flat_book(s * 1000, 0.0)).collect();
        let day = Day::from_streams(None, &[], snaps).unwrap();
        let v = raw_second_vector(&day.records[1]);
        assert_eq!(v.len(), 85);
        assert!(v[20..40].iter().all(|&s| s == 2.0));
        assert_eq!(v[0], 100.5);
        assert_eq!(v[40], 99.5);
        assert_eq!(&v[81..], &[0.0; 4]);
        assert_eq!(v[80], 100.0);
    }

    #[test]
    fn default_catalog_is_393_unique() {
        let c = FeatureCatalog::default();
        assert_eq!(c.len(), 393);
        c.validate().unwrap();
        assert_eq!(c.len() - 4 * RAW_WIDTH, 53);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(FeatureCatalog::from_json(&json).unwrap(), c);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut c = FeatureCatalog::default();
        c.entries[1].id = c.entries[0].id.clone();
        assert!(matches!(c.validate(), Err(FeatureError::InvalidCatalog(_))));
    }

    #[test]
    fn static_window_has_zero_dynamics() {
        let snaps: Vec<LobSnapshot> = (0..240).map(|s| flat_book(s * 1000, 0.0)).collect();
        let day = Day::from_streams(None, &[], snaps).unwrap();
        let c = FeatureCatalog::default();
        let f = compute_features(&head_window(&day, 240), &c).unwrap();
        assert_eq!(f.values.len(), 393);
        for id in [
            "mid_ret_mean",
            "mid_ret_std",
            "rv_last_60",
            "rv_last_240",
            "rv_quarter_1",
            "close_open_ret",
            "ret_kurtosis",
            "ret_skewness",
            "high_low_range",
            "trade_count",
            "signed_volume",
            "vwap_slope",
        ]
        .iter()
        .filter(|id| c.entries.iter().any(|e| e.id == **id))
        {
            assert_eq!(f.values[id_index(&c, id)], 0.0, "{id}");
        }
        // Bid sizes 1 vs ask size 2 at the top level.
        assert!((f.values[id_index(&c, "imbalance_1_mean")] - (-1.0 / 3.0)).abs() < 1e-15);
        let bid_top5 = 1.0 + 2.0 + 3.0 + 4.0 + 5.0;
        let expected = (bid_top5 - 10.0) / (bid_top5 + 10.0);
        assert!((f.values[id_index(&c, "imbalance_5_last")] - expected).abs() < 1e-15);
        assert_eq!(f.values[id_index(&c, "spread_mean")], 1.0);
        assert_eq!(f.values[id_index(&c, "since_trade_max")], 240.0);
        assert_eq!(f.values[id_index(&c, "buy_ratio_mean")], 0.5);
    }

    #[test]
    fn rv_last_60_matches_labeler() {
        let day = synth_day(300, 3e-4, 5);
        let c = FeatureCatalog::default();
        let w = head_window(&day, 240);
        let f = compute_features(&w, &c).unwrap();
        let tail: Vec<(i64, f64)> = w.records[180..].iter().map(|r| (r.ts_s, r.vwap)).collect();
        let oracle = realized_volatility(&tail).unwrap();
        assert!(oracle > 0.0);
        assert_eq!(f.values[id_index(&c, "rv_last_60")], oracle);
    }

    #[test]
    fn shuffling_changes_slopes_not_means() {
        let day = synth_day(300, 3e-4, 9);
        let c = FeatureCatalog::default();
        let w = head_window(&day, 240);
        let base = compute_features(&w, &c).unwrap();

        let mut recs: Vec<SecondRecord> = w.records.to_vec();
        recs.reverse();
        for (i, r) in recs.iter_mut().enumerate() {
            r.ts_s = w.start_s + i as i64;
        }
        let mut books = w.books.clone();
        books.reverse();
        let shuffled = OrderFlowWindow { start_s: w.start_s, records: &recs, books };
        let f = compute_features(&shuffled, &c).unwrap();

        let vwap_mean = id_index(&c, "vwap_mean");
        let vwap_slope = id_index(&c, "vwap_slope");
        let count_mean = id_index(&c, "order_count_mean");
        assert!((f.values[vwap_mean] - base.values[vwap_mean]).abs() < 1e-9);
        assert!((f.values[count_mean] - base.values[count_mean]).abs() < 1e-12);
        assert!(base.values[vwap_slope] != 0.0);
        assert!((f.values[vwap_slope] + base.values[vwap_slope]).abs() < 1e-9);
    }

    #[test]
    fn price_shift_moves_only_price_levels() {
        let c = FeatureCatalog::default();
        let make = |shift: f64| {
            let snaps: Vec<LobSnapshot> = (0..60).map(|s| flat_book(s * 1000, shift)).collect();
            let trades: Vec<crate::marketdata::Trade> = (0..60)
                .step_by(7)
                .map(|s| crate::marketdata::Trade {
                    ts_ms: s * 1000 + 100,
                    price: 100.5 + shift,
                    size: 0.1 * (1 + s % 3) as f64,
                    buyer_is_maker: s % 2 == 0,
                })
                .collect();
            Day::from_streams(None, &trades, snaps).unwrap()
        };
        let (a, b) = (make(0.0), make(25.0));
        let fa = compute_features(&head_window(&a, 60), &c).unwrap();
        let fb = compute_features(&head_window(&b, 60), &c).unwrap();
        for (i, e) in c.entries.iter().enumerate() {
            let diff = fb.values[i] - fa.values[i];
            match &e.extractor {
                Extractor::Raw { index, stat: Stat::Mean | Stat::Last } if is_price(*index) => {
                    assert!((diff - 25.0).abs() < 1e-9, "{}", e.id)
                }
                Extractor::Raw { index, .. } if !is_price(*index) => assert_eq!(diff, 0.0, "{}", e.id),
                Extractor::QuotedDepth { .. }
                | Extractor::Imbalance { .. }
                | Extractor::SignedVolume
                | Extractor::MaxTradeSize
                | Extractor::LargeTradeCount { .. }
                | Extractor::TradeCount
                | Extractor::TradedVolume
                | Extractor::BuySellRatio { .. }
                | Extractor::TimeSinceTrade { .. }
                | Extractor::Spread { .. }
                | Extractor::BookLevelCount { .. } => assert_eq!(diff, 0.0, "{}", e.id),
                _ => {}
            }
        }
    }

    fn is_price(index: usize) -> bool {
        index < DEPTH || (2 * DEPTH..3 * DEPTH).contains(&index) || index == 4 * DEPTH
    }

    #[test]
    fn csv_round_trip() {
        let c = FeatureCatalog::default();
        let day = synth_day(300, 2e-4, 2);
        let f = compute_features(&head_window(&day, 240), &c).unwrap();
        let mut w = FeatureCsvWriter::new(Vec::new(), &c).unwrap();
        w.write(&f).unwrap();
        let bytes = w.finish().unwrap();
        let header = String::from_utf8(bytes.clone()).unwrap();
        assert!(header.starts_with("window_start_s,f_000,f_001"));
        assert!(header.lines().next().unwrap().ends_with("f_392"));
        let back = read_features_csv(&bytes[..], &c.version).unwrap();
        assert_eq!(back, vec![f]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn features_always_finite(seed in 0u64..1000, sigma in 0.0f64..2e-3, len in 2usize..80) {
            let day = synth_day(len as i64 + 1, sigma, seed);
            let f = compute_features(&head_window(&day, len), &FeatureCatalog::default()).unwrap();
            prop_assert!(f.values.iter().all(|v| v.is_finite()));
        }
    }
}
