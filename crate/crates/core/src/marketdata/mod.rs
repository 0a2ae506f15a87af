//! Raw market events: parsing, per-second alignment and synthetic streams.

mod align;
mod parse;
mod synth;
mod types;

use std::sync::Arc;

use thiserror::Error;

pub use align::{align_seconds, vwap};
pub use parse::{
    decode_stream, depth_columns, parse_depth, parse_trades, write_depth_csv, write_trades_csv, DepthParse,
    ParseOptions, StreamFormat,
};
pub use synth::{gen_synthetic_flow, BookProfile, Regime, SynthConfig};
pub use types::{Aggressor, Level, LobSnapshot, SecondRecord, Side, SnapshotDefect, Trade, DEPTH};

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("timestamp goes backwards at line {line}")]
    NonMonotoneTimestamp { line: u64 },
    #[error("crossed book at ts {ts_ms}")]
    CrossedBook { ts_ms: i64 },
    #[error("no snapshot at or before second {t0_s}")]
    NoSnapshotCoverage { t0_s: i64 },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One instrument-day: the aligned per-second records plus every depth
/// snapshot needed to rebuild the persistent book.
#[derive(Debug, Clone)]
pub struct Day {
    pub id: String,
    pub start_s: i64,
    pub records: Vec<SecondRecord>,
    pub snapshots: Vec<Arc<LobSnapshot>>,
}

impl Day {
    /// Aligns the streams over `[first snapshot second, last event second + 1)`.
    pub fn from_streams(
        id: Option<String>,
        trades: &[Trade],
        snapshots: Vec<LobSnapshot>,
    ) -> Result<Self, MarketDataError> {
        let first = snapshots.first().ok_or(MarketDataError::NoSnapshotCoverage { t0_s: 0 })?.ts_s();
        let last_snap = snapshots.last().map(|s| s.ts_s()).unwrap_or(first);
        let last_trade = trades.last().map(|t| t.ts_s()).unwrap_or(first);
        let end = last_snap.max(last_trade) + 1;
        Self::from_streams_range(id, trades, snapshots, first..end)
    }

    pub fn from_streams_range(
        id: Option<String>,
        trades: &[Trade],
        snapshots: Vec<LobSnapshot>,
        range: std::ops::Range<i64>,
    ) -> Result<Self, MarketDataError> {
        let snapshots: Vec<Arc<LobSnapshot>> = snapshots.into_iter().map(Arc::new).collect();
        let records = align_seconds(trades, &snapshots, range.clone())?;
        let id = id.unwrap_or_else(|| day_label(range.start));
        Ok(Self { id, start_s: range.start, records, snapshots })
    }

    /// Number of seconds covered.
    pub fn len_s(&self) -> i64 {
        self.records.len() as i64
    }
}

/// UTC calendar date of a unix second, `YYYY-MM-DD`.
pub fn day_label(ts_s: i64) -> String {
    chrono::DateTime::from_timestamp(ts_s, 0)
        .map(|dt| dt.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| ts_s.to_string())
}
