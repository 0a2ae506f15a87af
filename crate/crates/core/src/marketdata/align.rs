use std::ops::Range;
use std::sync::Arc;

use super::types::{Aggressor, LobSnapshot, SecondRecord, Trade};
use super::MarketDataError;

/// Volume-weighted price of a non-empty batch of trades.
pub fn vwap(trades: &[Trade]) -> Option<f64> {
    let (pv, v) = trades.iter().fold((0.0, 0.0), |(pv, v), t| (pv + t.price * t.size, v + t.size));
    (v > 0.0).then(|| pv / v)
}

/// Buckets trades and snapshots into one record per second of `range`.
///
/// `trades` and `snapshots` must be time-ordered. Each second gets the
/// latest snapshot with `floor(ts_ms / 1000) <= second`. Seconds without
/// trades carry the previous vwap forward; the first second falls back to
/// the vwap of the last traded second before the range, then to the
/// snapshot mid-price.
pub fn align_seconds(
    trades: &[Trade],
    snapshots: &[Arc<LobSnapshot>],
    range: Range<i64>,
) -> Result<Vec<SecondRecord>, MarketDataError> {
    let Range { start: t0, end: t1 } = range;
    if t1 < t0 {
        return Ok(Vec::new());
    }
    let mut snap_idx = snapshots.partition_point(|s| s.ts_s() <= t0);
    if snap_idx == 0 {
        return Err(MarketDataError::NoSnapshotCoverage { t0_s: t0 });
    }
    snap_idx -= 1;

    let mut trade_idx = trades.partition_point(|t| t.ts_s() < t0);
    let mut carry = trades[..trade_idx]
        .last()
        .map(|last| {
            let sec = last.ts_s();
            let begin = trades[..trade_idx].partition_point(|t| t.ts_s() < sec);
            vwap(&trades[begin..trade_idx]).unwrap_or(last.price)
        })
        .unwrap_or_else(|| snapshots[snap_idx].mid());

    let mut records = Vec::with_capacity((t1 - t0) as usize);
    for ts_s in t0..t1 {
        while snap_idx + 1 < snapshots.len() && snapshots[snap_idx + 1].ts_s() <= ts_s {
            snap_idx += 1;
        }
        let begin = trade_idx;
        while trade_idx < trades.len() && trades[trade_idx].ts_s() <= ts_s {
            trade_idx += 1;
        }
        let batch = &trades[begin..trade_idx];
        let (mut buy, mut sell) = (0.0, 0.0);
        for t in batch {
            match t.aggressor() {
                Aggressor::Buy => buy += t.size,
                Aggressor::Sell => sell += t.size,
            }
        }
        if let Some(p) = vwap(batch) {
            carry = p;
        }
        records.push(SecondRecord {
            ts_s,
            snapshot: Arc::clone(&snapshots[snap_idx]),
            vwap: carry,
            order_count: batch.len() as u32,
            total_size: batch.iter().map(|t| t.size).sum(),
            buy_size: buy,
            sell_size: sell,
            trades: batch.to_vec(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::types::{Level, DEPTH};

    fn snap(ts_ms: i64, mid: f64) -> Arc<LobSnapshot> {
        let bids = (0..DEPTH).map(|i| Level::new(mid - 0.5 - i as f64, 1.0)).collect();
        let asks = (0..DEPTH).map(|i| Level::new(mid + 0.5 + i as f64, 1.0)).collect();
        Arc::new(LobSnapshot::new(ts_ms, bids, asks).unwrap())
    }

    fn trade(ts_ms: i64, price: f64, size: f64, buyer_is_maker: bool) -> Trade {
        Trade { ts_ms, price, size, buyer_is_maker }
    }

    #[test]
    fn two_trades_in_one_second() {
        let snaps = vec![snap(0, 101.0)];
        let trades = vec![trade(100, 100.0, 1.0, false), trade(900, 102.0, 3.0, false)];
        let recs = align_seconds(&trades, &snaps, 0..1).unwrap();
        assert_eq!(recs[0].vwap, 101.5);
        assert_eq!(recs[0].order_count, 2);
        assert_eq!(recs[0].total_size, 4.0);
    }

    #[test]
    fn empty_second_carries_vwap() {
        let snaps = vec![snap(0, 101.0)];
        let trades = vec![trade(100, 100.0, 1.0, false)];
        let recs = align_seconds(&trades, &snaps, 0..3).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].order_count, 0);
        assert_eq!(recs[1].total_size, 0.0);
        assert_eq!(recs[2].vwap, 100.0);
    }

    #[test]
    fn maker_buyer_counts_as_sell() {
        let snaps = vec![snap(0, 101.0)];
        let trades = vec![trade(10, 100.0, 2.0, true), trade(20, 100.0, 0.5, false)];
        let rec = &align_seconds(&trades, &snaps, 0..1).unwrap()[0];
        assert_eq!(rec.sell_size, 2.0);
        assert_eq!(rec.buy_size, 0.5);
    }

    #[test]
    fn first_second_without_history_uses_mid() {
        let snaps = vec![snap(0, 250.0)];
        let recs = align_seconds(&[], &snaps, 0..2).unwrap();
        assert!(recs.iter().all(|r| r.vwap == 250.0));
    }

    #[test]
    fn latest_snapshot_at_or_before_second() {
        let snaps = vec![snap(0, 100.0), snap(1500, 110.0), snap(1999, 120.0), snap(2000, 130.0)];
        let recs = align_seconds(&[], &snaps, 0..3).unwrap();
        assert_eq!(recs[0].mid(), 100.0);
        assert_eq!(recs[1].mid(), 120.0);
        assert_eq!(recs[2].mid(), 130.0);
    }

    #[test]
    fn missing_coverage_is_an_error() {
        let snaps = vec![snap(5000, 100.0)];
        assert!(matches!(align_seconds(&[], &snaps, 0..10), Err(MarketDataError::NoSnapshotCoverage { t0_s: 0 })));
    }
}
