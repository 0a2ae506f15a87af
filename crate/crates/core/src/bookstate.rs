//! Reconstructed limit-order book that keeps price levels after they scroll
//! out of the visible top-20.
//!
//! A level observed in a snapshot is assumed to keep resting at its price
//! until the book contradicts it: a later snapshot whose visible span covers
//! that price without listing it, a price move through it, or fills that
//! exhaust it.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::marketdata::{Day, LobSnapshot, Side, Trade};

/// Price key with a total order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Price(pub f64);

impl Eq for Price {}

impl PartialOrd for Price {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Price {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelState {
    pub size: f64,
    pub last_confirmed_ts: i64,
    pub persisted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthLevel {
    pub price: f64,
    pub size: f64,
    pub side: Side,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BookError {
    #[error("snapshot at {ts_ms} is older than the last applied one at {last_ts_ms}")]
    StaleSnapshot { ts_ms: i64, last_ts_ms: i64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BookState {
    bids: BTreeMap<Price, LevelState>,
    asks: BTreeMap<Price, LevelState>,
    last_snapshot_ts: Option<i64>,
    persisted_fills: u64,
}

impl BookState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn side(&self, side: Side) -> &BTreeMap<Price, LevelState> {
        match side {
            Side::Bid => &self.bids,
            Side::Ask => &self.asks,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut BTreeMap<Price, LevelState> {
        match side {
            Side::Bid => &mut self.bids,
            Side::Ask => &mut self.asks,
        }
    }

    pub fn last_snapshot_ts(&self) -> Option<i64> {
        self.last_snapshot_ts
    }

    /// Fills applied to levels that were out of view at the time.
    pub fn persisted_fills(&self) -> u64 {
        self.persisted_fills
    }

    pub fn best_bid(&self) -> Option<f64> {
        self.bids.keys().next_back().map(|p| p.0)
    }

    pub fn best_ask(&self) -> Option<f64> {
        self.asks.keys().next().map(|p| p.0)
    }

    pub fn level_count(&self) -> usize {
        self.bids.len() + self.asks.len()
    }

    pub fn total_size(&self) -> f64 {
        self.bids.values().chain(self.asks.values()).map(|l| l.size).sum()
    }

    /// Merges a snapshot into the book.
    ///
    /// Visible levels are taken verbatim. On each side, a prior level is
    /// kept (as persisted) only when it lies beyond the snapshot's deepest
    /// visible price; anything inside or in front of the visible span was
    /// either listed or contradicted. Bids at or above the new best ask and
    /// asks at or below the new best bid never survive.
    pub fn apply_snapshot(&mut self, snap: &LobSnapshot) -> Result<(), BookError> {
        if let Some(last) = self.last_snapshot_ts {
            if snap.ts_ms < last {
                return Err(BookError::StaleSnapshot { ts_ms: snap.ts_ms, last_ts_ms: last });
            }
        }
        let worst_bid = snap.bids.last().map(|l| l.price).unwrap_or(f64::NEG_INFINITY);
        let worst_ask = snap.asks.last().map(|l| l.price).unwrap_or(f64::INFINITY);
        let best_ask = snap.asks.first().map(|l| l.price).unwrap_or(f64::INFINITY);
        let best_bid = snap.bids.first().map(|l| l.price).unwrap_or(f64::NEG_INFINITY);

        self.bids.retain(|p, _| p.0 < worst_bid && p.0 < best_ask);
        self.asks.retain(|p, _| p.0 > worst_ask && p.0 > best_bid);
        for level in self.bids.values_mut().chain(self.asks.values_mut()) {
            level.persisted = true;
        }
        for (side, levels) in [(Side::Bid, &snap.bids), (Side::Ask, &snap.asks)] {
            let book = self.side_mut(side);
            for l in levels {
                book.insert(
                    Price(l.price),
                    LevelState { size: l.size, last_confirmed_ts: snap.ts_ms, persisted: false },
                );
            }
        }
        self.last_snapshot_ts = Some(snap.ts_ms);
        Ok(())
    }

    /// Reduces the passive level hit by `trade`. Unknown prices are a no-op.
    pub fn apply_trade(&mut self, trade: &Trade) {
        let book = self.side_mut(trade.passive_side());
        let key = Price(trade.price);
        let Some(level) = book.get_mut(&key) else {
            return;
        };
        let persisted = level.persisted;
        level.size -= trade.size;
        if level.size <= 1e-12 {
            book.remove(&key);
        }
        if persisted {
            self.persisted_fills += 1;
        }
    }

    /// Levels with price in `[lo, hi)` on both sides, ascending by price.
    pub fn depth_in_range(&self, lo: f64, hi: f64) -> Vec<DepthLevel> {
        if !(lo < hi) {
            return Vec::new();
        }
        let range = Price(lo)..Price(hi);
        let bids =
            self.bids.range(range.clone()).map(|(p, l)| DepthLevel { price: p.0, size: l.size, side: Side::Bid });
        let asks = self.asks.range(range).map(|(p, l)| DepthLevel { price: p.0, size: l.size, side: Side::Ask });
        let mut out: Vec<DepthLevel> = bids.chain(asks).collect();
        out.sort_by(|a, b| a.price.total_cmp(&b.price));
        out
    }

    /// Immutable, price-sorted copy of the book.
    pub fn freeze(&self, ts_s: i64) -> BookView {
        let mut levels: Vec<BookLevel> = self
            .bids
            .iter()
            .map(|(p, l)| BookLevel { price: p.0, size: l.size, side: Side::Bid, persisted: l.persisted })
            .chain(self.asks.iter().map(|(p, l)| BookLevel {
                price: p.0,
                size: l.size,
                side: Side::Ask,
                persisted: l.persisted,
            }))
            .collect();
        levels.sort_by(|a, b| a.price.total_cmp(&b.price));
        BookView { ts_s, levels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BookLevel {
    pub price: f64,
    pub size: f64,
    pub side: Side,
    pub persisted: bool,
}

/// The book as of the end of one second.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BookView {
    pub ts_s: i64,
    levels: Vec<BookLevel>,
}

impl BookView {
    pub fn levels(&self) -> &[BookLevel] {
        &self.levels
    }

    /// Levels with price in `[lo, hi)`, ascending.
    pub fn depth_in_range(&self, lo: f64, hi: f64) -> &[BookLevel] {
        if !(lo < hi) {
            return &[];
        }
        let begin = self.levels.partition_point(|l| l.price < lo);
        let end = self.levels.partition_point(|l| l.price < hi);
        &self.levels[begin..end.max(begin)]
    }

    /// One NDJSON row per level: `{ts, side, price, size, persisted}`.
    pub fn write_ndjson(&self, mut out: impl Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row {
            ts: i64,
            side: Side,
            price: f64,
            size: f64,
            persisted: bool,
        }
        for l in &self.levels {
            let row = Row { ts: self.ts_s, side: l.side, price: l.price, size: l.size, persisted: l.persisted };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Folds a day's snapshots and trades into one [`BookView`] per second,
/// taken after every event of that second has been applied. Snapshots
/// precede trades with the same millisecond.
pub struct BookTimeline<'a> {
    day: &'a Day,
    state: BookState,
    next_snapshot: usize,
    second: usize,
}

impl<'a> BookTimeline<'a> {
    pub fn new(day: &'a Day) -> Self {
        Self { day, state: BookState::new(), next_snapshot: 0, second: 0 }
    }

    pub fn state(&self) -> &BookState {
        &self.state
    }

    /// Applies the next second's events without building a view.
    pub fn step(&mut self) -> Option<i64> {
        let record = self.day.records.get(self.second)?;
        let snaps = &self.day.snapshots;
        let mut trades = record.trades.iter().peekable();
        loop {
            let snap = snaps.get(self.next_snapshot).filter(|s| s.ts_s() <= record.ts_s);
            match (snap, trades.peek()) {
                (Some(s), Some(t)) if t.ts_ms < s.ts_ms => {
                    self.state.apply_trade(t);
                    trades.next();
                }
                (Some(s), _) => {
                    self.state.apply_snapshot(s).expect("day snapshots are time-ordered");
                    self.next_snapshot += 1;
                }
                (None, Some(t)) => {
                    self.state.apply_trade(t);
                    trades.next();
                }
                (None, None) => break,
            }
        }
        self.second += 1;
        Some(record.ts_s)
    }
}

impl Iterator for BookTimeline<'_> {
    type Item = Arc<BookView>;

    fn next(&mut self) -> Option<Self::Item> {
        let ts_s = self.step()?;
        Some(Arc::new(self.state.freeze(ts_s)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{Level, DEPTH};

    /// Snapshot with bids `best_bid, best_bid - 1, ...` and asks `best_ask, best_ask + 1, ...`.
    fn snap(ts_ms: i64, best_bid: f64, best_ask: f64, size: f64) -> LobSnapshot {
        let bids = (0..DEPTH).map(|i| Level::new(best_bid - i as f64, size)).collect();
        let asks = (0..DEPTH).map(|i| Level::new(best_ask + i as f64, size)).collect();
        LobSnapshot::new(ts_ms, bids, asks).unwrap()
    }

    fn sell(price: f64, size: f64) -> Trade {
        Trade { ts_ms: 0, price, size, buyer_is_maker: true }
    }

    #[test]
    fn first_snapshot_fills_empty_book() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 119.0, 120.0, 1.0)).unwrap();
        assert_eq!(book.level_count(), 40);
        assert!(book.bids.values().chain(book.asks.values()).all(|l| !l.persisted));
    }

    #[test]
    fn level_below_visible_range_persists() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 118.0, 119.0, 1.0)).unwrap();
        // Bids 99..=118. Price rises; visible bids become 100..=119.
        book.apply_snapshot(&snap(1000, 119.0, 120.0, 1.0)).unwrap();
        let deep = book.bids[&Price(99.0)];
        assert!(deep.persisted);
        assert_eq!(deep.last_confirmed_ts, 0);
        assert!(!book.bids[&Price(100.0)].persisted);
    }

    #[test]
    fn absent_level_inside_visible_range_is_deleted() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 118.0, 119.0, 1.0)).unwrap();
        let mut next = snap(1000, 119.0, 120.0, 1.0);
        // Replace the 105 bid with a deeper one so the visible span stays [99.5, 119].
        let idx = next.bids.iter().position(|l| l.price == 105.0).unwrap();
        next.bids.remove(idx);
        next.bids.push(Level::new(99.5, 1.0));
        next.check().unwrap();
        book.apply_snapshot(&next).unwrap();
        assert!(!book.bids.contains_key(&Price(105.0)));
    }

    #[test]
    fn crossed_persisted_levels_are_dropped() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 130.0, 131.0, 1.0)).unwrap();
        // Price falls through the old bids 111..=130; none of them may survive.
        book.apply_snapshot(&snap(1000, 100.0, 101.0, 1.0)).unwrap();
        assert!(book.best_bid().unwrap() < book.best_ask().unwrap());
        assert_eq!(book.best_bid(), Some(100.0));
        // Old asks 131..=150 are beyond the new deepest ask (120) and persist.
        assert!(book.asks[&Price(131.0)].persisted);
    }

    #[test]
    fn stale_snapshot_rejected() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(1000, 100.0, 101.0, 1.0)).unwrap();
        assert_eq!(
            book.apply_snapshot(&snap(999, 100.0, 101.0, 1.0)),
            Err(BookError::StaleSnapshot { ts_ms: 999, last_ts_ms: 1000 })
        );
    }

    #[test]
    fn trades_reduce_passive_levels() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 100.0, 101.0, 5.0)).unwrap();
        book.apply_trade(&sell(100.0, 2.0));
        assert_eq!(book.bids[&Price(100.0)].size, 3.0);
        book.apply_trade(&sell(100.0, 3.0));
        assert!(!book.bids.contains_key(&Price(100.0)));
        let before = book.clone();
        book.apply_trade(&sell(100.5, 1.0));
        assert_eq!(book, before);
        // A buy aggressor hits asks, not bids.
        book.apply_trade(&Trade { ts_ms: 0, price: 99.0, size: 1.0, buyer_is_maker: false });
        assert_eq!(book, before);
    }

    #[test]
    fn fills_on_persisted_levels_are_counted() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 118.0, 119.0, 1.0)).unwrap();
        book.apply_snapshot(&snap(1000, 119.0, 120.0, 1.0)).unwrap();
        book.apply_trade(&sell(99.0, 0.5));
        assert_eq!(book.persisted_fills(), 1);
    }

    #[test]
    fn depth_in_range_examples() {
        assert!(BookState::new().depth_in_range(0.0, 1e9).is_empty());
        let mut book = BookState::new();
        book.bids.insert(Price(99.0), LevelState { size: 1.0, last_confirmed_ts: 0, persisted: false });
        book.asks.insert(Price(101.0), LevelState { size: 2.0, last_confirmed_ts: 0, persisted: false });
        assert_eq!(book.depth_in_range(100.0, 102.0), vec![DepthLevel { price: 101.0, size: 2.0, side: Side::Ask }]);
        assert_eq!(book.depth_in_range(0.0, 1e9).len(), book.level_count());
        let view = book.freeze(0);
        assert_eq!(view.depth_in_range(100.0, 102.0).len(), 1);
        assert_eq!(view.depth_in_range(101.0, 101.0).len(), 0);
    }

    #[test]
    fn ndjson_dump_has_one_row_per_level() {
        let mut book = BookState::new();
        book.apply_snapshot(&snap(0, 100.0, 101.0, 1.0)).unwrap();
        let mut out = Vec::new();
        book.freeze(0).write_ndjson(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 40);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["side"], "bid");
        assert_eq!(first["persisted"], false);
    }
}
