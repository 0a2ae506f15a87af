use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Number of visible levels per side in a depth snapshot.
pub const DEPTH: usize = 20;

/// Which side of the book a resting order or an aggressor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Bid => "bid",
            Side::Ask => "ask",
        }
    }
}

/// Direction of the market order that triggered a trade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggressor {
    Buy,
    Sell,
}

/// One executed trade from the time & sales stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub ts_ms: i64,
    pub price: f64,
    pub size: f64,
    /// Exchange flag: `true` when the buyer was the resting (maker) side,
    /// i.e. the aggressor sold.
    pub buyer_is_maker: bool,
}

impl Trade {
    pub fn aggressor(&self) -> Aggressor {
        if self.buyer_is_maker {
            Aggressor::Sell
        } else {
            Aggressor::Buy
        }
    }

    /// The resting side consumed by this trade.
    pub fn passive_side(&self) -> Side {
        match self.aggressor() {
            Aggressor::Sell => Side::Bid,
            Aggressor::Buy => Side::Ask,
        }
    }

    pub fn ts_s(&self) -> i64 {
        self.ts_ms.div_euclid(1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub price: f64,
    pub size: f64,
}

impl Level {
    pub fn new(price: f64, size: f64) -> Self {
        Self { price, size }
    }
}

/// A top-20 depth snapshot. Bids are sorted by descending price, asks by
/// ascending price. Construct through [`LobSnapshot::new`] to get the
/// invariants checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobSnapshot {
    pub ts_ms: i64,
    pub bids: Vec<Level>,
    pub asks: Vec<Level>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapshotDefect {
    LevelCount { bids: usize, asks: usize },
    NonPositive,
    NotStrictlyMonotone(Side),
    Crossed,
}

impl std::fmt::Display for SnapshotDefect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SnapshotDefect::LevelCount { bids, asks } => {
                write!(f, "expected {DEPTH} levels per side, got {bids} bids and {asks} asks")
            }
            SnapshotDefect::NonPositive => write!(f, "non-positive price or size"),
            SnapshotDefect::NotStrictlyMonotone(side) => {
                write!(f, "{} prices are not strictly monotone", side.as_str())
            }
            SnapshotDefect::Crossed => write!(f, "best bid >= best ask"),
        }
    }
}

impl LobSnapshot {
    pub fn new(ts_ms: i64, bids: Vec<Level>, asks: Vec<Level>) -> Result<Self, SnapshotDefect> {
        let snap = Self { ts_ms, bids, asks };
        snap.check()?;
        Ok(snap)
    }

    pub fn check(&self) -> Result<(), SnapshotDefect> {
        if self.bids.len() != DEPTH || self.asks.len() != DEPTH {
            return Err(SnapshotDefect::LevelCount { bids: self.bids.len(), asks: self.asks.len() });
        }
        let positive = |l: &Level| l.price > 0.0 && l.size > 0.0 && l.price.is_finite() && l.size.is_finite();
        if !self.bids.iter().chain(&self.asks).all(positive) {
            return Err(SnapshotDefect::NonPositive);
        }
        if !self.bids.windows(2).all(|w| w[0].price > w[1].price) {
            return Err(SnapshotDefect::NotStrictlyMonotone(Side::Bid));
        }
        if !self.asks.windows(2).all(|w| w[0].price < w[1].price) {
            return Err(SnapshotDefect::NotStrictlyMonotone(Side::Ask));
        }
        if self.best_bid() >= self.best_ask() {
            return Err(SnapshotDefect::Crossed);
        }
        Ok(())
    }

    pub fn best_bid(&self) -> f64 {
        self.bids[0].price
    }

    pub fn best_ask(&self) -> f64 {
        self.asks[0].price
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.best_bid() + self.best_ask())
    }

    pub fn ts_s(&self) -> i64 {
        self.ts_ms.div_euclid(1000)
    }
}

/// Trades and the book aligned to one wall-clock second `[ts_s, ts_s + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondRecord {
    pub ts_s: i64,
    pub snapshot: Arc<LobSnapshot>,
    pub vwap: f64,
    pub order_count: u32,
    pub total_size: f64,
    pub buy_size: f64,
    pub sell_size: f64,
    pub trades: Vec<Trade>,
}

impl SecondRecord {
    pub fn mid(&self) -> f64 {
        self.snapshot.mid()
    }

    pub fn has_trades(&self) -> bool {
        !self.trades.is_empty()
    }
}
