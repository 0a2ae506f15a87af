//! Seeded generator of trade and depth streams with a piecewise volatility
//! schedule. Output uses the same types the parsers produce, so anything
//! downstream can run on synthetic days unchanged.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{Level, LobSnapshot, Trade, DEPTH};
use super::MarketDataError;

/// One segment of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub duration_s: i64,
    /// Per-second standard deviation of the log price.
    pub sigma: f64,
    /// Poisson trade intensity, trades per second.
    pub trade_rate: f64,
    pub mean_trade_size: f64,
    /// Multiplier on the book's level sizes.
    pub depth_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookProfile {
    pub level_spacing_ticks: u32,
    pub half_spread_ticks: u32,
    pub base_size: f64,
    /// Log-normal dispersion of level sizes.
    pub size_dispersion: f64,
    /// Probability that a visible level gets a fresh size at each snapshot.
    pub refresh_prob: f64,
}

impl Default for BookProfile {
    fn default() -> Self {
        Self { level_spacing_ticks: 1, half_spread_ticks: 0, base_size: 2.0, size_dispersion: 0.8, refresh_prob: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub start_ts_s: i64,
    pub base_price: f64,
    pub tick_size: f64,
    /// Smallest tradable size; trade and level sizes are multiples of it.
    pub lot_size: f64,
    pub regimes: Vec<Regime>,
    pub book: BookProfile,
    pub snapshot_interval_ms: i64,
    /// Trade intensity and size switch to the next regime this many
    /// seconds before its volatility does.
    pub flow_lead_s: i64,
}

impl SynthConfig {
    /// A single-regime day: `duration_s` seconds at per-second volatility `sigma`.
    pub fn steady(duration_s: i64, sigma: f64) -> Self {
        Self {
            start_ts_s: 1_609_459_200,
            base_price: 29_000.0,
            tick_size: 0.1,
            lot_size: 0.001,
            regimes: vec![Regime { duration_s, sigma, trade_rate: 2.0, mean_trade_size: 0.05, depth_scale: 1.0 }],
            book: BookProfile::default(),
            snapshot_interval_ms: 1000,
            flow_lead_s: 0,
        }
    }

    /// Markov regime switching over `levels`: dwell times are exponential
    /// with mean `mean_dwell_s` and each switch moves to a different level.
    pub fn regime_switching(
        start_ts_s: i64,
        base_price: f64,
        duration_s: i64,
        levels: &[Regime],
        mean_dwell_s: f64,
        seed: u64,
    ) -> Result<Self, MarketDataError> {
        if levels.is_empty() || duration_s <= 0 || mean_dwell_s <= 0.0 {
            return Err(MarketDataError::InvalidConfig("regime switching needs levels, duration and dwell".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let dwell = Exp::new(1.0 / mean_dwell_s).expect("positive rate");
        let mut state = rng.random_range(0..levels.len());
        let mut remaining = duration_s;
        let mut regimes = Vec::new();
        while remaining > 0 {
            let d = (dwell.sample(&mut rng).ceil() as i64).clamp(1, remaining);
            regimes.push(Regime { duration_s: d, ..levels[state].clone() });
            remaining -= d;
            if levels.len() > 1 {
                let step = rng.random_range(1..levels.len());
                state = (state + step) % levels.len();
            }
        }
        Ok(Self { start_ts_s, base_price, regimes, ..Self::steady(duration_s, 0.0) })
    }

    pub fn duration_s(&self) -> i64 {
        self.regimes.iter().map(|r| r.duration_s).sum()
    }

    fn validate(&self) -> Result<(), MarketDataError> {
        let bad = |msg: &str| Err(MarketDataError::InvalidConfig(msg.to_string()));
        if self.regimes.is_empty() {
            return bad("at least one regime is required");
        }
        for r in &self.regimes {
            if r.duration_s <= 0 {
                return bad("regime durations must be positive");
            }
            if !(r.trade_rate > 0.0) || !(r.mean_trade_size > 0.0) || !(r.depth_scale > 0.0) {
                return bad("trade intensity, size and depth must be positive");
            }
            if !(r.sigma >= 0.0) || !r.sigma.is_finite() {
                return bad("volatility must be finite and non-negative");
            }
        }
        if !(self.base_price > 0.0) || !(self.tick_size > 0.0) || !(self.lot_size > 0.0) {
            return bad("base price, tick and lot must be positive");
        }
        if self.snapshot_interval_ms <= 0 || self.flow_lead_s < 0 {
            return bad("snapshot interval must be positive and flow lead non-negative");
        }
        if !(self.book.base_size > 0.0) || self.book.level_spacing_ticks == 0 {
            return bad("book profile needs positive size and spacing");
        }
        Ok(())
    }
}

struct Schedule<'a> {
    regimes: &'a [Regime],
    ends: Vec<i64>,
}

impl<'a> Schedule<'a> {
    fn new(regimes: &'a [Regime]) -> Self {
        let ends = regimes
            .iter()
            .scan(0, |acc, r| {
                *acc += r.duration_s;
                Some(*acc)
            })
            .collect();
        Self { regimes, ends }
    }

    fn at(&self, second: i64) -> &'a Regime {
        let idx = self.ends.partition_point(|&end| end <= second);
        &self.regimes[idx.min(self.regimes.len() - 1)]
    }
}

fn lots(size: f64, lot: f64) -> f64 {
    ((size / lot).round().max(1.0)) * lot
}

/// Generates a trade stream and a depth stream for `config`.
///
/// The efficient log price is a Brownian motion whose per-second
/// volatility follows the regime schedule. Trades print at the efficient
/// price rounded to the tick; snapshots quote a tick-grid book around it.
pub fn gen_synthetic_flow(config: &SynthConfig, seed: u64) -> Result<(Vec<Trade>, Vec<LobSnapshot>), MarketDataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = Schedule::new(&config.regimes);
    let duration = config.duration_s();
    let tick = config.tick_size;
    let round_tick = |p: f64| (p / tick).round() * tick;

    let mut log_price = config.base_price.ln();
    let mut level_sizes: BTreeMap<i64, f64> = BTreeMap::new();
    let mut trades = Vec::new();
    let mut snapshots = Vec::new();
    let mut next_snapshot_ms = 0i64;
    let mut clock_ms = 0i64;
    let mut next_trade_ms: Option<f64> = None;

    for second in 0..duration {
        let vol = schedule.at(second);
        let flow = schedule.at((second + config.flow_lead_s).min(duration - 1));
        let sec_begin = second * 1000;
        let sec_end = sec_begin + 1000;
        let inter = Exp::new(flow.trade_rate / 1000.0).expect("positive rate");
        let size_dist = Exp::new(1.0 / flow.mean_trade_size).expect("positive size");

        // Memoryless arrivals: redraw from the boundary with this second's rate.
        let mut t_next = match next_trade_ms {
            Some(t) if t < sec_end as f64 => t,
            _ => sec_begin as f64 + inter.sample(&mut rng),
        };
        let advance = |to_ms: i64, rng: &mut ChaCha8Rng, log_price: &mut f64, clock_ms: &mut i64| {
            let dt = (to_ms - *clock_ms) as f64 / 1000.0;
            if dt > 0.0 && vol.sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *log_price += vol.sigma * dt.sqrt() * z;
            }
            *clock_ms = to_ms;
        };

        loop {
            let trade_ms = (t_next < sec_end as f64).then_some(t_next.floor() as i64);
            let snap_ms = (next_snapshot_ms < sec_end).then_some(next_snapshot_ms);
            match (snap_ms, trade_ms) {
                (Some(s), t) if t.is_none_or(|t| s <= t) => {
                    advance(s, &mut rng, &mut log_price, &mut clock_ms);
                    snapshots.push(quote_book(config, flow, log_price.exp(), &mut level_sizes, &mut rng, s));
                    next_snapshot_ms += config.snapshot_interval_ms;
                }
                (_, Some(t)) => {
                    advance(t, &mut rng, &mut log_price, &mut clock_ms);
                    let size = lots(size_dist.sample(&mut rng), config.lot_size);
                    let buyer_is_maker = rng.random_bool(0.5);
                    trades.push(Trade {
                        ts_ms: (config.start_ts_s * 1000) + t,
                        price: round_tick(log_price.exp()),
                        size,
                        buyer_is_maker,
                    });
                    t_next += inter.sample(&mut rng);
                }
                _ => break,
            }
        }
        advance(sec_end, &mut rng, &mut log_price, &mut clock_ms);
        next_trade_ms = Some(t_next);
    }
    for s in &mut snapshots {
        s.ts_ms += config.start_ts_s * 1000;
    }
    Ok((trades, snapshots))
}

fn quote_book(
    config: &SynthConfig,
    regime: &Regime,
    price: f64,
    sizes: &mut BTreeMap<i64, f64>,
    rng: &mut ChaCha8Rng,
    ts_ms: i64,
) -> LobSnapshot {
    let book = &config.book;
    let tick = config.tick_size;
    let center = (price / tick).floor() as i64;
    let half = book.half_spread_ticks as i64;
    let spacing = book.level_spacing_ticks as i64;
    let bid0 = center - half;
    let ask0 = center + 1 + half;
    let mut level = |idx: i64, rng: &mut ChaCha8Rng| {
        let refresh = !sizes.contains_key(&idx) || rng.random_bool(book.refresh_prob.clamp(0.0, 1.0));
        if refresh {
            let z: f64 = rng.sample(StandardNormal);
            let raw = book.base_size * regime.depth_scale * (book.size_dispersion * z).exp();
            sizes.insert(idx, lots(raw, config.lot_size));
        }
        Level::new(idx as f64 * tick, sizes[&idx])
    };
    let bids = (0..DEPTH as i64).map(|k| level(bid0 - k * spacing, rng)).collect();
    let asks = (0..DEPTH as i64).map(|k| level(ask0 + k * spacing, rng)).collect();
    LobSnapshot::new(ts_ms, bids, asks).expect("generated book satisfies snapshot invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_pop(xs: &[f64]) -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    }

    /// Log returns of the last trade price in each second of `[from, to)`.
    fn per_second_returns(trades: &[Trade], start_s: i64, from: i64, to: i64) -> Vec<f64> {
        let mut last = vec![None; (to - from) as usize];
        for t in trades {
            let s = t.ts_s() - start_s;
            if (from..to).contains(&s) {
                last[(s - from) as usize] = Some(t.price);
            }
        }
        let prices: Vec<f64> = last.into_iter().flatten().collect();
        prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
    }

    #[test]
    fn zero_volatility_trades_at_constant_price() {
        let cfg = SynthConfig::steady(600, 0.0);
        let (trades, snaps) = gen_synthetic_flow(&cfg, 3).unwrap();
        assert!(!trades.is_empty());
        assert!(trades.iter().all(|t| t.price == trades[0].price));
        assert_eq!(snaps.len(), 600);
        assert!(snaps.iter().all(|s| s.mid() == snaps[0].mid()));
    }

    #[test]
    fn same_seed_is_identical() {
        let cfg = SynthConfig::steady(300, 1e-4);
        assert_eq!(gen_synthetic_flow(&cfg, 11).unwrap(), gen_synthetic_flow(&cfg, 11).unwrap());
        assert_ne!(gen_synthetic_flow(&cfg, 11).unwrap().0, gen_synthetic_flow(&cfg, 12).unwrap().0);
    }

    #[test]
    fn regime_volatility_ratio() {
        let regime =
            |sigma| Regime { duration_s: 10_000, sigma, trade_rate: 50.0, mean_trade_size: 0.05, depth_scale: 1.0 };
        let cfg = SynthConfig {
            regimes: vec![regime(0.0001), regime(0.001)],
            tick_size: 0.01,
            ..SynthConfig::steady(1, 0.0)
        };
        let (trades, _) = gen_synthetic_flow(&cfg, 5).unwrap();
        let r1 = per_second_returns(&trades, cfg.start_ts_s, 0, 10_000);
        let r2 = per_second_returns(&trades, cfg.start_ts_s, 10_000, 20_000);
        let ratio = std_pop(&r2) / std_pop(&r1);
        assert!((ratio / 10.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::steady(100, 1e-4);
        cfg.regimes[0].trade_rate = 0.0;
        assert!(matches!(gen_synthetic_flow(&cfg, 1), Err(MarketDataError::InvalidConfig(_))));
        let mut cfg = SynthConfig::steady(100, 1e-4);
        cfg.regimes[0].duration_s = 0;
        assert!(matches!(gen_synthetic_flow(&cfg, 1), Err(MarketDataError::InvalidConfig(_))));
    }

    #[test]
    fn snapshots_are_valid_and_ordered() {
        let cfg = SynthConfig::steady(120, 5e-4);
        let (trades, snaps) = gen_synthetic_flow(&cfg, 9).unwrap();
        assert!(snaps.iter().all(|s| s.check().is_ok()));
        assert!(snaps.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms));
        assert!(trades.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms));
    }

    #[test]
    fn regime_switching_covers_duration() {
        let level = Regime { duration_s: 1, sigma: 1e-4, trade_rate: 1.0, mean_trade_size: 0.1, depth_scale: 1.0 };
        let levels = vec![level.clone(), Regime { sigma: 3e-4, ..level }];
        let cfg = SynthConfig::regime_switching(0, 100.0, 5000, &levels, 300.0, 4).unwrap();
        assert_eq!(cfg.duration_s(), 5000);
        assert!(cfg.regimes.len() > 2);
        assert!(cfg.regimes.windows(2).all(|w| w[0].sigma != w[1].sigma));
    }
}
