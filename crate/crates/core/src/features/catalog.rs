use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::marketdata::{Side, DEPTH};

pub const DEFAULT_CATALOG_VERSION: &str = "ofi-393-v1";

/// Length of the per-second raw vector.
pub const RAW_WIDTH: usize = 4 * DEPTH + 5;

/// Summary statistic of a per-second series over the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Mean,
    /// Population standard deviation.
    Std,
    Last,
    /// Least-squares slope against the second index.
    Slope,
    Min,
    Max,
}

impl Stat {
    fn as_str(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::Std => "std",
            Stat::Last => "last",
            Stat::Slope => "slope",
            Stat::Min => "min",
            Stat::Max => "max",
        }
    }
}

/// How one feature is computed from a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extractor {
    /// Statistic of one entry of the 85-wide per-second vector.
    Raw {
        index: usize,
        stat: Stat,
    },
    /// Best ask minus best bid.
    Spread {
        stat: Stat,
    },
    /// One-second log returns of the mid-price.
    MidReturn {
        stat: Stat,
    },
    /// Realized volatility of the vwap series over the window's last `last_s` seconds.
    RealizedVol {
        last_s: usize,
    },
    /// `(bid - ask) / (bid + ask)` of the summed sizes of the top `depth` levels.
    Imbalance {
        depth: usize,
        stat: Stat,
    },
    /// `buy / (buy + sell)` aggressor volume per second, 0.5 without trades.
    BuySellRatio {
        stat: Stat,
    },
    /// Slope of trade counts across `segments` equal parts of the window.
    TradeCountTrend {
        segments: usize,
    },
    /// Per-second vwap minus mid-price.
    VwapMidDeviation {
        stat: Stat,
    },
    /// Realized volatility of one of `segments` equal parts of the window.
    SegmentRealizedVol {
        segment: usize,
        segments: usize,
    },
    /// Total size quoted over the visible levels of one side.
    QuotedDepth {
        side: Side,
        stat: Stat,
    },
    /// Buy minus sell aggressor volume.
    SignedVolume,
    MaxTradeSize,
    /// Trades strictly larger than the window's nearest-rank `q` size quantile.
    LargeTradeCount {
        q: f64,
    },
    /// Seconds since the most recent traded second (0 in a traded second).
    TimeSinceTrade {
        stat: Stat,
    },
    /// Reconstructed-book levels inside the image price band.
    BookLevelCount {
        stat: Stat,
    },
    /// Max minus min of the vwap series.
    HighLowRange,
    /// Log return from the first to the last vwap.
    CloseOpenReturn,
    /// Excess kurtosis of one-second vwap log returns.
    ReturnKurtosis,
    ReturnSkewness,
    TradeCount,
    TradedVolume,
}

/// Price band used by band-dependent extractors, centred on the window's
/// first mid-price like the image rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBand {
    pub rows: usize,
    pub v_unit: f64,
}

impl Default for PriceBand {
    fn default() -> Self {
        Self { rows: 240, v_unit: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub description: String,
    pub extractor: Extractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    pub version: String,
    pub band: PriceBand,
    pub entries: Vec<CatalogEntry>,
}

/// Name of raw-vector entry `index`.
pub fn raw_name(index: usize) -> String {
    const TAIL: [&str; 5] = ["vwap", "order_count", "total_size", "buy_size", "sell_size"];
    let block = index / DEPTH;
    let level = index % DEPTH + 1;
    match block {
        0 => format!("ask_px_{level}"),
        1 => format!("ask_sz_{level}"),
        2 => format!("bid_px_{level}"),
        3 => format!("bid_sz_{level}"),
        _ => TAIL[index - 4 * DEPTH].to_string(),
    }
}

impl FeatureCatalog {
    /// 85 raw series x (mean, std, last, slope) followed by 53 aggregates.
    pub fn default_with_band(band: PriceBand) -> Self {
        const MSL: [Stat; 3] = [Stat::Mean, Stat::Std, Stat::Last];
        let mut b = Builder(Vec::with_capacity(393));
        for index in 0..RAW_WIDTH {
            let name = raw_name(index);
            b.stats(&name, &format!("per-second {name}"), &[Stat::Mean, Stat::Std, Stat::Last, Stat::Slope], |stat| {
                Extractor::Raw { index, stat }
            });
        }
        b.stats("spread", "best ask minus best bid", &MSL, |stat| Extractor::Spread { stat });
        b.stats("mid_ret", "1 s mid-price log returns", &[Stat::Mean, Stat::Std, Stat::Min, Stat::Max], |stat| {
            Extractor::MidReturn { stat }
        });
        for last_s in [60, 120, 240] {
            b.add(
                format!("rv_last_{last_s}"),
                format!("realized volatility of the last {last_s} s"),
                Extractor::RealizedVol { last_s },
            );
        }
        for depth in [1, 5, 10, 20] {
            b.stats(&format!("imbalance_{depth}"), &format!("top-{depth} size imbalance"), &MSL, |stat| {
                Extractor::Imbalance { depth, stat }
            });
        }
        b.stats("buy_ratio", "buy share of aggressor volume", &MSL, |stat| Extractor::BuySellRatio { stat });
        b.add(
            "trade_count_trend",
            "slope of trade counts over window quarters",
            Extractor::TradeCountTrend { segments: 4 },
        );
        b.stats("vwap_mid_dev", "vwap minus mid-price", &MSL, |stat| Extractor::VwapMidDeviation { stat });
        for segment in 0..4 {
            b.add(
                format!("rv_quarter_{}", segment + 1),
                format!("realized volatility of window quarter {}", segment + 1),
                Extractor::SegmentRealizedVol { segment, segments: 4 },
            );
        }
        b.stats("depth_bid", "quoted bid size", &MSL, |stat| Extractor::QuotedDepth { side: Side::Bid, stat });
        b.stats("depth_ask", "quoted ask size", &MSL, |stat| Extractor::QuotedDepth { side: Side::Ask, stat });
        b.add("signed_volume", "buy minus sell aggressor volume", Extractor::SignedVolume);
        b.add("max_trade_size", "largest single trade", Extractor::MaxTradeSize);
        b.add(
            "large_trade_count",
            "trades above the window's 99th size percentile",
            Extractor::LargeTradeCount { q: 0.99 },
        );
        b.stats("since_trade", "seconds since last trade", &[Stat::Mean, Stat::Max], |stat| {
            Extractor::TimeSinceTrade { stat }
        });
        b.stats("book_levels", "reconstructed levels in the image band", &MSL, |stat| Extractor::BookLevelCount {
            stat,
        });
        b.add("high_low_range", "max minus min vwap", Extractor::HighLowRange);
        b.add("close_open_ret", "log return first to last vwap", Extractor::CloseOpenReturn);
        b.add("ret_kurtosis", "excess kurtosis of 1 s vwap log returns", Extractor::ReturnKurtosis);
        b.add("ret_skewness", "skewness of 1 s vwap log returns", Extractor::ReturnSkewness);
        b.add("trade_count", "trades in the window", Extractor::TradeCount);
        b.add("traded_volume", "volume traded in the window", Extractor::TradedVolume);
        Self { version: DEFAULT_CATALOG_VERSION.to_string(), band, entries: b.0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |msg: String| Err(FeatureError::InvalidCatalog(msg));
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return bad(format!("duplicate feature id {}", e.id));
            }
            let ok = match &e.extractor {
                Extractor::Raw { index, .. } => *index < RAW_WIDTH,
                Extractor::RealizedVol { last_s } => *last_s >= 2,
                Extractor::Imbalance { depth, .. } => (1..=DEPTH).contains(depth),
                Extractor::TradeCountTrend { segments } => *segments >= 1,
                Extractor::SegmentRealizedVol { segment, segments } => segment < segments,
                Extractor::LargeTradeCount { q } => *q > 0.0 && *q <= 1.0,
                _ => true,
            };
            if !ok {
                return bad(format!("feature {} has out-of-range extractor parameters", e.id));
            }
        }
        if self.band.rows == 0 || !(self.band.v_unit > 0.0) {
            return bad("price band needs positive rows and unit".to_string());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        let catalog: Self = serde_json::from_str(text).map_err(|e| FeatureError::InvalidCatalog(e.to_string()))?;
        catalog.validate()?;
        Ok(catalog)
    }
}

struct Builder(Vec<CatalogEntry>);

impl Builder {
    fn add(&mut self, id: impl Into<String>, description: impl Into<String>, extractor: Extractor) {
        self.0.push(CatalogEntry { id: id.into(), description: description.into(), extractor });
    }

    fn stats(&mut self, prefix: &str, what: &str, stats: &[Stat], make: impl Fn(Stat) -> Extractor) {
        for &stat in stats {
            self.add(format!("{prefix}_{}", stat.as_str()), format!("{} of {what}", stat.as_str()), make(stat));
        }
    }
}

impl Default for FeatureCatalog {
    fn default() -> Self {
        Self::default_with_band(PriceBand::default())
    }
}
