//! Order-flow snapshot images.
//!
//! Each image spans `n` columns of `t_unit_s` seconds and `m` rows of
//! `v_unit` price units, with row 0 at the top (highest price). Sell
//! aggressor volume goes to red, buy aggressor volume to green, both
//! stamped as `(2 * pad + 1)` squares that add where they overlap. Blue
//! holds the reconstructed book, one pixel per level and second. Trade
//! channels are clipped at a per-image quantile, then every channel is
//! max-scaled to 0..=255 independently.

mod png_out;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marketdata::{Aggressor, Day};
use crate::window::{walk_windows, OrderFlowWindow, WalkForward, WindowError};

pub use png_out::write_png;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoding parameters: {0}")]
    InvalidParams(String),
    #[error("window has {got} seconds, expected {expected}")]
    WindowShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Window(#[from] WindowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingParams {
    /// Columns.
    pub n: usize,
    /// Rows.
    pub m: usize,
    /// Seconds per column.
    pub t_unit_s: u32,
    /// Price units per row.
    pub v_unit: f64,
    /// Half-width of the trade square.
    pub pad: usize,
    /// Quantile at which trade channels are clipped, in (0, 1].
    pub clip_q: f64,
    /// Seconds between consecutive window starts.
    pub epsilon_s: u32,
}

impl Default for EncodingParams {
    fn default() -> Self {
        Self { n: 240, m: 240, t_unit_s: 1, v_unit: 1.0, pad: 1, clip_q: 0.99, epsilon_s: 10 }
    }
}

impl EncodingParams {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: &str| Err(EncoderError::InvalidParams(msg.to_string()));
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be positive");
        }
        if self.t_unit_s == 0 || !(self.v_unit > 0.0) || !self.v_unit.is_finite() {
            return bad("t_unit and v_unit must be positive");
        }
        if !(self.clip_q > 0.0 && self.clip_q <= 1.0) {
            return bad("clip_q must lie in (0, 1]");
        }
        if self.epsilon_s == 0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    /// Seconds covered by one image.
    pub fn window_s(&self) -> usize {
        self.n * self.t_unit_s as usize
    }

    pub fn walk_forward(&self, horizon_s: i64) -> WalkForward {
        WalkForward { window_s: self.window_s() as i64, stride_s: self.epsilon_s as i64, horizon_s }
    }

    /// Bottom price edge for a window whose first mid-price is `mid`.
    pub fn v0_for_mid(&self, mid: f64) -> f64 {
        mid - (self.m as f64 / 2.0) * self.v_unit
    }

    /// Price interval `[v0, v0 + m * v_unit)` covered by the rows.
    pub fn price_range(&self, v0: f64) -> (f64, f64) {
        (v0, v0 + self.m as f64 * self.v_unit)
    }
}

/// Row holding `price`, counting from the top, or `None` outside
/// `[v0, v0 + m * v_unit)`.
pub fn price_to_row(price: f64, v0: f64, params: &EncodingParams) -> Option<usize> {
    let k = ((price - v0) / params.v_unit).floor();
    if k >= 0.0 && k < params.m as f64 {
        Some(params.m - 1 - k as usize)
    } else {
        None
    }
}

/// Nearest-rank `q`-quantile of the non-zero entries, `None` when all are zero.
pub fn clip_threshold(values: &[f64], q: f64) -> Option<f64> {
    let mut nonzero: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return None;
    }
    nonzero.sort_by(f64::total_cmp);
    // Guard against q * N landing a hair above an integer.
    let rank = ((q * nonzero.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(nonzero[rank.min(nonzero.len()) - 1])
}

/// Caps every entry at the nearest-rank `q`-quantile of the non-zero entries.
pub fn clip_percentile(values: &[f64], q: f64) -> Vec<f64> {
    match clip_threshold(values, q) {
        Some(t) => values.iter().map(|&v| v.min(t)).collect(),
        None => values.to_vec(),
    }
}

/// Max-scales to 0..=255, rounding half up. All-zero input stays zero.
pub fn normalize_channel(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| (255.0 * (v / max) + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
}

fn divide_by_max(values: &[f64]) -> Vec<f32> {
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v / max) as f32).collect()
}

/// An encoded window. Channel arrays are row-major `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    pub window_start_s: i64,
    pub v0: f64,
    pub m: usize,
    pub n: usize,
    /// Sell aggressor volume before clipping.
    pub red: Vec<f64>,
    /// Buy aggressor volume before clipping.
    pub green: Vec<f64>,
    /// Book volume.
    pub blue: Vec<f64>,
    pub red_clip: Option<f64>,
    pub green_clip: Option<f64>,
    pub norm_red: Vec<u8>,
    pub norm_green: Vec<u8>,
    pub norm_blue: Vec<u8>,
}

impl FlowImage {
    pub fn clipped_red(&self) -> Vec<f64> {
        clip_with(&self.red, self.red_clip)
    }

    pub fn clipped_green(&self) -> Vec<f64> {
        clip_with(&self.green, self.green_clip)
    }

    /// `[3, m, n]` in R, G, B order: clipped values divided by each
    /// channel's maximum.
    pub fn tensor(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(3 * self.m * self.n);
        out.extend(divide_by_max(&self.clipped_red()));
        out.extend(divide_by_max(&self.clipped_green()));
        out.extend(divide_by_max(&self.blue));
        out
    }

    /// Interleaved 8-bit RGB, row-major.
    pub fn rgb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.m * self.n);
        for i in 0..self.m * self.n {
            out.extend([self.norm_red[i], self.norm_green[i], self.norm_blue[i]]);
        }
        out
    }
}

fn clip_with(values: &[f64], threshold: Option<f64>) -> Vec<f64> {
    match threshold {
        Some(t) => values.iter().map(|&v| v.min(t)).collect(),
        None => values.to_vec(),
    }
}

/// Encodes one window into a [`FlowImage`].
pub fn encode_window(window: &OrderFlowWindow<'_>, params: &EncodingParams) -> Result<FlowImage, EncoderError> {
    params.validate()?;
    let expected = params.window_s();
    if window.records.len() != expected || window.books.len() != expected {
        return Err(EncoderError::WindowShapeMismatch { expected, got: window.records.len() });
    }
    let (m, n, pad) = (params.m, params.n, params.pad);
    let t_unit = params.t_unit_s as usize;
    let v0 = params.v0_for_mid(window.first_mid());
    let (lo, hi) = params.price_range(v0);

    let mut red = vec![0.0; m * n];
    let mut green = vec![0.0; m * n];
    let mut blue = vec![0.0; m * n];

    for (i, (record, book)) in window.records.iter().zip(&window.books).enumerate() {
        let col = i / t_unit;
        for trade in &record.trades {
            let Some(row) = price_to_row(trade.price, v0, params) else {
                continue;
            };
            let channel = match trade.aggressor() {
                Aggressor::Buy => &mut green,
                Aggressor::Sell => &mut red,
            };
            let rows = row.saturating_sub(pad)..=(row + pad).min(m - 1);
            let cols = col.saturating_sub(pad)..=(col + pad).min(n - 1);
            for r in rows {
                for c in cols.clone() {
                    channel[r * n + c] += trade.size;
                }
            }
        }
        for level in book.depth_in_range(lo, hi) {
            if let Some(row) = price_to_row(level.price, v0, params) {
                blue[row * n + col] += level.size;
            }
        }
    }

    let red_clip = clip_threshold(&red, params.clip_q);
    let green_clip = clip_threshold(&green, params.clip_q);
    let norm_red = normalize_channel(&clip_with(&red, red_clip));
    let norm_green = normalize_channel(&clip_with(&green, green_clip));
    let norm_blue = normalize_channel(&blue);
    Ok(FlowImage {
        window_start_s: window.start_s,
        v0,
        m,
        n,
        red,
        green,
        blue,
        red_clip,
        green_clip,
        norm_red,
        norm_green,
        norm_blue,
    })
}

/// Encodes every walk-forward window of `day`, in order.
pub fn walk_forward_images(day: &Day, params: &EncodingParams, horizon_s: i64) -> Result<Vec<FlowImage>, EncoderError> {
    params.validate()?;
    let mut images = Vec::new();
    walk_windows(
        day,
        &params.walk_forward(horizon_s),
        false,
        |w| encode_window(w, params),
        |img| {
            images.push(img);
            Ok(())
        },
    )?;
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn price_to_row_boundaries() {
        let p = EncodingParams::default();
        assert_eq!(price_to_row(100.0, 100.0, &p), Some(239));
        assert_eq!(price_to_row(100.0 + 240.0, 100.0, &p), None);
        assert_eq!(price_to_row(99.999, 100.0, &p), None);
        assert_eq!(price_to_row(29000.4, 28880.0, &p), Some(119));
    }

    #[test]
    fn clip_nearest_rank() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let clipped = clip_percentile(&values, 0.99);
        assert_eq!(clipped[99], 99.0);
        assert_eq!(clipped[98], 99.0);
        assert_eq!(&clipped[..98], &values[..98]);
        assert_eq!(clip_percentile(&values, 1.0), values);
        let zeros = vec![0.0; 10];
        assert_eq!(clip_percentile(&zeros, 0.5), zeros);
    }

    #[test]
    fn clip_ignores_zero_pixels() {
        let mut values = vec![0.0; 1000];
        values[0] = 1.0;
        values[1] = 50.0;
        // Two non-zero values: rank ceil(0.99 * 2) = 2.
        assert_eq!(clip_threshold(&values, 0.99), Some(50.0));
        assert_eq!(clip_threshold(&values, 0.5), Some(1.0));
    }

    #[test]
    fn normalization_rounds_half_up() {
        assert_eq!(normalize_channel(&[0.0, 1.0, 2.0]), vec![0, 128, 255]);
        assert_eq!(normalize_channel(&[0.0, 0.0]), vec![0, 0]);
    }

    #[test]
    fn params_validation() {
        assert!(EncodingParams::default().validate().is_ok());
        let bad = EncodingParams { clip_q: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EncodingParams { v_unit: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
