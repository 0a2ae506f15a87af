//! Order-flow image pipeline for short-horizon realized volatility.

pub mod bookstate;
pub mod encoder;
pub mod eval;
pub mod export;
pub mod features;
pub mod labeler;
pub mod marketdata;
pub mod models;
pub mod pipeline;
pub mod window;
