use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, Manifest, PipelineConfig, PipelineError};
use crate::marketdata::{
    day_label, gen_synthetic_flow, parse_depth, parse_trades, write_depth_csv, write_trades_csv, Day, LobSnapshot,
    ParseOptions, StreamFormat, SynthConfig, Trade,
};

pub const RAW_KIND: &str = "raw-days";

/// One instrument-day stored as canonical trade and depth CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDay {
    pub id: String,
    pub start_s: i64,
    pub len_s: i64,
    pub trades_file: String,
    pub depth_file: String,
}

/// A directory of days in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDir {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub days: Vec<RawDay>,
}

impl RawDir {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let manifest = Manifest::read(path)?;
        if manifest.kind != RAW_KIND {
            return Err(PipelineError::BadFile {
                path: path.join(super::MANIFEST),
                reason: format!("expected a {RAW_KIND} manifest, found {}", manifest.kind),
            });
        }
        let days = serde_json::from_value(manifest.details["days"].clone())
            .map_err(|e| PipelineError::BadFile { path: path.join(super::MANIFEST), reason: e.to_string() })?;
        Ok(Self { path: path.to_path_buf(), manifest, days })
    }

    pub fn load(&self, day: &RawDay) -> Result<Day, PipelineError> {
        load_day(&self.path, day)
    }
}

fn write_day(dir: &Path, id: &str, trades: &[Trade], snapshots: Vec<LobSnapshot>) -> Result<RawDay, PipelineError> {
    let trades_file = format!("{id}.trades.csv");
    let depth_file = format!("{id}.depth.csv");
    let tp = dir.join(&trades_file);
    write_trades_csv(trades, BufWriter::new(File::create(&tp).map_err(io_err(&tp))?)).map_err(io_err(&tp))?;
    let dp = dir.join(&depth_file);
    write_depth_csv(&snapshots, BufWriter::new(File::create(&dp).map_err(io_err(&dp))?)).map_err(io_err(&dp))?;
    let day = Day::from_streams(Some(id.to_string()), trades, snapshots)?;
    Ok(RawDay { id: id.to_string(), start_s: day.start_s, len_s: day.len_s(), trades_file, depth_file })
}

fn finish(dir: &Path, mut manifest: Manifest, days: Vec<RawDay>) -> Result<RawDir, PipelineError> {
    let names: Vec<String> = days.iter().flat_map(|d| [d.trades_file.clone(), d.depth_file.clone()]).collect();
    manifest.record_outputs(dir, &names)?;
    manifest.details = serde_json::json!({ "days": days });
    manifest.write(dir)?;
    Ok(RawDir { path: dir.to_path_buf(), manifest, days })
}

fn day_seed(seed: u64, day: u32) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(day as u64)
}

/// Generates `config.synth.days` consecutive synthetic days into `dir`.
pub fn synth(dir: &Path, config: &PipelineConfig) -> Result<RawDir, PipelineError> {
    let s = &config.synth;
    if s.days == 0 || s.duration_s <= 0 || s.duration_s > 86_400 {
        return Err(PipelineError::Config("synth needs at least one day and 0 < duration_s <= 86400".into()));
    }
    let mut days = Vec::with_capacity(s.days as usize);
    for d in 0..s.days {
        let seed = day_seed(config.seed, d);
        let start = s.start_ts_s + d as i64 * 86_400;
        let mut sc = if s.regimes.is_empty() {
            SynthConfig { start_ts_s: start, base_price: s.base_price, ..SynthConfig::steady(s.duration_s, s.sigma) }
        } else {
            SynthConfig::regime_switching(start, s.base_price, s.duration_s, &s.regimes, s.mean_dwell_s, seed)?
        };
        sc.flow_lead_s = s.flow_lead_s;
        let (trades, snapshots) = gen_synthetic_flow(&sc, seed)?;
        days.push(write_day(dir, &day_label(start), &trades, snapshots)?);
        log::info!("synthesized day {}", days.last().map(|d| d.id.as_str()).unwrap_or(""));
    }
    let manifest = Manifest::new(RAW_KIND, &config.hash());
    finish(dir, manifest, days)
}

/// Parses exchange trade and depth streams (optionally gzip-compressed) and
/// splits them into UTC days.
pub fn ingest(
    dir: &Path,
    trades_path: &Path,
    depth_path: &Path,
    opts: ParseOptions,
    config_hash: &str,
) -> Result<RawDir, PipelineError> {
    let trades = parse_trades(File::open(trades_path).map_err(io_err(trades_path))?, opts)?;
    let depth = parse_depth(File::open(depth_path).map_err(io_err(depth_path))?, opts)?;
    if depth.resorted_rows > 0 {
        log::warn!("{} depth rows arrived unsorted and were re-sorted", depth.resorted_rows);
    }
    let mut by_day: BTreeMap<String, (Vec<Trade>, Vec<LobSnapshot>)> = BTreeMap::new();
    for s in depth.snapshots {
        by_day.entry(day_label(s.ts_s())).or_default().1.push(s);
    }
    for t in trades {
        if let Some(e) = by_day.get_mut(&day_label(t.ts_s())) {
            e.0.push(t);
        }
    }
    let mut days = Vec::with_capacity(by_day.len());
    for (id, (trades, snapshots)) in by_day {
        days.push(write_day(dir, &id, &trades, snapshots)?);
    }
    let mut manifest = Manifest::new(RAW_KIND, config_hash);
    manifest.inputs.insert("trades".into(), super::sha256_file(trades_path)?);
    manifest.inputs.insert("depth".into(), super::sha256_file(depth_path)?);
    finish(dir, manifest, days)
}

/// Parses and aligns one stored day.
pub fn load_day(dir: &Path, raw: &RawDay) -> Result<Day, PipelineError> {
    let opts = ParseOptions::new(StreamFormat::Csv);
    let tp = dir.join(&raw.trades_file);
    let trades = parse_trades(File::open(&tp).map_err(io_err(&tp))?, opts)?;
    let dp = dir.join(&raw.depth_file);
    let depth = parse_depth(File::open(&dp).map_err(io_err(&dp))?, opts)?;
    let day = Day::from_streams(Some(raw.id.clone()), &trades, depth.snapshots)?;
    if day.start_s != raw.start_s || day.len_s() != raw.len_s {
        return Err(PipelineError::BadFile {
            path: dp,
            reason: format!(
                "day covers {}+{} s, manifest says {}+{} s",
                day.start_s,
                day.len_s(),
                raw.start_s,
                raw.len_s
            ),
        });
    }
    Ok(day)
}
