use std::io::{BufRead, BufReader, Read, Write};

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::types::{Level, LobSnapshot, SnapshotDefect, Trade, DEPTH};
use super::MarketDataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamFormat {
    Csv,
    Ndjson,
}

impl std::str::FromStr for StreamFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(StreamFormat::Csv),
            "ndjson" | "jsonl" => Ok(StreamFormat::Ndjson),
            other => Err(format!("unknown stream format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub format: StreamFormat,
    /// A timestamp may step back by at most this many milliseconds before
    /// the row is rejected. Rows within tolerance are re-ordered.
    pub ts_tolerance_ms: i64,
}

impl ParseOptions {
    pub fn new(format: StreamFormat) -> Self {
        Self { format, ts_tolerance_ms: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DepthParse {
    pub snapshots: Vec<LobSnapshot>,
    /// Rows whose sides arrived unsorted and were re-sorted.
    pub resorted_rows: usize,
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Wraps `reader` in a gzip decoder when the stream starts with the gzip
/// magic bytes.
pub fn decode_stream<'a, R: Read + 'a>(reader: R) -> std::io::Result<Box<dyn BufRead + 'a>> {
    let mut buffered = BufReader::new(reader);
    let head = buffered.fill_buf()?;
    if head.len() >= 2 && head[..2] == GZIP_MAGIC {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(buffered))))
    } else {
        Ok(Box::new(buffered))
    }
}

fn malformed(line: u64, reason: impl Into<String>) -> MarketDataError {
    MarketDataError::MalformedRow { line, reason: reason.into() }
}

fn parse_f64(field: &str, line: u64, name: &str) -> Result<f64, MarketDataError> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(line, format!("{name}: cannot parse {field:?}")))
}

fn parse_i64(field: &str, line: u64, name: &str) -> Result<i64, MarketDataError> {
    field.trim().parse::<i64>().map_err(|_| malformed(line, format!("{name}: cannot parse {field:?}")))
}

fn parse_bool(field: &str, line: u64, name: &str) -> Result<bool, MarketDataError> {
    match field.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(malformed(line, format!("{name}: cannot parse {field:?}"))),
    }
}

fn json_f64(obj: &Value, key: &str, line: u64) -> Result<f64, MarketDataError> {
    match obj.get(key) {
        Some(Value::Number(n)) => n.as_f64().filter(|v| v.is_finite()).ok_or_else(|| malformed(line, key)),
        Some(Value::String(s)) => parse_f64(s, line, key),
        _ => Err(malformed(line, format!("missing or invalid {key}"))),
    }
}

fn json_i64(obj: &Value, key: &str, line: u64) -> Result<i64, MarketDataError> {
    match obj.get(key) {
        Some(Value::Number(n)) => n.as_i64().ok_or_else(|| malformed(line, key)),
        Some(Value::String(s)) => parse_i64(s, line, key),
        _ => Err(malformed(line, format!("missing or invalid {key}"))),
    }
}

fn json_bool(obj: &Value, key: &str, line: u64) -> Result<bool, MarketDataError> {
    match obj.get(key) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(Value::String(s)) => parse_bool(s, line, key),
        _ => Err(malformed(line, format!("missing or invalid {key}"))),
    }
}

/// Visits non-empty NDJSON lines as parsed objects with 1-based line numbers.
fn for_each_json_line(
    reader: impl BufRead,
    mut f: impl FnMut(u64, &Value) -> Result<(), MarketDataError>,
) -> Result<(), MarketDataError> {
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| malformed(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        f(line_no, &value)?;
    }
    Ok(())
}

struct CsvColumns {
    indices: Vec<usize>,
}

impl CsvColumns {
    fn resolve(headers: &csv::StringRecord, names: &[String]) -> Result<Self, MarketDataError> {
        let indices = names
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| malformed(1, format!("missing column {name}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { indices })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, col: usize, line: u64) -> Result<&'r str, MarketDataError> {
        record.get(self.indices[col]).ok_or_else(|| malformed(line, "row has too few fields"))
    }
}

fn csv_records(
    reader: impl BufRead,
    names: &[String],
    mut f: impl FnMut(u64, &CsvColumns, &csv::StringRecord) -> Result<(), MarketDataError>,
) -> Result<(), MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(malformed(1, e.to_string())),
    };
    if headers.is_empty() {
        return Ok(());
    }
    let columns = CsvColumns::resolve(&headers, names)?;
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                if record.len() != headers.len() {
                    return Err(malformed(line, format!("expected {} fields, got {}", headers.len(), record.len())));
                }
                f(line, &columns, &record)?;
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(malformed(line, e.to_string()));
            }
        }
    }
    Ok(())
}

/// Rejects timestamps that step back by more than the tolerance and
/// stably re-orders the ones within it.
fn enforce_order<T>(
    mut rows: Vec<(u64, T)>,
    ts: impl Fn(&T) -> i64,
    tolerance_ms: i64,
) -> Result<Vec<T>, MarketDataError> {
    let mut high_water = i64::MIN;
    let mut needs_sort = false;
    for (line, row) in &rows {
        let t = ts(row);
        if t < high_water {
            if high_water - t > tolerance_ms {
                return Err(MarketDataError::NonMonotoneTimestamp { line: *line });
            }
            needs_sort = true;
        }
        high_water = high_water.max(t);
    }
    if needs_sort {
        rows.sort_by_key(|(_, row)| ts(row));
    }
    Ok(rows.into_iter().map(|(_, row)| row).collect())
}

fn checked_trade(line: u64, ts_ms: i64, price: f64, size: f64, buyer_is_maker: bool) -> Result<Trade, MarketDataError> {
    if price <= 0.0 {
        return Err(malformed(line, "price must be positive"));
    }
    if size <= 0.0 {
        return Err(malformed(line, "qty must be positive"));
    }
    Ok(Trade { ts_ms, price, size, buyer_is_maker })
}

/// Parses a trade stream (`ts_ms,price,qty,is_buyer_maker`).
pub fn parse_trades(reader: impl Read, opts: ParseOptions) -> Result<Vec<Trade>, MarketDataError> {
    let reader = decode_stream(reader)?;
    let mut rows = Vec::new();
    match opts.format {
        StreamFormat::Csv => {
            let names: Vec<String> =
                ["ts_ms", "price", "qty", "is_buyer_maker"].iter().map(|s| s.to_string()).collect();
            csv_records(reader, &names, |line, cols, rec| {
                let ts = parse_i64(cols.get(rec, 0, line)?, line, "ts_ms")?;
                let price = parse_f64(cols.get(rec, 1, line)?, line, "price")?;
                let qty = parse_f64(cols.get(rec, 2, line)?, line, "qty")?;
                let maker = parse_bool(cols.get(rec, 3, line)?, line, "is_buyer_maker")?;
                rows.push((line, checked_trade(line, ts, price, qty, maker)?));
                Ok(())
            })?;
        }
        StreamFormat::Ndjson => {
            for_each_json_line(reader, |line, obj| {
                let ts = json_i64(obj, "ts_ms", line)?;
                let price = json_f64(obj, "price", line)?;
                let qty = json_f64(obj, "qty", line)?;
                let maker = json_bool(obj, "is_buyer_maker", line)?;
                rows.push((line, checked_trade(line, ts, price, qty, maker)?));
                Ok(())
            })?;
        }
    }
    enforce_order(rows, |t| t.ts_ms, opts.ts_tolerance_ms)
}

/// Column names of the depth layout, in file order.
pub fn depth_columns() -> Vec<String> {
    let mut names = vec!["ts_ms".to_string()];
    for prefix in ["bid_px", "bid_sz", "ask_px", "ask_sz"] {
        names.extend((1..=DEPTH).map(|i| format!("{prefix}_{i}")));
    }
    names
}

fn build_snapshot(line: u64, ts_ms: i64, values: &[f64], resorted: &mut usize) -> Result<LobSnapshot, MarketDataError> {
    let side = |px: usize, sz: usize| -> Vec<Level> {
        (0..DEPTH).map(|i| Level::new(values[px * DEPTH + i], values[sz * DEPTH + i])).collect()
    };
    let mut bids = side(0, 1);
    let mut asks = side(2, 3);
    let mut touched = false;
    if !bids.windows(2).all(|w| w[0].price >= w[1].price) {
        bids.sort_by(|a, b| b.price.total_cmp(&a.price));
        touched = true;
    }
    if !asks.windows(2).all(|w| w[0].price <= w[1].price) {
        asks.sort_by(|a, b| a.price.total_cmp(&b.price));
        touched = true;
    }
    if touched {
        *resorted += 1;
    }
    match LobSnapshot::new(ts_ms, bids, asks) {
        Ok(s) => Ok(s),
        Err(SnapshotDefect::Crossed) => Err(MarketDataError::CrossedBook { ts_ms }),
        Err(defect) => Err(malformed(line, defect.to_string())),
    }
}

/// Parses a top-20 depth stream. Each row carries a timestamp and
/// 20 bid and 20 ask (price, size) pairs.
pub fn parse_depth(reader: impl Read, opts: ParseOptions) -> Result<DepthParse, MarketDataError> {
    let reader = decode_stream(reader)?;
    let names = depth_columns();
    let mut rows = Vec::new();
    let mut resorted = 0usize;
    let mut values = vec![0.0; 4 * DEPTH];
    match opts.format {
        StreamFormat::Csv => {
            csv_records(reader, &names, |line, cols, rec| {
                let ts = parse_i64(cols.get(rec, 0, line)?, line, "ts_ms")?;
                for (i, v) in values.iter_mut().enumerate() {
                    *v = parse_f64(cols.get(rec, i + 1, line)?, line, &names[i + 1])?;
                }
                rows.push((line, build_snapshot(line, ts, &values, &mut resorted)?));
                Ok(())
            })?;
        }
        StreamFormat::Ndjson => {
            for_each_json_line(reader, |line, obj| {
                let ts = json_i64(obj, "ts_ms", line)?;
                for (i, v) in values.iter_mut().enumerate() {
                    *v = json_f64(obj, &names[i + 1], line)?;
                }
                rows.push((line, build_snapshot(line, ts, &values, &mut resorted)?));
                Ok(())
            })?;
        }
    }
    let snapshots = enforce_order(rows, |s| s.ts_ms, opts.ts_tolerance_ms)?;
    Ok(DepthParse { snapshots, resorted_rows: resorted })
}

/// Writes trades in the canonical CSV layout. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_trades_csv(trades: &[Trade], out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ts_ms", "price", "qty", "is_buyer_maker"])?;
    for t in trades {
        w.write_record([t.ts_ms.to_string(), t.price.to_string(), t.size.to_string(), t.buyer_is_maker.to_string()])?;
    }
    w.flush()
}

pub fn write_depth_csv(snapshots: &[LobSnapshot], out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(depth_columns())?;
    let mut row = Vec::with_capacity(1 + 4 * DEPTH);
    for s in snapshots {
        row.clear();
        row.push(s.ts_ms.to_string());
        row.extend(s.bids.iter().map(|l| l.price.to_string()));
        row.extend(s.bids.iter().map(|l| l.size.to_string()));
        row.extend(s.asks.iter().map(|l| l.price.to_string()));
        row.extend(s.asks.iter().map(|l| l.size.to_string()));
        w.write_record(&row)?;
    }
    w.flush()
}
