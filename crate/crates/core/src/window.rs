//! Fixed-length order-flow windows and their walk-forward schedule.

use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bookstate::{BookTimeline, BookView};
use crate::marketdata::{Day, SecondRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("day covers {len_s} s but one window plus horizon needs {needed_s} s")]
    DayTooShort { len_s: i64, needed_s: i64 },
    #[error("window needs {expected} aligned seconds, got {records} records and {books} book views")]
    ShapeMismatch { expected: usize, records: usize, books: usize },
    #[error("window seconds are not consecutive at offset {offset}")]
    Gap { offset: usize },
}

/// `records.len()` consecutive seconds with the reconstructed book at the
/// end of each of them.
#[derive(Debug, Clone)]
pub struct OrderFlowWindow<'a> {
    pub start_s: i64,
    pub records: &'a [SecondRecord],
    pub books: Vec<Arc<BookView>>,
}

impl<'a> OrderFlowWindow<'a> {
    pub fn new(records: &'a [SecondRecord], books: Vec<Arc<BookView>>) -> Result<Self, WindowError> {
        if records.is_empty() || records.len() != books.len() {
            return Err(WindowError::ShapeMismatch {
                expected: books.len(),
                records: records.len(),
                books: books.len(),
            });
        }
        if let Some(offset) = records.windows(2).position(|w| w[1].ts_s != w[0].ts_s + 1) {
            return Err(WindowError::Gap { offset: offset + 1 });
        }
        Ok(Self { start_s: records[0].ts_s, records, books })
    }

    pub fn len_s(&self) -> usize {
        self.records.len()
    }

    /// Timestamp of the last second inside the window.
    pub fn end_s(&self) -> i64 {
        self.start_s + self.records.len() as i64 - 1
    }

    pub fn first_mid(&self) -> f64 {
        self.records[0].mid()
    }
}

/// Overlapping windows of `window_s` seconds started every `stride_s`
/// seconds, keeping `horizon_s` seconds after each window for its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkForward {
    pub window_s: i64,
    pub stride_s: i64,
    pub horizon_s: i64,
}

impl WalkForward {
    /// Number of windows in a day of `len_s` seconds:
    /// `floor((len_s - window_s - horizon_s) / stride_s) + 1`.
    pub fn count(&self, len_s: i64) -> Result<usize, WindowError> {
        let needed_s = self.window_s + self.horizon_s;
        if len_s < needed_s || self.window_s <= 0 || self.stride_s <= 0 {
            return Err(WindowError::DayTooShort { len_s, needed_s });
        }
        Ok(((len_s - needed_s) / self.stride_s + 1) as usize)
    }

    /// Window start offsets relative to the day start.
    pub fn offsets(&self, len_s: i64) -> Result<impl Iterator<Item = i64>, WindowError> {
        let count = self.count(len_s)?;
        let stride = self.stride_s;
        Ok((0..count as i64).map(move |k| k * stride))
    }
}

const CHUNK: usize = 32;

/// Streams the day's walk-forward windows through `map`, handing results
/// to `sink` in window order. The book is folded once; only the views of
/// the current window are kept alive. With `parallel`, each chunk of
/// windows is mapped on the rayon pool.
pub fn walk_windows<T, E, M, S>(day: &Day, plan: &WalkForward, parallel: bool, map: M, mut sink: S) -> Result<usize, E>
where
    T: Send,
    E: Send + From<WindowError>,
    M: Fn(&OrderFlowWindow<'_>) -> Result<T, E> + Sync,
    S: FnMut(T) -> Result<(), E>,
{
    let count = plan.count(day.len_s())?;
    let window = plan.window_s as usize;
    let stride = plan.stride_s as usize;
    let last_end = (count - 1) * stride + window;
    let mut views: VecDeque<Arc<BookView>> = VecDeque::with_capacity(window + 1);
    let mut pending: Vec<OrderFlowWindow<'_>> = Vec::with_capacity(CHUNK);
    let mut emitted = 0usize;

    let mut flush = |pending: &mut Vec<OrderFlowWindow<'_>>| -> Result<(), E> {
        let results: Vec<Result<T, E>> =
            if parallel { pending.par_iter().map(&map).collect() } else { pending.iter().map(&map).collect() };
        pending.clear();
        for r in results {
            sink(r?)?;
        }
        Ok(())
    };

    for (i, view) in BookTimeline::new(day).enumerate().take(last_end) {
        views.push_back(view);
        if views.len() > window {
            views.pop_front();
        }
        let end = i + 1;
        if end >= window && (end - window).is_multiple_of(stride) {
            let offset = end - window;
            let w = OrderFlowWindow::new(&day.records[offset..end], views.iter().cloned().collect())?;
            pending.push(w);
            emitted += 1;
            if pending.len() == CHUNK {
                flush(&mut pending)?;
            }
        }
    }
    flush(&mut pending)?;
    debug_assert_eq!(emitted, count);
    Ok(emitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{gen_synthetic_flow, SynthConfig};

    #[test]
    fn full_day_count() {
        let plan = WalkForward { window_s: 240, stride_s: 10, horizon_s: 60 };
        assert_eq!(plan.count(86_400).unwrap(), 8611);
        assert_eq!(plan.count(300).unwrap(), 1);
        assert_eq!(plan.count(299), Err(WindowError::DayTooShort { len_s: 299, needed_s: 300 }));
    }

    #[test]
    fn neighbours_overlap_by_window_minus_stride() {
        let plan = WalkForward { window_s: 240, stride_s: 10, horizon_s: 60 };
        let offsets: Vec<i64> = plan.offsets(1000).unwrap().collect();
        for w in offsets.windows(2) {
            let overlap = (w[0] + plan.window_s).min(w[1] + plan.window_s) - w[1];
            assert_eq!(overlap, 230);
        }
    }

    #[test]
    fn streamed_windows_match_schedule() {
        let cfg = SynthConfig::steady(400, 2e-4);
        let (trades, snaps) = gen_synthetic_flow(&cfg, 1).unwrap();
        let day = Day::from_streams(None, &trades, snaps).unwrap();
        let plan = WalkForward { window_s: 60, stride_s: 25, horizon_s: 30 };
        let mut starts = Vec::new();
        let n = walk_windows::<_, WindowError, _, _>(
            &day,
            &plan,
            false,
            |w| {
                assert_eq!(w.len_s(), 60);
                assert!(w.books.iter().zip(w.records).all(|(b, r)| b.ts_s == r.ts_s));
                Ok(w.start_s)
            },
            |s| {
                starts.push(s);
                Ok(())
            },
        )
        .unwrap();
        let expected: Vec<i64> = plan.offsets(day.len_s()).unwrap().map(|o| day.start_s + o).collect();
        assert_eq!(n, expected.len());
        assert_eq!(starts, expected);

        let mut par = Vec::new();
        walk_windows::<_, WindowError, _, _>(
            &day,
            &plan,
            true,
            |w| Ok(w.start_s),
            |s| {
                par.push(s);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(par, starts);
    }
}
