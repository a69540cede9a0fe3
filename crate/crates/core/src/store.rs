//! Event store: a last-value cache in front of an append-only, bounded
//! history, with intraday and end-of-day OHLC aggregation over mid-prices.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::feed::vfb;
use crate::model::{compare_notifications, micros_of, Notification, Price, SymbolRef, VirtualTime};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("history is full ({capacity} notifications) and no spill directory is configured")]
    StorageFull { capacity: usize },
    #[error("invalid range: from {from} is after to {to}")]
    InvalidRange { from: VirtualTime, to: VirtualTime },
    #[error("invalid aggregation window: {0}")]
    InvalidWindow(String),
    #[error("spill failed: {0}")]
    Io(#[from] io::Error),
}

/// Half-open trading session `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TradingDay {
    pub start: VirtualTime,
    pub end: VirtualTime,
}

impl TradingDay {
    pub fn new(start: VirtualTime, end: VirtualTime) -> Self {
        TradingDay { start, end }
    }

    pub fn len(&self) -> Duration {
        self.end - self.start
    }

    pub fn contains(&self, t: VirtualTime) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OhlcBar {
    pub symbol: SymbolRef,
    pub window_start: VirtualTime,
    pub window_len: Duration,
    pub open: Price,
    pub high: Price,
    pub low: Price,
    pub close: Price,
    pub tick_count: u32,
    pub volume: u64,
}

impl OhlcBar {
    pub fn window_end(&self) -> VirtualTime {
        self.window_start + self.window_len
    }

    /// `symbol|mic|window_start|O|H|L|C|count|volume`
    pub fn export_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.symbol.local_symbol(),
            self.symbol.mic(),
            self.window_start,
            self.open,
            self.high,
            self.low,
            self.close,
            self.tick_count,
            self.volume
        )
    }
}

/// Running OHLC state for one window, fed mid-prices in notification order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarBuilder {
    open: Price,
    high: Price,
    low: Price,
    close: Price,
    tick_count: u32,
    volume: u64,
}

impl BarBuilder {
    pub fn new(mid: Price, volume: u64) -> Self {
        BarBuilder {
            open: mid,
            high: mid,
            low: mid,
            close: mid,
            tick_count: 1,
            volume,
        }
    }

    pub fn push(&mut self, mid: Price, volume: u64) {
        self.high = self.high.max(mid);
        self.low = self.low.min(mid);
        self.close = mid;
        self.tick_count += 1;
        self.volume += volume;
    }

    pub fn finish(&self, symbol: SymbolRef, window_start: VirtualTime, window_len: Duration) -> OhlcBar {
        OhlcBar {
            symbol,
            window_start,
            window_len,
            open: self.open,
            high: self.high,
            low: self.low,
            close: self.close,
            tick_count: self.tick_count,
            volume: self.volume,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CachedValue {
    pub notification: Notification,
    pub update_count: u64,
}

#[derive(Debug)]
pub struct EventStore {
    history: Vec<Notification>,
    capacity: usize,
    by_symbol: HashMap<SymbolRef, Vec<usize>>,
    last_values: HashMap<SymbolRef, CachedValue>,
    spill_dir: Option<PathBuf>,
    spilled: u64,
    evict: bool,
    evicted: u64,
}

impl EventStore {
    pub fn new(capacity: usize) -> Self {
        EventStore {
            history: Vec::new(),
            capacity,
            by_symbol: HashMap::new(),
            last_values: HashMap::new(),
            spill_dir: None,
            spilled: 0,
            evict: false,
            evicted: 0,
        }
    }

    /// When the in-memory history fills up, its contents are appended to
    /// one VFB1 file per feed in `dir` and memory is released. Range queries
    /// and aggregation only see the in-memory part.
    pub fn with_spill_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.spill_dir = Some(dir.into());
        self
    }

    /// Without a spill directory, a full history is discarded instead of
    /// failing the append. Last values survive.
    pub fn with_eviction(mut self) -> Self {
        self.evict = true;
        self
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn spilled(&self) -> u64 {
        self.spilled
    }

    pub fn history(&self) -> &[Notification] {
        &self.history
    }

    pub fn last_value(&self, symbol: &SymbolRef) -> Option<&CachedValue> {
        self.last_values.get(symbol)
    }

    pub fn last_values(&self) -> impl Iterator<Item = (&SymbolRef, &CachedValue)> {
        self.last_values.iter()
    }

    pub fn append(&mut self, n: Notification) -> Result<(), StoreError> {
        if self.history.len() >= self.capacity {
            if self.spill_dir.is_some() {
                self.spill()?;
            } else if self.evict {
                self.evicted += self.history.len() as u64;
                self.history.clear();
                self.by_symbol.clear();
            } else {
                return Err(StoreError::StorageFull { capacity: self.capacity });
            }
        }
        match self.last_values.get_mut(&n.symbol) {
            Some(cached) => {
                cached.update_count += 1;
                if compare_notifications(&n, &cached.notification).is_gt() {
                    cached.notification = n.clone();
                }
            }
            None => {
                self.last_values.insert(
                    n.symbol.clone(),
                    CachedValue {
                        notification: n.clone(),
                        update_count: 1,
                    },
                );
            }
        }
        self.by_symbol.entry(n.symbol.clone()).or_default().push(self.history.len());
        self.history.push(n);
        Ok(())
    }

    /// Stored notifications of `symbol` with `from <= publish_ts < to`, in
    /// notification order.
    pub fn query_range(&self, symbol: &SymbolRef, from: VirtualTime, to: VirtualTime) -> Result<Vec<&Notification>, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRange { from, to });
        }
        let Some(indices) = self.by_symbol.get(symbol) else {
            return Ok(Vec::new());
        };
        let mut out: Vec<&Notification> = indices
            .iter()
            .map(|&i| &self.history[i])
            .filter(|n| from <= n.publish_ts && n.publish_ts < to)
            .collect();
        out.sort_by(|a, b| compare_notifications(a, b));
        Ok(out)
    }

    /// One bar per non-empty `window` of `day`. `window` must divide the
    /// session length; `window == day.len()` gives the end-of-day bar.
    pub fn aggregate_bars(&self, symbol: &SymbolRef, window: Duration, day: TradingDay) -> Result<Vec<OhlcBar>, StoreError> {
        let w = micros_of(window);
        let len = micros_of(day.len());
        if w == 0 || len == 0 || !len.is_multiple_of(w) {
            return Err(StoreError::InvalidWindow(format!(
                "{window:?} does not evenly divide a {:?} session",
                day.len()
            )));
        }
        let mut windows: BTreeMap<u64, BarBuilder> = BTreeMap::new();
        for n in self.query_range(symbol, day.start, day.end)? {
            let Some(tick) = n.tick() else { continue };
            let k = (n.publish_ts.as_micros() - day.start.as_micros()) / w;
            let (mid, vol) = (tick.mid(), tick.volume());
            windows
                .entry(k)
                .and_modify(|b| b.push(mid, vol))
                .or_insert_with(|| BarBuilder::new(mid, vol));
        }
        Ok(windows
            .into_iter()
            .map(|(k, b)| b.finish(symbol.clone(), VirtualTime::from_micros(day.start.as_micros() + k * w), window))
            .collect())
    }

    /// Appends the in-memory history to the spill files and clears it.
    pub fn spill(&mut self) -> Result<(), StoreError> {
        let dir = self
            .spill_dir
            .clone()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no spill directory configured"))?;
        std::fs::create_dir_all(&dir)?;
        let mut writers: BTreeMap<Arc<str>, BufWriter<File>> = BTreeMap::new();
        let mut buf = Vec::with_capacity(256);
        for n in &self.history {
            if !writers.contains_key(&n.feed_id) {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(spill_path(&dir, &n.feed_id))?;
                writers.insert(n.feed_id.clone(), BufWriter::new(file));
            }
            buf.clear();
            vfb::encode_into(n, &mut buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            writers.get_mut(&n.feed_id).expect("writer inserted").write_all(&buf)?;
        }
        for (_, mut w) in writers {
            w.flush()?;
        }
        self.spilled += self.history.len() as u64;
        self.history.clear();
        self.by_symbol.clear();
        Ok(())
    }
}

/// File holding the spilled history of one feed.
pub fn spill_path(dir: &Path, feed_id: &str) -> PathBuf {
    let safe: String = feed_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("{safe}.vfb"))
}

/// Reads back a spill file written for `feed_id`. Enrichment is not persisted.
pub fn load_spill(path: &Path, feed_id: &Arc<str>) -> io::Result<Vec<Notification>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(frame) = vfb::read_frame(&mut reader)? {
        out.push(vfb::parse_vfb_frame(feed_id, &frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}
