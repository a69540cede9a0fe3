use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use crate::broker::SubscriberId;
use crate::model::micros_of;

pub const RATE_BIN: Duration = Duration::from_secs(600);

/// Exact latency distribution in microseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Histogram {
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl Histogram {
    pub fn record(&mut self, micros: u64) {
        *self.counts.entry(micros).or_default() += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (v, c) in &other.counts {
            *self.counts.entry(*v).or_default() += c;
        }
        self.total += other.total;
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    /// Nearest-rank percentile, `q` in (0, 1].
    pub fn percentile(&self, q: f64) -> Option<u64> {
        if self.total == 0 {
            return None;
        }
        let rank = ((q * self.total as f64).ceil() as u64).clamp(1, self.total);
        let mut seen = 0;
        for (v, c) in &self.counts {
            seen += c;
            if seen >= rank {
                return Some(*v);
            }
        }
        unreachable!("rank never exceeds total")
    }

    pub fn max(&self) -> Option<u64> {
        self.counts.keys().next_back().copied()
    }

    /// Counts per power-of-two bucket `[lo, hi)`; the first bucket is `[0, 1)`.
    pub fn log2_buckets(&self) -> Vec<(u64, u64, u64)> {
        let mut buckets: BTreeMap<u32, u64> = BTreeMap::new();
        for (v, c) in &self.counts {
            let k = if *v == 0 { 0 } else { 64 - v.leading_zeros() };
            *buckets.entry(k).or_default() += c;
        }
        buckets
            .into_iter()
            .map(|(k, c)| {
                let (lo, hi) = if k == 0 { (0, 1) } else { (1u64 << (k - 1), 1u64 << k) };
                (lo, hi, c)
            })
            .collect()
    }

    pub fn summary(&self) -> LatencySummary {
        LatencySummary {
            count: self.total,
            p50: self.percentile(0.5).unwrap_or(0),
            p99: self.percentile(0.99).unwrap_or(0),
            max: self.max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LatencySummary {
    pub count: u64,
    pub p50: u64,
    pub p99: u64,
    pub max: u64,
}

/// End-to-end latency per subscriber and overall, QoI-induced delay excluded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatencyStats {
    pub per_subscriber: BTreeMap<SubscriberId, Histogram>,
    pub overall: Histogram,
    /// Deliveries per rate bin, keyed by bin start in microseconds.
    pub throughput: BTreeMap<u64, u64>,
    pub queue_high_watermarks: BTreeMap<SubscriberId, usize>,
}

impl LatencyStats {
    pub fn record(&mut self, subscriber: &SubscriberId, latency_micros: u64, at_micros: u64) {
        match self.per_subscriber.get_mut(subscriber) {
            Some(h) => h.record(latency_micros),
            None => {
                let mut h = Histogram::default();
                h.record(latency_micros);
                self.per_subscriber.insert(subscriber.clone(), h);
            }
        }
        self.overall.record(latency_micros);
        *self.throughput.entry(at_micros / micros_of(RATE_BIN) * micros_of(RATE_BIN)).or_default() += 1;
    }
}

/// Generated notifications per feed and 10-minute bin, with the expected
/// count from the rate model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateSeries {
    pub generated: BTreeMap<(u64, Arc<str>), u64>,
    pub expected: BTreeMap<(u64, Arc<str>), f64>,
}

impl RateSeries {
    pub fn record(&mut self, feed: &Arc<str>, at_micros: u64) {
        let bin = at_micros / micros_of(RATE_BIN) * micros_of(RATE_BIN);
        match self.generated.get_mut(&(bin, feed.clone())) {
            Some(c) => *c += 1,
            None => {
                self.generated.insert((bin, feed.clone()), 1);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.generated.values().sum()
    }
}

pub const LATENCY_HEADER: &str = "# latency = deliver_ts - release_ts in microseconds; QoI-induced delay (delayed, \
throttled, aggregated, intraday, end-of-day holding) is excluded\n";

pub fn format_latency_histogram(stats: &LatencyStats) -> String {
    let mut out = String::from(LATENCY_HEADER);
    out.push_str("scope|bucket_lo_us|bucket_hi_us|count\n");
    let scopes = std::iter::once(("*".to_string(), &stats.overall))
        .chain(stats.per_subscriber.iter().map(|(s, h)| (s.to_string(), h)));
    for (scope, h) in scopes {
        for (lo, hi, c) in h.log2_buckets() {
            let _ = writeln!(out, "{scope}|{lo}|{hi}|{c}");
        }
    }
    out
}

pub fn format_latency_summary(stats: &LatencyStats) -> String {
    let mut out = String::from(LATENCY_HEADER);
    out.push_str("scope|count|p50_us|p99_us|max_us|queue_high_watermark\n");
    if stats.overall.count() == 0 && stats.queue_high_watermarks.is_empty() {
        return out;
    }
    let s = stats.overall.summary();
    let hw = stats.queue_high_watermarks.values().max().copied().unwrap_or(0);
    let _ = writeln!(out, "*|{}|{}|{}|{}|{hw}", s.count, s.p50, s.p99, s.max);
    let mut subs: Vec<&SubscriberId> = stats.per_subscriber.keys().chain(stats.queue_high_watermarks.keys()).collect();
    subs.sort();
    subs.dedup();
    for sub in subs {
        let s = stats.per_subscriber.get(sub).map(Histogram::summary).unwrap_or_default();
        let hw = stats.queue_high_watermarks.get(sub).copied().unwrap_or(0);
        let _ = writeln!(out, "{sub}|{}|{}|{}|{}|{hw}", s.count, s.p50, s.p99, s.max);
    }
    out
}

pub fn format_rate_series(series: &RateSeries) -> String {
    let mut out = String::from("bin_start_us|feed|generated|expected\n");
    let mut keys: Vec<&(u64, Arc<str>)> = series.generated.keys().chain(series.expected.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let g = series.generated.get(key).copied().unwrap_or(0);
        let e = series.expected.get(key).copied().unwrap_or(0.0);
        let _ = writeln!(out, "{}|{}|{g}|{e:.3}", key.0, key.1);
    }
    out
}

pub fn format_throughput(stats: &LatencyStats) -> String {
    let mut out = String::from("bin_start_us|delivered|per_second\n");
    for (bin, c) in &stats.throughput {
        let _ = writeln!(out, "{bin}|{c}|{:.3}", *c as f64 / RATE_BIN.as_secs_f64());
    }
    out
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let mut h = Histogram::default();
        for v in 1..=100 {
            h.record(v);
        }
        assert_eq!(h.percentile(0.5), Some(50));
        assert_eq!(h.percentile(0.99), Some(99));
        assert_eq!(h.max(), Some(100));
        assert_eq!(Histogram::default().percentile(0.5), None);
    }

    #[test]
    fn log2_buckets() {
        let mut h = Histogram::default();
        for v in [0, 1, 2, 3, 4, 1000] {
            h.record(v);
        }
        assert_eq!(h.log2_buckets(), vec![(0, 1, 1), (1, 2, 1), (2, 4, 2), (4, 8, 1), (512, 1024, 1)]);
    }

    #[test]
    fn empty_outputs_are_headers_only() {
        let s = LatencyStats::default();
        assert_eq!(format_latency_histogram(&s), format!("{LATENCY_HEADER}scope|bucket_lo_us|bucket_hi_us|count\n"));
        assert_eq!(format_rate_series(&RateSeries::default()), "bin_start_us|feed|generated|expected\n");
    }
}
