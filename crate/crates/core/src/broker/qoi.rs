//! Edge-side QoI degradation for one subscription.
//!
//! A notification passes three stages in turn:
//!
//! 1. completeness: `Throttled(r)` releases at most one notification per
//!    symbol per slot, slots lying on the grid of multiples of `ceil(1s / r)`.
//!    A notification arriving at `t` is eligible from the first slot `>= t`.
//!    `ConflateLatest` releases only the newest pending value; `Lossless`
//!    queues and drains one per slot.
//! 2. granularity: `Aggregated(w)` folds ticks into OHLC bars over windows
//!    `[k*w, (k+1)*w)` and releases each bar at its window end. Other
//!    notification kinds pass through.
//! 3. timeliness: `Delayed(d)` adds `d`; `IntraDay` holds until the next
//!    hourly snapshot and `EndOfDay` until the next UTC midnight (the
//!    boundary itself counts).
//!
//! Releases happen in time order. Work due at `t` runs once the stream has
//! moved past `t`, so everything arriving at `t` can still join it.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use super::subscription::DeliveryPolicy;
use crate::model::{micros_of, Completeness, Granularity, Notification, QoISpec, SymbolRef, Timeliness, VirtualTime, MICROS_PER_DAY};
use crate::store::{BarBuilder, OhlcBar};

pub const INTRADAY_SNAPSHOT: Duration = Duration::from_secs(3600);

/// A bar together with the last tick folded into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarDelivery {
    pub bar: OhlcBar,
    pub last: Arc<Notification>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveredItem {
    Notification(Arc<Notification>),
    Bar(Arc<BarDelivery>),
}

impl DeliveredItem {
    /// The notification whose identity (feed, channel, seq) the item carries:
    /// itself, or the last tick of a bar.
    pub fn anchor(&self) -> &Notification {
        match self {
            DeliveredItem::Notification(n) => n,
            DeliveredItem::Bar(b) => &b.last,
        }
    }

    pub fn symbol(&self) -> &SymbolRef {
        &self.anchor().symbol
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Release {
    pub item: DeliveredItem,
    pub release_ts: VirtualTime,
}

pub fn throttle_interval(max_rate: u32) -> u64 {
    1_000_000u64.div_ceil(max_rate as u64)
}

pub fn timeliness_release(t: VirtualTime, timeliness: Timeliness) -> VirtualTime {
    match timeliness {
        Timeliness::RealTime => t,
        Timeliness::Delayed(d) => t + d,
        Timeliness::IntraDay => t.ceil_to(INTRADAY_SNAPSHOT),
        Timeliness::EndOfDay => t.ceil_to(Duration::from_micros(MICROS_PER_DAY)),
    }
}

#[derive(Debug, Default)]
struct SymbolThrottle {
    queue: VecDeque<Arc<Notification>>,
    scheduled: Option<u64>,
    last_release: Option<u64>,
}

#[derive(Debug)]
struct ThrottleStage {
    interval: u64,
    policy: DeliveryPolicy,
    symbols: HashMap<SymbolRef, SymbolThrottle>,
    slots: BTreeSet<(u64, SymbolRef)>,
    queued: usize,
}

impl ThrottleStage {
    fn push(&mut self, n: Arc<Notification>, t: u64) {
        let state = self.symbols.entry(n.symbol.clone()).or_default();
        match self.policy {
            DeliveryPolicy::ConflateLatest => {
                if state.queue.is_empty() {
                    state.queue.push_back(n);
                    self.queued += 1;
                } else {
                    state.queue[0] = n;
                }
            }
            DeliveryPolicy::Lossless => {
                state.queue.push_back(n);
                self.queued += 1;
            }
        }
        if state.scheduled.is_none() {
            let grid = t.div_ceil(self.interval) * self.interval;
            let slot = state.last_release.map_or(grid, |last| grid.max(last + self.interval));
            state.scheduled = Some(slot);
            self.slots.insert((slot, state.queue[0].symbol.clone()));
        }
    }

    fn fire(&mut self, slot: u64, symbol: &SymbolRef) -> Arc<Notification> {
        self.slots.remove(&(slot, symbol.clone()));
        let state = self.symbols.get_mut(symbol).expect("scheduled symbol has state");
        let n = state.queue.pop_front().expect("scheduled symbol has a pending value");
        self.queued -= 1;
        state.last_release = Some(slot);
        state.scheduled = None;
        if !state.queue.is_empty() {
            let next = slot + self.interval;
            state.scheduled = Some(next);
            self.slots.insert((next, symbol.clone()));
        }
        n
    }
}

#[derive(Debug)]
struct OpenBar {
    start: u64,
    builder: BarBuilder,
    last: Arc<Notification>,
}

#[derive(Debug)]
struct AggregateStage {
    window: u64,
    bars: HashMap<SymbolRef, OpenBar>,
    closes: BTreeSet<(u64, SymbolRef)>,
}

impl AggregateStage {
    fn close(&mut self, symbol: &SymbolRef) -> Release {
        let open = self.bars.remove(symbol).expect("closing an open bar");
        let end = open.start + self.window;
        self.closes.remove(&(end, symbol.clone()));
        Release {
            item: DeliveredItem::Bar(Arc::new(BarDelivery {
                bar: open.builder.finish(
                    symbol.clone(),
                    VirtualTime::from_micros(open.start),
                    Duration::from_micros(self.window),
                ),
                last: open.last,
            })),
            release_ts: VirtualTime::from_micros(end),
        }
    }

    /// Returns a pass-through release for non-ticks, or the bar it closed early.
    fn push(&mut self, n: Arc<Notification>, t: u64, out: &mut Vec<Release>) {
        let Some(tick) = n.tick() else {
            out.push(Release {
                item: DeliveredItem::Notification(n),
                release_ts: VirtualTime::from_micros(t),
            });
            return;
        };
        let (mid, vol) = (tick.mid(), tick.volume());
        let start = t / self.window * self.window;
        if self.bars.get(&n.symbol).is_some_and(|b| b.start != start) {
            // previous window ended exactly at t and has not been flushed yet
            out.push(self.close(&n.symbol));
        }
        match self.bars.get_mut(&n.symbol) {
            Some(open) => {
                open.builder.push(mid, vol);
                open.last = n;
            }
            None => {
                self.closes.insert((start + self.window, n.symbol.clone()));
                self.bars.insert(
                    n.symbol.clone(),
                    OpenBar {
                        start,
                        builder: BarBuilder::new(mid, vol),
                        last: n,
                    },
                );
            }
        }
    }
}

#[derive(Debug)]
pub struct Degrader {
    qoi: QoISpec,
    throttle: Option<ThrottleStage>,
    aggregate: Option<AggregateStage>,
    now: u64,
    queue_high_watermark: usize,
}

impl Degrader {
    pub fn new(qoi: QoISpec, policy: DeliveryPolicy) -> Self {
        let throttle = match qoi.completeness {
            Completeness::Full => None,
            Completeness::Throttled(r) => Some(ThrottleStage {
                interval: throttle_interval(r.get()),
                policy,
                symbols: HashMap::new(),
                slots: BTreeSet::new(),
                queued: 0,
            }),
        };
        let aggregate = match qoi.granularity {
            Granularity::TickLevel => None,
            Granularity::Aggregated(w) => Some(AggregateStage {
                window: micros_of(w),
                bars: HashMap::new(),
                closes: BTreeSet::new(),
            }),
        };
        Degrader {
            qoi,
            throttle,
            aggregate,
            now: 0,
            queue_high_watermark: 0,
        }
    }

    pub fn qoi(&self) -> &QoISpec {
        &self.qoi
    }

    /// True when nothing is held back by any stage.
    pub fn is_identity(&self) -> bool {
        self.qoi == QoISpec::FULL
    }

    /// Most notifications ever held at once by the throttle stage.
    pub fn queue_high_watermark(&self) -> usize {
        self.queue_high_watermark
    }

    pub fn pending(&self) -> usize {
        self.throttle.as_ref().map_or(0, |t| t.queued) + self.aggregate.as_ref().map_or(0, |a| a.bars.len())
    }

    /// Feeds one notification at its publish time. Times must not decrease.
    pub fn push(&mut self, n: Arc<Notification>, out: &mut Vec<Release>) {
        let t = n.publish_ts.as_micros();
        assert!(t >= self.now, "degrader input went back in time");
        self.run_until(Some(t), out);
        self.now = t;
        match &mut self.throttle {
            Some(th) => {
                th.push(n, t);
                self.queue_high_watermark = self.queue_high_watermark.max(th.queued);
            }
            None => self.to_granularity(n, t, out),
        }
    }

    /// Performs all work due strictly before `t`.
    pub fn advance_to(&mut self, t: VirtualTime, out: &mut Vec<Release>) {
        let t = t.as_micros();
        if t > self.now {
            self.run_until(Some(t), out);
            self.now = t;
        }
    }

    /// Flushes everything still held, at the times it falls due.
    pub fn finish(&mut self, out: &mut Vec<Release>) {
        self.run_until(None, out);
    }

    fn to_granularity(&mut self, n: Arc<Notification>, t: u64, out: &mut Vec<Release>) {
        let start = out.len();
        match &mut self.aggregate {
            Some(agg) => agg.push(n, t, out),
            None => out.push(Release {
                item: DeliveredItem::Notification(n),
                release_ts: VirtualTime::from_micros(t),
            }),
        }
        for r in &mut out[start..] {
            r.release_ts = timeliness_release(r.release_ts, self.qoi.timeliness);
        }
    }

    fn run_until(&mut self, bound: Option<u64>, out: &mut Vec<Release>) {
        loop {
            let slot = self.throttle.as_ref().and_then(|th| th.slots.first().cloned());
            let close = self.aggregate.as_ref().and_then(|a| a.closes.first().cloned());
            let next_slot_first = match (&slot, &close) {
                (Some(s), Some(c)) => s.0 <= c.0,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => return,
            };
            let due = if next_slot_first { slot.as_ref().unwrap().0 } else { close.as_ref().unwrap().0 };
            if bound.is_some_and(|b| due >= b) {
                return;
            }
            if next_slot_first {
                let (t, symbol) = slot.unwrap();
                let n = self.throttle.as_mut().unwrap().fire(t, &symbol);
                self.to_granularity(n, t, out);
            } else {
                let (_, symbol) = close.unwrap();
                let start = out.len();
                let r = self.aggregate.as_mut().unwrap().close(&symbol);
                out.push(r);
                for r in &mut out[start..] {
                    r.release_ts = timeliness_release(r.release_ts, self.qoi.timeliness);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Payload, Price, TickFlags, TickPayload};

    fn tick(sym: &str, ts: u64, seq: u32, mid: i64) -> Arc<Notification> {
        Arc::new(Notification::new(
            Arc::from("F"),
            0,
            seq,
            sym.parse().unwrap(),
            VirtualTime::from_micros(ts),
            Payload::Tick(TickPayload::quote(
                Price::from_raw(mid - 1),
                Price::from_raw(mid + 1),
                1,
                1,
                VirtualTime::from_micros(ts),
                TickFlags::empty(),
            )),
        ))
    }

    fn seqs(out: &[Release]) -> Vec<(u32, u64)> {
        out.iter()
            .map(|r| (r.item.anchor().seq_no, r.release_ts.as_micros()))
            .collect()
    }

    #[test]
    fn full_realtime_is_identity() {
        let mut d = Degrader::new(QoISpec::FULL, DeliveryPolicy::Lossless);
        let mut out = Vec::new();
        for i in 1..=3 {
            d.push(tick("A@XNAS", i * 10, i as u32, 100), &mut out);
        }
        assert_eq!(seqs(&out), vec![(1, 10), (2, 20), (3, 30)]);
    }

    #[test]
    fn delayed_fifteen_minutes() {
        let q: QoISpec = "delayed:15m,tick,full".parse().unwrap();
        let mut d = Degrader::new(q, DeliveryPolicy::Lossless);
        let mut out = Vec::new();
        d.push(tick("A@XNAS", 1_000, 1, 100), &mut out);
        assert_eq!(seqs(&out), vec![(1, 1_000 + 900_000_000)]);
    }

    #[test]
    fn conflation_keeps_the_last_of_a_second() {
        let q: QoISpec = "rt,tick,throttled:1".parse().unwrap();
        let mut d = Degrader::new(q, DeliveryPolicy::ConflateLatest);
        let mut out = Vec::new();
        for i in 0..5u64 {
            d.push(tick("A@XNAS", 100_000 + i * 200_000, i as u32 + 1, 100), &mut out);
        }
        assert!(out.is_empty());
        d.finish(&mut out);
        assert_eq!(seqs(&out), vec![(5, 1_000_000)]);
    }

    #[test]
    fn lossless_throttle_drains_one_per_slot() {
        let q: QoISpec = "rt,tick,throttled:2".parse().unwrap();
        let mut d = Degrader::new(q, DeliveryPolicy::Lossless);
        let mut out = Vec::new();
        for i in 0..3u64 {
            d.push(tick("A@XNAS", 10 + i, i as u32 + 1, 100), &mut out);
        }
        assert_eq!(d.queue_high_watermark(), 3);
        d.advance_to(VirtualTime::from_micros(600_000), &mut out);
        assert_eq!(seqs(&out), vec![(1, 500_000)]);
        d.finish(&mut out);
        assert_eq!(seqs(&out), vec![(1, 500_000), (2, 1_000_000), (3, 1_500_000)]);
    }

    #[test]
    fn slot_on_arrival_time_releases_at_that_time() {
        let q: QoISpec = "rt,tick,throttled:1".parse().unwrap();
        let mut d = Degrader::new(q, DeliveryPolicy::ConflateLatest);
        let mut out = Vec::new();
        d.push(tick("A@XNAS", 2_000_000, 1, 100), &mut out);
        d.push(tick("A@XNAS", 2_000_000, 2, 101), &mut out);
        d.push(tick("A@XNAS", 2_000_001, 3, 102), &mut out);
        d.finish(&mut out);
        assert_eq!(seqs(&out), vec![(2, 2_000_000), (3, 3_000_000)]);
    }

    #[test]
    fn aggregated_bars_close_at_window_end() {
        let q: QoISpec = "rt,agg:1s,full".parse().unwrap();
        let mut d = Degrader::new(q, DeliveryPolicy::Lossless);
        let mut out = Vec::new();
        d.push(tick("A@XNAS", 100, 1, 100), &mut out);
        d.push(tick("A@XNAS", 500_000, 2, 105), &mut out);
        d.push(tick("A@XNAS", 900_000, 3, 95), &mut out);
        d.push(tick("A@XNAS", 1_000_000, 4, 99), &mut out);
        assert_eq!(out.len(), 1);
        let DeliveredItem::Bar(b) = &out[0].item else { panic!("expected a bar") };
        assert_eq!(out[0].release_ts, VirtualTime::from_micros(1_000_000));
        assert_eq!(
            (b.bar.open.raw(), b.bar.high.raw(), b.bar.low.raw(), b.bar.close.raw(), b.bar.tick_count),
            (100, 105, 95, 95, 3)
        );
        assert_eq!(b.last.seq_no, 3);
        d.finish(&mut out);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].release_ts, VirtualTime::from_micros(2_000_000));
    }

    #[test]
    fn end_of_day_holds_until_midnight() {
        let q: QoISpec = "eod,agg:1h,full".parse().unwrap();
        let mut d = Degrader::new(q, DeliveryPolicy::Lossless);
        let mut out = Vec::new();
        d.push(tick("A@XNAS", 3_600_000_000 * 5, 1, 100), &mut out);
        d.finish(&mut out);
        assert_eq!(out[0].release_ts, VirtualTime::from_micros(MICROS_PER_DAY));
    }
}
