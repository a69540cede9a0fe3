//! Independent oracles and random fixtures shared by the integration and
//! acceptance tests. Nothing here calls the production code it is checking.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use tickplant_core::broker::{BrokerId, BrokerTopology, DeliveredItem, Delivery, Link, SubscriberId, Subscription};
use tickplant_core::{
    Completeness, Granularity, Notification, NotificationKind, Payload, Price, QoISpec, SymbolRef, TickFlags,
    TickPayload, Timeliness, VirtualTime,
};

// ---------- arithmetic ----------

/// Round-half-to-even integer division, written out longhand.
pub fn half_even(num: i128, den: i128) -> i128 {
    assert!(den != 0);
    let (mut n, mut d) = (num, den);
    if d < 0 {
        n = -n;
        d = -d;
    }
    let q = n.div_euclid(d);
    let r = n.rem_euclid(d);
    match (2 * r).cmp(&d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    }
}

pub fn ref_mid(bid: i64, ask: i64) -> i64 {
    half_even(bid as i128 + ask as i128, 2) as i64
}

// ---------- random fixtures ----------

pub fn symbols(n: usize, mic: &str) -> Vec<SymbolRef> {
    (0..n)
        .map(|i| {
            let a = (b'A' + (i / 26 % 26) as u8) as char;
            let b = (b'A' + (i % 26) as u8) as char;
            format!("Q{a}{b}@{mic}").parse().unwrap()
        })
        .collect()
}

pub fn tick(feed: &Arc<str>, channel: u8, seq: u32, sym: &SymbolRef, ts: u64, bid: i64, ask: i64, bsz: u32, asz: u32) -> Notification {
    Notification::new(
        feed.clone(),
        channel,
        seq,
        sym.clone(),
        VirtualTime::from_micros(ts),
        Payload::Tick(TickPayload::quote(
            Price::from_raw(bid),
            Price::from_raw(ask),
            bsz,
            asz,
            VirtualTime::from_micros(ts),
            TickFlags::empty(),
        )),
    )
}

/// Time-ordered mixed stream over `feeds`, sequenced per (feed, channel).
/// About one in eight notifications is a statistics body.
pub fn random_stream<R: Rng>(
    rng: &mut R,
    feeds: &[(Arc<str>, Vec<SymbolRef>)],
    count: usize,
    max_gap_us: u64,
) -> Vec<Arc<Notification>> {
    let mut seqs: BTreeMap<(Arc<str>, u8), u32> = BTreeMap::new();
    let mut t = rng.gen_range(0..1_000_000u64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if rng.gen_bool(0.8) {
            t += rng.gen_range(0..=max_gap_us);
        }
        let (feed, syms) = &feeds[rng.gen_range(0..feeds.len())];
        let sym = &syms[rng.gen_range(0..syms.len())];
        let channel = rng.gen_range(0..2u8);
        let seq = seqs.entry((feed.clone(), channel)).or_insert(0);
        *seq += 1;
        let n = if rng.gen_ratio(1, 8) {
            Notification::with_body(
                feed.clone(),
                channel,
                *seq,
                NotificationKind::Statistics,
                sym.clone(),
                VirtualTime::from_micros(t),
                Arc::from(vec![7u8; rng.gen_range(1..40)]),
            )
        } else {
            let mid = rng.gen_range(1_000..2_000i64) * 100;
            let half = rng.gen_range(1..=20i64) * 50;
            tick(feed, channel, *seq, sym, t, mid - half, mid + half, rng.gen_range(1..500), rng.gen_range(1..500))
        };
        out.push(Arc::new(n));
    }
    out
}

pub fn random_qoi<R: Rng>(rng: &mut R) -> QoISpec {
    let timeliness = match rng.gen_range(0..4) {
        0 => Timeliness::RealTime,
        1 => Timeliness::Delayed(Duration::from_micros(rng.gen_range(1..20_000_000))),
        2 => Timeliness::IntraDay,
        _ => Timeliness::EndOfDay,
    };
    let granularity = match rng.gen_range(0..3) {
        0 => Granularity::TickLevel,
        1 => Granularity::Aggregated(Duration::from_secs(60)),
        _ => Granularity::Aggregated(Duration::from_micros(rng.gen_range(1..5_000_000))),
    };
    let completeness = match rng.gen_range(0..3) {
        0 => Completeness::Full,
        1 => Completeness::Throttled([1u32, 2, 3, 7, 10][rng.gen_range(0..5)].try_into().unwrap()),
        _ => Completeness::Throttled(rng.gen_range(1..100_000u32).try_into().unwrap()),
    };
    QoISpec::new(timeliness, granularity, completeness).unwrap()
}

// ---------- reference degrader ----------

/// What a subscriber receives, in a form both implementations can produce.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum RefItem {
    Note {
        feed: Arc<str>,
        channel: u8,
        seq: u32,
    },
    Bar {
        symbol: String,
        window_start: u64,
        window_len: u64,
        ohlc: [i64; 4],
        ticks: u32,
        volume: u64,
        last_seq: (Arc<str>, u8, u32),
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RefRelease {
    pub at: u64,
    pub item: RefItem,
}

pub fn from_delivered(item: &DeliveredItem, at: VirtualTime) -> RefRelease {
    let item = match item {
        DeliveredItem::Notification(n) => RefItem::Note {
            feed: n.feed_id.clone(),
            channel: n.channel_id,
            seq: n.seq_no,
        },
        DeliveredItem::Bar(b) => RefItem::Bar {
            symbol: b.bar.symbol.to_string(),
            window_start: b.bar.window_start.as_micros(),
            window_len: b.bar.window_len.as_micros() as u64,
            ohlc: [b.bar.open.raw(), b.bar.high.raw(), b.bar.low.raw(), b.bar.close.raw()],
            ticks: b.bar.tick_count,
            volume: b.bar.volume,
            last_seq: (b.last.feed_id.clone(), b.last.channel_id, b.last.seq_no),
        },
    };
    RefRelease { at: at.as_micros(), item }
}

fn ceil_mult(t: u64, p: u64) -> u64 {
    if t.is_multiple_of(p) {
        t
    } else {
        (t / p + 1) * p
    }
}

fn ref_timeliness(t: u64, tl: Timeliness) -> u64 {
    match tl {
        Timeliness::RealTime => t,
        Timeliness::Delayed(d) => t + d.as_micros() as u64,
        Timeliness::IntraDay => ceil_mult(t, 3_600_000_000),
        Timeliness::EndOfDay => ceil_mult(t, 86_400_000_000),
    }
}

/// Whole-stream reference for one subscription. `lossless` selects the
/// queueing throttle, otherwise only the newest pending value survives.
pub fn reference_degrade(stream: &[Arc<Notification>], qoi: QoISpec, lossless: bool) -> Vec<RefRelease> {
    // completeness: per symbol, independently
    let mut stage1: Vec<(u64, usize, Arc<Notification>)> = Vec::new();
    match qoi.completeness {
        Completeness::Full => {
            for (i, n) in stream.iter().enumerate() {
                stage1.push((n.publish_ts.as_micros(), i, n.clone()));
            }
        }
        Completeness::Throttled(r) => {
            let interval = 1_000_000_u64.div_ceil(r.get() as u64);
            let mut per_symbol: BTreeMap<SymbolRef, Vec<(usize, Arc<Notification>)>> = BTreeMap::new();
            for (i, n) in stream.iter().enumerate() {
                per_symbol.entry(n.symbol.clone()).or_default().push((i, n.clone()));
            }
            for arrivals in per_symbol.values() {
                if lossless {
                    let mut prev: Option<u64> = None;
                    for (i, n) in arrivals {
                        let grid = ceil_mult(n.publish_ts.as_micros(), interval);
                        let slot = prev.map_or(grid, |p| grid.max(p + interval));
                        stage1.push((slot, *i, n.clone()));
                        prev = Some(slot);
                    }
                } else {
                    let mut last: Option<u64> = None;
                    let mut pending: Option<(u64, usize, Arc<Notification>)> = None;
                    for (i, n) in arrivals {
                        let t = n.publish_ts.as_micros();
                        if let Some((slot, pi, pn)) = pending.take() {
                            if t > slot {
                                stage1.push((slot, pi, pn));
                                last = Some(slot);
                            } else {
                                pending = Some((slot, *i, n.clone()));
                                continue;
                            }
                        }
                        let grid = ceil_mult(t, interval);
                        let slot = last.map_or(grid, |l| grid.max(l + interval));
                        pending = Some((slot, *i, n.clone()));
                    }
                    if let Some(p) = pending {
                        stage1.push(p);
                    }
                }
            }
        }
    }
    stage1.sort_by_key(|(t, i, _)| (*t, *i));

    // granularity
    let mut stage2: Vec<RefRelease> = Vec::new();
    match qoi.granularity {
        Granularity::TickLevel => {
            for (t, _, n) in &stage1 {
                stage2.push(RefRelease {
                    at: *t,
                    item: RefItem::Note {
                        feed: n.feed_id.clone(),
                        channel: n.channel_id,
                        seq: n.seq_no,
                    },
                });
            }
        }
        Granularity::Aggregated(w) => {
            let w = w.as_micros() as u64;
            let mut windows: BTreeMap<(String, u64), Vec<Arc<Notification>>> = BTreeMap::new();
            for (t, _, n) in &stage1 {
                match &n.payload {
                    Payload::Tick(_) => windows.entry((n.symbol.to_string(), t / w)).or_default().push(n.clone()),
                    Payload::Body(_) => stage2.push(RefRelease {
                        at: *t,
                        item: RefItem::Note {
                            feed: n.feed_id.clone(),
                            channel: n.channel_id,
                            seq: n.seq_no,
                        },
                    }),
                }
            }
            for ((symbol, k), ticks) in windows {
                let mids: Vec<i64> = ticks
                    .iter()
                    .map(|n| match &n.payload {
                        Payload::Tick(t) => ref_mid(t.bid.raw(), t.ask.raw()),
                        Payload::Body(_) => unreachable!(),
                    })
                    .collect();
                let volume = ticks
                    .iter()
                    .map(|n| match &n.payload {
                        Payload::Tick(t) => t.bid_size as u64 + t.ask_size as u64,
                        Payload::Body(_) => 0,
                    })
                    .sum();
                let last = ticks.last().unwrap();
                stage2.push(RefRelease {
                    at: (k + 1) * w,
                    item: RefItem::Bar {
                        symbol,
                        window_start: k * w,
                        window_len: w,
                        ohlc: [mids[0], *mids.iter().max().unwrap(), *mids.iter().min().unwrap(), *mids.last().unwrap()],
                        ticks: ticks.len() as u32,
                        volume,
                        last_seq: (last.feed_id.clone(), last.channel_id, last.seq_no),
                    },
                });
            }
        }
    }

    // timeliness
    for r in &mut stage2 {
        r.at = ref_timeliness(r.at, qoi.timeliness);
    }
    stage2.sort();
    stage2
}

// ---------- topology and routing ----------

/// Connected random overlay with pairwise distinct link latencies, so the
/// minimum spanning tree is unique.
pub fn random_topology<R: Rng>(rng: &mut R, brokers: usize) -> BrokerTopology {
    let ids: Vec<BrokerId> = (0..brokers).map(|i| BrokerId::new(&format!("b{i}"))).collect();
    let mut used = BTreeSet::new();
    let mut latency = |rng: &mut R| loop {
        let l = rng.gen_range(1..50_000u64);
        if used.insert(l) {
            return Duration::from_micros(l);
        }
    };
    let mut links = Vec::new();
    let mut pairs = BTreeSet::new();
    for i in 1..brokers {
        let j = rng.gen_range(0..i);
        pairs.insert((j, i));
        links.push(Link::new(ids[j].clone(), ids[i].clone(), latency(rng)));
    }
    for _ in 0..rng.gen_range(0..=brokers) {
        let (a, b) = (rng.gen_range(0..brokers), rng.gen_range(0..brokers));
        let (a, b) = (a.min(b), a.max(b));
        if a != b && pairs.insert((a, b)) {
            links.push(Link::new(ids[a].clone(), ids[b].clone(), latency(rng)));
        }
    }
    BrokerTopology {
        brokers: ids.into_iter().collect(),
        links,
        ..Default::default()
    }
}

/// Prim's algorithm over the full link list: adjacency of the unique MST.
pub fn prim(topology: &BrokerTopology) -> BTreeMap<BrokerId, Vec<(BrokerId, u64)>> {
    let all: Vec<BrokerId> = topology.brokers.iter().cloned().collect();
    let mut adj: BTreeMap<BrokerId, Vec<(BrokerId, u64)>> = all.iter().map(|b| (b.clone(), Vec::new())).collect();
    let mut inside: BTreeSet<BrokerId> = BTreeSet::new();
    inside.insert(all[0].clone());
    while inside.len() < all.len() {
        let best = topology
            .links
            .iter()
            .filter(|l| inside.contains(&l.a) != inside.contains(&l.b))
            .min_by_key(|l| l.latency)
            .expect("overlay is connected");
        let lat = best.latency.as_micros() as u64;
        adj.get_mut(&best.a).unwrap().push((best.b.clone(), lat));
        adj.get_mut(&best.b).unwrap().push((best.a.clone(), lat));
        inside.insert(best.a.clone());
        inside.insert(best.b.clone());
    }
    adj
}

/// Every tree total over all spanning trees of a small graph, by subset
/// enumeration. Returns the minimum total latency.
pub fn brute_force_mst_total(topology: &BrokerTopology) -> u64 {
    let n = topology.brokers.len();
    let m = topology.links.len();
    assert!(m <= 20, "enumeration is exponential");
    let index: BTreeMap<&BrokerId, usize> = topology.brokers.iter().enumerate().map(|(i, b)| (b, i)).collect();
    let mut best = u64::MAX;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != n - 1 {
            continue;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        let mut ok = true;
        let mut total = 0;
        for (k, l) in topology.links.iter().enumerate() {
            if mask & (1 << k) == 0 {
                continue;
            }
            let (a, b) = (find(&mut parent, index[&l.a]), find(&mut parent, index[&l.b]));
            if a == b {
                ok = false;
                break;
            }
            parent[a] = b;
            total += l.latency.as_micros() as u64;
        }
        if ok {
            best = best.min(total);
        }
    }
    best
}

/// `(subscriber, feed, channel, seq, deliver_ts)`
pub type LogRow = (String, Arc<str>, u8, u32, u64);

pub fn log_row(d: &Delivery) -> LogRow {
    let a = d.item.anchor();
    (d.subscriber.to_string(), a.feed_id.clone(), a.channel_id, a.seq_no, d.deliver_ts.as_micros())
}

/// Flood every notification over the whole tree and filter at each broker
/// against the local subscriptions. Only real-time, tick-level, full QoI.
pub fn flood_and_filter(
    topology: &BrokerTopology,
    subscriptions: &[Subscription],
    stream: &[Arc<Notification>],
    processing_us: u64,
) -> (Vec<LogRow>, u64) {
    let tree = prim(topology);
    let mut local: BTreeMap<&BrokerId, Vec<&Subscription>> = BTreeMap::new();
    for s in subscriptions {
        local.entry(&topology.attachment[&s.subscriber]).or_default().push(s);
    }
    let mut rows = Vec::new();
    let mut traffic = 0;
    for n in stream {
        let origin = &topology.publisher_attach[&n.feed_id];
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([(origin.clone(), processing_us)]);
        seen.insert(origin.clone());
        while let Some((b, delay)) = queue.pop_front() {
            for s in local.get(&b).into_iter().flatten() {
                let hit = s.filter.iter().any(|a| match a {
                    tickplant_core::broker::FilterAtom::Symbol(x) => *x == n.symbol,
                    tickplant_core::broker::FilterAtom::Feed(f) => *f == n.feed_id,
                });
                if hit {
                    rows.push((
                        s.subscriber.to_string(),
                        n.feed_id.clone(),
                        n.channel_id,
                        n.seq_no,
                        n.publish_ts.as_micros() + delay,
                    ));
                }
            }
            for (next, lat) in &tree[&b] {
                if seen.insert(next.clone()) {
                    traffic += 1;
                    queue.push_back((next.clone(), delay + lat + processing_us));
                }
            }
        }
    }
    rows.sort();
    (rows, traffic)
}

pub fn subscriber(i: usize) -> SubscriberId {
    SubscriberId::new(&format!("s{i:02}"))
}

// ---------- enrichment ----------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefTickState {
    pub open: i64,
    pub high: i64,
    pub low: i64,
    pub volume: u64,
    pub vwap: i64,
    pub spread: i64,
}

/// Recomputes the running day state before each tick from scratch over all
/// earlier ticks of the same symbol.
pub fn brute_force_day_states(ticks: &[Notification]) -> Vec<RefTickState> {
    let mut out = Vec::with_capacity(ticks.len());
    for (i, n) in ticks.iter().enumerate() {
        let history: Vec<&TickPayload> = ticks[..=i]
            .iter()
            .filter(|m| m.symbol == n.symbol)
            .map(|m| match &m.payload {
                Payload::Tick(t) => t,
                Payload::Body(_) => panic!("ticks only"),
            })
            .collect();
        let mids: Vec<i64> = history.iter().map(|t| ref_mid(t.bid.raw(), t.ask.raw())).collect();
        let vols: Vec<u64> = history.iter().map(|t| t.bid_size as u64 + t.ask_size as u64).collect();
        let num: i128 = mids.iter().zip(&vols).map(|(m, v)| *m as i128 * *v as i128).sum();
        let den: i128 = vols.iter().map(|v| *v as i128).sum();
        let last = history.last().unwrap();
        out.push(RefTickState {
            open: mids[0],
            high: *mids.iter().max().unwrap(),
            low: *mids.iter().min().unwrap(),
            volume: vols.iter().sum(),
            vwap: half_even(num, den) as i64,
            spread: last.ask.raw() - last.bid.raw(),
        });
    }
    out
}

/// `(kind code, symbol, tick index, value)` events: strict new extremes after
/// the first tick, and upward crossings of each spread threshold.
pub fn brute_force_events(ticks: &[Notification], thresholds: &[i64]) -> Vec<(u8, String, usize, i64)> {
    let states = brute_force_day_states(ticks);
    let mut out = Vec::new();
    for (i, n) in ticks.iter().enumerate() {
        let prev = (0..i).rev().find(|&j| ticks[j].symbol == n.symbol);
        if let Some(p) = prev {
            if states[i].high > states[p].high {
                out.push((1, n.symbol.to_string(), i, states[i].high));
            }
            if states[i].low < states[p].low {
                out.push((2, n.symbol.to_string(), i, states[i].low));
            }
        }
        for &th in thresholds {
            let was_above = prev.is_some_and(|p| states[p].spread > th);
            if states[i].spread > th && !was_above {
                out.push((3, n.symbol.to_string(), i, states[i].spread));
            }
        }
    }
    out
}

/// `symbol -> window index -> [o, h, l, c, count, volume]`
pub fn brute_force_bars(ticks: &[Notification], origin: u64, window: u64) -> BTreeMap<(String, u64), [i64; 6]> {
    let mut keys = BTreeSet::new();
    for n in ticks {
        keys.insert((n.symbol.to_string(), (n.publish_ts.as_micros() - origin) / window));
    }
    let mut out = BTreeMap::new();
    for (sym, k) in keys {
        let inside: Vec<&TickPayload> = ticks
            .iter()
            .filter(|n| n.symbol.to_string() == sym && (n.publish_ts.as_micros() - origin) / window == k)
            .map(|n| match &n.payload {
                Payload::Tick(t) => t,
                Payload::Body(_) => panic!("ticks only"),
            })
            .collect();
        let mids: Vec<i64> = inside.iter().map(|t| ref_mid(t.bid.raw(), t.ask.raw())).collect();
        let vol: u64 = inside.iter().map(|t| t.bid_size as u64 + t.ask_size as u64).sum();
        out.insert(
            (sym, k),
            [
                mids[0],
                *mids.iter().max().unwrap(),
                *mids.iter().min().unwrap(),
                *mids.last().unwrap(),
                mids.len() as i64,
                vol as i64,
            ],
        );
    }
    out
}

// ---------- statistics ----------

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
