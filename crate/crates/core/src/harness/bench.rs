//! Wall-clock benchmark: generator, feed handling and brokers run as
//! concurrent stages joined by bounded channels.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{Histogram, LatencyStats};
use super::HarnessError;
use crate::broker::{
    BrokerId, BrokerNetwork, BrokerTopology, Degrader, DeliveryPolicy, FilterAtom, Hop, Link, RoutingTable,
    SubscriberId, Subscription,
};
use crate::enrichment::{DerivedPublisher, Enricher, EventThresholds, DERIVED_FEED};
use crate::feed::{encode_into, FeedHandler, Ingested};
use crate::loadgen::{generated_symbols, EventSpike};
use crate::model::{Mic, Notification, Payload, Price, QoISpec, SymbolRef, TickFlags, TickPayload, VirtualTime};
use crate::store::EventStore;
use crate::symbology::{InstrumentRecord, SymbologyStore};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub seed: u64,
    pub target_rate: f64,
    pub duration: Duration,
    pub feeds: usize,
    pub symbols: usize,
    pub brokers: usize,
    pub subscribers_per_broker: usize,
    pub symbols_per_subscriber: usize,
    /// Frames produced due since the previous burst are sent together.
    pub burst: Duration,
    /// Capacity of every inter-stage channel, in bursts.
    pub queue_capacity: usize,
    pub tick_extension: usize,
    /// Offset from run start, duration and multiplier of a rate spike.
    pub spike: Option<EventSpike>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 1,
            target_rate: 50_000.0,
            duration: Duration::from_secs(10),
            feeds: 5,
            symbols: 10_000,
            brokers: 3,
            subscribers_per_broker: 2,
            symbols_per_subscriber: 1_000,
            burst: Duration::from_millis(1),
            queue_capacity: 1_024,
            tick_extension: 36,
            spike: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub target_rate: f64,
    pub achieved_rate: f64,
    pub elapsed: Duration,
    pub sent: u64,
    pub ingested: u64,
    pub published: u64,
    pub expected_deliveries: u64,
    pub delivered: u64,
    pub order_violations: u64,
    /// Generation to subscriber delivery, wall clock.
    pub latency: LatencyStats,
    /// Most bursts ever waiting in any inter-stage channel.
    pub queue_high_watermark: usize,
    /// Feed deliveries of notifications generated inside the spike window
    /// and in an equally long window just before it. Derived events are left
    /// out: their rate falls through the day as ranges widen.
    pub spike_window: Option<(u64, u64)>,
    /// Time each stage spent processing, waits excluded.
    pub stage_busy: Vec<(String, Duration)>,
    pub backpressure: bool,
}

impl BenchReport {
    pub fn lost(&self) -> u64 {
        self.expected_deliveries.saturating_sub(self.delivered)
    }

    pub fn summary_lines(&self) -> String {
        let s = self.latency.overall.summary();
        let mut out = format!(
            "target_rate|{:.0}\nachieved_rate|{:.0}\nelapsed_ms|{}\nsent|{}\ningested|{}\npublished|{}\nexpected_deliveries|{}\ndelivered|{}\norder_violations|{}\np50_us|{}\np99_us|{}\nmax_us|{}\nqueue_high_watermark|{}\nbackpressure|{}\n",
            self.target_rate,
            self.achieved_rate,
            self.elapsed.as_millis(),
            self.sent,
            self.ingested,
            self.published,
            self.expected_deliveries,
            self.delivered,
            self.order_violations,
            s.p50,
            s.p99,
            s.max,
            self.queue_high_watermark,
            self.backpressure
        );
        for (stage, busy) in &self.stage_busy {
            out.push_str(&format!("busy_ms.{stage}|{}\n", busy.as_millis()));
        }
        if let Some((spike, base)) = self.spike_window {
            out.push_str(&format!("spike_window_delivered|{spike}\nbaseline_window_delivered|{base}\n"));
        }
        out
    }
}

struct FrameBatch {
    created: Instant,
    feeds: Vec<u8>,
    ends: Vec<u32>,
    bytes: Vec<u8>,
}

struct NoteBatch {
    created: Instant,
    items: Vec<Arc<Notification>>,
}

const BENCH_MICS: [&str; 5] = ["XNYS", "XLON", "XETR", "XTKS", "XHKG"];

fn bench_mic(i: usize) -> Mic {
    match BENCH_MICS.get(i) {
        Some(m) => Mic::new(m).unwrap(),
        None => Mic::new(&format!("XB{:02}", i % 100)).unwrap(),
    }
}

struct Universe {
    feeds: Vec<Arc<str>>,
    symbols: Vec<(usize, SymbolRef)>,
    symbology: SymbologyStore,
    topology: BrokerTopology,
    subscriptions: Vec<Subscription>,
}

fn universe(cfg: &BenchConfig) -> Result<Universe, HarnessError> {
    let bad = |s: &str| Err(HarnessError::Config(s.to_string()));
    if cfg.feeds == 0 || cfg.feeds > 100 || cfg.symbols < cfg.feeds || cfg.brokers == 0 {
        return bad("bench needs 1..=100 feeds, at least one symbol per feed and one broker");
    }
    if !(cfg.target_rate > 0.0) || cfg.duration.is_zero() || cfg.burst.is_zero() {
        return bad("bench needs a positive rate, duration and burst");
    }
    let feeds: Vec<Arc<str>> = (0..cfg.feeds).map(|i| Arc::from(format!("FEED-{}", bench_mic(i)))).collect();
    let per_feed = cfg.symbols / cfg.feeds;
    let mut symbols = Vec::with_capacity(per_feed * cfg.feeds);
    let mut symbology = SymbologyStore::new();
    for f in 0..cfg.feeds {
        for (si, s) in generated_symbols(bench_mic(f), per_feed).into_iter().enumerate() {
            let isin = crate::model::Isin::with_check_digit(&format!("XB{f:03}{si:06}")).expect("valid ISIN body");
            symbology
                .register(InstrumentRecord::new(isin, s.to_string(), [s.clone()]))
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            symbols.push((f, s));
        }
    }
    let brokers: Vec<BrokerId> = (0..cfg.brokers).map(|i| BrokerId::new(&format!("b{i}"))).collect();
    let mut topology = BrokerTopology {
        brokers: brokers.iter().cloned().collect(),
        links: brokers
            .windows(2)
            .map(|w| Link::new(w[0].clone(), w[1].clone(), Duration::from_micros(100)))
            .collect(),
        ..Default::default()
    };
    for f in feeds.iter().cloned().chain([Arc::from(DERIVED_FEED)]) {
        topology.publisher_attach.insert(f, brokers[0].clone());
    }
    let mut subscriptions = Vec::new();
    let n_subs = cfg.brokers * cfg.subscribers_per_broker;
    for k in 0..n_subs {
        let id = SubscriberId::new(&format!("s{k}"));
        topology.attachment.insert(id.clone(), brokers[k % cfg.brokers].clone());
        let start = k * symbols.len() / n_subs.max(1);
        let filter: Vec<FilterAtom> = (0..cfg.symbols_per_subscriber.min(symbols.len()))
            .map(|j| FilterAtom::Symbol(symbols[(start + j) % symbols.len()].1.clone()))
            .collect();
        subscriptions.push(Subscription::new(id, filter, QoISpec::FULL, DeliveryPolicy::Lossless));
    }
    Ok(Universe {
        feeds,
        symbols,
        symbology,
        topology,
        subscriptions,
    })
}

/// Frames due by `elapsed`, spike included.
fn due(cfg: &BenchConfig, elapsed: Duration) -> u64 {
    let t = elapsed.as_secs_f64();
    let mut n = cfg.target_rate * t;
    if let Some(s) = cfg.spike {
        let a = s.start.as_secs_f64();
        let b = a + s.duration.as_secs_f64();
        let overlap = (t.min(b) - a).max(0.0);
        n += (s.multiplier - 1.0) * cfg.target_rate * overlap;
    }
    n as u64
}

fn millis(secs: f64) -> u64 {
    (secs * 1000.0).round() as u64
}

struct GenResult {
    sent: u64,
    elapsed: Duration,
    watermark: usize,
}

fn generator(cfg: BenchConfig, uni: Arc<Universe>, out: Sender<FrameBatch>, start: Instant) -> GenResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mids: Vec<i64> = (0..uni.symbols.len()).map(|i| (10 + (i as i64 * 37) % 490) * 10_000).collect();
    let mut seqs: HashMap<(usize, u8), u32> = HashMap::new();
    let ext: Arc<[u8]> = Arc::from(vec![0u8; cfg.tick_extension]);
    let mut sent = 0u64;
    let mut watermark = 0;
    let mut last_ts = 0u64;
    let mut buf = Vec::with_capacity(256);
    loop {
        let elapsed = start.elapsed();
        if elapsed >= cfg.duration {
            break;
        }
        let target = due(&cfg, elapsed);
        let mut batch = FrameBatch {
            created: Instant::now(),
            feeds: Vec::new(),
            ends: Vec::new(),
            bytes: Vec::new(),
        };
        let ts = (elapsed.as_micros() as u64).max(last_ts);
        last_ts = ts;
        while sent < target {
            let si = rng.gen_range(0..uni.symbols.len());
            let (f, symbol) = &uni.symbols[si];
            let channel = (si % 4) as u8;
            let seq = seqs.entry((*f, channel)).or_insert(0);
            *seq += 1;
            mids[si] = (mids[si] + rng.gen_range(-3..=3) * 100).max(10_000);
            let half = rng.gen_range(1..=5) * 100;
            let mut tick = TickPayload::quote(
                Price::from_raw(mids[si] - half),
                Price::from_raw(mids[si] + half),
                rng.gen_range(1..=50) * 100,
                rng.gen_range(1..=50) * 100,
                VirtualTime::from_micros(ts),
                TickFlags::empty(),
            );
            tick.extension = ext.clone();
            let n = Notification::new(
                uni.feeds[*f].clone(),
                channel,
                *seq,
                symbol.clone(),
                VirtualTime::from_micros(ts),
                Payload::Tick(tick),
            );
            buf.clear();
            encode_into(&n, &mut buf).expect("bench tick encodes");
            batch.bytes.extend_from_slice(&buf);
            batch.ends.push(batch.bytes.len() as u32);
            batch.feeds.push(*f as u8);
            sent += 1;
        }
        if !batch.ends.is_empty() {
            if out.send(batch).is_err() {
                break;
            }
            watermark = watermark.max(out.len());
        }
        let next = start + (elapsed.as_micros() as u64 / cfg.burst.as_micros() as u64 + 1) as u32 * cfg.burst;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        }
    }
    GenResult {
        sent,
        elapsed: start.elapsed(),
        watermark,
    }
}

struct IngestResult {
    ingested: u64,
    published: u64,
    expected: u64,
    watermark: usize,
    busy: Duration,
}

fn ingest(uni: Arc<Universe>, input: Receiver<FrameBatch>, out: Sender<NoteBatch>) -> Result<IngestResult, HarnessError> {
    let mut handlers: Vec<FeedHandler> = uni.feeds.iter().map(|f| FeedHandler::new(f.clone())).collect();
    let mut enrichers: Vec<Enricher> = uni.feeds.iter().map(|_| Enricher::new(EventThresholds::default())).collect();
    let mut derived = DerivedPublisher::default();
    let mut store = EventStore::new(200_000).with_eviction();
    let mut r = IngestResult {
        ingested: 0,
        published: 0,
        expected: 0,
        watermark: 0,
        busy: Duration::ZERO,
    };
    for batch in input {
        let busy = Instant::now();
        let mut items = Vec::with_capacity(batch.ends.len());
        let mut start = 0usize;
        for (i, end) in batch.ends.iter().enumerate() {
            let f = batch.feeds[i] as usize;
            let frame = &batch.bytes[start..*end as usize];
            start = *end as usize;
            let Ingested::Delivered { notification, .. } = handlers[f].ingest_frame(&uni.symbology, frame) else {
                return Err(HarnessError::Invariant("bench frame was not delivered by its feed handler".into()));
            };
            r.ingested += 1;
            store.append(notification.clone()).map_err(|e| HarnessError::Invariant(e.to_string()))?;
            let (_, events) = enrichers[f]
                .on_tick(&notification)
                .map_err(|e| HarnessError::Invariant(e.to_string()))?;
            items.push(Arc::new(notification));
            for ev in &events {
                items.push(Arc::new(derived.to_notification(ev)));
            }
        }
        for n in &items {
            r.expected += uni.subscriptions.iter().filter(|s| s.matches(n)).count() as u64;
        }
        r.published += items.len() as u64;
        r.busy += busy.elapsed();
        if out
            .send(NoteBatch {
                created: batch.created,
                items,
            })
            .is_err()
        {
            return Err(HarnessError::Invariant("broker stage stopped early".into()));
        }
        r.watermark = r.watermark.max(out.len());
    }
    Ok(r)
}

#[derive(Default)]
struct BrokerResult {
    /// Feed (not derived) deliveries by generation time, in milliseconds
    /// since run start.
    by_ms: BTreeMap<u64, u64>,
    latency: BTreeMap<SubscriberId, Histogram>,
    delivered: u64,
    order_violations: u64,
    watermark: usize,
    busy: Duration,
}

fn broker(
    start: Instant,
    upstream: Option<BrokerId>,
    table: RoutingTable,
    local: Vec<Subscription>,
    input: Receiver<NoteBatch>,
    children: BTreeMap<BrokerId, Sender<NoteBatch>>,
) -> BrokerResult {
    let mut degraders: BTreeMap<SubscriberId, Degrader> =
        local.iter().map(|s| (s.subscriber.clone(), Degrader::new(s.qoi, s.policy))).collect();
    let mut last_seq: HashMap<(SubscriberId, Arc<str>, u8), u32> = HashMap::new();
    let mut r = BrokerResult::default();
    let mut releases = Vec::new();
    for batch in input {
        let busy = Instant::now();
        let mut outgoing: BTreeMap<BrokerId, Vec<Arc<Notification>>> = BTreeMap::new();
        for n in &batch.items {
            for hop in table.route(n, upstream.as_ref()) {
                match hop {
                    Hop::Link(b) => outgoing.entry(b).or_default().push(n.clone()),
                    Hop::Local(s) => {
                        let d = degraders.get_mut(&s).expect("local subscriber has a degrader");
                        d.push(n.clone(), &mut releases);
                        let now = Instant::now();
                        for rel in releases.drain(..) {
                            let a = rel.item.anchor();
                            let key = (s.clone(), a.feed_id.clone(), a.channel_id);
                            let prev = last_seq.insert(key, a.seq_no);
                            if prev.is_some_and(|p| p >= a.seq_no) {
                                r.order_violations += 1;
                            }
                            r.latency
                                .entry(s.clone())
                                .or_default()
                                .record((now - batch.created).as_micros() as u64);
                            r.delivered += 1;
                            if &*a.feed_id != DERIVED_FEED {
                                *r.by_ms.entry((batch.created - start).as_millis() as u64).or_default() += 1;
                            }
                        }
                    }
                }
            }
        }
        for (b, items) in outgoing {
            let tx = &children[&b];
            let _ = tx.send(NoteBatch {
                created: batch.created,
                items,
            });
            r.watermark = r.watermark.max(tx.len());
        }
        r.busy += busy.elapsed();
    }
    r
}

/// Runs the pipeline for `cfg.duration` of wall-clock time.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, HarnessError> {
    let uni = Arc::new(universe(cfg)?);
    let mut net = BrokerNetwork::new(uni.topology.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    for s in &uni.subscriptions {
        net.subscribe(s.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let root = uni.topology.publisher_attach.values().next().expect("publishers attached").clone();
    let toward_root = net.tree().next_hops_toward(&root);

    let (frame_tx, frame_rx) = bounded::<FrameBatch>(cfg.queue_capacity);
    let mut senders: BTreeMap<BrokerId, Sender<NoteBatch>> = BTreeMap::new();
    let mut receivers: BTreeMap<BrokerId, Receiver<NoteBatch>> = BTreeMap::new();
    for b in net.tree().brokers() {
        let (tx, rx) = bounded(cfg.queue_capacity);
        senders.insert(b.clone(), tx);
        receivers.insert(b.clone(), rx);
    }

    let start = Instant::now();
    let mut broker_threads = Vec::new();
    for b in net.tree().brokers().cloned().collect::<Vec<_>>() {
        let upstream = toward_root[&b].clone();
        let children: BTreeMap<BrokerId, Sender<NoteBatch>> = net
            .tree()
            .neighbors(&b)
            .iter()
            .filter(|(n, _)| Some(n) != upstream.as_ref())
            .map(|(n, _)| (n.clone(), senders[n].clone()))
            .collect();
        let table = net.table(&b).expect("broker table").clone();
        let local: Vec<Subscription> = uni
            .subscriptions
            .iter()
            .filter(|s| uni.topology.attachment[&s.subscriber] == b)
            .cloned()
            .collect();
        let rx = receivers.remove(&b).unwrap();
        let name = format!("broker-{b}");
        broker_threads.push((
            name.clone(),
            thread::Builder::new()
                .name(name)
                .spawn(move || broker(start, upstream, table, local, rx, children))
                .map_err(|e| HarnessError::Invariant(e.to_string()))?,
        ));
    }
    let root_tx = senders.remove(&root).unwrap();
    drop(senders);

    let ingest_uni = uni.clone();
    let ingest_thread = thread::Builder::new()
        .name("ingest".into())
        .spawn(move || ingest(ingest_uni, frame_rx, root_tx))
        .map_err(|e| HarnessError::Invariant(e.to_string()))?;
    let gen_cfg = cfg.clone();
    let gen_uni = uni.clone();
    let gen_thread = thread::Builder::new()
        .name("generator".into())
        .spawn(move || generator(gen_cfg, gen_uni, frame_tx, start))
        .map_err(|e| HarnessError::Invariant(e.to_string()))?;

    let g = gen_thread.join().map_err(|_| HarnessError::Invariant("generator panicked".into()))?;
    let ing = ingest_thread.join().map_err(|_| HarnessError::Invariant("ingest panicked".into()))??;
    let mut latency = LatencyStats::default();
    let mut delivered = 0;
    let mut order_violations = 0;
    let mut watermark = g.watermark.max(ing.watermark);
    let mut by_ms: BTreeMap<u64, u64> = BTreeMap::new();
    let mut stage_busy = vec![("ingest".to_string(), ing.busy)];
    for (name, t) in broker_threads {
        let r = t.join().map_err(|_| HarnessError::Invariant("broker panicked".into()))?;
        for (s, h) in r.latency {
            latency.overall.merge(&h);
            latency.per_subscriber.entry(s).or_default().merge(&h);
        }
        delivered += r.delivered;
        for (ms, c) in r.by_ms {
            *by_ms.entry(ms).or_default() += c;
        }
        order_violations += r.order_violations;
        watermark = watermark.max(r.watermark);
        stage_busy.push((name, r.busy));
    }
    let planned = due(cfg, cfg.duration) as f64;
    let achieved_rate = g.sent as f64 / g.elapsed.as_secs_f64();
    Ok(BenchReport {
        target_rate: cfg.target_rate,
        achieved_rate,
        elapsed: g.elapsed,
        sent: g.sent,
        ingested: ing.ingested,
        published: ing.published,
        expected_deliveries: ing.expected,
        delivered,
        order_violations,
        latency,
        queue_high_watermark: watermark,
        spike_window: cfg.spike.map(|s| {
            let a = millis(s.start.as_secs_f64());
            let d = millis(s.duration.as_secs_f64());
            let count = |lo: u64, hi: u64| by_ms.range(lo..hi).map(|(_, c)| c).sum::<u64>();
            (count(a, a + d), count(a.saturating_sub(d), a))
        }),
        stage_busy,
        backpressure: (g.sent as f64) < 0.99 * planned,
    })
}
