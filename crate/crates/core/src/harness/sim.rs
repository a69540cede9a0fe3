use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use super::config::SimConfig;
use super::metrics::{LatencyStats, RateSeries, RATE_BIN};
use super::HarnessError;
use crate::broker::{BrokerError, BrokerNetwork, DeliveredItem, Delivery, DeliveryPolicy, SubscriberId};
use crate::enrichment::{DerivedPublisher, Enricher};
use crate::feed::{encode_into, FeedHandler, GapEvent, HandlerCounters, Ingested};
use crate::loadgen::{day_boundaries, expected_count, generate_day, GenStats};
use crate::model::{micros_of, Granularity, VirtualTime};
use crate::permissioning::{emit_usage_report, MeterLedger};
use crate::store::EventStore;

/// Lean copy of a delivery for the delivery log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub subscriber: SubscriberId,
    pub feed_id: Arc<str>,
    pub channel_id: u8,
    pub seq_no: u32,
    pub publish_ts: VirtualTime,
    pub release_ts: VirtualTime,
    pub deliver_ts: VirtualTime,
    pub bar: bool,
}

impl DeliveryRecord {
    pub fn from_delivery(d: &Delivery) -> Self {
        let n = d.item.anchor();
        DeliveryRecord {
            subscriber: d.subscriber.clone(),
            feed_id: n.feed_id.clone(),
            channel_id: n.channel_id,
            seq_no: n.seq_no,
            publish_ts: n.publish_ts,
            release_ts: d.release_ts,
            deliver_ts: d.deliver_ts,
            bar: matches!(d.item, DeliveredItem::Bar(_)),
        }
    }

    /// `subscriber|feed|channel|seq|publish_ts|deliver_ts`
    pub fn export_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.subscriber,
            self.feed_id,
            self.channel_id,
            self.seq_no,
            self.publish_ts.as_micros(),
            self.deliver_ts.as_micros()
        )
    }
}

/// What happened to the notifications routed to one subscriber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriberTally {
    pub policy: DeliveryPolicy,
    pub granularity: Granularity,
    /// Routed to the subscriber before QoI degradation.
    pub matched: u64,
    pub delivered: u64,
    pub bars: u64,
    /// Ticks folded into delivered bars.
    pub bar_ticks: u64,
}

impl SubscriberTally {
    /// Routed notifications accounted for by deliveries (bars count their ticks).
    pub fn accounted(&self) -> u64 {
        self.delivered - self.bars + self.bar_ticks
    }

    /// Dropped by conflation.
    pub fn conflated(&self) -> u64 {
        self.matched - self.accounted()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FeedTally {
    pub generated: u64,
    pub gap_lost: u64,
    pub handler: HandlerCounters,
    pub quarantined: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub latency: LatencyStats,
    pub ledger: MeterLedger,
    pub deliveries: Vec<DeliveryRecord>,
    pub delivery_count: u64,
    pub gaps: Vec<GapEvent>,
    pub rate_series: RateSeries,
    pub generation: GenStats,
    pub feeds: BTreeMap<Arc<str>, FeedTally>,
    pub subscribers: BTreeMap<SubscriberId, SubscriberTally>,
    pub denied: BTreeMap<SubscriberId, String>,
    pub derived_published: u64,
    pub link_traffic: BTreeMap<(String, String), u64>,
    pub last_day: u32,
    pub usage_report: String,
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutput, HarnessError> {
    run_simulation_with(config, |_| {})
}

/// Runs the whole pipeline on one virtual-time loop: generate, encode,
/// feed handler, store, enrichment, broker network, metering. `observe`
/// sees every delivery as it happens.
pub fn run_simulation_with(config: &SimConfig, mut observe: impl FnMut(&Delivery)) -> Result<SimOutput, HarnessError> {
    config.validate()?;
    let lg = &config.loadgen;
    let entitlements = Arc::new(config.entitlements.clone());
    let mut net = BrokerNetwork::new(config.topology.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?
        .with_processing_cost(config.processing_cost)
        .with_admission(entitlements);
    let mut denied = BTreeMap::new();
    for s in &config.subscriptions {
        match net.subscribe(s.clone()) {
            Ok(()) => {}
            Err(BrokerError::NotEntitled(id, reason)) => {
                denied.insert(id, reason);
            }
            Err(e) => return Err(HarnessError::Config(e.to_string())),
        }
    }

    let feed_index: HashMap<Arc<str>, usize> = lg.profiles.iter().enumerate().map(|(i, p)| (p.feed_id.clone(), i)).collect();
    let mut handlers: Vec<FeedHandler> = lg.profiles.iter().map(|p| FeedHandler::new(p.feed_id.clone())).collect();
    let mut enrichers: Vec<Enricher> = lg.profiles.iter().map(|_| Enricher::new(config.thresholds.clone())).collect();
    let mut derived = DerivedPublisher::default();
    let mut store = EventStore::new(config.store_capacity).with_eviction();

    let mut boundaries: Vec<(VirtualTime, usize)> = lg
        .profiles
        .iter()
        .enumerate()
        .flat_map(|(i, p)| day_boundaries(p, lg.horizon).into_iter().map(move |t| (t, i)))
        .collect();
    boundaries.sort();
    let mut next_boundary = 0;

    let mut rate_series = RateSeries::default();
    let bin = micros_of(RATE_BIN);
    let horizon = micros_of(lg.horizon);
    for p in &lg.profiles {
        let mut start = 0;
        while start < horizon {
            let end = (start + bin).min(horizon);
            let e = expected_count(p, &lg.spikes, VirtualTime::from_micros(start), VirtualTime::from_micros(end));
            rate_series.expected.insert((start, p.feed_id.clone()), e);
            start = end;
        }
    }

    let mut state = RunState {
        latency: LatencyStats::default(),
        ledger: MeterLedger::new(),
        deliveries: Vec::new(),
        delivery_count: 0,
        keep_log: config.keep_delivery_log,
        tallies: BTreeMap::new(),
    };
    for s in net.subscriptions() {
        state.tallies.insert(
            s.subscriber.clone(),
            SubscriberTally {
                policy: s.policy,
                granularity: s.qoi.granularity,
                matched: 0,
                delivered: 0,
                bars: 0,
                bar_ticks: 0,
            },
        );
    }

    let mut generated = generate_day(lg).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut frame = Vec::with_capacity(256);
    let mut derived_published = 0;
    for n in generated.by_ref() {
        while let Some(&(t, i)) = boundaries.get(next_boundary) {
            if t > n.publish_ts {
                break;
            }
            handlers[i].reset_day(t).map_err(|e| HarnessError::Invariant(e.to_string()))?;
            enrichers[i].reset_day();
            next_boundary += 1;
        }
        rate_series.record(&n.feed_id, n.publish_ts.as_micros());
        let fi = feed_index[&n.feed_id];
        frame.clear();
        encode_into(&n, &mut frame).map_err(|e| HarnessError::Invariant(format!("unencodable notification: {e}")))?;
        let Ingested::Delivered { notification, .. } = handlers[fi].ingest_frame(&config.symbology, &frame) else {
            continue;
        };
        store
            .append(notification.clone())
            .map_err(|e| HarnessError::Invariant(e.to_string()))?;
        let mut events = Vec::new();
        if notification.tick().is_some() {
            let (_, ev) = enrichers[fi]
                .on_tick(&notification)
                .map_err(|e| HarnessError::Invariant(e.to_string()))?;
            events = ev;
        }
        let report = net
            .publish(Arc::new(notification))
            .map_err(|e| HarnessError::Invariant(e.to_string()))?;
        state.absorb(&report, &denied, &mut observe)?;
        for ev in &events {
            let d = derived.to_notification(ev);
            derived_published += 1;
            let report = net.publish(Arc::new(d)).map_err(|e| HarnessError::Invariant(e.to_string()))?;
            state.absorb(&report, &denied, &mut observe)?;
        }
    }
    let report = net.finish();
    state.absorb(&report, &denied, &mut observe)?;

    // cross-module invariants
    let counters = net.counters();
    if counters.duplicates_suppressed != 0 {
        return Err(HarnessError::Invariant(format!(
            "{} duplicate deliveries suppressed",
            counters.duplicates_suppressed
        )));
    }
    for (id, tally) in state.tallies.iter_mut() {
        tally.matched = net.matched_to(id);
        if tally.delivered != net.delivered_to(id) {
            return Err(HarnessError::Invariant(format!("delivery count mismatch for {id}")));
        }
        if tally.accounted() > tally.matched {
            return Err(HarnessError::Invariant(format!("{id} received more than was routed to it")));
        }
        if tally.policy == DeliveryPolicy::Lossless && tally.accounted() != tally.matched {
            return Err(HarnessError::Invariant(format!(
                "lossless subscriber {id} lost {} notifications",
                tally.matched - tally.accounted()
            )));
        }
        let disagreements = net.last_value_disagreements(id);
        if let Some(sym) = disagreements.first() {
            return Err(HarnessError::Invariant(format!("{id} last value of {sym} disagrees with the last published value")));
        }
        state
            .latency
            .queue_high_watermarks
            .insert(id.clone(), net.queue_high_watermark(id));
    }
    if state.ledger.total() != state.delivery_count {
        return Err(HarnessError::Invariant(format!(
            "metered {} but delivered {}",
            state.ledger.total(),
            state.delivery_count
        )));
    }
    if state.latency.overall.count() != state.delivery_count {
        return Err(HarnessError::Invariant("latency count differs from deliveries".into()));
    }

    let gen_stats = generated.stats();
    let mut feeds = BTreeMap::new();
    for ((feed, g), h) in generated.profile_stats().into_iter().zip(&handlers) {
        let c = h.counters();
        let quarantined = h.quarantine().len() as u64;
        if c.received != g.total() {
            return Err(HarnessError::Invariant(format!("{feed}: generated {} but received {}", g.total(), c.received)));
        }
        if c.received != c.delivered + quarantined + c.duplicates {
            return Err(HarnessError::Invariant(format!("{feed}: handler conservation broken")));
        }
        if c.missing_by_gaps > g.gap_dropped {
            return Err(HarnessError::Invariant(format!("{feed}: more sequence gaps than injected drops")));
        }
        feeds.insert(
            feed,
            FeedTally {
                generated: g.total(),
                gap_lost: g.gap_dropped,
                handler: c,
                quarantined,
            },
        );
    }
    if rate_series.total() != gen_stats.total() {
        return Err(HarnessError::Invariant("rate series does not sum to the generated count".into()));
    }

    let last_day = VirtualTime::from_micros(horizon.saturating_sub(1)).day_index();
    let last_day = state
        .ledger
        .cells()
        .map(|((_, _, d), _)| *d)
        .max()
        .map_or(last_day, |d| d.max(last_day));
    state.ledger.close_through(last_day);
    let usage_report = emit_usage_report(&state.ledger, 0, last_day).map_err(|e| HarnessError::Invariant(e.to_string()))?;

    let mut gaps: Vec<GapEvent> = handlers.iter().flat_map(|h| h.gaps().iter().cloned()).collect();
    gaps.sort_by(|a, b| (a.detected_at, &a.feed_id, a.channel_id).cmp(&(b.detected_at, &b.feed_id, b.channel_id)));

    Ok(SimOutput {
        latency: state.latency,
        ledger: state.ledger,
        deliveries: state.deliveries,
        delivery_count: state.delivery_count,
        gaps,
        rate_series,
        generation: gen_stats,
        feeds,
        subscribers: state.tallies,
        denied,
        derived_published,
        link_traffic: net
            .link_traffic()
            .iter()
            .map(|((a, b), c)| ((a.to_string(), b.to_string()), *c))
            .collect(),
        last_day,
        usage_report,
    })
}

struct RunState {
    latency: LatencyStats,
    ledger: MeterLedger,
    deliveries: Vec<DeliveryRecord>,
    delivery_count: u64,
    keep_log: bool,
    tallies: BTreeMap<SubscriberId, SubscriberTally>,
}

impl RunState {
    fn absorb(
        &mut self,
        report: &[Delivery],
        denied: &BTreeMap<SubscriberId, String>,
        observe: &mut impl FnMut(&Delivery),
    ) -> Result<(), HarnessError> {
        for d in report {
            if denied.contains_key(&d.subscriber) {
                return Err(HarnessError::Invariant(format!("delivery to denied subscriber {}", d.subscriber)));
            }
            let tally = self
                .tallies
                .get_mut(&d.subscriber)
                .ok_or_else(|| HarnessError::Invariant(format!("delivery to unknown subscriber {}", d.subscriber)))?;
            tally.delivered += 1;
            if let DeliveredItem::Bar(b) = &d.item {
                tally.bars += 1;
                tally.bar_ticks += b.bar.tick_count as u64;
            }
            self.ledger.record(d);
            self.latency
                .record(&d.subscriber, micros_of(d.latency()), d.deliver_ts.as_micros());
            self.delivery_count += 1;
            if self.keep_log {
                self.deliveries.push(DeliveryRecord::from_delivery(d));
            }
            observe(d);
        }
        Ok(())
    }
}

pub fn format_deliveries(records: &[DeliveryRecord]) -> String {
    let mut out = String::from("subscriber|feed|channel|seq|publish_ts|deliver_ts\n");
    for r in records {
        out.push_str(&r.export_line());
        out.push('\n');
    }
    out
}

pub fn format_gaps(gaps: &[GapEvent]) -> String {
    let mut out = String::from("feed|channel|expected|received|missing|detected_at\n");
    for g in gaps {
        let _ = writeln!(
            out,
            "{}|{}|{}|{}|{}|{}",
            g.feed_id,
            g.channel_id,
            g.expected,
            g.received,
            g.missing(),
            g.detected_at.as_micros()
        );
    }
    out
}

pub fn format_conservation(out_: &SimOutput) -> String {
    let mut out = String::from("# per feed: generated = received; received = ingested + quarantined + duplicates\n");
    out.push_str("feed|generated|gap_lost|received|ingested|quarantined|duplicates|gaps|missing_by_gaps\n");
    for (feed, t) in &out_.feeds {
        let _ = writeln!(
            out,
            "{feed}|{}|{}|{}|{}|{}|{}|{}|{}",
            t.generated,
            t.gap_lost,
            t.handler.received,
            t.handler.delivered,
            t.quarantined,
            t.handler.duplicates,
            t.handler.gaps,
            t.handler.missing_by_gaps
        );
    }
    out.push_str("# per subscriber: matched = delivered - bars + bar_ticks + conflated\n");
    out.push_str("subscriber|policy|matched|delivered|bars|bar_ticks|conflated\n");
    for (s, t) in &out_.subscribers {
        let policy = match t.policy {
            DeliveryPolicy::Lossless => "lossless",
            DeliveryPolicy::ConflateLatest => "conflate",
        };
        let _ = writeln!(
            out,
            "{s}|{policy}|{}|{}|{}|{}|{}",
            t.matched,
            t.delivered,
            t.bars,
            t.bar_ticks,
            t.conflated()
        );
    }
    for (s, reason) in &out_.denied {
        let _ = writeln!(out, "# denied {s}: {reason}");
    }
    out
}
