use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::qoi::{DeliveredItem, Degrader, Release};
use super::subscription::{FilterAtom, Subscription};
use super::topology::{build_spanning_tree, BrokerId, BrokerTopology, SpanningTree, SubscriberId, TopologyError};
use crate::model::{micros_of, Granularity, Notification, SymbolRef, VirtualTime};

pub const DEFAULT_PROCESSING_COST: Duration = Duration::from_micros(50);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("subscription of {0} not entitled: {1}")]
    NotEntitled(SubscriberId, String),
    #[error("subscriber {0} is not attached to any broker")]
    UnknownBrokerAttachment(SubscriberId),
    #[error("subscriber {0} already holds a different subscription")]
    SubscriberExists(SubscriberId),
    #[error("feed {0} has no publisher attachment")]
    UnattachedPublisher(Arc<str>),
    #[error("publish at {ts} is earlier than network clock {clock}")]
    OutOfOrder { clock: VirtualTime, ts: VirtualTime },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Consulted before a subscription is admitted.
pub trait Admission {
    fn admit(&self, sub: &Subscription, now: VirtualTime) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hop {
    Link(BrokerId),
    Local(SubscriberId),
}

/// One broker's forwarding state: filter atom to the hops interested in it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingTable {
    entries: HashMap<FilterAtom, BTreeSet<Hop>>,
}

impl RoutingTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hops(&self, atom: &FilterAtom) -> Option<&BTreeSet<Hop>> {
        self.entries.get(atom)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&FilterAtom, &BTreeSet<Hop>)> {
        self.entries.iter()
    }

    fn insert(&mut self, atom: FilterAtom, hop: Hop) {
        self.entries.entry(atom).or_default().insert(hop);
    }

    /// Hops for a notification, excluding the link it arrived on.
    pub fn route(&self, n: &Notification, arrived_from: Option<&BrokerId>) -> BTreeSet<Hop> {
        let mut out = BTreeSet::new();
        let symbol = FilterAtom::Symbol(n.symbol.clone());
        let feed = FilterAtom::Feed(n.feed_id.clone());
        for atom in [&symbol, &feed] {
            if let Some(hops) = self.entries.get(atom) {
                out.extend(hops.iter().cloned());
            }
        }
        if let Some(from) = arrived_from {
            out.remove(&Hop::Link(from.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub subscriber: SubscriberId,
    pub item: DeliveredItem,
    pub release_ts: VirtualTime,
    pub deliver_ts: VirtualTime,
}

impl Delivery {
    /// Network latency of the delivery, QoI-induced delay excluded.
    pub fn latency(&self) -> Duration {
        self.deliver_ts.since(self.release_ts)
    }

    /// `subscriber|feed|channel|seq|publish_ts|deliver_ts`
    pub fn export_line(&self) -> String {
        let n = self.item.anchor();
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.subscriber,
            n.feed_id,
            n.channel_id,
            n.seq_no,
            n.publish_ts.as_micros(),
            self.deliver_ts.as_micros()
        )
    }
}

pub type DeliveryReport = Vec<Delivery>;

#[derive(Debug)]
struct SubscriberState {
    subscription: Subscription,
    broker: BrokerId,
    degrader: Degrader,
    /// Keyed by stream and whether the item is a bar: bars anchor on their
    /// last tick and trail pass-through notifications of the same symbol.
    last_seq: HashMap<(Arc<str>, u8, SymbolRef, bool), u32>,
    last_value: HashMap<SymbolRef, Arc<Notification>>,
    last_pushed: HashMap<SymbolRef, Arc<Notification>>,
    matched: u64,
    delivered: u64,
}

impl SubscriberState {
    /// Aggregating subscribers are compared on ticks only, since bars and
    /// pass-through notifications of one symbol are released out of order.
    fn tracks(&self, n: &Notification) -> bool {
        self.subscription.qoi.granularity == Granularity::TickLevel || n.tick().is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetworkCounters {
    pub published: u64,
    pub delivered: u64,
    pub duplicates_suppressed: u64,
}

/// The broker overlay run on one virtual-time event loop.
pub struct BrokerNetwork {
    topology: BrokerTopology,
    tree: SpanningTree,
    processing_cost: Duration,
    toward: BTreeMap<BrokerId, BTreeMap<BrokerId, Option<BrokerId>>>,
    tables: BTreeMap<BrokerId, RoutingTable>,
    subscribers: BTreeMap<SubscriberId, SubscriberState>,
    admission: Option<Box<dyn Admission + Send + Sync>>,
    link_traffic: BTreeMap<(BrokerId, BrokerId), u64>,
    path_delay: HashMap<(BrokerId, BrokerId), u64>,
    clock: VirtualTime,
    counters: NetworkCounters,
    scratch: Vec<Release>,
}

impl BrokerNetwork {
    pub fn new(topology: BrokerTopology) -> Result<Self, BrokerError> {
        let tree = build_spanning_tree(&topology)?;
        let toward = tree.brokers().map(|b| (b.clone(), tree.next_hops_toward(b))).collect();
        let tables = tree.brokers().map(|b| (b.clone(), RoutingTable::default())).collect();
        let link_traffic = tree.edges.iter().map(|e| ((e.a.clone(), e.b.clone()), 0)).collect();
        Ok(BrokerNetwork {
            topology,
            tree,
            processing_cost: DEFAULT_PROCESSING_COST,
            toward,
            tables,
            subscribers: BTreeMap::new(),
            admission: None,
            link_traffic,
            path_delay: HashMap::new(),
            clock: VirtualTime::from_micros(0),
            counters: NetworkCounters::default(),
            scratch: Vec::new(),
        })
    }

    pub fn with_processing_cost(mut self, cost: Duration) -> Self {
        self.processing_cost = cost;
        self.path_delay.clear();
        self
    }

    pub fn with_admission(mut self, admission: impl Admission + Send + Sync + 'static) -> Self {
        self.admission = Some(Box::new(admission));
        self
    }

    pub fn topology(&self) -> &BrokerTopology {
        &self.topology
    }

    pub fn tree(&self) -> &SpanningTree {
        &self.tree
    }

    pub fn processing_cost(&self) -> Duration {
        self.processing_cost
    }

    pub fn table(&self, broker: &BrokerId) -> Option<&RoutingTable> {
        self.tables.get(broker)
    }

    pub fn tables(&self) -> &BTreeMap<BrokerId, RoutingTable> {
        &self.tables
    }

    pub fn clock(&self) -> VirtualTime {
        self.clock
    }

    pub fn counters(&self) -> NetworkCounters {
        self.counters
    }

    /// Messages carried per tree link, keyed by its (smaller, larger) endpoints.
    pub fn link_traffic(&self) -> &BTreeMap<(BrokerId, BrokerId), u64> {
        &self.link_traffic
    }

    pub fn subscription(&self, id: &SubscriberId) -> Option<&Subscription> {
        self.subscribers.get(id).map(|s| &s.subscription)
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subscribers.values().map(|s| &s.subscription)
    }

    pub fn last_value(&self, id: &SubscriberId, symbol: &SymbolRef) -> Option<&Arc<Notification>> {
        self.subscribers.get(id)?.last_value.get(symbol)
    }

    /// Notifications routed to the subscriber, before QoI degradation.
    pub fn matched_to(&self, id: &SubscriberId) -> u64 {
        self.subscribers.get(id).map_or(0, |s| s.matched)
    }

    /// Symbols whose last delivered value differs from the last value routed
    /// to the subscriber. Empty once everything has been flushed.
    pub fn last_value_disagreements(&self, id: &SubscriberId) -> Vec<SymbolRef> {
        let Some(s) = self.subscribers.get(id) else { return Vec::new() };
        let mut out: Vec<SymbolRef> = s
            .last_pushed
            .iter()
            .filter(|(sym, n)| s.last_value.get(*sym).is_none_or(|v| !Arc::ptr_eq(v, n) && **v != ***n))
            .map(|(sym, _)| sym.clone())
            .collect();
        out.sort();
        out
    }

    pub fn delivered_to(&self, id: &SubscriberId) -> u64 {
        self.subscribers.get(id).map_or(0, |s| s.delivered)
    }

    pub fn queue_high_watermark(&self, id: &SubscriberId) -> usize {
        self.subscribers.get(id).map_or(0, |s| s.degrader.queue_high_watermark())
    }

    pub fn pending(&self) -> usize {
        self.subscribers.values().map(|s| s.degrader.pending()).sum()
    }

    pub fn subscribe(&mut self, sub: Subscription) -> Result<(), BrokerError> {
        if let Some(existing) = self.subscribers.get(&sub.subscriber) {
            return if existing.subscription == sub {
                Ok(())
            } else {
                Err(BrokerError::SubscriberExists(sub.subscriber))
            };
        }
        let broker = self
            .topology
            .attachment
            .get(&sub.subscriber)
            .filter(|b| self.tables.contains_key(*b))
            .cloned()
            .ok_or_else(|| BrokerError::UnknownBrokerAttachment(sub.subscriber.clone()))?;
        if let Some(admission) = &self.admission {
            admission
                .admit(&sub, self.clock)
                .map_err(|reason| BrokerError::NotEntitled(sub.subscriber.clone(), reason))?;
        }
        for (b, next) in &self.toward[&broker] {
            let table = self.tables.get_mut(b).expect("tree broker has a table");
            let hop = match next {
                None => Hop::Local(sub.subscriber.clone()),
                Some(n) => Hop::Link(n.clone()),
            };
            for atom in &sub.filter {
                table.insert(atom.clone(), hop.clone());
            }
        }
        self.subscribers.insert(
            sub.subscriber.clone(),
            SubscriberState {
                degrader: Degrader::new(sub.qoi, sub.policy),
                subscription: sub,
                broker,
                last_seq: HashMap::new(),
                last_value: HashMap::new(),
                last_pushed: HashMap::new(),
                matched: 0,
                delivered: 0,
            },
        );
        Ok(())
    }

    /// Routes `n` through the overlay and returns every delivery that became
    /// due up to and including its publish time.
    pub fn publish(&mut self, n: Arc<Notification>) -> Result<DeliveryReport, BrokerError> {
        let origin = self
            .topology
            .publisher_attach
            .get(&n.feed_id)
            .cloned()
            .ok_or_else(|| BrokerError::UnattachedPublisher(n.feed_id.clone()))?;
        if n.publish_ts < self.clock {
            return Err(BrokerError::OutOfOrder {
                clock: self.clock,
                ts: n.publish_ts,
            });
        }
        let mut report = Vec::new();
        self.release_due(n.publish_ts, &mut report);
        self.clock = n.publish_ts;
        self.counters.published += 1;

        let mut reached = Vec::new();
        let mut frontier = vec![(origin, None::<BrokerId>)];
        while let Some((at, from)) = frontier.pop() {
            for hop in self.tables[&at].route(&n, from.as_ref()) {
                match hop {
                    Hop::Local(s) => reached.push(s),
                    Hop::Link(next) => {
                        let key = if at < next { (at.clone(), next.clone()) } else { (next.clone(), at.clone()) };
                        *self.link_traffic.get_mut(&key).expect("routing only uses tree links") += 1;
                        frontier.push((next, Some(at.clone())));
                    }
                }
            }
        }
        reached.sort();
        for s in reached {
            let state = self.subscribers.get_mut(&s).expect("routed subscriber exists");
            state.matched += 1;
            if state.tracks(&n) {
                state.last_pushed.insert(n.symbol.clone(), n.clone());
            }
            let mut out = std::mem::take(&mut self.scratch);
            state.degrader.push(n.clone(), &mut out);
            self.deliver(&s, &mut out, &mut report);
            self.scratch = out;
        }
        Ok(report)
    }

    /// Releases everything due strictly before `t`.
    pub fn advance_to(&mut self, t: VirtualTime) -> DeliveryReport {
        let mut report = Vec::new();
        if t > self.clock {
            self.release_due(t, &mut report);
            self.clock = t;
        }
        report
    }

    /// Flushes every degrader.
    pub fn finish(&mut self) -> DeliveryReport {
        let mut report = Vec::new();
        let ids: Vec<SubscriberId> = self.subscribers.keys().cloned().collect();
        for s in ids {
            let mut out = std::mem::take(&mut self.scratch);
            self.subscribers.get_mut(&s).unwrap().degrader.finish(&mut out);
            self.deliver(&s, &mut out, &mut report);
            self.scratch = out;
        }
        sort_report(&mut report);
        report
    }

    fn release_due(&mut self, t: VirtualTime, report: &mut DeliveryReport) {
        let ids: Vec<SubscriberId> = self
            .subscribers
            .iter()
            .filter(|(_, s)| s.degrader.pending() > 0)
            .map(|(id, _)| id.clone())
            .collect();
        let start = report.len();
        for s in ids {
            let mut out = std::mem::take(&mut self.scratch);
            self.subscribers.get_mut(&s).unwrap().degrader.advance_to(t, &mut out);
            self.deliver(&s, &mut out, report);
            self.scratch = out;
        }
        sort_report(&mut report[start..]);
    }

    /// Path delay from the publisher of `feed` to `broker`: link latencies
    /// plus processing at every broker on the way, the last one included.
    pub fn path_delay(&mut self, feed: &Arc<str>, broker: &BrokerId) -> Duration {
        let origin = &self.topology.publisher_attach[feed];
        Duration::from_micros(self.path_delay_micros(origin.clone(), broker.clone()))
    }

    fn path_delay_micros(&mut self, origin: BrokerId, broker: BrokerId) -> u64 {
        if let Some(d) = self.path_delay.get(&(origin.clone(), broker.clone())) {
            return *d;
        }
        let path = self.tree.path(&origin, &broker);
        let links: u64 = path
            .windows(2)
            .map(|w| micros_of(self.tree.latency(&w[0], &w[1]).expect("path follows tree links")))
            .sum();
        let d = links + path.len() as u64 * micros_of(self.processing_cost);
        self.path_delay.insert((origin, broker), d);
        d
    }

    fn deliver(&mut self, s: &SubscriberId, out: &mut Vec<Release>, report: &mut DeliveryReport) {
        for r in out.drain(..) {
            let anchor = r.item.anchor();
            let origin = self.topology.publisher_attach[&anchor.feed_id].clone();
            let broker = self.subscribers[s].broker.clone();
            let delay = self.path_delay_micros(origin, broker);
            let state = self.subscribers.get_mut(s).unwrap();
            let anchor = r.item.anchor();
            let is_bar = matches!(r.item, DeliveredItem::Bar(_));
            let key = (anchor.feed_id.clone(), anchor.channel_id, anchor.symbol.clone(), is_bar);
            match state.last_seq.get(&key) {
                Some(&last) if anchor.seq_no <= last => {
                    self.counters.duplicates_suppressed += 1;
                    continue;
                }
                _ => {}
            }
            state.last_seq.insert(key, anchor.seq_no);
            let last = match &r.item {
                DeliveredItem::Notification(n) => n.clone(),
                DeliveredItem::Bar(b) => b.last.clone(),
            };
            if state.tracks(&last) {
                state.last_value.insert(anchor.symbol.clone(), last);
            }
            state.delivered += 1;
            self.counters.delivered += 1;
            report.push(Delivery {
                subscriber: s.clone(),
                deliver_ts: r.release_ts + Duration::from_micros(delay),
                release_ts: r.release_ts,
                item: r.item,
            });
        }
    }
}

/// Canonical report order: delivery time, then subscriber, then anchor identity.
pub fn sort_report(report: &mut [Delivery]) {
    report.sort_by(|x, y| {
        let (a, b) = (x.item.anchor(), y.item.anchor());
        (x.deliver_ts, &x.subscriber, &a.feed_id, a.channel_id, a.seq_no).cmp(&(
            y.deliver_ts,
            &y.subscriber,
            &b.feed_id,
            b.channel_id,
            b.seq_no,
        ))
    });
}
