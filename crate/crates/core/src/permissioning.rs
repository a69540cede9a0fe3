//! Entitlement admission, per-subscriber metering and usage reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use thiserror::Error;

use crate::broker::{Admission, Delivery, FilterAtom, SubscriberId, Subscription};
use crate::model::{parse_duration, Mic, QoISpec, QoiDimension, SymbolRef, VirtualTime};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Feed(Arc<str>),
    Exchange(Mic),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Feed(x) => write!(f, "feed:{x}"),
            Scope::Exchange(m) => write!(f, "mic:{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entitlement {
    pub subscriber: SubscriberId,
    pub scope: Scope,
    pub max_qoi: QoISpec,
    pub valid_from: VirtualTime,
    pub valid_to: VirtualTime,
}

impl Entitlement {
    pub fn is_valid_at(&self, t: VirtualTime) -> bool {
        self.valid_from <= t && t < self.valid_to
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenyReason {
    /// No entitlement of the subscriber names the atom's feed or exchange.
    NotCovered,
    /// Covering entitlements exist but none is valid at the check time.
    OutsideValidity,
    /// Covering, valid entitlements exist but all grant less than requested.
    Qoi(QoiDimension),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Permit,
    Deny { atom: FilterAtom, reason: DenyReason },
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Permit => f.write_str("permit"),
            Decision::Deny { atom, reason } => match reason {
                DenyReason::NotCovered => write!(f, "{atom}: not covered"),
                DenyReason::OutsideValidity => write!(f, "{atom}: outside validity"),
                DenyReason::Qoi(d) => write!(f, "{atom}: {d}"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PermissionError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("entitlement for {0} has valid_from >= valid_to")]
    EmptyValidity(SubscriberId),
    #[error("period ending on day {requested} is still open (closed through {closed:?})")]
    PeriodStillOpen { requested: u32, closed: Option<u32> },
    #[error("bad period {0}..={1}")]
    BadPeriod(u32, u32),
}

/// Entitlements plus the feed catalog that maps each feed to its exchange.
#[derive(Debug, Clone, Default)]
pub struct EntitlementStore {
    by_subscriber: BTreeMap<SubscriberId, Vec<Entitlement>>,
    catalog: BTreeMap<Arc<str>, Mic>,
}

impl EntitlementStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_feed(&mut self, feed: impl Into<Arc<str>>, mic: Mic) {
        self.catalog.insert(feed.into(), mic);
    }

    pub fn feed_mic(&self, feed: &str) -> Option<Mic> {
        self.catalog.get(feed).copied()
    }

    pub fn grant(&mut self, e: Entitlement) -> Result<(), PermissionError> {
        if e.valid_from >= e.valid_to {
            return Err(PermissionError::EmptyValidity(e.subscriber));
        }
        self.by_subscriber.entry(e.subscriber.clone()).or_default().push(e);
        Ok(())
    }

    pub fn entitlements_of(&self, s: &SubscriberId) -> &[Entitlement] {
        self.by_subscriber.get(s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.by_subscriber.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether `scope` names the feed or exchange an atom draws from.
    pub fn covers(&self, scope: &Scope, atom: &FilterAtom) -> bool {
        match (scope, atom) {
            (Scope::Feed(f), FilterAtom::Feed(g)) => f == g,
            (Scope::Exchange(m), FilterAtom::Feed(g)) => self.feed_mic(g) == Some(*m),
            (Scope::Exchange(m), FilterAtom::Symbol(s)) => s.mic() == *m,
            (Scope::Feed(f), FilterAtom::Symbol(s)) => self.feed_mic(f) == Some(s.mic()),
        }
    }

    /// Loads `subscriber|scope|max_qoi|valid_from|valid_to` lines.
    pub fn load<R: BufRead>(&mut self, reader: R) -> Result<usize, PermissionError> {
        let mut n = 0;
        for (i, line) in reader.lines().enumerate() {
            let malformed = |reason: String| PermissionError::Malformed { line: i + 1, reason };
            let line = line.map_err(|e| malformed(e.to_string()))?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let e = parse_entitlement_line(t).map_err(malformed)?;
            self.grant(e)?;
            n += 1;
        }
        Ok(n)
    }
}

fn parse_time(s: &str) -> Result<VirtualTime, String> {
    if s == "*" {
        return Ok(VirtualTime::from_micros(u64::MAX));
    }
    parse_duration(s)
        .map(|d| VirtualTime::from_micros(0) + d)
        .map_err(|e| e.to_string())
}

/// Grammar: `subscriber|feed:ID or mic:MIC|qoi|valid_from|valid_to`. Times
/// are offsets from the simulation epoch in duration syntax; `*` as
/// `valid_to` means open-ended.
pub fn parse_entitlement_line(line: &str) -> Result<Entitlement, String> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    let [subscriber, scope, qoi, from, to] = fields[..] else {
        return Err("expected subscriber|scope|qoi|valid_from|valid_to".into());
    };
    if subscriber.is_empty() {
        return Err("empty subscriber id".into());
    }
    let scope = match scope.split_once(':') {
        Some(("feed", f)) if !f.is_empty() => Scope::Feed(Arc::from(f)),
        Some(("mic", m)) => Scope::Exchange(Mic::new(m).map_err(|e| e.to_string())?),
        _ => return Err(format!("bad scope {scope:?}")),
    };
    Ok(Entitlement {
        subscriber: SubscriberId::new(subscriber),
        scope,
        max_qoi: qoi.parse().map_err(|e: crate::model::ModelError| e.to_string())?,
        valid_from: parse_time(from)?,
        valid_to: parse_time(to)?,
    })
}

pub fn format_entitlement_line(e: &Entitlement) -> String {
    let to = if e.valid_to.as_micros() == u64::MAX {
        "*".to_string()
    } else {
        e.valid_to.as_micros().to_string()
    };
    format!("{}|{}|{}|{}|{}", e.subscriber, e.scope, e.max_qoi, e.valid_from.as_micros(), to)
}

/// Permits iff every filter atom is covered by some entitlement that is
/// valid at `now` and grants at least the requested QoI.
pub fn check_entitlement(store: &EntitlementStore, sub: &Subscription, now: VirtualTime) -> Decision {
    let grants = store.entitlements_of(&sub.subscriber);
    for atom in &sub.filter {
        let covering: Vec<&Entitlement> = grants.iter().filter(|e| store.covers(&e.scope, atom)).collect();
        if covering.is_empty() {
            return deny(atom, DenyReason::NotCovered);
        }
        let valid: Vec<&&Entitlement> = covering.iter().filter(|e| e.is_valid_at(now)).collect();
        if valid.is_empty() {
            return deny(atom, DenyReason::OutsideValidity);
        }
        let mut first_violation = None;
        let mut ok = false;
        for e in valid {
            match sub.qoi.within(&e.max_qoi) {
                Ok(()) => {
                    ok = true;
                    break;
                }
                Err(d) => {
                    first_violation.get_or_insert(d);
                }
            }
        }
        if !ok {
            return deny(atom, DenyReason::Qoi(first_violation.expect("at least one valid entitlement")));
        }
    }
    Decision::Permit
}

fn deny(atom: &FilterAtom, reason: DenyReason) -> Decision {
    Decision::Deny {
        atom: atom.clone(),
        reason,
    }
}

impl Admission for EntitlementStore {
    fn admit(&self, sub: &Subscription, now: VirtualTime) -> Result<(), String> {
        match check_entitlement(self, sub, now) {
            Decision::Permit => Ok(()),
            deny => Err(deny.to_string()),
        }
    }
}

impl<T: Admission + ?Sized> Admission for Arc<T> {
    fn admit(&self, sub: &Subscription, now: VirtualTime) -> Result<(), String> {
        (**self).admit(sub, now)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MeterCell {
    pub count: u64,
    pub symbols: BTreeSet<SymbolRef>,
}

/// Delivered counts per (subscriber, feed, trading day). The trading day is
/// the UTC day of the delivered data's publish time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MeterLedger {
    cells: BTreeMap<(SubscriberId, Arc<str>, u32), MeterCell>,
    closed_through: Option<u32>,
    late: u64,
}

impl MeterLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cell(&self, subscriber: &SubscriberId, feed: &str, day: u32) -> Option<&MeterCell> {
        self.cells.get(&(subscriber.clone(), Arc::from(feed), day))
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(SubscriberId, Arc<str>, u32), &MeterCell)> {
        self.cells.iter()
    }

    pub fn total(&self) -> u64 {
        self.cells.values().map(|c| c.count).sum()
    }

    pub fn total_for(&self, subscriber: &SubscriberId) -> u64 {
        self.cells
            .iter()
            .filter(|((s, _, _), _)| s == subscriber)
            .map(|(_, c)| c.count)
            .sum()
    }

    /// Deliveries metered for days already closed. Non-zero means the
    /// report for those days was emitted too early.
    pub fn late_deliveries(&self) -> u64 {
        self.late
    }

    pub fn closed_through(&self) -> Option<u32> {
        self.closed_through
    }

    /// Declares that no further deliveries for days `<= day` will arrive.
    pub fn close_through(&mut self, day: u32) {
        self.closed_through = Some(self.closed_through.map_or(day, |c| c.max(day)));
    }

    pub fn record(&mut self, d: &Delivery) {
        let n = d.item.anchor();
        let day = n.publish_ts.day_index();
        if self.closed_through.is_some_and(|c| day <= c) {
            self.late += 1;
        }
        let cell = self
            .cells
            .entry((d.subscriber.clone(), n.feed_id.clone(), day))
            .or_default();
        cell.count += 1;
        if !cell.symbols.contains(&n.symbol) {
            cell.symbols.insert(n.symbol.clone());
        }
    }
}

pub fn meter_delivery(ledger: &mut MeterLedger, report: &[Delivery]) {
    for d in report {
        ledger.record(d);
    }
}

pub const USAGE_REPORT_HEADER: &str = "subscriber|feed|day|count|distinct_symbols";

/// Sorted rows for days `from..=to`, then one `*|feed|from-to|count|distinct`
/// totals row per feed. `distinct` in a totals row counts symbols of that
/// feed delivered to anyone during the period.
pub fn emit_usage_report(ledger: &MeterLedger, from: u32, to: u32) -> Result<String, PermissionError> {
    if from > to {
        return Err(PermissionError::BadPeriod(from, to));
    }
    if ledger.closed_through.is_none_or(|c| c < to) {
        return Err(PermissionError::PeriodStillOpen {
            requested: to,
            closed: ledger.closed_through,
        });
    }
    let mut out = String::from(USAGE_REPORT_HEADER);
    out.push('\n');
    let mut totals: BTreeMap<&Arc<str>, (u64, BTreeSet<&SymbolRef>)> = BTreeMap::new();
    for ((s, feed, day), cell) in &ledger.cells {
        if !(from..=to).contains(day) {
            continue;
        }
        out.push_str(&format!("{s}|{feed}|{day}|{}|{}\n", cell.count, cell.symbols.len()));
        let t = totals.entry(feed).or_default();
        t.0 += cell.count;
        t.1.extend(cell.symbols.iter());
    }
    for (feed, (count, symbols)) in totals {
        out.push_str(&format!("*|{feed}|{from}-{to}|{count}|{}\n", symbols.len()));
    }
    Ok(out)
}

/// Full ledger dump, one line per cell: `subscriber|feed|day|count|sym,sym,...`.
pub fn dump_ledger(ledger: &MeterLedger) -> String {
    let mut out = String::new();
    for ((s, feed, day), cell) in &ledger.cells {
        let syms: Vec<String> = cell.symbols.iter().map(ToString::to_string).collect();
        out.push_str(&format!("{s}|{feed}|{day}|{}|{}\n", cell.count, syms.join(",")));
    }
    out
}
