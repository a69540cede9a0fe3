//! KPIs derived from ticks plus the running session, and simple complex
//! events (new day extremes, spread alerts) re-published as statistics.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{div_round_half_even, EnrichedFields, Notification, NotificationKind, Price, SymbolRef, VirtualTime};

/// Feed id under which derived events are published.
pub const DERIVED_FEED: &str = "DERIVED";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnrichmentError {
    #[error("no open price yet for {0}")]
    MissingOpen(SymbolRef),
    #[error("KPIs need a tick notification")]
    NotATick,
}

/// Session accumulator for the volume-weighted average mid-price.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VwapAccumulator {
    sum_mid_volume: i128,
    sum_volume: u128,
}

impl VwapAccumulator {
    pub fn push(&mut self, mid: Price, volume: u64) {
        self.sum_mid_volume += mid.raw() as i128 * volume as i128;
        self.sum_volume += volume as u128;
    }

    pub fn volume(&self) -> u128 {
        self.sum_volume
    }

    /// `None` until some volume has accumulated.
    pub fn vwap(&self) -> Option<Price> {
        (self.sum_volume > 0)
            .then(|| Price::from_raw(div_round_half_even(self.sum_mid_volume, self.sum_volume as i128) as i64))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KpiSnapshot {
    pub symbol: SymbolRef,
    pub as_of: VirtualTime,
    pub spread: Price,
    pub mid: Price,
    pub vwap_session: Option<Price>,
    /// Change of mid against the session open, in per-mille.
    pub pct_change_from_open: i64,
}

/// Folds the tick into `acc` and computes its KPIs against the day state.
pub fn compute_kpis(n: &Notification, day_state: &EnrichedFields, acc: &mut VwapAccumulator) -> Result<KpiSnapshot, EnrichmentError> {
    let tick = n.tick().ok_or(EnrichmentError::NotATick)?;
    let open = day_state.open.ok_or_else(|| EnrichmentError::MissingOpen(n.symbol.clone()))?;
    let mid = tick.mid();
    acc.push(mid, tick.volume());
    let pct = div_round_half_even(1000 * (mid.raw() as i128 - open.raw() as i128), open.raw() as i128);
    Ok(KpiSnapshot {
        symbol: n.symbol.clone(),
        as_of: n.publish_ts,
        spread: tick.spread(),
        mid,
        vwap_session: acc.vwap(),
        pct_change_from_open: pct as i64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DerivedEventKind {
    NewDayHigh,
    NewDayLow,
    SpreadAbove(Price),
}

impl DerivedEventKind {
    fn code(self) -> u8 {
        match self {
            DerivedEventKind::NewDayHigh => 1,
            DerivedEventKind::NewDayLow => 2,
            DerivedEventKind::SpreadAbove(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedEvent {
    pub kind: DerivedEventKind,
    pub symbol: SymbolRef,
    pub triggered_at: VirtualTime,
    /// New extreme or the spread that crossed the threshold.
    pub value: Price,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventThresholds {
    pub spread_above: Vec<Price>,
}

/// Events caused by moving from `previous` to `next` day state.
///
/// Extremes fire only on strict improvement over an existing extreme, so the
/// first tick of a day seeds without firing. A spread alert fires when the
/// spread rises above a threshold it was not above before (or had no
/// previous value).
pub fn detect_events(
    previous: Option<&EnrichedFields>,
    next: &EnrichedFields,
    previous_spread: Option<Price>,
    kpis: &KpiSnapshot,
    thresholds: &EventThresholds,
) -> Vec<DerivedEvent> {
    let mut out = Vec::new();
    let event = |kind, value| DerivedEvent {
        kind,
        symbol: kpis.symbol.clone(),
        triggered_at: kpis.as_of,
        value,
    };
    if let (Some(old), Some(new)) = (previous.and_then(|p| p.day_high), next.day_high) {
        if new > old {
            out.push(event(DerivedEventKind::NewDayHigh, new));
        }
    }
    if let (Some(old), Some(new)) = (previous.and_then(|p| p.day_low), next.day_low) {
        if new < old {
            out.push(event(DerivedEventKind::NewDayLow, new));
        }
    }
    for &threshold in &thresholds.spread_above {
        let was_above = previous_spread.is_some_and(|s| s > threshold);
        if kpis.spread > threshold && !was_above {
            out.push(event(DerivedEventKind::SpreadAbove(threshold), kpis.spread));
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
struct SymbolSession {
    day_state: Option<EnrichedFields>,
    vwap: VwapAccumulator,
    last_spread: Option<Price>,
}

/// Per-feed enrichment state, one session per symbol.
#[derive(Debug, Default)]
pub struct Enricher {
    thresholds: EventThresholds,
    sessions: HashMap<SymbolRef, SymbolSession>,
}

impl Enricher {
    pub fn new(thresholds: EventThresholds) -> Self {
        Enricher {
            thresholds,
            sessions: HashMap::new(),
        }
    }

    /// `n` must already carry its enriched day state.
    pub fn on_tick(&mut self, n: &Notification) -> Result<(KpiSnapshot, Vec<DerivedEvent>), EnrichmentError> {
        let day_state = n.enriched.ok_or_else(|| EnrichmentError::MissingOpen(n.symbol.clone()))?;
        let session = self.sessions.entry(n.symbol.clone()).or_default();
        let kpis = compute_kpis(n, &day_state, &mut session.vwap)?;
        let events = detect_events(
            session.day_state.as_ref(),
            &day_state,
            session.last_spread,
            &kpis,
            &self.thresholds,
        );
        session.day_state = Some(day_state);
        session.last_spread = Some(kpis.spread);
        Ok((kpis, events))
    }

    pub fn reset_day(&mut self) {
        self.sessions.clear();
    }
}

/// Turns derived events into statistics notifications on the derived feed,
/// one channel per event kind, each sequenced from 1.
#[derive(Debug)]
pub struct DerivedPublisher {
    feed_id: Arc<str>,
    next_seq: BTreeMap<u8, u32>,
}

impl Default for DerivedPublisher {
    fn default() -> Self {
        DerivedPublisher {
            feed_id: Arc::from(DERIVED_FEED),
            next_seq: BTreeMap::new(),
        }
    }
}

impl DerivedPublisher {
    pub fn to_notification(&mut self, event: &DerivedEvent) -> Notification {
        let channel = event.kind.code();
        let seq = self.next_seq.entry(channel).or_insert(1);
        let mut body = Vec::with_capacity(17);
        body.push(channel);
        body.extend_from_slice(&event.value.raw().to_be_bytes());
        let threshold = match event.kind {
            DerivedEventKind::SpreadAbove(t) => t.raw(),
            _ => 0,
        };
        body.extend_from_slice(&threshold.to_be_bytes());
        let n = Notification::with_body(
            self.feed_id.clone(),
            channel,
            *seq,
            NotificationKind::Statistics,
            event.symbol.clone(),
            event.triggered_at,
            Arc::from(body),
        );
        *seq += 1;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Payload, TickFlags, TickPayload};

    fn tick(ts: u64, bid: i64, ask: i64, enriched: EnrichedFields) -> Notification {
        let mut n = Notification::new(
            Arc::from("F"),
            0,
            1,
            "AAPL@XNAS".parse().unwrap(),
            VirtualTime::from_micros(ts),
            Payload::Tick(TickPayload::quote(
                Price::from_raw(bid),
                Price::from_raw(ask),
                100,
                200,
                VirtualTime::from_micros(ts),
                TickFlags::empty(),
            )),
        );
        n.enriched = Some(enriched);
        n
    }

    fn seeded(mid: i64) -> EnrichedFields {
        let p = Some(Price::from_raw(mid));
        EnrichedFields {
            total_volume: Some(300),
            open: p,
            close: None,
            day_high: p,
            day_low: p,
        }
    }

    #[test]
    fn spread_and_mid() {
        let n = tick(1, 1534500, 1534600, seeded(1534550));
        let mut acc = VwapAccumulator::default();
        let k = compute_kpis(&n, &n.enriched.unwrap(), &mut acc).unwrap();
        assert_eq!(k.spread, Price::from_raw(100));
        assert_eq!(k.spread.to_string(), "0.0100");
        assert_eq!(k.mid.to_string(), "153.4550");
        assert_eq!(k.pct_change_from_open, 0);
        assert_eq!(k.vwap_session, Some(k.mid));
    }

    #[test]
    fn missing_open() {
        let n = tick(1, 100, 102, EnrichedFields::default());
        let mut acc = VwapAccumulator::default();
        assert!(matches!(
            compute_kpis(&n, &EnrichedFields::default(), &mut acc),
            Err(EnrichmentError::MissingOpen(_))
        ));
    }

    #[test]
    fn pct_change_rounds() {
        // open 100.0000, mid 100.0500 -> 0.5 per-mille -> ties to even -> 0
        let n = tick(1, 1000000, 1001000, seeded(1000000));
        let k = compute_kpis(&n, &n.enriched.unwrap(), &mut VwapAccumulator::default()).unwrap();
        assert_eq!(k.pct_change_from_open, 0);
        // mid 100.1500 -> 1.5 per-mille -> 2
        let n = tick(1, 1001000, 1002000, seeded(1000000));
        let k = compute_kpis(&n, &n.enriched.unwrap(), &mut VwapAccumulator::default()).unwrap();
        assert_eq!(k.pct_change_from_open, 2);
    }

    #[test]
    fn equal_high_does_not_refire() {
        let prev = seeded(100);
        let kpis = KpiSnapshot {
            symbol: "AAPL@XNAS".parse().unwrap(),
            as_of: VirtualTime::ZERO,
            spread: Price::from_raw(2),
            mid: Price::from_raw(100),
            vwap_session: None,
            pct_change_from_open: 0,
        };
        let th = EventThresholds::default();
        assert!(detect_events(Some(&prev), &prev, None, &kpis, &th).is_empty());
        let mut higher = prev;
        higher.day_high = Some(Price::from_raw(101));
        let ev = detect_events(Some(&prev), &higher, None, &kpis, &th);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, DerivedEventKind::NewDayHigh);
        assert!(detect_events(None, &higher, None, &kpis, &th).is_empty());
    }

    #[test]
    fn spread_alert_fires_on_upward_crossing_only() {
        let th = EventThresholds {
            spread_above: vec![Price::from_raw(5)],
        };
        let state = seeded(100);
        let mut kpis = KpiSnapshot {
            symbol: "AAPL@XNAS".parse().unwrap(),
            as_of: VirtualTime::ZERO,
            spread: Price::from_raw(6),
            mid: Price::from_raw(100),
            vwap_session: None,
            pct_change_from_open: 0,
        };
        assert_eq!(detect_events(Some(&state), &state, Some(Price::from_raw(5)), &kpis, &th).len(), 1);
        assert!(detect_events(Some(&state), &state, Some(Price::from_raw(6)), &kpis, &th).is_empty());
        kpis.spread = Price::from_raw(5);
        assert!(detect_events(Some(&state), &state, Some(Price::from_raw(1)), &kpis, &th).is_empty());
    }

    #[test]
    fn derived_notifications_are_sequenced_per_kind() {
        let mut p = DerivedPublisher::default();
        let ev = |kind| DerivedEvent {
            kind,
            symbol: "AAPL@XNAS".parse().unwrap(),
            triggered_at: VirtualTime::from_secs(1),
            value: Price::from_raw(1),
        };
        let a = p.to_notification(&ev(DerivedEventKind::NewDayHigh));
        let b = p.to_notification(&ev(DerivedEventKind::NewDayHigh));
        let c = p.to_notification(&ev(DerivedEventKind::NewDayLow));
        assert_eq!((a.channel_id, a.seq_no), (1, 1));
        assert_eq!((b.channel_id, b.seq_no), (1, 2));
        assert_eq!((c.channel_id, c.seq_no), (2, 1));
        assert_eq!(&*a.feed_id, DERIVED_FEED);
        assert_eq!(a.kind, NotificationKind::Statistics);
        assert!(a.within_size_bounds());
    }
}
