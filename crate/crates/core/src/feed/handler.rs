use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use super::text::{parse_text_record, TextError};
use super::vfb::{parse_vfb_frame, VfbError};
use crate::model::{EnrichedFields, Notification, NotificationKind, SymbolRef, TickFlags, VirtualTime};
use crate::symbology::SymbologyStore;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedError {
    #[error("duplicate or replayed seq {received} on channel {channel_id} (expected {expected})")]
    DuplicateOrReplay { channel_id: u8, expected: u32, received: u32 },
    #[error("unknown symbol {0}")]
    UnknownSymbol(SymbolRef),
    #[error("day boundary {requested} does not follow {previous}")]
    NonMonotonicBoundary { previous: VirtualTime, requested: VirtualTime },
    #[error("enrichment needs a tick notification")]
    NotATick,
    #[error(transparent)]
    Vfb(#[from] VfbError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// A sequence number jumped forward on one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapEvent {
    pub feed_id: Arc<str>,
    pub channel_id: u8,
    pub expected: u32,
    pub received: u32,
    pub detected_at: VirtualTime,
}

impl GapEvent {
    pub fn missing(&self) -> u32 {
        self.received - self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SequenceCheck {
    InOrder,
    Gap(GapEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    Vfb,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuarantineReason {
    Unparseable(String),
    UnknownSymbol(SymbolRef),
}

#[derive(Debug, Clone)]
pub struct QuarantineEntry {
    pub raw: Vec<u8>,
    pub format: WireFormat,
    pub reason: QuarantineReason,
    /// Parsed and sequenced notification awaiting symbol resolution.
    pub notification: Option<Notification>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ingested {
    Delivered {
        notification: Notification,
        gap: Option<GapEvent>,
    },
    Quarantined(QuarantineReason),
    Duplicate {
        channel_id: u8,
        expected: u32,
        received: u32,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HandlerCounters {
    pub received: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub released_from_quarantine: u64,
    pub gaps: u64,
    pub missing_by_gaps: u64,
}

/// Per-feed handler: sequence checking, symbol normalization and daily
/// statistics enrichment. Sequence numbers on every channel start at 1.
#[derive(Debug)]
pub struct FeedHandler {
    feed_id: Arc<str>,
    next_expected_seq: BTreeMap<u8, u32>,
    day_state: HashMap<SymbolRef, EnrichedFields>,
    quarantine: Vec<QuarantineEntry>,
    last_boundary: Option<VirtualTime>,
    gaps: Vec<GapEvent>,
    counters: HandlerCounters,
}

pub const FIRST_SEQ: u32 = 1;

impl FeedHandler {
    pub fn new(feed_id: impl Into<Arc<str>>) -> Self {
        FeedHandler {
            feed_id: feed_id.into(),
            next_expected_seq: BTreeMap::new(),
            day_state: HashMap::new(),
            quarantine: Vec::new(),
            last_boundary: None,
            gaps: Vec::new(),
            counters: HandlerCounters::default(),
        }
    }

    pub fn feed_id(&self) -> &Arc<str> {
        &self.feed_id
    }

    pub fn counters(&self) -> HandlerCounters {
        self.counters
    }

    pub fn gaps(&self) -> &[GapEvent] {
        &self.gaps
    }

    pub fn quarantine(&self) -> &[QuarantineEntry] {
        &self.quarantine
    }

    pub fn next_expected(&self, channel_id: u8) -> Option<u32> {
        self.next_expected_seq.get(&channel_id).copied()
    }

    pub fn day_state(&self, symbol: &SymbolRef) -> Option<&EnrichedFields> {
        self.day_state.get(symbol)
    }

    /// Advances the channel's expected sequence number. A jump forward is
    /// reported as a gap and resynchronizes past the received number.
    pub fn check_sequence(&mut self, n: &Notification) -> Result<SequenceCheck, FeedError> {
        let expected = self.next_expected_seq.entry(n.channel_id).or_insert(FIRST_SEQ);
        if n.seq_no < *expected {
            return Err(FeedError::DuplicateOrReplay {
                channel_id: n.channel_id,
                expected: *expected,
                received: n.seq_no,
            });
        }
        let outcome = if n.seq_no == *expected {
            SequenceCheck::InOrder
        } else {
            SequenceCheck::Gap(GapEvent {
                feed_id: self.feed_id.clone(),
                channel_id: n.channel_id,
                expected: *expected,
                received: n.seq_no,
                detected_at: n.publish_ts,
            })
        };
        *expected = n.seq_no.wrapping_add(1);
        Ok(outcome)
    }

    /// Resolves the symbol and fills the daily statistics of a tick from
    /// the running day state. The tick's own fields are left untouched.
    pub fn normalize_and_enrich(&mut self, store: &SymbologyStore, mut n: Notification) -> Result<Notification, FeedError> {
        let Some(tick) = n.tick() else {
            return Err(FeedError::NotATick);
        };
        if store.resolve(&n.symbol).is_err() {
            return Err(FeedError::UnknownSymbol(n.symbol.clone()));
        }
        let mid = tick.mid();
        let volume = tick.volume();
        let close = tick.flags.contains(TickFlags::CLOSE);
        let state = self.day_state.entry(n.symbol.clone()).or_default();
        state.open.get_or_insert(mid);
        state.day_high = Some(state.day_high.map_or(mid, |h| h.max(mid)));
        state.day_low = Some(state.day_low.map_or(mid, |l| l.min(mid)));
        state.total_volume = Some(state.total_volume.unwrap_or(0) + volume);
        if close {
            state.close = Some(mid);
        }
        n.enriched = Some(*state);
        Ok(n)
    }

    /// Clears all daily statistics at a trading-day boundary.
    pub fn reset_day(&mut self, boundary: VirtualTime) -> Result<(), FeedError> {
        if let Some(previous) = self.last_boundary {
            if boundary <= previous {
                return Err(FeedError::NonMonotonicBoundary {
                    previous,
                    requested: boundary,
                });
            }
        }
        self.last_boundary = Some(boundary);
        self.day_state.clear();
        Ok(())
    }

    pub fn ingest_frame(&mut self, store: &SymbologyStore, frame: &[u8]) -> Ingested {
        self.counters.received += 1;
        match parse_vfb_frame(&self.feed_id, frame) {
            Ok(n) => self.sequence_and_normalize(store, n, frame, WireFormat::Vfb),
            Err(e) => self.quarantine_unparseable(frame, WireFormat::Vfb, e.to_string()),
        }
    }

    /// Text records carry their own feed id; records for other feeds are
    /// quarantined as unparseable.
    pub fn ingest_text(&mut self, store: &SymbologyStore, line: &str) -> Ingested {
        self.counters.received += 1;
        match parse_text_record(line) {
            Ok(n) if n.feed_id != self.feed_id => {
                let reason = format!("record for feed {} on handler {}", n.feed_id, self.feed_id);
                self.quarantine_unparseable(line.as_bytes(), WireFormat::Text, reason)
            }
            Ok(n) => self.sequence_and_normalize(store, n, line.as_bytes(), WireFormat::Text),
            Err(e) => self.quarantine_unparseable(line.as_bytes(), WireFormat::Text, e.to_string()),
        }
    }

    fn quarantine_unparseable(&mut self, raw: &[u8], format: WireFormat, reason: String) -> Ingested {
        let reason = QuarantineReason::Unparseable(reason);
        self.quarantine.push(QuarantineEntry {
            raw: raw.to_vec(),
            format,
            reason: reason.clone(),
            notification: None,
        });
        Ingested::Quarantined(reason)
    }

    fn sequence_and_normalize(&mut self, store: &SymbologyStore, n: Notification, raw: &[u8], format: WireFormat) -> Ingested {
        let gap = match self.check_sequence(&n) {
            Ok(SequenceCheck::InOrder) => None,
            Ok(SequenceCheck::Gap(g)) => {
                self.counters.gaps += 1;
                self.counters.missing_by_gaps += g.missing() as u64;
                self.gaps.push(g.clone());
                Some(g)
            }
            Err(FeedError::DuplicateOrReplay {
                channel_id,
                expected,
                received,
            }) => {
                self.counters.duplicates += 1;
                return Ingested::Duplicate {
                    channel_id,
                    expected,
                    received,
                };
            }
            Err(other) => unreachable!("sequence check only reports duplicates: {other}"),
        };
        match self.normalize(store, n) {
            Ok(notification) => {
                self.counters.delivered += 1;
                Ingested::Delivered { notification, gap }
            }
            Err((n, symbol)) => {
                let reason = QuarantineReason::UnknownSymbol(symbol);
                self.quarantine.push(QuarantineEntry {
                    raw: raw.to_vec(),
                    format,
                    reason: reason.clone(),
                    notification: Some(n),
                });
                Ingested::Quarantined(reason)
            }
        }
    }

    fn normalize(&mut self, store: &SymbologyStore, n: Notification) -> Result<Notification, (Notification, SymbolRef)> {
        if n.kind == NotificationKind::Tick {
            let fallback = n.clone();
            self.normalize_and_enrich(store, n).map_err(|e| match e {
                FeedError::UnknownSymbol(s) => (fallback, s),
                other => unreachable!("tick enrichment failed: {other}"),
            })
        } else if store.resolve(&n.symbol).is_ok() {
            Ok(n)
        } else {
            let symbol = n.symbol.clone();
            Err((n, symbol))
        }
    }

    /// Re-processes quarantined notifications whose symbol now resolves,
    /// in arrival order. Unparseable entries stay quarantined.
    pub fn retry_quarantine(&mut self, store: &SymbologyStore) -> Vec<Notification> {
        let mut released = Vec::new();
        let mut kept = Vec::with_capacity(self.quarantine.len());
        for entry in std::mem::take(&mut self.quarantine) {
            match (&entry.reason, &entry.notification) {
                (QuarantineReason::UnknownSymbol(sym), Some(n)) if store.resolve(sym).is_ok() => {
                    match self.normalize(store, n.clone()) {
                        Ok(n) => released.push(n),
                        Err(_) => kept.push(entry),
                    }
                }
                _ => kept.push(entry),
            }
        }
        self.quarantine = kept;
        self.counters.delivered += released.len() as u64;
        self.counters.released_from_quarantine += released.len() as u64;
        released
    }
}
