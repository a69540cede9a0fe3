//! Domain types shared by every stage of the plant: identifiers, notifications,
//! fixed-point prices, QoI dimensions and the virtual clock.

use std::cmp::Ordering;
use std::fmt;
use std::num::NonZeroU32;
use std::ops::{Add, Sub};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use bitflags::bitflags;
use thiserror::Error;

use crate::feed::vfb;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid MIC {0:?}")]
    InvalidMic(String),
    #[error("invalid ISIN {0:?}")]
    InvalidIsin(String),
    #[error("invalid symbol {0:?}")]
    InvalidSymbol(String),
    #[error("invalid price {0:?}")]
    InvalidPrice(String),
    #[error("invalid duration {0:?}")]
    InvalidDuration(String),
    #[error("invalid QoI: {0}")]
    InvalidQoi(String),
    #[error("unknown notification kind code {0}")]
    UnknownKindCode(u8),
}

/// Simulation clock in microseconds since the run epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualTime(u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);
    pub const MAX: VirtualTime = VirtualTime(u64::MAX);

    pub const fn from_micros(micros: u64) -> Self {
        VirtualTime(micros)
    }

    pub const fn from_secs(secs: u64) -> Self {
        VirtualTime(secs * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, d: Duration) -> Self {
        VirtualTime(self.0.saturating_sub(micros_of(d)))
    }

    /// Elapsed time since `earlier`, zero if `earlier` is later.
    pub fn since(self, earlier: VirtualTime) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }

    /// First multiple of `period` that is `>= self`.
    pub fn ceil_to(self, period: Duration) -> Self {
        let p = micros_of(period).max(1);
        VirtualTime(self.0.div_ceil(p) * p)
    }

    /// Last multiple of `period` that is `<= self`.
    pub fn floor_to(self, period: Duration) -> Self {
        let p = micros_of(period).max(1);
        VirtualTime(self.0 / p * p)
    }

    /// UTC calendar day index since the epoch.
    pub fn day_index(self) -> u32 {
        (self.0 / MICROS_PER_DAY) as u32
    }
}

pub const MICROS_PER_DAY: u64 = 86_400 * 1_000_000;

impl Add<Duration> for VirtualTime {
    type Output = VirtualTime;
    fn add(self, rhs: Duration) -> VirtualTime {
        VirtualTime(self.0 + micros_of(rhs))
    }
}

impl Sub for VirtualTime {
    type Output = Duration;
    fn sub(self, rhs: VirtualTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub(crate) fn micros_of(d: Duration) -> u64 {
    d.as_micros() as u64
}

/// Parses `250us`, `40ms`, `90s`, `15m`, `2h`, `1d`. A bare integer is microseconds.
pub fn parse_duration(s: &str) -> Result<Duration, ModelError> {
    let s = s.trim();
    let err = || ModelError::InvalidDuration(s.to_string());
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, unit) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|_| err())?;
    let micros = match unit {
        "" | "us" => n,
        "ms" => n * 1_000,
        "s" => n * 1_000_000,
        "m" | "min" => n * 60_000_000,
        "h" => n * 3_600_000_000,
        "d" => n * MICROS_PER_DAY,
        _ => return Err(err()),
    };
    Ok(Duration::from_micros(micros))
}

/// Inverse of [`parse_duration`], choosing the largest exact unit.
pub fn format_duration(d: Duration) -> String {
    let us = micros_of(d);
    for (unit, size) in [
        ("d", MICROS_PER_DAY),
        ("h", 3_600_000_000),
        ("m", 60_000_000),
        ("s", 1_000_000),
        ("ms", 1_000),
    ] {
        if us != 0 && us.is_multiple_of(size) {
            return format!("{}{unit}", us / size);
        }
    }
    format!("{us}us")
}

/// Fixed-point price, four decimal places.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Price(i64);

pub const PRICE_SCALE: i64 = 10_000;

impl Price {
    pub const fn from_raw(raw: i64) -> Self {
        Price(raw)
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    /// Mid-price `(bid + ask) / 2`, rounded half-to-even at the price scale.
    pub fn mid(bid: Price, ask: Price) -> Price {
        Price(div_round_half_even(bid.0 as i128 + ask.0 as i128, 2) as i64)
    }
}

impl Sub for Price {
    type Output = Price;
    fn sub(self, rhs: Price) -> Price {
        Price(self.0 - rhs.0)
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let scale = PRICE_SCALE as u64;
        write!(f, "{sign}{}.{:04}", abs / scale, abs % scale)
    }
}

impl FromStr for Price {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ModelError::InvalidPrice(s.to_string());
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() || frac.len() > 4 || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let int: i64 = int.parse().map_err(|_| err())?;
        let mut frac_raw: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| err())? };
        for _ in frac.len()..4 {
            frac_raw *= 10;
        }
        let raw = int
            .checked_mul(PRICE_SCALE)
            .and_then(|v| v.checked_add(frac_raw))
            .ok_or_else(err)?;
        Ok(Price(if neg { -raw } else { raw }))
    }
}

/// Integer division rounding to nearest, ties to even.
pub fn div_round_half_even(num: i128, den: i128) -> i128 {
    assert!(den != 0, "division by zero");
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        Ordering::Less => q,
        Ordering::Greater => q + 1,
        Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    }
}

/// ISO 10383 market identifier code.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mic([u8; 4]);

impl Mic {
    pub fn new(code: &str) -> Result<Self, ModelError> {
        let bytes = code.as_bytes();
        if bytes.len() != 4 || !bytes.iter().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit()) {
            return Err(ModelError::InvalidMic(code.to_string()));
        }
        Ok(Mic([bytes[0], bytes[1], bytes[2], bytes[3]]))
    }

    pub fn from_bytes(bytes: [u8; 4]) -> Result<Self, ModelError> {
        Mic::new(std::str::from_utf8(&bytes).map_err(|_| ModelError::InvalidMic(format!("{bytes:?}")))?)
    }

    pub fn as_bytes(&self) -> &[u8; 4] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        // constructed only from ASCII
        std::str::from_utf8(&self.0).expect("MIC is ASCII")
    }
}

impl FromStr for Mic {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mic::new(s)
    }
}

impl fmt::Display for Mic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Mic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mic({})", self.as_str())
    }
}

/// ISO 6166 instrument identifier. Always carries a valid check digit.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Isin([u8; 12]);

/// True iff `candidate` is a well-formed ISIN with a correct check digit.
pub fn validate_isin(candidate: &str) -> bool {
    let b = candidate.as_bytes();
    if b.len() != 12 {
        return false;
    }
    if !b[..2].iter().all(u8::is_ascii_uppercase) {
        return false;
    }
    if !b[2..11].iter().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit()) {
        return false;
    }
    if !b[11].is_ascii_digit() {
        return false;
    }
    isin_check_digit(&candidate[..11]) == Some(b[11] - b'0')
}

/// Check digit for the first eleven ISIN characters: letters expand to
/// two digits (A=10 .. Z=35), then Luhn from the rightmost digit.
pub fn isin_check_digit(body: &str) -> Option<u8> {
    let mut digits: Vec<u8> = Vec::with_capacity(22);
    for c in body.bytes() {
        match c {
            b'0'..=b'9' => digits.push(c - b'0'),
            b'A'..=b'Z' => {
                let v = c - b'A' + 10;
                digits.push(v / 10);
                digits.push(v % 10);
            }
            _ => return None,
        }
    }
    let sum: u32 = digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            let d = d as u32;
            if i % 2 == 0 {
                let dd = d * 2;
                dd / 10 + dd % 10
            } else {
                d
            }
        })
        .sum();
    Some(((10 - sum % 10) % 10) as u8)
}

impl Isin {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        if !validate_isin(s) {
            return Err(ModelError::InvalidIsin(s.to_string()));
        }
        let mut out = [0u8; 12];
        out.copy_from_slice(s.as_bytes());
        Ok(Isin(out))
    }

    /// Builds an ISIN from its eleven leading characters, appending the check digit.
    pub fn with_check_digit(body: &str) -> Result<Self, ModelError> {
        if body.len() != 11 {
            return Err(ModelError::InvalidIsin(body.to_string()));
        }
        let check = isin_check_digit(body).ok_or_else(|| ModelError::InvalidIsin(body.to_string()))?;
        Isin::parse(&format!("{body}{check}"))
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ISIN is ASCII")
    }

    pub fn country(&self) -> &str {
        &self.as_str()[..2]
    }
}

impl FromStr for Isin {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Isin::parse(s)
    }
}

impl fmt::Display for Isin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Isin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Isin({})", self.as_str())
    }
}

/// Exchange-local ticker plus the exchange it is listed on. The runtime key
/// for routing and caching.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolRef {
    local_symbol: Arc<str>,
    mic: Mic,
}

/// Longest local symbol the binary frame can carry.
pub const MAX_SYMBOL_LEN: usize = u8::MAX as usize;

impl SymbolRef {
    pub fn new(local_symbol: &str, mic: Mic) -> Result<Self, ModelError> {
        if local_symbol.is_empty()
            || local_symbol.len() > MAX_SYMBOL_LEN
            || !local_symbol.bytes().all(|b| b.is_ascii_graphic())
        {
            return Err(ModelError::InvalidSymbol(local_symbol.to_string()));
        }
        Ok(SymbolRef {
            local_symbol: Arc::from(local_symbol),
            mic,
        })
    }

    pub fn local_symbol(&self) -> &str {
        &self.local_symbol
    }

    pub fn mic(&self) -> Mic {
        self.mic
    }
}

impl fmt::Display for SymbolRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.local_symbol, self.mic)
    }
}

impl fmt::Debug for SymbolRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymbolRef({self})")
    }
}

/// `SYM@MIC`; the split is at the last `@`.
impl FromStr for SymbolRef {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (sym, mic) = s
            .rsplit_once('@')
            .ok_or_else(|| ModelError::InvalidSymbol(s.to_string()))?;
        SymbolRef::new(sym, Mic::new(mic)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NotificationKind {
    Tick,
    Reference,
    Statistics,
    News,
}

impl NotificationKind {
    pub const ALL: [NotificationKind; 4] = [
        NotificationKind::Tick,
        NotificationKind::Reference,
        NotificationKind::Statistics,
        NotificationKind::News,
    ];

    pub fn code(self) -> u8 {
        match self {
            NotificationKind::Tick => 1,
            NotificationKind::Reference => 2,
            NotificationKind::Statistics => 3,
            NotificationKind::News => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, ModelError> {
        match code {
            1 => Ok(NotificationKind::Tick),
            2 => Ok(NotificationKind::Reference),
            3 => Ok(NotificationKind::Statistics),
            4 => Ok(NotificationKind::News),
            other => Err(ModelError::UnknownKindCode(other)),
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize - 1
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TickFlags: u8 {
        const OPEN = 0b0001;
        const CLOSE = 0b0010;
        const DAY_HIGH_RESET = 0b0100;
        const CROSSED = 0b1000;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TickPayload {
    pub bid: Price,
    pub ask: Price,
    pub bid_size: u32,
    pub ask_size: u32,
    pub exchange_ts: VirtualTime,
    pub flags: TickFlags,
    /// Vendor extension block trailing the fixed tick fields on the wire.
    pub extension: Arc<[u8]>,
}

impl TickPayload {
    /// Builds a quote, setting `CROSSED` when `bid > ask`.
    pub fn quote(
        bid: Price,
        ask: Price,
        bid_size: u32,
        ask_size: u32,
        exchange_ts: VirtualTime,
        flags: TickFlags,
    ) -> Self {
        let mut flags = flags;
        flags.set(TickFlags::CROSSED, bid > ask);
        TickPayload {
            bid,
            ask,
            bid_size,
            ask_size,
            exchange_ts,
            flags,
            extension: Arc::from(&[][..]),
        }
    }

    pub fn mid(&self) -> Price {
        Price::mid(self.bid, self.ask)
    }

    pub fn spread(&self) -> Price {
        self.ask - self.bid
    }

    /// Volume proxy: quoted sizes on both sides.
    pub fn volume(&self) -> u64 {
        self.bid_size as u64 + self.ask_size as u64
    }

    pub fn check(&self) -> Result<(), &'static str> {
        if self.bid.raw() <= 0 {
            return Err("bid");
        }
        if self.ask.raw() <= 0 {
            return Err("ask");
        }
        if self.bid > self.ask && !self.flags.contains(TickFlags::CROSSED) {
            return Err("flags");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct EnrichedFields {
    pub total_volume: Option<u64>,
    pub open: Option<Price>,
    pub close: Option<Price>,
    pub day_high: Option<Price>,
    pub day_low: Option<Price>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Payload {
    Tick(TickPayload),
    /// Opaque body of a reference, statistics or news notification.
    Body(Arc<[u8]>),
}

impl Payload {
    pub fn as_tick(&self) -> Option<&TickPayload> {
        match self {
            Payload::Tick(t) => Some(t),
            Payload::Body(_) => None,
        }
    }
}

/// Smallest and largest wire size for everything except news.
pub const MIN_WIRE_SIZE: usize = 20;
pub const MAX_WIRE_SIZE: usize = 250;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Notification {
    pub feed_id: Arc<str>,
    pub channel_id: u8,
    pub seq_no: u32,
    pub kind: NotificationKind,
    pub symbol: SymbolRef,
    pub publish_ts: VirtualTime,
    pub payload: Payload,
    pub enriched: Option<EnrichedFields>,
    /// Length of the notification's binary frame.
    pub wire_size: u32,
}

impl Notification {
    /// Assembles a notification and derives `wire_size` from its frame layout.
    pub fn new(
        feed_id: Arc<str>,
        channel_id: u8,
        seq_no: u32,
        symbol: SymbolRef,
        publish_ts: VirtualTime,
        payload: Payload,
    ) -> Self {
        let kind = match &payload {
            Payload::Tick(_) => NotificationKind::Tick,
            Payload::Body(_) => NotificationKind::Reference,
        };
        let mut n = Notification {
            feed_id,
            channel_id,
            seq_no,
            kind,
            symbol,
            publish_ts,
            payload,
            enriched: None,
            wire_size: 0,
        };
        n.wire_size = vfb::frame_len(&n) as u32;
        n
    }

    /// Same as [`Notification::new`] for a body-carrying kind.
    pub fn with_body(
        feed_id: Arc<str>,
        channel_id: u8,
        seq_no: u32,
        kind: NotificationKind,
        symbol: SymbolRef,
        publish_ts: VirtualTime,
        body: Arc<[u8]>,
    ) -> Self {
        assert!(kind != NotificationKind::Tick, "tick notifications carry a TickPayload");
        let mut n = Notification::new(feed_id, channel_id, seq_no, symbol, publish_ts, Payload::Body(body));
        n.kind = kind;
        n
    }

    pub fn tick(&self) -> Option<&TickPayload> {
        self.payload.as_tick()
    }

    /// Identity used for dedup and delivery logs.
    pub fn key(&self) -> (&str, u8, u32) {
        (&self.feed_id, self.channel_id, self.seq_no)
    }

    pub fn within_size_bounds(&self) -> bool {
        self.kind == NotificationKind::News
            || (MIN_WIRE_SIZE..=MAX_WIRE_SIZE).contains(&(self.wire_size as usize))
    }
}

/// Deterministic total order: publish time, feed, channel, sequence number.
pub fn compare_notifications(a: &Notification, b: &Notification) -> Ordering {
    a.publish_ts
        .cmp(&b.publish_ts)
        .then_with(|| a.feed_id.cmp(&b.feed_id))
        .then_with(|| a.channel_id.cmp(&b.channel_id))
        .then_with(|| a.seq_no.cmp(&b.seq_no))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timeliness {
    RealTime,
    Delayed(Duration),
    IntraDay,
    EndOfDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    TickLevel,
    Aggregated(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Completeness {
    Full,
    /// At most this many notifications per second per symbol.
    Throttled(NonZeroU32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QoiDimension {
    Timeliness,
    Granularity,
    Completeness,
}

impl fmt::Display for QoiDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QoiDimension::Timeliness => "timeliness",
            QoiDimension::Granularity => "granularity",
            QoiDimension::Completeness => "completeness",
        })
    }
}

/// Quality-of-information request or grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QoISpec {
    pub timeliness: Timeliness,
    pub granularity: Granularity,
    pub completeness: Completeness,
}

impl QoISpec {
    pub const FULL: QoISpec = QoISpec {
        timeliness: Timeliness::RealTime,
        granularity: Granularity::TickLevel,
        completeness: Completeness::Full,
    };

    pub fn new(
        timeliness: Timeliness,
        granularity: Granularity,
        completeness: Completeness,
    ) -> Result<Self, ModelError> {
        if timeliness == Timeliness::Delayed(Duration::ZERO) {
            return Err(ModelError::InvalidQoi("delay offset must be positive".into()));
        }
        if let Granularity::Aggregated(w) = granularity {
            if micros_of(w) == 0 {
                return Err(ModelError::InvalidQoi("aggregation window must be positive".into()));
            }
        }
        Ok(QoISpec {
            timeliness,
            granularity,
            completeness,
        })
    }

    /// `Ok` when `self` asks for nothing more than `max` grants, otherwise
    /// the first dimension (timeliness, granularity, completeness) that exceeds it.
    pub fn within(&self, max: &QoISpec) -> Result<(), QoiDimension> {
        if timeliness_rank(self.timeliness) < timeliness_rank(max.timeliness) {
            return Err(QoiDimension::Timeliness);
        }
        if granularity_rank(self.granularity) < granularity_rank(max.granularity) {
            return Err(QoiDimension::Granularity);
        }
        if completeness_rank(self.completeness) < completeness_rank(max.completeness) {
            return Err(QoiDimension::Completeness);
        }
        Ok(())
    }
}

// Higher rank = less permissive.
fn timeliness_rank(t: Timeliness) -> (u8, u64) {
    match t {
        Timeliness::RealTime => (0, 0),
        Timeliness::Delayed(d) => (1, micros_of(d)),
        Timeliness::IntraDay => (2, 0),
        Timeliness::EndOfDay => (3, 0),
    }
}

fn granularity_rank(g: Granularity) -> (u8, u64) {
    match g {
        Granularity::TickLevel => (0, 0),
        Granularity::Aggregated(w) => (1, micros_of(w)),
    }
}

fn completeness_rank(c: Completeness) -> (u8, i64) {
    match c {
        Completeness::Full => (0, 0),
        Completeness::Throttled(r) => (1, -(r.get() as i64)),
    }
}

impl fmt::Display for QoISpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.timeliness {
            Timeliness::RealTime => f.write_str("rt")?,
            Timeliness::Delayed(d) => write!(f, "delayed:{}", format_duration(d))?,
            Timeliness::IntraDay => f.write_str("intraday")?,
            Timeliness::EndOfDay => f.write_str("eod")?,
        }
        match self.granularity {
            Granularity::TickLevel => f.write_str(",tick")?,
            Granularity::Aggregated(w) => write!(f, ",agg:{}", format_duration(w))?,
        }
        match self.completeness {
            Completeness::Full => f.write_str(",full"),
            Completeness::Throttled(r) => write!(f, ",throttled:{r}"),
        }
    }
}

/// `timeliness,granularity,completeness`, e.g. `delayed:15m,tick,throttled:2`.
impl FromStr for QoISpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |m: &str| ModelError::InvalidQoi(format!("{m} in {s:?}"));
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [t, g, c] = parts[..] else {
            return Err(err("expected three comma-separated dimensions"));
        };
        let timeliness = match t.split_once(':') {
            None if t == "rt" => Timeliness::RealTime,
            None if t == "intraday" => Timeliness::IntraDay,
            None if t == "eod" => Timeliness::EndOfDay,
            Some(("delayed", d)) => Timeliness::Delayed(parse_duration(d)?),
            _ => return Err(err("bad timeliness")),
        };
        let granularity = match g.split_once(':') {
            None if g == "tick" => Granularity::TickLevel,
            Some(("agg", w)) => Granularity::Aggregated(parse_duration(w)?),
            _ => return Err(err("bad granularity")),
        };
        let completeness = match c.split_once(':') {
            None if c == "full" => Completeness::Full,
            Some(("throttled", r)) => Completeness::Throttled(
                r.parse::<NonZeroU32>().map_err(|_| err("throttle rate must be a positive integer"))?,
            ),
            _ => return Err(err("bad completeness")),
        };
        QoISpec::new(timeliness, granularity, completeness)
    }
}
