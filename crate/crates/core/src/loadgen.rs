//! Synthetic intraday workload.
//!
//! Each exchange profile yields an inhomogeneous Poisson stream whose rate
//! follows a "satchel" curve: a base rate lifted by Gaussian bumps at open and
//! close, cut or dipped over lunch, multiplied by any active event spikes.
//! Arrivals are drawn by thinning against a piecewise-constant upper bound,
//! then decorated with a kind, symbol, size and price drawn from the mix.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;
use thiserror::Error;

use crate::feed::vfb::{HEADER_FIXED_LEN, TICK_FIXED_LEN};
use crate::model::{
    compare_notifications, parse_duration, Isin, Mic, Notification, NotificationKind, Payload, Price,
    SymbolRef, TickFlags, TickPayload, VirtualTime,
};
use crate::symbology::InstrumentRecord;

const DAY_SECS: f64 = 86_400.0;
const MAX_PIECE_SECS: f64 = 60.0;
const CLOSE_FLAG_WINDOW_SECS: f64 = 300.0;
const CROSSED_PROBABILITY: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadgenError {
    #[error("invalid profile {mic}: {reason}")]
    InvalidProfile { mic: String, reason: String },
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("invalid spike: {0}")]
    InvalidSpike(String),
    #[error("spike window {start}+{duration:?} is already configured")]
    OverlapUnsupported { start: VirtualTime, duration: Duration },
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LunchMode {
    HardClose,
    SoftDip(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lunch {
    pub start: Duration,
    pub end: Duration,
    pub mode: LunchMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeProfile {
    pub mic: Mic,
    pub feed_id: Arc<str>,
    pub channels: u8,
    pub tz_offset_minutes: i32,
    /// Local time of day.
    pub open: Duration,
    pub close: Duration,
    pub lunch: Option<Lunch>,
    pub base_rate: f64,
    pub open_amp: f64,
    pub close_amp: f64,
    pub peak_width: Duration,
    pub symbols: Vec<SymbolRef>,
    pub offhours_rate: f64,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Unit Gaussian bump centred at `c` with width `w`.
pub fn bump(t: f64, c: f64, w: f64) -> f64 {
    let z = (t - c) / w;
    (-0.5 * z * z).exp()
}

impl ExchangeProfile {
    pub fn validate(&self) -> Result<(), LoadgenError> {
        let bad = |reason: &str| {
            Err(LoadgenError::InvalidProfile {
                mic: self.mic.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.open >= self.close || self.close > Duration::from_secs(86_400) {
            return bad("open must precede close within one local day");
        }
        if let Some(l) = self.lunch {
            if !(self.open <= l.start && l.start < l.end && l.end <= self.close) {
                return bad("lunch must lie inside the session");
            }
            if let LunchMode::SoftDip(d) = l.mode {
                if !(d > 0.0 && d < 1.0) {
                    return bad("lunch dip depth must be in (0, 1)");
                }
            }
        }
        if !(self.open_amp >= 1.0 && self.close_amp >= 1.0) {
            return bad("amplitudes must be >= 1");
        }
        if !(self.base_rate >= 0.0 && self.offhours_rate >= 0.0 && self.base_rate.is_finite() && self.offhours_rate.is_finite()) {
            return bad("rates must be finite and >= 0");
        }
        if self.peak_width.is_zero() {
            return bad("peak_width must be > 0");
        }
        if self.symbols.is_empty() {
            return bad("no symbols");
        }
        if self.symbols.iter().any(|s| s.mic() != self.mic) {
            return bad("symbol listed on another exchange");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        Ok(())
    }

    fn tz_secs(&self) -> f64 {
        self.tz_offset_minutes as f64 * 60.0
    }

    /// Local day index and local time of day (seconds) for UTC seconds `t`.
    fn local(&self, t: f64) -> (i64, f64) {
        let local = t + self.tz_secs();
        let day = (local / DAY_SECS).floor();
        (day as i64, local - day * DAY_SECS)
    }

    /// UTC seconds of local time-of-day `tod` on local day `day`.
    fn utc(&self, day: i64, tod: f64) -> f64 {
        day as f64 * DAY_SECS + tod - self.tz_secs()
    }

    fn in_session(&self, tod: f64) -> bool {
        secs(self.open) <= tod && tod < secs(self.close)
    }

    /// Profile rate ignoring spikes.
    fn base_rate_secs(&self, t: f64) -> f64 {
        let (_, tod) = self.local(t);
        if !self.in_session(tod) {
            return self.offhours_rate;
        }
        let w = secs(self.peak_width);
        let mut rate = self.base_rate
            * (1.0 + (self.open_amp - 1.0) * bump(tod, secs(self.open), w) + (self.close_amp - 1.0) * bump(tod, secs(self.close), w));
        if let Some(l) = self.lunch {
            let (ls, le) = (secs(l.start), secs(l.end));
            match l.mode {
                LunchMode::HardClose if ls <= tod && tod < le => rate = 0.0,
                LunchMode::HardClose => {}
                LunchMode::SoftDip(d) => rate *= 1.0 - d * bump(tod, (ls + le) / 2.0, (le - ls) / 2.0),
            }
        }
        rate
    }

    /// Session boundaries and lunch edges as UTC seconds, for local days
    /// overlapping `[from, to)`.
    fn breakpoints(&self, from: f64, to: f64) -> Vec<f64> {
        let (d0, _) = self.local(from);
        let (d1, _) = self.local(to);
        let mut out = Vec::new();
        for day in d0..=d1 {
            out.push(self.utc(day, 0.0));
            out.push(self.utc(day, secs(self.open)));
            out.push(self.utc(day, secs(self.close)));
            if let Some(l) = self.lunch {
                out.push(self.utc(day, secs(l.start)));
                out.push(self.utc(day, secs(l.end)));
            }
        }
        out
    }

    /// Upper bound of the spike-free rate on `[a, b]`, where `[a, b)` lies
    /// entirely in or entirely out of the session and does not cross a lunch edge.
    fn bound(&self, a: f64, b: f64) -> f64 {
        let (_, tod_a) = self.local(a);
        if !self.in_session(tod_a) {
            return self.offhours_rate;
        }
        let tod_b = tod_a + (b - a);
        let nearest = |c: f64| c.clamp(tod_a, tod_b);
        let farthest = |c: f64| if (c - tod_a).abs() > (c - tod_b).abs() { tod_a } else { tod_b };
        let w = secs(self.peak_width);
        let (o, c) = (secs(self.open), secs(self.close));
        let mut bound = self.base_rate
            * (1.0 + (self.open_amp - 1.0) * bump(nearest(o), o, w) + (self.close_amp - 1.0) * bump(nearest(c), c, w));
        if let Some(l) = self.lunch {
            let (ls, le) = (secs(l.start), secs(l.end));
            match l.mode {
                LunchMode::HardClose if ls <= tod_a && tod_a < le => bound = 0.0,
                LunchMode::HardClose => {}
                LunchMode::SoftDip(d) => {
                    let m = (ls + le) / 2.0;
                    bound *= 1.0 - d * bump(farthest(m), m, (le - ls) / 2.0);
                }
            }
        }
        bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventSpike {
    pub start: VirtualTime,
    pub duration: Duration,
    pub multiplier: f64,
}

impl EventSpike {
    pub fn contains(&self, t: f64) -> bool {
        let s = self.start.as_secs_f64();
        s <= t && t < s + secs(self.duration)
    }
}

fn spike_factor(spikes: &[EventSpike], t: f64) -> f64 {
    spikes.iter().filter(|s| s.contains(t)).map(|s| s.multiplier).product()
}

/// Expected arrival rate (notifications per second) at `t`.
pub fn rate_at(profile: &ExchangeProfile, spikes: &[EventSpike], t: VirtualTime) -> f64 {
    rate_at_secs(profile, spikes, t.as_secs_f64())
}

pub fn rate_at_secs(profile: &ExchangeProfile, spikes: &[EventSpike], t: f64) -> f64 {
    profile.base_rate_secs(t) * spike_factor(spikes, t)
}

/// Splits `[from, to)` into pieces of at most a minute that never straddle a
/// session, lunch or spike edge.
fn pieces(profile: &ExchangeProfile, spikes: &[EventSpike], from: f64, to: f64) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = profile.breakpoints(from, to);
    for s in spikes {
        cuts.push(s.start.as_secs_f64());
        cuts.push(s.start.as_secs_f64() + secs(s.duration));
    }
    cuts.retain(|c| *c > from && *c < to);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(to);
    let mut out = Vec::new();
    let mut a = from;
    for c in cuts {
        while a < c {
            let b = (a + MAX_PIECE_SECS).min(c);
            out.push((a, b));
            a = b;
        }
    }
    out
}

/// Expected number of arrivals in `[from, to)`, by composite Simpson over
/// edge-aligned pieces.
pub fn expected_count(profile: &ExchangeProfile, spikes: &[EventSpike], from: VirtualTime, to: VirtualTime) -> f64 {
    const STEPS: usize = 8;
    pieces(profile, spikes, from.as_secs_f64(), to.as_secs_f64())
        .into_iter()
        .map(|(a, b)| {
            // stay inside the half-open piece so edge values come from the piece
            let eps = 1e-7 * (b - a);
            let (a2, b2) = (a, b - eps);
            let h = (b2 - a2) / STEPS as f64;
            let f = |t: f64| rate_at_secs(profile, spikes, t);
            let mut s = f(a2) + f(b2);
            for i in 1..STEPS {
                s += f(a2 + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0 * (b - a) / (b2 - a2)
        })
        .sum()
}

/// Notification kind probabilities. Statistics takes the remainder when
/// not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    pub tick: f64,
    pub reference: f64,
    pub statistics: f64,
    pub news: f64,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec::with_remainder(0.98, 0.0016, 0.00001)
    }
}

impl MixSpec {
    pub fn with_remainder(tick: f64, reference: f64, news: f64) -> Self {
        MixSpec {
            tick,
            reference,
            news,
            statistics: 1.0 - tick - reference - news,
        }
    }

    pub fn validate(&self) -> Result<(), LoadgenError> {
        let ps = [self.tick, self.reference, self.statistics, self.news];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(LoadgenError::InvalidMix("probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LoadgenError::InvalidMix(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    pub fn probability(&self, kind: NotificationKind) -> f64 {
        match kind {
            NotificationKind::Tick => self.tick,
            NotificationKind::Reference => self.reference,
            NotificationKind::Statistics => self.statistics,
            NotificationKind::News => self.news,
        }
    }

    fn sample(&self, u: f64) -> NotificationKind {
        let mut acc = 0.0;
        for kind in [NotificationKind::Tick, NotificationKind::Reference, NotificationKind::News] {
            acc += self.probability(kind);
            if u < acc {
                return kind;
            }
        }
        NotificationKind::Statistics
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DayPhase {
    Morning,
    Midday,
    Evening,
}

impl DayPhase {
    pub const ALL: [DayPhase; 3] = [DayPhase::Morning, DayPhase::Midday, DayPhase::Evening];

    fn index(self) -> usize {
        self as usize
    }
}

pub const MORNING_SPAN: Duration = Duration::from_secs(2 * 3600);
pub const EVENING_SPAN: Duration = Duration::from_secs(3600);

/// Morning runs until two hours after open, evening from an hour before close.
pub fn day_phase(profile: &ExchangeProfile, t: VirtualTime) -> DayPhase {
    let (_, tod) = profile.local(t.as_secs_f64());
    if tod < secs(profile.open + MORNING_SPAN) {
        DayPhase::Morning
    } else if tod >= secs(profile.close.saturating_sub(EVENING_SPAN)) {
        DayPhase::Evening
    } else {
        DayPhase::Midday
    }
}

/// Wire size bounds and mean in bytes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeModel {
    pub lo: u32,
    pub mean: f64,
    pub hi: u32,
}

impl SizeModel {
    pub const fn new(lo: u32, mean: f64, hi: u32) -> Self {
        SizeModel { lo, mean, hi }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lo as f64 <= self.mean && self.mean <= self.hi as f64 && self.lo < self.hi) {
            return Err(format!("size model {}..{} with mean {}", self.lo, self.hi, self.mean));
        }
        Ok(())
    }

    /// Two uniform pieces split at the mean, weighted so the mean is exact.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let (lo, hi, m) = (self.lo as f64, self.hi as f64, self.mean);
        let p = (hi - m) / (hi - lo);
        let x = if rng.gen::<f64>() < p { rng.gen_range(lo..=m) } else { rng.gen_range(m..=hi) };
        (x.round() as u32).clamp(self.lo, self.hi)
    }
}

/// Size model per kind and day phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeTable {
    models: [[SizeModel; 3]; 4],
}

impl Default for SizeTable {
    fn default() -> Self {
        let tick = [SizeModel::new(64, 104.0, 200), SizeModel::new(64, 96.0, 200), SizeModel::new(64, 100.0, 200)];
        let reference = [SizeModel::new(80, 190.0, 250), SizeModel::new(80, 170.0, 250), SizeModel::new(80, 200.0, 250)];
        let statistics = [SizeModel::new(60, 150.0, 250), SizeModel::new(60, 140.0, 250), SizeModel::new(60, 170.0, 250)];
        let news = [SizeModel::new(200, 1200.0, 4000), SizeModel::new(200, 1000.0, 4000), SizeModel::new(200, 1500.0, 4000)];
        SizeTable {
            models: [tick, reference, statistics, news],
        }
    }
}

impl SizeTable {
    pub fn get(&self, kind: NotificationKind, phase: DayPhase) -> SizeModel {
        self.models[kind.index()][phase.index()]
    }

    pub fn set(&mut self, kind: NotificationKind, phase: DayPhase, model: SizeModel) {
        self.models[kind.index()][phase.index()] = model;
    }

    pub fn validate(&self) -> Result<(), LoadgenError> {
        for kind in NotificationKind::ALL {
            for phase in DayPhase::ALL {
                let m = self.get(kind, phase);
                m.validate().map_err(LoadgenError::InvalidMix)?;
                if kind != NotificationKind::News && (m.lo < 20 || m.hi > 250) {
                    return Err(LoadgenError::InvalidMix(format!("{kind:?} sizes must stay within [20, 250]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadgenConfig {
    pub seed: u64,
    pub horizon: Duration,
    pub profiles: Vec<ExchangeProfile>,
    pub mix: MixSpec,
    pub sizes: SizeTable,
    pub spikes: Vec<EventSpike>,
    /// Probability of dropping each notification after it got its sequence number.
    pub inject_gaps: f64,
}

impl LoadgenConfig {
    pub fn validate(&self) -> Result<(), LoadgenError> {
        if self.horizon.is_zero() {
            return Err(LoadgenError::Config("horizon must be > 0".into()));
        }
        if self.profiles.is_empty() {
            return Err(LoadgenError::Config("no profiles".into()));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        let mut feeds: Vec<&str> = self.profiles.iter().map(|p| &*p.feed_id).collect();
        feeds.sort();
        if feeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(LoadgenError::Config("duplicate feed id".into()));
        }
        self.mix.validate()?;
        self.sizes.validate()?;
        for s in &self.spikes {
            validate_spike(s)?;
        }
        if !(0.0..1.0).contains(&self.inject_gaps) {
            return Err(LoadgenError::Config("inject_gaps must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Reference data for every generated symbol, with synthetic ISINs.
    pub fn reference_records(&self) -> Vec<InstrumentRecord> {
        let mut out = Vec::new();
        for (pi, p) in self.profiles.iter().enumerate() {
            for (si, s) in p.symbols.iter().enumerate() {
                let isin = Isin::with_check_digit(&format!("XS{:03}{:06}", pi, si)).expect("synthetic ISIN body is valid");
                out.push(InstrumentRecord::new(isin, format!("{} {}", s.local_symbol(), p.mic), [s.clone()]));
            }
        }
        out
    }

    /// Expected arrivals over the horizon, all profiles.
    pub fn expected_total(&self) -> f64 {
        let end = VirtualTime::ZERO + self.horizon;
        self.profiles.iter().map(|p| expected_count(p, &self.spikes, VirtualTime::ZERO, end)).sum()
    }
}

fn validate_spike(s: &EventSpike) -> Result<(), LoadgenError> {
    if !(s.multiplier >= 1.0 && s.multiplier.is_finite()) {
        return Err(LoadgenError::InvalidSpike(format!("multiplier {} < 1", s.multiplier)));
    }
    if s.duration.is_zero() {
        return Err(LoadgenError::InvalidSpike("zero duration".into()));
    }
    Ok(())
}

/// Adds a spike. Overlapping spikes multiply; a second spike on an identical
/// window is rejected.
pub fn inject_spike(config: &mut LoadgenConfig, spike: EventSpike) -> Result<(), LoadgenError> {
    validate_spike(&spike)?;
    if spike.start + spike.duration > VirtualTime::ZERO + config.horizon {
        return Err(LoadgenError::InvalidSpike("window extends past the horizon".into()));
    }
    if config.spikes.iter().any(|s| s.start == spike.start && s.duration == spike.duration) {
        return Err(LoadgenError::OverlapUnsupported {
            start: spike.start,
            duration: spike.duration,
        });
    }
    config.spikes.push(spike);
    Ok(())
}

/// Four uppercase letters from `i` (base 26), prefixed to distinguish huge indices.
pub fn symbol_name(i: usize) -> String {
    let mut n = i;
    let mut s = [b'A'; 4];
    for c in s.iter_mut().rev() {
        *c = b'A' + (n % 26) as u8;
        n /= 26;
    }
    let base = std::str::from_utf8(&s).unwrap().to_string();
    if n == 0 {
        base
    } else {
        format!("{base}{n}")
    }
}

pub fn generated_symbols(mic: Mic, count: usize) -> Vec<SymbolRef> {
    (0..count)
        .map(|i| SymbolRef::new(&symbol_name(i), mic).expect("generated symbol is valid"))
        .collect()
}

fn hm(h: u64, m: u64) -> Duration {
    Duration::from_secs(h * 3600 + m * 60)
}

/// Five exchanges with the default desk-scale shape parameters: base rate
/// 500/s, open amplitude 4, close amplitude 3, 0.4 lunch dip, and a hard
/// lunch break for Tokyo.
pub fn default_profiles(symbols_per_exchange: usize) -> Vec<ExchangeProfile> {
    let soft = |s, e| {
        Some(Lunch {
            start: s,
            end: e,
            mode: LunchMode::SoftDip(0.4),
        })
    };
    let spec: [(&str, i32, Duration, Duration, Option<Lunch>); 5] = [
        ("XTKS", 540, hm(9, 0), hm(15, 0), Some(Lunch { start: hm(11, 30), end: hm(12, 30), mode: LunchMode::HardClose })),
        ("XHKG", 480, hm(9, 30), hm(16, 0), soft(hm(12, 0), hm(13, 0))),
        ("XETR", 60, hm(9, 0), hm(17, 30), soft(hm(12, 0), hm(14, 0))),
        ("XLON", 0, hm(8, 0), hm(16, 30), soft(hm(12, 0), hm(14, 0))),
        ("XNYS", -300, hm(9, 30), hm(16, 0), soft(hm(12, 0), hm(14, 0))),
    ];
    spec.into_iter()
        .map(|(mic, tz, open, close, lunch)| {
            let mic = Mic::new(mic).unwrap();
            ExchangeProfile {
                mic,
                feed_id: Arc::from(format!("FEED-{mic}")),
                channels: 4,
                tz_offset_minutes: tz,
                open,
                close,
                lunch,
                base_rate: 500.0,
                open_amp: 4.0,
                close_amp: 3.0,
                peak_width: Duration::from_secs(20 * 60),
                symbols: generated_symbols(mic, symbols_per_exchange),
                offhours_rate: 5.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenStats {
    pub generated: [u64; 4],
    pub gap_dropped: u64,
}

impl GenStats {
    pub fn total(&self) -> u64 {
        self.generated.iter().sum()
    }

    fn merge(&mut self, other: &GenStats) {
        for i in 0..4 {
            self.generated[i] += other.generated[i];
        }
        self.gap_dropped += other.gap_dropped;
    }
}

#[derive(Debug, Clone)]
struct SymbolState {
    mid: i64,
    session_marked: i64,
}

/// Arrivals of one exchange profile in time order.
pub struct ProfileStream {
    profile: ExchangeProfile,
    spikes: Vec<EventSpike>,
    mix: MixSpec,
    sizes: SizeTable,
    inject_gaps: f64,
    rng: ChaCha8Rng,
    pieces: std::vec::IntoIter<(f64, f64)>,
    piece: Option<(f64, f64, f64)>,
    t: f64,
    ready: VecDeque<Notification>,
    lookahead: Option<u64>,
    symbols: Vec<SymbolState>,
    next_seq: Vec<u32>,
    stats: GenStats,
}

impl ProfileStream {
    pub fn new(config: &LoadgenConfig, index: usize) -> Self {
        let profile = config.profiles[index].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64 + 1);
        let pieces = pieces(&profile, &config.spikes, 0.0, secs(config.horizon));
        let symbols = (0..profile.symbols.len())
            .map(|i| SymbolState {
                mid: (10 + (i as i64 * 37) % 490) * 10_000,
                session_marked: i64::MIN,
            })
            .collect();
        ProfileStream {
            next_seq: vec![1; profile.channels as usize],
            profile,
            spikes: config.spikes.clone(),
            mix: config.mix,
            sizes: config.sizes.clone(),
            inject_gaps: config.inject_gaps,
            rng,
            pieces: pieces.into_iter(),
            piece: None,
            t: 0.0,
            ready: VecDeque::new(),
            lookahead: None,
            symbols,
            stats: GenStats::default(),
        }
    }

    pub fn stats(&self) -> GenStats {
        self.stats
    }

    /// Next accepted arrival time in microseconds.
    fn next_arrival(&mut self) -> Option<u64> {
        loop {
            let (b, bound) = match self.piece {
                Some((_, b, bound)) => (b, bound),
                None => {
                    let (a, b) = self.pieces.next()?;
                    let bound = self.profile.bound(a, b) * spike_factor(&self.spikes, a) * (1.0 + 1e-9);
                    self.t = a;
                    self.piece = Some((a, b, bound));
                    (b, bound)
                }
            };
            if bound <= 0.0 {
                self.piece = None;
                continue;
            }
            self.t += Exp::new(bound).expect("positive rate").sample(&mut self.rng);
            if self.t >= b {
                self.piece = None;
                continue;
            }
            let rate = rate_at_secs(&self.profile, &self.spikes, self.t);
            debug_assert!(rate <= bound, "thinning bound violated");
            if self.rng.gen::<f64>() * bound < rate {
                return Some((self.t * 1e6) as u64);
            }
        }
    }

    fn make(&mut self, ts: u64) -> Option<Notification> {
        let kind = self.mix.sample(self.rng.gen());
        let si = self.rng.gen_range(0..self.profile.symbols.len());
        let symbol = self.profile.symbols[si].clone();
        let channel = (si % self.profile.channels as usize) as u8;
        let seq = self.next_seq[channel as usize];
        self.next_seq[channel as usize] += 1;
        let t = VirtualTime::from_micros(ts);
        let phase = day_phase(&self.profile, t);
        let size = self.sizes.get(kind, phase).sample(&mut self.rng) as usize;
        let header = HEADER_FIXED_LEN + symbol.local_symbol().len();
        let feed = self.profile.feed_id.clone();
        let n = match kind {
            NotificationKind::Tick => {
                let tick = self.tick(si, t, size.saturating_sub(header + TICK_FIXED_LEN));
                Notification::new(feed, channel, seq, symbol, t, Payload::Tick(tick))
            }
            _ => {
                let body = Arc::from(vec![0u8; size.saturating_sub(header).max(1)]);
                Notification::with_body(feed, channel, seq, kind, symbol, t, body)
            }
        };
        if self.inject_gaps > 0.0 && self.rng.gen::<f64>() < self.inject_gaps {
            self.stats.gap_dropped += 1;
            return None;
        }
        self.stats.generated[kind.index()] += 1;
        Some(n)
    }

    fn tick(&mut self, si: usize, t: VirtualTime, extension: usize) -> TickPayload {
        let (day, tod) = self.profile.local(t.as_secs_f64());
        let rng = &mut self.rng;
        let state = &mut self.symbols[si];
        state.mid += rng.gen_range(-3..=3) * 100;
        if state.mid < 10_000 {
            state.mid = 20_000 - state.mid;
        }
        if state.mid > 1_000_000_000 {
            state.mid = 2_000_000_000 - state.mid;
        }
        let half = rng.gen_range(1..=5) * 100;
        let (mut bid, mut ask) = (state.mid - half, state.mid + half);
        if rng.gen::<f64>() < CROSSED_PROBABILITY {
            std::mem::swap(&mut bid, &mut ask);
        }
        let mut flags = TickFlags::empty();
        if self.profile.in_session(tod) {
            if state.session_marked != day {
                state.session_marked = day;
                flags |= TickFlags::OPEN | TickFlags::DAY_HIGH_RESET;
            }
            if tod >= secs(self.profile.close) - CLOSE_FLAG_WINDOW_SECS {
                flags |= TickFlags::CLOSE;
            }
        }
        let exchange_ts = t.saturating_sub(Duration::from_micros(rng.gen_range(0..=500)));
        let mut p = TickPayload::quote(
            Price::from_raw(bid),
            Price::from_raw(ask),
            rng.gen_range(1..=50) * 100,
            rng.gen_range(1..=50) * 100,
            exchange_ts,
            flags,
        );
        if extension > 0 {
            p.extension = Arc::from(vec![0u8; extension]);
        }
        p
    }
}

impl Iterator for ProfileStream {
    type Item = Notification;

    fn next(&mut self) -> Option<Notification> {
        loop {
            if let Some(n) = self.ready.pop_front() {
                return Some(n);
            }
            // gather every arrival sharing one microsecond, then order it canonically
            let ts = match self.lookahead.take() {
                Some(ts) => ts,
                None => self.next_arrival()?,
            };
            let mut batch = Vec::new();
            batch.extend(self.make(ts));
            loop {
                match self.next_arrival() {
                    Some(next) if next == ts => batch.extend(self.make(ts)),
                    other => {
                        self.lookahead = other;
                        break;
                    }
                }
            }
            batch.sort_by(compare_notifications);
            self.ready.extend(batch);
        }
    }
}

struct Head(Notification, usize);

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Head {}
impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Head {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_notifications(&other.0, &self.0)
    }
}

/// All profiles merged into one stream ordered by `compare_notifications`.
pub struct GeneratedStream {
    streams: Vec<ProfileStream>,
    heap: BinaryHeap<Head>,
}

impl GeneratedStream {
    pub fn stats(&self) -> GenStats {
        let mut s = GenStats::default();
        for p in &self.streams {
            s.merge(&p.stats());
        }
        s
    }

    pub fn profile_stats(&self) -> Vec<(Arc<str>, GenStats)> {
        self.streams.iter().map(|p| (p.profile.feed_id.clone(), p.stats())).collect()
    }
}

impl Iterator for GeneratedStream {
    type Item = Notification;

    fn next(&mut self) -> Option<Notification> {
        let Head(n, i) = self.heap.pop()?;
        if let Some(next) = self.streams[i].next() {
            self.heap.push(Head(next, i));
        }
        Some(n)
    }
}

/// Deterministic stream for the whole horizon.
pub fn generate_day(config: &LoadgenConfig) -> Result<GeneratedStream, LoadgenError> {
    config.validate()?;
    let mut streams: Vec<ProfileStream> = (0..config.profiles.len()).map(|i| ProfileStream::new(config, i)).collect();
    let mut heap = BinaryHeap::new();
    for (i, s) in streams.iter_mut().enumerate() {
        if let Some(n) = s.next() {
            heap.push(Head(n, i));
        }
    }
    Ok(GeneratedStream { streams, heap })
}

/// Local midnights (UTC) of every profile within the horizon, i.e. the
/// trading-day boundaries.
pub fn day_boundaries(profile: &ExchangeProfile, horizon: Duration) -> Vec<VirtualTime> {
    let end = secs(horizon);
    let (first, _) = profile.local(0.0);
    (first + 1..)
        .map(|day| profile.utc(day, 0.0))
        .take_while(|t| *t < end)
        .filter(|t| *t > 0.0)
        .map(|t| VirtualTime::from_micros((t * 1e6).round() as u64))
        .collect()
}

// ---- configuration file ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LunchFile {
    start: String,
    end: String,
    mode: String,
    #[serde(default)]
    depth: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    mic: String,
    feed: Option<String>,
    #[serde(default = "default_channels")]
    channels: u8,
    tz_offset_minutes: i32,
    open: String,
    close: String,
    lunch: Option<LunchFile>,
    #[serde(default = "default_base_rate")]
    base_rate: f64,
    #[serde(default = "default_open_amp")]
    open_amp: f64,
    #[serde(default = "default_close_amp")]
    close_amp: f64,
    #[serde(default = "default_peak_width")]
    peak_width: String,
    #[serde(default = "default_offhours")]
    offhours_rate: f64,
    symbols: Option<usize>,
    symbol_list: Option<Vec<String>>,
}

fn default_channels() -> u8 {
    4
}
fn default_base_rate() -> f64 {
    500.0
}
fn default_open_amp() -> f64 {
    4.0
}
fn default_close_amp() -> f64 {
    3.0
}
fn default_peak_width() -> String {
    "20m".into()
}
fn default_offhours() -> f64 {
    5.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixFile {
    tick: f64,
    reference: f64,
    news: f64,
    statistics: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpikeFile {
    start: String,
    duration: String,
    multiplier: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SizeFile {
    kind: String,
    phase: String,
    lo: u32,
    mean: f64,
    hi: u32,
}

/// The workload part of a configuration file.
#[derive(Debug, Deserialize)]
pub struct LoadgenFile {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_horizon")]
    horizon: String,
    #[serde(default)]
    inject_gaps: f64,
    mix: Option<MixFile>,
    #[serde(default, rename = "profile")]
    profiles: Vec<ProfileFile>,
    #[serde(default, rename = "spike")]
    spikes: Vec<SpikeFile>,
    #[serde(default, rename = "size")]
    sizes: Vec<SizeFile>,
    default_profiles: Option<usize>,
}

fn default_horizon() -> String {
    "1d".into()
}

/// `HH:MM` or `HH:MM:SS` local time of day; `24:00` is allowed.
pub fn parse_time_of_day(s: &str) -> Result<Duration, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Result<Vec<u64>, _> = parts.iter().map(|p| p.parse::<u64>()).collect();
    match nums.as_deref() {
        Ok([h, m]) if *h <= 24 && *m < 60 => Ok(hm(*h, *m)),
        Ok([h, m, sec]) if *h <= 24 && *m < 60 && *sec < 60 => Ok(hm(*h, *m) + Duration::from_secs(*sec)),
        _ => Err(format!("bad time of day {s:?}")),
    }
    .and_then(|d| if d <= hm(24, 0) { Ok(d) } else { Err(format!("bad time of day {s:?}")) })
}

fn dur(s: &str) -> Result<Duration, LoadgenError> {
    parse_duration(s).map_err(|e| LoadgenError::Config(e.to_string()))
}

impl LoadgenFile {
    pub fn into_config(self) -> Result<LoadgenConfig, LoadgenError> {
        let cfg = |e: String| LoadgenError::Config(e);
        let mut profiles = Vec::new();
        for p in self.profiles {
            let mic = Mic::new(&p.mic).map_err(|e| cfg(e.to_string()))?;
            let symbols = match (p.symbol_list, p.symbols) {
                (Some(list), _) => list
                    .iter()
                    .map(|s| SymbolRef::new(s, mic).map_err(|e| cfg(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()?,
                (None, Some(n)) => generated_symbols(mic, n),
                (None, None) => generated_symbols(mic, 100),
            };
            let lunch = match p.lunch {
                None => None,
                Some(l) => Some(Lunch {
                    start: parse_time_of_day(&l.start).map_err(cfg)?,
                    end: parse_time_of_day(&l.end).map_err(cfg)?,
                    mode: match (l.mode.as_str(), l.depth) {
                        ("hard", None) => LunchMode::HardClose,
                        ("soft", d) => LunchMode::SoftDip(d.unwrap_or(0.4)),
                        _ => return Err(cfg(format!("bad lunch mode {:?}", l.mode))),
                    },
                }),
            };
            profiles.push(ExchangeProfile {
                mic,
                feed_id: Arc::from(p.feed.unwrap_or_else(|| format!("FEED-{mic}"))),
                channels: p.channels,
                tz_offset_minutes: p.tz_offset_minutes,
                open: parse_time_of_day(&p.open).map_err(cfg)?,
                close: parse_time_of_day(&p.close).map_err(cfg)?,
                lunch,
                base_rate: p.base_rate,
                open_amp: p.open_amp,
                close_amp: p.close_amp,
                peak_width: dur(&p.peak_width)?,
                symbols,
                offhours_rate: p.offhours_rate,
            });
        }
        if let Some(n) = self.default_profiles {
            profiles.extend(default_profiles(n));
        }
        let mix = match self.mix {
            None => MixSpec::default(),
            Some(m) => match m.statistics {
                None => MixSpec::with_remainder(m.tick, m.reference, m.news),
                Some(statistics) => MixSpec {
                    tick: m.tick,
                    reference: m.reference,
                    statistics,
                    news: m.news,
                },
            },
        };
        let mut sizes = SizeTable::default();
        for s in self.sizes {
            let kind = match s.kind.as_str() {
                "tick" => NotificationKind::Tick,
                "reference" => NotificationKind::Reference,
                "statistics" => NotificationKind::Statistics,
                "news" => NotificationKind::News,
                other => return Err(cfg(format!("bad size kind {other:?}"))),
            };
            let phase = match s.phase.as_str() {
                "morning" => DayPhase::Morning,
                "midday" => DayPhase::Midday,
                "evening" => DayPhase::Evening,
                other => return Err(cfg(format!("bad day phase {other:?}"))),
            };
            sizes.set(kind, phase, SizeModel::new(s.lo, s.mean, s.hi));
        }
        let mut config = LoadgenConfig {
            seed: self.seed,
            horizon: dur(&self.horizon)?,
            profiles,
            mix,
            sizes,
            spikes: Vec::new(),
            inject_gaps: self.inject_gaps,
        };
        for s in self.spikes {
            inject_spike(
                &mut config,
                EventSpike {
                    start: VirtualTime::ZERO + dur(&s.start)?,
                    duration: dur(&s.duration)?,
                    multiplier: s.multiplier,
                },
            )?;
        }
        config.validate()?;
        Ok(config)
    }
}

impl FromStr for LoadgenConfig {
    type Err = LoadgenError;

    fn from_str(text: &str) -> Result<Self, LoadgenError> {
        let file: LoadgenFile = toml::from_str(text).map_err(|e| LoadgenError::Config(e.to_string()))?;
        file.into_config()
    }
}

impl fmt::Display for LunchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LunchMode::HardClose => f.write_str("hard"),
            LunchMode::SoftDip(d) => write!(f, "soft({d})"),
        }
    }
}

/// Start of the first session of `profile` at or after `t`, UTC.
pub fn next_open(profile: &ExchangeProfile, t: VirtualTime) -> VirtualTime {
    let (day, tod) = profile.local(t.as_secs_f64());
    let day = if tod <= secs(profile.open) { day } else { day + 1 };
    VirtualTime::from_micros((profile.utc(day, secs(profile.open)) * 1e6).round() as u64)
}

/// Session `[open, close)` of local day `day`, UTC.
pub fn session_of_day(profile: &ExchangeProfile, day: i64) -> (VirtualTime, VirtualTime) {
    let at = |tod: f64| VirtualTime::from_micros((profile.utc(day, tod) * 1e6).round().max(0.0) as u64);
    (at(secs(profile.open)), at(secs(profile.close)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokyo() -> ExchangeProfile {
        default_profiles(10).remove(0)
    }

    fn config(profiles: Vec<ExchangeProfile>, horizon: Duration) -> LoadgenConfig {
        LoadgenConfig {
            seed: 7,
            horizon,
            profiles,
            mix: MixSpec::default(),
            sizes: SizeTable::default(),
            spikes: Vec::new(),
            inject_gaps: 0.0,
        }
    }

    #[test]
    fn hard_lunch_is_zero_and_open_peaks() {
        let p = tokyo();
        // 12:00 Tokyo is 03:00 UTC
        assert_eq!(rate_at(&p, &[], VirtualTime::from_secs(3 * 3600)), 0.0);
        // 09:00 Tokyo is 00:00 UTC; close bump is negligible at open
        let at_open = rate_at(&p, &[], VirtualTime::from_secs(0));
        assert!((at_open - 4.0 * 500.0).abs() < 1e-6, "{at_open}");
        // before open the off-hours rate applies
        assert_eq!(rate_at(&p, &[], VirtualTime::from_secs(86_400 - 60)), 5.0);
    }

    #[test]
    fn spikes_multiply() {
        let p = tokyo();
        let t = VirtualTime::from_secs(3600);
        let s = [EventSpike {
            start: VirtualTime::from_secs(0),
            duration: Duration::from_secs(7200),
            multiplier: 1.5,
        }];
        assert!((rate_at(&p, &s, t) - 1.5 * rate_at(&p, &[], t)).abs() < 1e-9);
        let mut c = config(vec![p], Duration::from_secs(86_400));
        inject_spike(&mut c, s[0]).unwrap();
        assert!(matches!(inject_spike(&mut c, s[0]), Err(LoadgenError::OverlapUnsupported { .. })));
    }

    #[test]
    fn size_model_mean_is_exact_in_expectation() {
        let m = SizeModel::new(64, 98.0, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mean = (0..n).map(|_| m.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 98.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn stream_is_ordered_and_sequenced() {
        let mut profiles = default_profiles(20);
        for p in &mut profiles {
            p.base_rate = 5.0;
            p.offhours_rate = 0.5;
        }
        let c = config(profiles, Duration::from_secs(86_400));
        let all: Vec<Notification> = generate_day(&c).unwrap().collect();
        assert!(all.windows(2).all(|w| compare_notifications(&w[0], &w[1]).is_lt()));
        let mut last = std::collections::HashMap::new();
        for n in &all {
            let prev = last.insert((n.feed_id.clone(), n.channel_id), n.seq_no).unwrap_or(0);
            assert_eq!(n.seq_no, prev + 1);
            assert!(n.within_size_bounds(), "{n:?}");
            assert!(n.tick().is_none_or(|t| t.check().is_ok()));
        }
        let again: Vec<Notification> = generate_day(&c).unwrap().collect();
        assert_eq!(all, again);
    }

    #[test]
    fn gap_injection_leaves_holes() {
        let mut p = tokyo();
        p.base_rate = 50.0;
        let mut c = config(vec![p], Duration::from_secs(6 * 3600));
        c.inject_gaps = 0.1;
        let mut g = generate_day(&c).unwrap();
        let n = g.by_ref().count() as u64;
        let s = g.stats();
        assert_eq!(s.total(), n);
        assert!(s.gap_dropped > 0);
    }

    #[test]
    fn config_file_parses() {
        let text = r#"
            seed = 3
            horizon = "1d"
            [mix]
            tick = 0.98
            reference = 0.0016
            news = 0.00001
            [[profile]]
            mic = "XTKS"
            tz_offset_minutes = 540
            open = "09:00"
            close = "15:00"
            lunch = { start = "11:30", end = "12:30", mode = "hard" }
            symbols = 5
            [[spike]]
            start = "1h"
            duration = "2h"
            multiplier = 1.5
            [[size]]
            kind = "tick"
            phase = "midday"
            lo = 64
            mean = 90
            hi = 200
        "#;
        let c: LoadgenConfig = text.parse().unwrap();
        assert_eq!(c.profiles[0].feed_id.as_ref(), "FEED-XTKS");
        assert_eq!(c.profiles[0].lunch.unwrap().mode, LunchMode::HardClose);
        assert!((c.mix.statistics - 0.01839).abs() < 1e-12);
        assert_eq!(c.spikes.len(), 1);
        assert_eq!(c.sizes.get(NotificationKind::Tick, DayPhase::Midday).mean, 90.0);
        assert!("horizon = \"0s\"\ndefault_profiles = 1".parse::<LoadgenConfig>().is_err());
    }

    #[test]
    fn day_boundaries_are_local_midnights() {
        let p = tokyo();
        let b = day_boundaries(&p, Duration::from_secs(2 * 86_400));
        assert_eq!(b, vec![VirtualTime::from_secs(15 * 3600), VirtualTime::from_secs(86_400 + 15 * 3600)]);
    }
}
