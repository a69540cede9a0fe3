use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use thiserror::Error;

use super::topology::SubscriberId;
use crate::model::{Isin, ModelError, Notification, QoISpec, SymbolRef};
use crate::symbology::SymbologyStore;

/// Routing key. ISIN subscriptions are expanded to their listings before
/// they reach the routing tables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterAtom {
    Symbol(SymbolRef),
    Feed(Arc<str>),
}

impl FilterAtom {
    pub fn matches(&self, n: &Notification) -> bool {
        match self {
            FilterAtom::Symbol(s) => *s == n.symbol,
            FilterAtom::Feed(f) => *f == n.feed_id,
        }
    }
}

impl fmt::Display for FilterAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterAtom::Symbol(s) => write!(f, "sym:{s}"),
            FilterAtom::Feed(feed) => write!(f, "feed:{feed}"),
        }
    }
}

/// Trade completeness for timeliness (conflate) or the reverse (lossless).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeliveryPolicy {
    Lossless,
    ConflateLatest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub subscriber: SubscriberId,
    pub filter: BTreeSet<FilterAtom>,
    pub qoi: QoISpec,
    pub policy: DeliveryPolicy,
}

impl Subscription {
    pub fn new(subscriber: SubscriberId, filter: impl IntoIterator<Item = FilterAtom>, qoi: QoISpec, policy: DeliveryPolicy) -> Self {
        Subscription {
            subscriber,
            filter: filter.into_iter().collect(),
            qoi,
            policy,
        }
    }

    pub fn matches(&self, n: &Notification) -> bool {
        self.filter.contains(&FilterAtom::Symbol(n.symbol.clone())) || self.filter.contains(&FilterAtom::Feed(n.feed_id.clone()))
    }

    /// `subscriber|atoms|qoi|policy` with the ISIN-expanded atoms.
    pub fn to_line(&self) -> String {
        let atoms: Vec<String> = self.filter.iter().map(ToString::to_string).collect();
        let policy = match self.policy {
            DeliveryPolicy::Lossless => "lossless",
            DeliveryPolicy::ConflateLatest => "conflate",
        };
        format!("{}|{}|{}|{}", self.subscriber, atoms.join(","), self.qoi, policy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubscriptionError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Parses one subscription line:
///
/// ```text
/// subscriber|atom,atom,...|timeliness,granularity,completeness|lossless|conflate
/// ```
///
/// Atoms are `sym:SYMBOL@MIC`, `isin:ISIN` (expanded through `symbology`)
/// or `feed:FEED_ID`. The filter must not end up empty.
pub fn parse_subscription_line(line: &str, symbology: &SymbologyStore) -> Result<Subscription, String> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    let [subscriber, atoms, qoi, policy] = fields[..] else {
        return Err("expected subscriber|filter|qoi|policy".into());
    };
    if subscriber.is_empty() {
        return Err("empty subscriber id".into());
    }
    let mut filter = BTreeSet::new();
    for atom in atoms.split(',').map(str::trim).filter(|a| !a.is_empty()) {
        match atom.split_once(':') {
            Some(("sym", s)) => {
                filter.insert(FilterAtom::Symbol(s.parse().map_err(|e: ModelError| e.to_string())?));
            }
            Some(("isin", i)) => {
                let isin = Isin::parse(i).map_err(|e| e.to_string())?;
                filter.extend(symbology.listings_of(&isin).into_iter().map(FilterAtom::Symbol));
            }
            Some(("feed", f)) if !f.is_empty() => {
                filter.insert(FilterAtom::Feed(Arc::from(f)));
            }
            _ => return Err(format!("bad filter atom {atom:?}")),
        }
    }
    if filter.is_empty() {
        return Err("filter is empty".into());
    }
    let qoi: QoISpec = qoi.parse().map_err(|e: ModelError| e.to_string())?;
    let policy = match policy {
        "lossless" => DeliveryPolicy::Lossless,
        "conflate" => DeliveryPolicy::ConflateLatest,
        other => return Err(format!("bad policy {other:?}")),
    };
    Ok(Subscription::new(SubscriberId::new(subscriber), filter, qoi, policy))
}

/// Parses a subscription file; `#` comments and blank lines are skipped.
pub fn load_subscriptions<R: BufRead>(reader: R, symbology: &SymbologyStore) -> Result<Vec<Subscription>, SubscriptionError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SubscriptionError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(parse_subscription_line(t, symbology).map_err(|reason| SubscriptionError::Malformed { line: i + 1, reason })?);
    }
    Ok(out)
}
