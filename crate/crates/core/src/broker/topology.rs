use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::model::micros_of;

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: &str) -> Self {
                $name(Arc::from(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name::new(s)
            }
        }
    };
}

string_id!(BrokerId);
string_id!(SubscriberId);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology is not connected: {0} unreachable")]
    DisconnectedTopology(BrokerId),
    #[error("self-link on {0}")]
    SelfLink(BrokerId),
    #[error("link {0}-{1} has non-positive latency")]
    ZeroLatency(BrokerId, BrokerId),
    #[error("link {0}-{1} declared twice")]
    DuplicateLink(BrokerId, BrokerId),
    #[error("unknown broker {0}")]
    UnknownBroker(BrokerId),
    #[error("topology has no brokers")]
    Empty,
    #[error("topology file: {0}")]
    Parse(String),
}

/// Undirected link, endpoints stored in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Link {
    pub a: BrokerId,
    pub b: BrokerId,
    pub latency: Duration,
}

impl Link {
    pub fn new(x: BrokerId, y: BrokerId, latency: Duration) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        Link { a, b, latency }
    }

    pub fn other(&self, end: &BrokerId) -> &BrokerId {
        if *end == self.a {
            &self.b
        } else {
            &self.a
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerTopology {
    pub brokers: BTreeSet<BrokerId>,
    pub links: Vec<Link>,
    pub attachment: BTreeMap<SubscriberId, BrokerId>,
    pub publisher_attach: BTreeMap<Arc<str>, BrokerId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    brokers: Vec<String>,
    #[serde(default, rename = "link")]
    links: Vec<LinkEntry>,
    #[serde(default)]
    subscribers: BTreeMap<String, String>,
    #[serde(default)]
    publishers: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    a: String,
    b: String,
    latency_us: u64,
}

impl BrokerTopology {
    /// Parses the TOML topology file:
    ///
    /// ```toml
    /// brokers = ["fra", "lon", "nyc"]
    /// [[link]]
    /// a = "fra"
    /// b = "lon"
    /// latency_us = 9000
    /// [subscribers]
    /// terminal-1 = "lon"
    /// [publishers]
    /// XETR-L1 = "fra"
    /// ```
    pub fn from_toml(text: &str) -> Result<Self, TopologyError> {
        let file: TopologyFile = toml::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
        let mut t = BrokerTopology {
            brokers: file.brokers.iter().map(|b| BrokerId::new(b)).collect(),
            ..Default::default()
        };
        for l in file.links {
            t.links.push(Link::new(
                BrokerId::new(&l.a),
                BrokerId::new(&l.b),
                Duration::from_micros(l.latency_us),
            ));
        }
        for (s, b) in file.subscribers {
            t.attachment.insert(SubscriberId::new(&s), BrokerId::new(&b));
        }
        for (f, b) in file.publishers {
            t.publisher_attach.insert(Arc::from(f.as_str()), BrokerId::new(&b));
        }
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::from("brokers = [");
        out.push_str(
            &self
                .brokers
                .iter()
                .map(|b| format!("{:?}", b.as_str()))
                .collect::<Vec<_>>()
                .join(", "),
        );
        out.push_str("]\n");
        for l in &self.links {
            out.push_str(&format!(
                "\n[[link]]\na = {:?}\nb = {:?}\nlatency_us = {}\n",
                l.a.as_str(),
                l.b.as_str(),
                micros_of(l.latency)
            ));
        }
        out.push_str("\n[subscribers]\n");
        for (s, b) in &self.attachment {
            out.push_str(&format!("{:?} = {:?}\n", s.as_str(), b.as_str()));
        }
        out.push_str("\n[publishers]\n");
        for (f, b) in &self.publisher_attach {
            out.push_str(&format!("{:?} = {:?}\n", &**f, b.as_str()));
        }
        out
    }

    /// Structural checks: known endpoints, no self-links or duplicate links,
    /// positive latencies, connected.
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.brokers.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut seen = BTreeSet::new();
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !self.brokers.contains(end) {
                    return Err(TopologyError::UnknownBroker(end.clone()));
                }
            }
            if l.a == l.b {
                return Err(TopologyError::SelfLink(l.a.clone()));
            }
            if micros_of(l.latency) == 0 {
                return Err(TopologyError::ZeroLatency(l.a.clone(), l.b.clone()));
            }
            if !seen.insert((l.a.clone(), l.b.clone())) {
                return Err(TopologyError::DuplicateLink(l.a.clone(), l.b.clone()));
            }
        }
        for b in self.attachment.values().chain(self.publisher_attach.values()) {
            if !self.brokers.contains(b) {
                return Err(TopologyError::UnknownBroker(b.clone()));
            }
        }
        let root = self.brokers.first().expect("non-empty");
        let mut reached = BTreeSet::from([root.clone()]);
        let mut queue = VecDeque::from([root.clone()]);
        while let Some(x) = queue.pop_front() {
            for l in self.links.iter().filter(|l| l.a == x || l.b == x) {
                let y = l.other(&x);
                if reached.insert(y.clone()) {
                    queue.push_back(y.clone());
                }
            }
        }
        if let Some(missing) = self.brokers.iter().find(|b| !reached.contains(*b)) {
            return Err(TopologyError::DisconnectedTopology(missing.clone()));
        }
        Ok(())
    }
}

/// Minimum-latency spanning tree of the broker overlay, rooted at the
/// lexicographically smallest broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub root: BrokerId,
    pub parent: BTreeMap<BrokerId, Option<BrokerId>>,
    pub children: BTreeMap<BrokerId, Vec<BrokerId>>,
    pub edges: Vec<Link>,
    adjacency: BTreeMap<BrokerId, Vec<(BrokerId, Duration)>>,
}

/// Kruskal over links sorted by (latency, endpoint ids), so equal-latency
/// ties resolve deterministically.
pub fn build_spanning_tree(topology: &BrokerTopology) -> Result<SpanningTree, TopologyError> {
    topology.validate()?;
    let ids: Vec<&BrokerId> = topology.brokers.iter().collect();
    let index: BTreeMap<&BrokerId, usize> = ids.iter().enumerate().map(|(i, b)| (*b, i)).collect();
    let mut uf: Vec<usize> = (0..ids.len()).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut sorted: Vec<&Link> = topology.links.iter().collect();
    sorted.sort_by(|x, y| (x.latency, &x.a, &x.b).cmp(&(y.latency, &y.a, &y.b)));
    let mut edges = Vec::with_capacity(ids.len().saturating_sub(1));
    for l in sorted {
        let (ra, rb) = (find(&mut uf, index[&l.a]), find(&mut uf, index[&l.b]));
        if ra != rb {
            uf[ra] = rb;
            edges.push(l.clone());
        }
    }
    let mut adjacency: BTreeMap<BrokerId, Vec<(BrokerId, Duration)>> =
        topology.brokers.iter().map(|b| (b.clone(), Vec::new())).collect();
    for e in &edges {
        adjacency.get_mut(&e.a).unwrap().push((e.b.clone(), e.latency));
        adjacency.get_mut(&e.b).unwrap().push((e.a.clone(), e.latency));
    }
    for n in adjacency.values_mut() {
        n.sort();
    }
    let root = ids[0].clone();
    let mut parent = BTreeMap::from([(root.clone(), None)]);
    let mut children: BTreeMap<BrokerId, Vec<BrokerId>> = BTreeMap::new();
    let mut queue = VecDeque::from([root.clone()]);
    while let Some(x) = queue.pop_front() {
        children.entry(x.clone()).or_default();
        for (y, _) in &adjacency[&x] {
            if !parent.contains_key(y) {
                parent.insert(y.clone(), Some(x.clone()));
                children.entry(x.clone()).or_default().push(y.clone());
                queue.push_back(y.clone());
            }
        }
    }
    if let Some(missing) = topology.brokers.iter().find(|b| !parent.contains_key(*b)) {
        return Err(TopologyError::DisconnectedTopology(missing.clone()));
    }
    Ok(SpanningTree {
        root,
        parent,
        children,
        edges,
        adjacency,
    })
}

impl SpanningTree {
    pub fn total_latency(&self) -> Duration {
        self.edges.iter().map(|e| e.latency).sum()
    }

    pub fn brokers(&self) -> impl Iterator<Item = &BrokerId> {
        self.adjacency.keys()
    }

    pub fn neighbors(&self, b: &BrokerId) -> &[(BrokerId, Duration)] {
        self.adjacency.get(b).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn latency(&self, x: &BrokerId, y: &BrokerId) -> Option<Duration> {
        self.neighbors(x).iter().find(|(n, _)| n == y).map(|(_, l)| *l)
    }

    /// For every broker, the tree neighbor one hop closer to `target`
    /// (`None` for `target` itself).
    pub fn next_hops_toward(&self, target: &BrokerId) -> BTreeMap<BrokerId, Option<BrokerId>> {
        let mut toward = BTreeMap::from([(target.clone(), None)]);
        let mut queue = VecDeque::from([target.clone()]);
        while let Some(x) = queue.pop_front() {
            for (y, _) in self.neighbors(&x) {
                if !toward.contains_key(y) {
                    toward.insert(y.clone(), Some(x.clone()));
                    queue.push_back(y.clone());
                }
            }
        }
        toward
    }

    /// Brokers on the tree path from `from` to `to`, both included.
    pub fn path(&self, from: &BrokerId, to: &BrokerId) -> Vec<BrokerId> {
        let toward = self.next_hops_toward(to);
        let mut path = vec![from.clone()];
        let mut cur = from.clone();
        while let Some(Some(next)) = toward.get(&cur) {
            path.push(next.clone());
            cur = next.clone();
        }
        path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(brokers: &[&str], links: &[(&str, &str, u64)]) -> BrokerTopology {
        BrokerTopology {
            brokers: brokers.iter().map(|b| BrokerId::new(b)).collect(),
            links: links
                .iter()
                .map(|(a, b, l)| Link::new(BrokerId::new(a), BrokerId::new(b), Duration::from_micros(*l)))
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn two_brokers_one_link() {
        let t = build_spanning_tree(&topo(&["a", "b"], &[("a", "b", 5)])).unwrap();
        assert_eq!(t.edges.len(), 1);
        assert_eq!(t.total_latency(), Duration::from_micros(5));
    }

    #[test]
    fn triangle_drops_heaviest_link() {
        let t = build_spanning_tree(&topo(&["a", "b", "c"], &[("a", "b", 1), ("b", "c", 2), ("a", "c", 3)])).unwrap();
        let lat: Vec<u64> = t.edges.iter().map(|e| micros_of(e.latency)).collect();
        assert_eq!(lat, vec![1, 2]);
        assert_eq!(t.path(&"a".into(), &"c".into()), vec![BrokerId::new("a"), "b".into(), "c".into()]);
    }

    #[test]
    fn ties_break_by_broker_id() {
        let t = build_spanning_tree(&topo(&["a", "b", "c"], &[("b", "c", 1), ("a", "c", 1), ("a", "b", 1)])).unwrap();
        let pairs: Vec<(&str, &str)> = t.edges.iter().map(|e| (e.a.as_str(), e.b.as_str())).collect();
        assert_eq!(pairs, vec![("a", "b"), ("a", "c")]);
    }

    #[test]
    fn invalid_topologies() {
        assert!(matches!(
            build_spanning_tree(&topo(&["a", "b", "c"], &[("a", "b", 1)])),
            Err(TopologyError::DisconnectedTopology(_))
        ));
        assert!(matches!(topo(&["a"], &[("a", "a", 1)]).validate(), Err(TopologyError::SelfLink(_))));
        assert!(matches!(
            topo(&["a", "b"], &[("a", "b", 0)]).validate(),
            Err(TopologyError::ZeroLatency(..))
        ));
        assert!(matches!(
            topo(&["a", "b"], &[("a", "b", 1), ("b", "a", 2)]).validate(),
            Err(TopologyError::DuplicateLink(..))
        ));
        assert!(matches!(
            topo(&["a"], &[("a", "z", 1)]).validate(),
            Err(TopologyError::UnknownBroker(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
brokers = ["fra", "lon", "nyc"]

[[link]]
a = "fra"
b = "lon"
latency_us = 9000

[[link]]
a = "lon"
b = "nyc"
latency_us = 35000

[subscribers]
terminal-1 = "nyc"

[publishers]
XETR-L1 = "fra"
"#;
        let t = BrokerTopology::from_toml(text).unwrap();
        assert_eq!(t.links.len(), 2);
        assert_eq!(t.attachment[&SubscriberId::new("terminal-1")], BrokerId::new("nyc"));
        assert_eq!(BrokerTopology::from_toml(&t.to_toml()).unwrap(), t);
    }
}
