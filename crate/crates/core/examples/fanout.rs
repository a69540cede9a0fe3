//! Two brokers, one feed, two subscribers with different QoI.
//!
//! `cargo run -p tickplant-core --example fanout`

use std::sync::Arc;

use tickplant_core::broker::{BrokerNetwork, BrokerTopology, DeliveryPolicy, FilterAtom, SubscriberId, Subscription};
use tickplant_core::{Notification, Payload, Price, SymbolRef, TickFlags, TickPayload, VirtualTime};

const TOPOLOGY: &str = r#"
brokers = ["ldn", "nyc"]

[[link]]
a = "ldn"
b = "nyc"
latency_us = 35000

[subscribers]
trader = "ldn"
website = "nyc"

[publishers]
FEED-XLON = "ldn"
"#;

fn main() {
    let topology = BrokerTopology::from_toml(TOPOLOGY).unwrap();
    let mut net = BrokerNetwork::new(topology).unwrap();
    let vod: SymbolRef = "VOD@XLON".parse().unwrap();
    let atom = FilterAtom::Symbol(vod.clone());
    for (who, qoi, policy) in [
        ("trader", "rt,tick,full", DeliveryPolicy::Lossless),
        ("website", "delayed:15m,tick,throttled:1", DeliveryPolicy::ConflateLatest),
    ] {
        let sub = Subscription::new(SubscriberId::new(who), [atom.clone()], qoi.parse().unwrap(), policy);
        net.subscribe(sub).unwrap();
    }

    let feed: Arc<str> = Arc::from("FEED-XLON");
    let mut out = Vec::new();
    for seq in 1..=5u32 {
        let ts = VirtualTime::from_micros(28_800_000_000 + seq as u64 * 300_000);
        let bid = Price::from_raw(721_000 + seq as i64 * 100);
        let tick = TickPayload::quote(bid, Price::from_raw(bid.raw() + 200), 1_000, 1_000, ts, TickFlags::empty());
        let n = Notification::new(feed.clone(), 0, seq, vod.clone(), ts, Payload::Tick(tick));
        out.extend(net.publish(Arc::new(n)).unwrap());
    }
    out.extend(net.finish());
    for d in &out {
        let n = d.item.anchor();
        println!("{:>8} seq {} published {} delivered {}", d.subscriber, n.seq_no, n.publish_ts, d.deliver_ts);
    }
}
