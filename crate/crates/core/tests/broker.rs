mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tickplant_core::broker::{build_spanning_tree, BrokerNetwork, DeliveryPolicy, Degrader, FilterAtom, Subscription};
use tickplant_core::QoISpec;

fn two_feeds() -> Vec<(Arc<str>, Vec<tickplant_core::SymbolRef>)> {
    vec![
        (Arc::from("F1"), symbols(4, "XNAS")),
        (Arc::from("F2"), symbols(3, "XTKS")),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn degrader_matches_reference(seed in any::<u64>(), lossless in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qoi = random_qoi(&mut rng);
        let count = rng.gen_range(1..300);
        let gap = [1_000u64, 200_000, 5_000_000][rng.gen_range(0..3)];
        let stream = random_stream(&mut rng, &two_feeds(), count, gap);
        let policy = if lossless { DeliveryPolicy::Lossless } else { DeliveryPolicy::ConflateLatest };
        let mut d = Degrader::new(qoi, policy);
        let mut out = Vec::new();
        for n in &stream {
            d.push(n.clone(), &mut out);
        }
        d.finish(&mut out);
        prop_assert!(out.windows(2).all(|w| w[0].release_ts <= w[1].release_ts));
        prop_assert!(out.iter().all(|r| r.release_ts >= r.item.anchor().publish_ts));
        let mut got: Vec<RefRelease> = out.iter().map(|r| from_delivered(&r.item, r.release_ts)).collect();
        got.sort();
        prop_assert_eq!(got, reference_degrade(&stream, qoi, lossless), "{} {:?}", qoi, policy);
    }

    #[test]
    fn lossless_full_tick_level_is_identity_shifted(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(1..200);
        let stream = random_stream(&mut rng, &two_feeds(), count, 50_000);
        let mut d = Degrader::new(QoISpec::FULL, DeliveryPolicy::Lossless);
        let mut out = Vec::new();
        for n in &stream {
            d.push(n.clone(), &mut out);
        }
        d.finish(&mut out);
        prop_assert_eq!(out.len(), stream.len());
        for (r, n) in out.iter().zip(&stream) {
            prop_assert_eq!(r.release_ts, n.publish_ts);
            prop_assert_eq!(r.item.anchor(), &**n);
        }
    }

    #[test]
    fn routing_matches_flood(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let brokers = rng.gen_range(1..=6);
        let mut topology = random_topology(&mut rng, brokers);
        let ids: Vec<_> = topology.brokers.iter().cloned().collect();
        let feeds = two_feeds();
        for (f, _) in &feeds {
            topology.publisher_attach.insert(f.clone(), ids[rng.gen_range(0..brokers)].clone());
        }
        let mut subs = Vec::new();
        for i in 0..rng.gen_range(0..8) {
            let id = subscriber(i);
            topology.attachment.insert(id.clone(), ids[rng.gen_range(0..brokers)].clone());
            let (f, syms) = &feeds[rng.gen_range(0..2)];
            let atom = if rng.gen_bool(0.2) {
                FilterAtom::Feed(f.clone())
            } else {
                FilterAtom::Symbol(syms[rng.gen_range(0..syms.len())].clone())
            };
            subs.push(Subscription::new(id, [atom], QoISpec::FULL, DeliveryPolicy::Lossless));
        }
        let count = rng.gen_range(1..300);
        let stream = random_stream(&mut rng, &feeds, count, 10_000);
        let mut net = BrokerNetwork::new(topology.clone()).unwrap().with_processing_cost(Duration::from_micros(50));
        for s in &subs {
            net.subscribe(s.clone()).unwrap();
        }
        let mut got = Vec::new();
        for n in &stream {
            got.extend(net.publish(n.clone()).unwrap().iter().map(log_row));
        }
        got.extend(net.finish().iter().map(log_row));
        got.sort();
        let (want, flood) = flood_and_filter(&topology, &subs, &stream, 50);
        prop_assert_eq!(got, want);
        prop_assert!(net.link_traffic().values().sum::<u64>() <= flood);
    }

    #[test]
    fn spanning_tree_is_minimal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=7);
        let topology = random_topology(&mut rng, n);
        let tree = build_spanning_tree(&topology).unwrap();
        prop_assert_eq!(tree.brokers().count(), n);
        let edges: usize = tree.brokers().map(|b| tree.neighbors(b).len()).sum();
        prop_assert_eq!(edges, 2 * (n - 1));
        prop_assert_eq!(tree.total_latency().as_micros() as u64, brute_force_mst_total(&topology));
        let total: u64 = prim(&topology).values().flatten().map(|(_, l)| l).sum::<u64>() / 2;
        prop_assert_eq!(total, brute_force_mst_total(&topology));
    }
}

#[test]
fn resubscribing_is_idempotent_but_conflicts_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut topology = random_topology(&mut rng, 3);
    let b = topology.brokers.iter().next().unwrap().clone();
    topology.publisher_attach.insert(Arc::from("F1"), b.clone());
    topology.attachment.insert(subscriber(0), b);
    let mut net = BrokerNetwork::new(topology).unwrap();
    let syms = &two_feeds()[0].1;
    let sub = Subscription::new(subscriber(0), [FilterAtom::Symbol(syms[0].clone())], QoISpec::FULL, DeliveryPolicy::Lossless);
    net.subscribe(sub.clone()).unwrap();
    net.subscribe(sub).unwrap();
    let other = Subscription::new(subscriber(0), [FilterAtom::Symbol(syms[1].clone())], QoISpec::FULL, DeliveryPolicy::Lossless);
    assert!(net.subscribe(other).is_err());

    let n = Arc::new(tick(&Arc::from("F1"), 0, 1, &syms[0], 10, 100, 200, 1, 1));
    assert_eq!(net.publish(n).unwrap().len(), 1);
}
