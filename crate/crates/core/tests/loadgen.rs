use std::collections::BTreeMap;
use std::time::Duration;

use proptest::prelude::*;
use tickplant_core::feed::{FeedHandler, SequenceCheck};
use tickplant_core::loadgen::{
    default_profiles, expected_count, generate_day, rate_at_secs, session_of_day, EventSpike, LoadgenConfig, LunchMode,
    MixSpec, SizeTable,
};
use tickplant_core::{compare_notifications, VirtualTime};

fn small_config(seed: u64) -> LoadgenConfig {
    let mut profiles = default_profiles(20);
    for p in &mut profiles {
        p.base_rate = 4.0;
        p.offhours_rate = 0.05;
    }
    LoadgenConfig {
        seed,
        horizon: Duration::from_secs(86_400),
        profiles,
        mix: MixSpec::default(),
        sizes: SizeTable::default(),
        spikes: Vec::new(),
        inject_gaps: 0.0,
    }
}

/// Midpoint rule at one-second resolution.
fn riemann(config: &LoadgenConfig, i: usize, from: u64, to: u64) -> f64 {
    (from..to)
        .map(|s| rate_at_secs(&config.profiles[i], &config.spikes, s as f64 + 0.5))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn expected_count_is_the_integral(i in 0usize..5, from in 0u64..80_000, len in 1u64..7_200) {
        let config = small_config(1);
        let to = (from + len).min(86_400);
        let want = riemann(&config, i, from, to);
        let got = expected_count(&config.profiles[i], &[], VirtualTime::from_secs(from), VirtualTime::from_secs(to));
        prop_assert!((got - want).abs() <= 1e-3 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn spike_multiplies_the_window() {
    let mut config = small_config(1);
    let spike = EventSpike {
        start: VirtualTime::from_secs(50_000),
        duration: Duration::from_secs(1_800),
        multiplier: 1.5,
    };
    let (a, b) = (VirtualTime::from_secs(50_000), VirtualTime::from_secs(51_800));
    let before: Vec<f64> = config.profiles.iter().map(|p| expected_count(p, &[], a, b)).collect();
    config.spikes.push(spike);
    for (p, base) in config.profiles.iter().zip(before) {
        let spiked = expected_count(p, &config.spikes, a, b);
        assert!((spiked - 1.5 * base).abs() <= 1e-9 * spiked.max(1.0));
        let outside = expected_count(p, &config.spikes, VirtualTime::from_secs(40_000), a);
        assert_eq!(outside, expected_count(p, &[], VirtualTime::from_secs(40_000), a));
    }
}

#[test]
fn generation_is_deterministic_ordered_and_sequenced() {
    let config = small_config(77);
    let a: Vec<_> = generate_day(&config).unwrap().collect();
    let b: Vec<_> = generate_day(&config).unwrap().collect();
    assert_eq!(a, b);
    assert!(a.len() > 10_000);
    assert!(a.windows(2).all(|w| compare_notifications(&w[0], &w[1]).is_lt()));
    let mut next: BTreeMap<(&str, u8), u32> = BTreeMap::new();
    for n in &a {
        let seq = next.entry((&n.feed_id, n.channel_id)).or_insert(1);
        assert_eq!(n.seq_no, *seq);
        *seq += 1;
        assert!(n.within_size_bounds(), "{n:?}");
    }
    let other: Vec<_> = generate_day(&small_config(78)).unwrap().take(100).collect();
    assert_ne!(&a[..100], &other[..]);
}

#[test]
fn hard_lunch_and_nights_are_quiet() {
    let config = small_config(5);
    let stream: Vec<_> = generate_day(&config).unwrap().collect();
    for p in &config.profiles {
        let (open, close) = session_of_day(p, 0);
        let Some(lunch) = p.lunch else { continue };
        let start = open + (lunch.start - p.open);
        let end = open + (lunch.end - p.open);
        let inside = stream
            .iter()
            .filter(|n| n.feed_id == p.feed_id && n.publish_ts >= start && n.publish_ts < end)
            .count();
        if lunch.mode == LunchMode::HardClose {
            assert_eq!(inside, 0, "{}", p.mic);
        }
        let session = stream
            .iter()
            .filter(|n| n.feed_id == p.feed_id && n.publish_ts >= open && n.publish_ts < close)
            .count();
        let total = stream.iter().filter(|n| n.feed_id == p.feed_id).count();
        assert!(session as f64 > 0.8 * total as f64, "{}: {session} of {total} in session", p.mic);
    }
}

#[test]
fn injected_gaps_are_detected() {
    let mut config = small_config(9);
    config.inject_gaps = 0.01;
    let mut stream = generate_day(&config).unwrap();
    let mut handlers: BTreeMap<_, FeedHandler> = BTreeMap::new();
    let mut missing = 0u64;
    for n in stream.by_ref() {
        let h = handlers.entry(n.feed_id.clone()).or_insert_with(|| FeedHandler::new(n.feed_id.clone()));
        if let SequenceCheck::Gap(g) = h.check_sequence(&n).unwrap() {
            missing += g.missing() as u64;
        }
    }
    let dropped = stream.stats().gap_dropped;
    let channels: u64 = config.profiles.iter().map(|p| p.channels as u64).sum();
    assert!(dropped > 100);
    // drops after the last delivered frame of a channel leave no gap
    assert!(missing <= dropped && missing + 3 * channels >= dropped, "{missing} of {dropped}");
}
