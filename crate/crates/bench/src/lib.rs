//! Shared fixtures for the criterion benchmarks in `benches/`.

use std::sync::Arc;
use std::time::Duration;

use tickplant_core::loadgen::{default_profiles, generate_day, LoadgenConfig, MixSpec, SizeTable};
use tickplant_core::Notification;

/// The first `n` notifications of a seeded default-profile day.
pub fn sample_stream(n: usize) -> Vec<Arc<Notification>> {
    let config = LoadgenConfig {
        seed: 42,
        horizon: Duration::from_secs(86_400),
        profiles: default_profiles(200),
        mix: MixSpec::default(),
        sizes: SizeTable::default(),
        spikes: Vec::new(),
        inject_gaps: 0.0,
    };
    generate_day(&config).expect("default config is valid").take(n).map(Arc::new).collect()
}
