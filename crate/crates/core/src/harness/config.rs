use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use super::HarnessError;
use crate::broker::{load_subscriptions, BrokerTopology, Subscription};
use crate::enrichment::{EventThresholds, DERIVED_FEED};
use crate::loadgen::{LoadgenConfig, LoadgenFile};
use crate::model::{parse_duration, Price};
use crate::permissioning::EntitlementStore;
use crate::symbology::SymbologyStore;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub loadgen: LoadgenConfig,
    pub topology: BrokerTopology,
    pub subscriptions: Vec<Subscription>,
    pub entitlements: EntitlementStore,
    pub symbology: SymbologyStore,
    pub processing_cost: Duration,
    pub store_capacity: usize,
    pub thresholds: EventThresholds,
    /// Keep every delivery in memory for the delivery log.
    pub keep_delivery_log: bool,
}

impl SimConfig {
    pub fn seed(&self) -> u64 {
        self.loadgen.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.loadgen.seed = seed;
    }

    pub fn horizon(&self) -> Duration {
        self.loadgen.horizon
    }

    /// Every feed that publishes into the broker network.
    pub fn feeds(&self) -> Vec<Arc<str>> {
        let mut feeds: Vec<Arc<str>> = self.loadgen.profiles.iter().map(|p| p.feed_id.clone()).collect();
        feeds.push(Arc::from(DERIVED_FEED));
        feeds
    }

    /// Cross-file consistency: every feed has a publisher broker and every
    /// subscriber an attachment.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.loadgen.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.topology.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        for feed in self.feeds() {
            match self.topology.publisher_attach.get(&feed) {
                Some(b) if self.topology.brokers.contains(b) => {}
                _ => return Err(HarnessError::Config(format!("feed {feed} has no publisher broker"))),
            }
        }
        for s in &self.subscriptions {
            if !self.topology.attachment.contains_key(&s.subscriber) {
                return Err(HarnessError::Config(format!("subscriber {} is not attached", s.subscriber)));
            }
        }
        if self.store_capacity == 0 {
            return Err(HarnessError::Config("store_capacity must be > 0".into()));
        }
        Ok(())
    }

    /// Reads a configuration file. Paths inside it are relative to its directory.
    pub fn load(path: &Path) -> Result<SimConfig, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        SimConfig::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<SimConfig, HarnessError> {
        let file: HarnessFile = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg = |e: String| HarnessError::Config(e);
        let loadgen = file.loadgen.into_config().map_err(|e| cfg(e.to_string()))?;
        let read = |name: &str| -> Result<String, HarnessError> {
            let p: PathBuf = base.join(name);
            fs::read_to_string(&p).map_err(|e| cfg(format!("{}: {e}", p.display())))
        };
        let topology = BrokerTopology::from_toml(&read(&file.topology)?).map_err(|e| cfg(format!("topology: {e}")))?;

        let mut symbology = SymbologyStore::new();
        for r in loadgen.reference_records() {
            symbology.register(r).map_err(|e| cfg(e.to_string()))?;
        }
        if let Some(reference) = &file.reference {
            let report = symbology.load(read(reference)?.as_bytes()).map_err(|e| cfg(e.to_string()))?;
            if let Some((line, e)) = report.rejected.first() {
                return Err(cfg(format!("reference line {line}: {e}")));
            }
        }

        let subscriptions = load_subscriptions(read(&file.subscriptions)?.as_bytes(), &symbology)
            .map_err(|e| cfg(format!("subscriptions: {e}")))?;
        let mut entitlements = EntitlementStore::new();
        for p in &loadgen.profiles {
            entitlements.register_feed(p.feed_id.clone(), p.mic);
        }
        entitlements
            .load(read(&file.entitlements)?.as_bytes())
            .map_err(|e| cfg(format!("entitlements: {e}")))?;

        let spread_above = file
            .spread_alerts
            .iter()
            .map(|s| s.parse::<Price>().map_err(|e| cfg(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let config = SimConfig {
            loadgen,
            topology,
            subscriptions,
            entitlements,
            symbology,
            processing_cost: match &file.processing_cost {
                Some(s) => parse_duration(s).map_err(|e| cfg(e.to_string()))?,
                None => crate::broker::DEFAULT_PROCESSING_COST,
            },
            store_capacity: file.store_capacity.unwrap_or(1_000_000),
            thresholds: EventThresholds { spread_above },
            keep_delivery_log: file.delivery_log.unwrap_or(true),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Top-level configuration file: the workload keys plus file references.
#[derive(Debug, Deserialize)]
struct HarnessFile {
    topology: String,
    subscriptions: String,
    entitlements: String,
    reference: Option<String>,
    processing_cost: Option<String>,
    store_capacity: Option<usize>,
    #[serde(default)]
    spread_alerts: Vec<String>,
    delivery_log: Option<bool>,
    #[serde(flatten)]
    loadgen: LoadgenFile,
}
