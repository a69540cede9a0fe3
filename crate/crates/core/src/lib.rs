//! Desk-scale market-data ticker plant.
//!
//! Feed handlers parse and normalize exchange feeds, an event store keeps the
//! last value and history per symbol, the enrichment stage derives KPIs and
//! complex events, and a content-based publish/subscribe broker network
//! routes everything to entitled subscribers at their requested quality of
//! information. A workload generator reproduces realistic intraday load.

pub mod broker;
pub mod enrichment;
pub mod feed;
pub mod harness;
pub mod loadgen;
pub mod model;
pub mod permissioning;
pub mod store;
pub mod symbology;

pub use model::{
    compare_notifications, validate_isin, Completeness, EnrichedFields, Granularity, Isin, Mic, Notification,
    NotificationKind, Payload, Price, QoISpec, SymbolRef, TickFlags, TickPayload, Timeliness, VirtualTime,
};
