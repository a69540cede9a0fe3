//! Content-based publish/subscribe overlay with edge-side QoI degradation.

pub mod network;
pub mod qoi;
pub mod subscription;
pub mod topology;

pub use network::{
    sort_report, Admission, BrokerError, BrokerNetwork, Delivery, DeliveryReport, Hop, NetworkCounters, RoutingTable,
    DEFAULT_PROCESSING_COST,
};
pub use qoi::{throttle_interval, timeliness_release, BarDelivery, DeliveredItem, Degrader, Release};
pub use subscription::{load_subscriptions, parse_subscription_line, DeliveryPolicy, FilterAtom, Subscription, SubscriptionError};
pub use topology::{build_spanning_tree, BrokerId, BrokerTopology, Link, SpanningTree, SubscriberId, TopologyError};
