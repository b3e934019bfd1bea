//! Scalable monitoring of electrical power consumption.
//!
//! Sensors feed measurements through record bridges into a partitioned
//! message log. Aggregator workers continuously compute statistics for every
//! group of a configurable sensor hierarchy, persist raw and aggregated
//! series, and a query layer serves the dashboards.

pub mod aggregator;
pub mod api;
pub mod bench;
pub mod bridge;
pub mod gateway;
pub mod history;
pub mod msglog;
pub mod node;
pub mod records;
pub mod registry;
