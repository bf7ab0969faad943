//! Chat-room and issue-tracker mining: fetch raw upstream documents, enrich
//! chat messages with classified issue references, align identities across
//! platforms, and compute reference and tracker-activity metrics.

pub mod analytics;
pub mod identities;
pub mod orchestrator;
pub mod refparse;
pub mod sources;
pub mod store;
pub mod timestamp;

/// Stamped into enriched items and reports.
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");
