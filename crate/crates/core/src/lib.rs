//! Streaming detection of distributed reflective denial-of-service
//! (DRDoS) attacks from flow telemetry.
//!
//! Flows are mapped to AS numbers, folded into per-interval sketches keyed
//! by (UDP source port, destination AS), scored against an exponentially
//! weighted moving model that freezes while an anomaly lasts, and gated on
//! minimum volume and source-AS entropy before an alert is raised.

pub mod aggregation;
pub mod asn_map;
pub mod attacksim;
pub mod cli;
pub mod detection;
pub mod flowspec;
pub mod ingest;
pub mod mitigation;
pub mod pipeline;
pub mod reporting;
