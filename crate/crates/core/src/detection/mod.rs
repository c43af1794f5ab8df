//! Online volumetric anomaly detection per (source port, destination AS)
//! key, DRDoS gating, and attack session tracking.

mod config;
mod detector;
mod ewma;
mod events;
mod gates;
mod multivector;

pub use config::{ConfigError, DetectorConfig};
pub use detector::{Detector, DetectorStats, KeyTracker, SessionIds};
pub use ewma::{ewma_update, DeviationScore, EwmaModel, Observation, Phase};
pub use events::{
    AlertPoint, AnomalyLog, AttackSession, DetectionEvent, DrdosAlert, FailedGate, SourcePeak,
    SourceShare,
};
pub use gates::{bits_per_second, entropy_gate, normalized_entropy, volume_gate, GateResult};
pub use multivector::correlate_multivector;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectionError {
    #[error("interval {got} is not after the last observed interval {last}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("sketch key ({src_port}, {dst_as}) does not match the tracker")]
    KeyMismatch { src_port: u16, dst_as: u32 },
}
