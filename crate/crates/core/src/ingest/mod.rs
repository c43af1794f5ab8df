//! Flow ingestion: NetFlow v9 datagrams, captured packet files and the
//! JSON Lines replay format, all normalized into [`FlowRecord`] values.

pub mod netflow;
pub mod pcap;
pub mod replay;

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

pub use netflow::{parse_netflow_v9, NetflowError, ParseStats, TemplateCache};
pub use replay::{parse_replay_line, to_replay_line, ReplayError};

pub const PROTO_UDP: u8 = 17;

/// One exported flow.
///
/// `packets`/`bytes` are the values as exported. `adjusted_packets` and
/// `adjusted_bytes` carry the sampling-corrected counts; every volume
/// computation downstream reads the adjusted fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub timestamp: u64,
    pub src_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_ip: Ipv4Addr,
    pub dst_port: u16,
    pub protocol: u8,
    pub packets: u64,
    pub bytes: u64,
    pub adjusted_packets: u64,
    pub adjusted_bytes: u64,
}

impl FlowRecord {
    /// Builds an unsampled record (adjusted counts equal the raw ones).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        timestamp: u64,
        src_ip: Ipv4Addr,
        src_port: u16,
        dst_ip: Ipv4Addr,
        dst_port: u16,
        protocol: u8,
        packets: u64,
        bytes: u64,
    ) -> Self {
        Self {
            timestamp,
            src_ip,
            src_port,
            dst_ip,
            dst_port,
            protocol,
            packets,
            bytes,
            adjusted_packets: packets,
            adjusted_bytes: bytes,
        }
    }

    /// Every packet carries at least one byte.
    pub fn counts_consistent(&self) -> bool {
        self.packets == 0 || self.bytes >= self.packets
    }
}

/// Packet sampling multiplier applied by the exporter (1 = unsampled).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    sampling_rate: u32,
}

impl SamplingConfig {
    pub fn new(sampling_rate: u32) -> Option<Self> {
        (sampling_rate >= 1).then_some(Self { sampling_rate })
    }

    pub fn rate(&self) -> u32 {
        self.sampling_rate
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { sampling_rate: 1 }
    }
}

/// Scales the raw counters by the sampling rate into the adjusted fields.
/// Counters saturate at `u64::MAX` rather than wrapping.
pub fn apply_sampling(record: FlowRecord, cfg: SamplingConfig) -> FlowRecord {
    let rate = u64::from(cfg.sampling_rate);
    FlowRecord {
        adjusted_packets: record.packets.saturating_mul(rate),
        adjusted_bytes: record.bytes.saturating_mul(rate),
        ..record
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(packets: u64, bytes: u64) -> FlowRecord {
        FlowRecord::new(
            0,
            Ipv4Addr::new(1, 2, 3, 4),
            123,
            Ipv4Addr::new(5, 6, 7, 8),
            4000,
            PROTO_UDP,
            packets,
            bytes,
        )
    }

    #[test]
    fn sampling_identity() {
        let r = apply_sampling(rec(1, 1000), SamplingConfig::new(1).unwrap());
        assert_eq!(r.adjusted_bytes, 1000);
        assert_eq!(r.bytes, 1000);
    }

    #[test]
    fn sampling_multiplies() {
        let r = apply_sampling(rec(2, 1000), SamplingConfig::new(512).unwrap());
        assert_eq!(r.adjusted_bytes, 512_000);
        assert_eq!(r.adjusted_packets, 1024);
        assert_eq!(r.bytes, 1000);
    }

    #[test]
    fn sampling_zero_counts() {
        let r = apply_sampling(rec(0, 0), SamplingConfig::new(4096).unwrap());
        assert_eq!((r.adjusted_packets, r.adjusted_bytes), (0, 0));
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(SamplingConfig::new(0).is_none());
    }
}
