//! Shared scenario fixtures and brute-force oracles for the integration
//! targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::Arc;

use drdos_detect::aggregation::MonitoredPortTable;
use drdos_detect::asn_map::PrefixTable;
use drdos_detect::attacksim::{generate, Generated, Scenario};
use drdos_detect::detection::{AnomalyLog, AttackSession, DetectorConfig, DrdosAlert};
use drdos_detect::ingest::FlowRecord;
use drdos_detect::pipeline::{Counters, Pipeline, PipelineEvent, PipelineSettings};
use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VICTIM: u32 = 2354;

pub fn scenario(text: &str) -> (Scenario, Generated, Arc<PrefixTable>) {
    let s = Scenario::from_toml(text).expect("scenario parses");
    let g = generate(&s, &MonitoredPortTable::default()).expect("scenario generates");
    let table = PrefixTable::load(g.prefix_table().as_bytes()).expect("prefix table loads");
    (s, g, Arc::new(table))
}

pub fn settings(detector: DetectorConfig) -> PipelineSettings {
    PipelineSettings {
        detector,
        ..PipelineSettings::default()
    }
}

pub fn run(records: &[FlowRecord], table: Arc<PrefixTable>, settings: PipelineSettings) -> (Vec<PipelineEvent>, Counters) {
    let mut p = Pipeline::new(settings, table);
    let mut events = Vec::new();
    for r in records {
        events.extend(p.push_record(*r).expect("in-order intervals"));
    }
    events.extend(p.finish().expect("finish"));
    (events, p.counters())
}

pub fn alerts(events: &[PipelineEvent]) -> Vec<&DrdosAlert> {
    events
        .iter()
        .filter_map(|e| match e {
            PipelineEvent::Alert(a) => Some(a),
            _ => None,
        })
        .collect()
}

pub fn anomalies(events: &[PipelineEvent]) -> Vec<&AnomalyLog> {
    events
        .iter()
        .filter_map(|e| match e {
            PipelineEvent::Anomaly(l) => Some(l),
            _ => None,
        })
        .collect()
}

pub fn finalized(events: &[PipelineEvent]) -> Vec<&AttackSession> {
    events
        .iter()
        .filter_map(|e| match e {
            PipelineEvent::SessionFinalized(s) => Some(s),
            _ => None,
        })
        .collect()
}

/// Quiet victim key, 40 uniform sources stepping to 200 Mbps on port 389
/// at interval 10 for five minutes.
pub const LATENCY: &str = r#"
seed = 11
duration_intervals = 20
start_time = 1600000020

[[attack]]
dst_as = 2354
ports = [389]
start = 10
end = 15
total_bps = 200e6
n_sources = 40
"#;

/// Same attack at the 5 Mbps floor, with steady traffic on unrelated
/// keys that learns during a three-interval warmup.
pub const LATENCY_WITH_BACKGROUND: &str = r#"
seed = 12
duration_intervals = 20
start_time = 1600000020

[[baseline]]
src_as = [100, 101, 102]
dst_as = 3000
port = 53
mean_bytes = 400000
jitter = 0.1

[[baseline]]
src_as = [110, 111]
dst_as = 3001
port = 123
mean_bytes = 90000
jitter = 0.1

[[attack]]
dst_as = 2354
ports = [389]
start = 10
end = 15
total_bps = 5e6
n_sources = 40
"#;

pub fn gate_scenario(total_bps: f64, n_sources: usize, shares: &str) -> String {
    format!(
        r#"
seed = 21
duration_intervals = 20
start_time = 1600000020

[[baseline]]
src_as = [100, 101, 102, 103]
dst_as = 3000
port = 53
mean_bytes = 400000
jitter = 0.1

[[attack]]
dst_as = 2354
ports = [389]
start = 6
end = 12
total_bps = {total_bps}
n_sources = {n_sources}
shares = {shares}
"#
    )
}

/// NTP and CLDAP vectors against one victim; `gap` separates them. The
/// background key keeps time moving, so run it with a warmup.
pub fn multivector_scenario(gap: bool) -> String {
    let (a, b) = if gap { ((3, 8), (12, 17)) } else { ((4, 12), (6, 14)) };
    format!(
        r#"
seed = 31
duration_intervals = 22
start_time = 1600000020

[[baseline]]
src_as = [100, 101]
dst_as = 3000
port = 53
mean_bytes = 50000

[[attack]]
dst_as = 2354
ports = [123]
start = {}
end = {}
total_bps = 300e6
n_sources = 30

[[attack]]
dst_as = 2354
ports = [389]
start = {}
end = {}
total_bps = 150e6
n_sources = 25
"#,
        a.0, a.1, b.0, b.1
    )
}

/// Random flows over `n_as` ASes with some noise the pipeline must drop:
/// TCP, unmonitored ports, unmapped addresses. Timestamps creep forward
/// with small local disorder that stays inside one interval of grace.
pub fn random_flows(seed: u64, n: usize, prefixes: &[(Ipv4Net, u32)], start: u64) -> Vec<FlowRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ports = [19u16, 53, 123, 389, 1900, 11211, 443];
    let mut clock = start;
    let mut out = Vec::with_capacity(n);
    let addr = |rng: &mut ChaCha8Rng| -> Ipv4Addr {
        if rng.random_bool(0.03) {
            Ipv4Addr::new(172, 31, rng.random(), rng.random())
        } else {
            let (net, _) = prefixes[rng.random_range(0..prefixes.len())];
            let o = net.network().octets();
            let host_bits = 32 - net.prefix_len();
            let span = if host_bits >= 32 { u32::MAX } else { (1u32 << host_bits) - 1 };
            Ipv4Addr::from(u32::from_be_bytes(o) | (rng.random::<u32>() & span))
        }
    };
    for _ in 0..n {
        clock += rng.random_range(0..=1u64) * rng.random_range(0..3u64);
        let jitter = rng.random_range(0..=20u64);
        let ts = clock.saturating_sub(jitter).max(start);
        let bytes = rng.random_range(40..200_000u64);
        let packets = bytes.div_ceil(1400).max(1);
        let proto = if rng.random_bool(0.05) { 6 } else { 17 };
        let src = addr(&mut rng);
        let dst = addr(&mut rng);
        out.push(FlowRecord::new(
            ts,
            src,
            ports[rng.random_range(0..ports.len())],
            dst,
            rng.random_range(1024..65535),
            proto,
            packets,
            bytes,
        ));
    }
    out
}

/// Longest match by linear scan.
pub fn lookup_linear(prefixes: &[(Ipv4Net, u32)], addr: Ipv4Addr) -> u32 {
    prefixes
        .iter()
        .filter(|(n, _)| n.contains(&addr))
        .max_by_key(|(n, _)| n.prefix_len())
        .map_or(0, |&(_, a)| a)
}

pub type GroupBy = BTreeMap<(u64, u16, u32), (u64, BTreeMap<u32, u64>)>;

/// (interval, port, dst AS) → (bytes, per-source bytes), straight from
/// the records.
pub fn group_by(records: &[FlowRecord], prefixes: &[(Ipv4Net, u32)], delta_t: u64) -> GroupBy {
    let ports = MonitoredPortTable::default();
    let mut out = GroupBy::new();
    for r in records {
        if r.protocol != 17 || !ports.contains(r.src_port) {
            continue;
        }
        let src = lookup_linear(prefixes, r.src_ip);
        let dst = lookup_linear(prefixes, r.dst_ip);
        let e = out.entry((r.timestamp / delta_t * delta_t, r.src_port, dst)).or_default();
        e.0 += r.adjusted_bytes;
        *e.1.entry(src).or_default() += r.adjusted_bytes;
    }
    out
}

/// A mixed-length table with nested prefixes.
pub fn nested_prefixes() -> Vec<(Ipv4Net, u32)> {
    let mut v = Vec::new();
    for i in 0..40u8 {
        v.push((Ipv4Net::new(Ipv4Addr::new(10, i, 0, 0), 16).unwrap(), 100 + u32::from(i)));
        v.push((Ipv4Net::new(Ipv4Addr::new(10, i, 7, 0), 24).unwrap(), 1000 + u32::from(i)));
    }
    v.push((Ipv4Net::new(Ipv4Addr::new(10, 0, 0, 0), 8).unwrap(), 99));
    v.push((Ipv4Net::new(Ipv4Addr::new(10, 3, 7, 128), 25).unwrap(), 7777));
    v
}

pub fn events_jsonl(events: &[PipelineEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e).unwrap());
        s.push('\n');
    }
    s
}
