//! Deterministic synthetic flow streams: steady baseline traffic plus
//! scripted reflection attacks, as replay records or NetFlow v9 datagrams.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! seed = 7
//! duration_intervals = 30
//! delta_t = 60              # seconds, default 60
//! start_time = 1600000020   # epoch seconds, default 0
//!
//! [[baseline]]
//! src_as = [100, 101]
//! dst_as = 2354
//! port = 389
//! mean_bytes = 20000        # per interval, whole key
//! jitter = 0.1              # multiplicative, uniform in [1-j, 1+j]
//!
//! [[attack]]
//! dst_as = 2354
//! ports = [389, 123]        # every port carries total_bps
//! start = 10                # interval index, inclusive
//! end = 20                  # exclusive
//! total_bps = 200e6
//! n_sources = 40
//! shares = "uniform"        # or { zipf = 2.0 }
//! ramp = "step"             # or { linear = 3 }
//! jitter = 0.0
//! src_as = [...]            # optional, defaults to a private range
//! ```
//!
//! Every AS gets one synthetic /24; [`Generated::prefix_table`] renders
//! the matching prefix table.

mod corpus;
mod encode;

pub use corpus::{session_corpus, CorpusTruth, SessionCorpus};
pub use encode::{encode_netflow_v9, EncodeError, EncoderOptions, RECORD_LEN};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::MonitoredPortTable;
use crate::ingest::{FlowRecord, PROTO_UDP};

/// Bytes per synthetic packet when deriving packet counts.
pub const PACKET_BYTES: u64 = 1400;
/// First default source AS of attack `i` is `DEFAULT_ATTACK_AS + 1000 * i`.
pub const DEFAULT_ATTACK_AS: u32 = 64_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shares {
    Uniform,
    Zipf(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ramp {
    Step,
    /// Intervals needed to reach the peak rate.
    Linear(u64),
}

fn default_shares() -> Shares {
    Shares::Uniform
}

fn default_ramp() -> Ramp {
    Ramp::Step
}

fn default_delta_t() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub src_as: Vec<u32>,
    pub dst_as: u32,
    pub port: u16,
    pub mean_bytes: u64,
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub dst_as: u32,
    pub ports: Vec<u16>,
    pub start: u64,
    pub end: u64,
    pub total_bps: f64,
    pub n_sources: usize,
    #[serde(default = "default_shares")]
    pub shares: Shares,
    #[serde(default = "default_ramp")]
    pub ramp: Ramp,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub src_as: Option<Vec<u32>>,
}

impl AttackSpec {
    /// Bytes per port at the peak rate for one interval.
    pub fn peak_bytes(&self, delta_t: u64) -> u64 {
        (self.total_bps * delta_t as f64 / 8.0).round() as u64
    }

    fn ramp_factor(&self, interval: u64) -> f64 {
        match self.ramp {
            Ramp::Step => 1.0,
            Ramp::Linear(k) => ((interval - self.start + 1) as f64 / k.max(1) as f64).min(1.0),
        }
    }

    /// Source shares in the order of [`Self::sources`], summing to 1.
    pub fn weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = match self.shares {
            Shares::Uniform => vec![1.0; self.n_sources],
            Shares::Zipf(s) => (1..=self.n_sources).map(|i| (i as f64).powf(-s)).collect(),
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_intervals: u64,
    #[serde(default = "default_delta_t")]
    pub delta_t: u64,
    #[serde(default)]
    pub start_time: u64,
    #[serde(default)]
    pub baseline: Vec<BaselineSpec>,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackSpec>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioWarning {
    pub attack: usize,
    pub port: u16,
    pub message: String,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.delta_t == 0 {
            return bad("delta_t must be positive".into());
        }
        for (i, b) in self.baseline.iter().enumerate() {
            if b.src_as.is_empty() {
                return bad(format!("baseline {i}: src_as is empty"));
            }
            if !(0.0..1.0).contains(&b.jitter) {
                return bad(format!("baseline {i}: jitter {} outside [0, 1)", b.jitter));
            }
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if a.end <= a.start {
                return bad(format!("attack {i}: end must exceed start"));
            }
            if a.n_sources == 0 {
                return bad(format!("attack {i}: n_sources must be at least 1"));
            }
            if a.ports.is_empty() {
                return bad(format!("attack {i}: no ports"));
            }
            if !(a.total_bps.is_finite() && a.total_bps >= 0.0) {
                return bad(format!("attack {i}: total_bps must be finite and non-negative"));
            }
            if !(0.0..1.0).contains(&a.jitter) {
                return bad(format!("attack {i}: jitter {} outside [0, 1)", a.jitter));
            }
            if let Shares::Zipf(s) = a.shares {
                if !(s.is_finite() && s >= 0.0) {
                    return bad(format!("attack {i}: zipf exponent must be finite and non-negative"));
                }
            }
            if let Some(list) = &a.src_as {
                if list.len() != a.n_sources {
                    return bad(format!("attack {i}: src_as lists {} ASes for n_sources {}", list.len(), a.n_sources));
                }
            }
        }
        Ok(())
    }

    /// Source ASes of attack `i`, largest share first.
    pub fn attack_sources(&self, i: usize) -> Vec<u32> {
        let a = &self.attacks[i];
        match &a.src_as {
            Some(list) => list.clone(),
            None => (0..a.n_sources as u32)
                .map(|k| DEFAULT_ATTACK_AS + 1000 * i as u32 + k)
                .collect(),
        }
    }

    pub fn interval_start(&self, index: u64) -> u64 {
        self.start_time + index * self.delta_t
    }

    /// Every AS the scenario mentions, ascending.
    pub fn as_numbers(&self) -> Vec<u32> {
        let mut set = BTreeSet::new();
        for b in &self.baseline {
            set.extend(b.src_as.iter().copied());
            set.insert(b.dst_as);
        }
        for (i, a) in self.attacks.iter().enumerate() {
            set.insert(a.dst_as);
            set.extend(self.attack_sources(i));
        }
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Sorted by timestamp; ties keep generation order.
    pub records: Vec<FlowRecord>,
    /// (AS, synthetic /24) pairs, ascending AS.
    pub prefixes: Vec<(u32, Ipv4Net)>,
    pub warnings: Vec<ScenarioWarning>,
}

impl Generated {
    /// Text in the prefix table format.
    pub fn prefix_table(&self) -> String {
        let mut out = String::new();
        for (asn, net) in &self.prefixes {
            let _ = writeln!(out, "{net} {asn}");
        }
        out
    }

    pub fn prefix_of(&self, asn: u32) -> Option<Ipv4Net> {
        self.prefixes
            .binary_search_by_key(&asn, |p| p.0)
            .ok()
            .map(|i| self.prefixes[i].1)
    }
}

/// Splits `total` in proportion to `weights` so the parts sum exactly
/// (largest remainder, ties to the lower index).
pub fn split_exact(total: u64, weights: &[f64]) -> Vec<u64> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut parts: Vec<u64> = raw.iter().map(|r| r.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

fn jittered(rng: &mut ChaCha8Rng, value: f64, jitter: f64) -> f64 {
    if jitter == 0.0 {
        value
    } else {
        value * rng.random_range(1.0 - jitter..=1.0 + jitter)
    }
}

fn host(net: Ipv4Net, h: u8) -> Ipv4Addr {
    let o = net.network().octets();
    Ipv4Addr::new(o[0], o[1], o[2], h)
}

fn synthetic_prefix(index: usize) -> Ipv4Net {
    let i = index as u32 + 1;
    Ipv4Net::new(Ipv4Addr::new(10, (i >> 8) as u8, (i & 0xff) as u8, 0), 24).expect("valid length")
}

/// Generates the scenario's flows. Attack ports outside `ports` are
/// reported as warnings, not errors.
pub fn generate(scenario: &Scenario, ports: &MonitoredPortTable) -> Result<Generated, ScenarioError> {
    scenario.validate()?;
    let numbers = scenario.as_numbers();
    if numbers.len() > 65_000 {
        return Err(ScenarioError::Invalid("too many ASes for the synthetic address plan".into()));
    }
    let prefixes: Vec<(u32, Ipv4Net)> = numbers
        .iter()
        .enumerate()
        .map(|(i, &asn)| (asn, synthetic_prefix(i)))
        .collect();
    let prefix = |asn: u32| prefixes[prefixes.binary_search_by_key(&asn, |p| p.0).expect("listed")].1;

    let mut warnings = Vec::new();
    for (i, a) in scenario.attacks.iter().enumerate() {
        for &p in &a.ports {
            if !ports.contains(p) {
                warnings.push(ScenarioWarning {
                    attack: i,
                    port: p,
                    message: format!("port {p} is not monitored; attack {i} is invisible on it"),
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut records = Vec::new();
    let dt = scenario.delta_t;
    let mut emit = |rng: &mut ChaCha8Rng, t0: u64, src_as: u32, dst_as: u32, port: u16, bytes: u64| {
        if bytes == 0 {
            return;
        }
        let ts = t0 + rng.random_range(0..dt);
        let src = host(prefix(src_as), rng.random_range(1..=254));
        let dst = host(prefix(dst_as), 10);
        let dst_port = rng.random_range(1024..=65535);
        let packets = bytes.div_ceil(PACKET_BYTES);
        records.push(FlowRecord::new(ts, src, port, dst, dst_port, PROTO_UDP, packets, bytes));
    };

    for k in 0..scenario.duration_intervals {
        let t0 = scenario.interval_start(k);
        for b in &scenario.baseline {
            let total = jittered(&mut rng, b.mean_bytes as f64, b.jitter).round() as u64;
            let parts = split_exact(total, &vec![1.0 / b.src_as.len() as f64; b.src_as.len()]);
            for (&src_as, bytes) in b.src_as.iter().zip(parts) {
                emit(&mut rng, t0, src_as, b.dst_as, b.port, bytes);
            }
        }
        for (i, a) in scenario.attacks.iter().enumerate() {
            if !(a.start..a.end).contains(&k) {
                continue;
            }
            let sources = scenario.attack_sources(i);
            let weights = a.weights();
            for &port in &a.ports {
                let target = a.peak_bytes(dt) as f64 * a.ramp_factor(k);
                let total = jittered(&mut rng, target, a.jitter).round() as u64;
                for (&src_as, bytes) in sources.iter().zip(split_exact(total, &weights)) {
                    emit(&mut rng, t0, src_as, a.dst_as, port, bytes);
                }
            }
        }
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(Generated {
        records,
        prefixes,
        warnings,
    })
}
