use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::MonitoredPortTable;
use crate::detection::{correlate_multivector, AlertPoint, AttackSession, SourcePeak};

/// What the corpus generator planted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusTruth {
    /// Planned duration in minutes, by session id order.
    pub durations_minutes: Vec<u64>,
    /// Sessions shorter than ten minutes.
    pub short_sessions: usize,
    /// Multi-vector group size → number of groups.
    pub group_sizes: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone)]
pub struct SessionCorpus {
    pub sessions: Vec<AttackSession>,
    pub truth: CorpusTruth,
}

const SOURCE_POOL: u32 = 600;

/// A closed-session log with one-minute intervals in which exactly
/// `round(n * short_fraction)` sessions last under ten minutes. About one
/// victim in ten is hit on two or three ports at once.
pub fn session_corpus(seed: u64, n: usize, short_fraction: f64) -> SessionCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_short = ((n as f64 * short_fraction.clamp(0.0, 1.0)).round() as usize).min(n);
    let mut durations: Vec<u64> = (0..n)
        .map(|i| if i < n_short { rng.random_range(1..=9) } else { rng.random_range(10..=180) })
        .collect();
    durations.shuffle(&mut rng);

    let ports: Vec<u16> = MonitoredPortTable::default().rows().iter().map(|r| r.port).collect();
    let mut sessions = Vec::with_capacity(n);
    let mut group_sizes = BTreeMap::new();
    let mut clock = 1_600_000_020u64 / 60 * 60;
    let mut victim = 50_000u32;
    let mut i = 0;
    while i < n {
        let remaining = n - i;
        let size = if remaining >= 2 && rng.random_bool(0.1) {
            rng.random_range(2..=remaining.min(3))
        } else {
            1
        };
        if size > 1 {
            *group_sizes.entry(size).or_insert(0) += 1;
        }
        let start = clock;
        for &port in ports.choose_multiple(&mut rng, size) {
            let id = i as u64 + 1;
            sessions.push(build(&mut rng, id, victim, port, start, durations[i]));
            i += 1;
        }
        victim += 1;
        clock += rng.random_range(1..=30) * 60;
    }
    correlate_multivector(&mut sessions);

    SessionCorpus {
        sessions,
        truth: CorpusTruth {
            short_sessions: durations.iter().filter(|&&d| d < 10).count(),
            durations_minutes: durations,
            group_sizes,
        },
    }
}

fn build(rng: &mut ChaCha8Rng, id: u64, dst_as: u32, port: u16, start: u64, minutes: u64) -> AttackSession {
    let mut s = AttackSession::open(id, dst_as, port, start);
    // log-uniform peak between 5 Mbps and 1.5 Gbps
    let peak = (rng.random_range(5e6f64.ln()..1.5e9f64.ln())).exp();
    let peak_at = rng.random_range(0..minutes);
    for k in 0..minutes {
        let v = if k == peak_at { peak } else { peak * rng.random_range(0.1..1.0) };
        s.alerts.push(AlertPoint {
            interval: start + k * 60,
            volume_bps: v,
        });
    }
    s.peak_volume_bps = peak;
    let n_sources = rng.random_range(1..=80usize);
    let mut ases = BTreeSet::new();
    while ases.len() < n_sources {
        ases.insert(1000 + rng.random_range(0..SOURCE_POOL));
    }
    s.source_peaks = ases
        .into_iter()
        .map(|src_as| SourcePeak {
            src_as,
            peak_bps: peak * rng.random_range(0.0..1.0) / n_sources as f64 * 2.0,
        })
        .collect();
    s.n_sources = s.source_peaks.len();
    s.close(start + minutes * 60, false);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_shape() {
        let c = session_corpus(3, 1000, 0.8);
        assert_eq!(c.sessions.len(), 1000);
        assert_eq!(c.truth.short_sessions, 800);
        let short = c.sessions.iter().filter(|s| s.duration_minutes.unwrap() < 10.0).count();
        assert_eq!(short, 800);
        for (s, d) in c.sessions.iter().zip(&c.truth.durations_minutes) {
            assert_eq!(s.duration_minutes, Some(*d as f64));
            assert_eq!(s.alerts.len() as u64, *d);
        }
    }

    #[test]
    fn planted_groups_recovered() {
        let c = session_corpus(9, 500, 0.8);
        let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
        for s in &c.sessions {
            if let Some(g) = s.multi_vector_group {
                *groups.entry(g).or_default() += 1;
            }
        }
        let mut hist = BTreeMap::new();
        for size in groups.values() {
            *hist.entry(*size).or_insert(0) += 1;
        }
        assert_eq!(hist, c.truth.group_sizes);
        assert!(!hist.is_empty());
    }

    #[test]
    fn deterministic() {
        let a = session_corpus(5, 100, 0.8);
        let b = session_corpus(5, 100, 0.8);
        assert_eq!(a.sessions, b.sessions);
    }
}
