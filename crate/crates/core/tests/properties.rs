mod common;

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use common::*;
use drdos_detect::aggregation::{AsFlow, MonitoredPortTable, SketchStore, TrafficSketch};
use drdos_detect::asn_map::PrefixTable;
use drdos_detect::attacksim::{generate, Scenario};
use drdos_detect::detection::{AlertPoint, AttackSession, DrdosAlert, SourceShare};
use drdos_detect::flowspec::{RuleState, RuleStore};
use drdos_detect::reporting::{day_of, in_session, traffic_matrix};
use proptest::prelude::*;

fn table() -> PrefixTable {
    PrefixTable::from_entries(nested_prefixes()).unwrap()
}

fn alert_strategy() -> impl Strategy<Value = DrdosAlert> {
    (
        prop::collection::btree_map(
            prop_oneof![3 => 100u32..140, 3 => 1000u32..1040, 1 => 0u32..3, 1 => 5000u32..5003],
            1u64..10_000_000,
            1..30,
        ),
        0u64..5,
        0u64..50,
    )
        .prop_map(|(per, session_id, k)| {
            // one victim key per session; session 2 hits an unknown victim
            let dst_as = [100, 117, 9000, 1003, 139][session_id as usize];
            let port = [53, 123, 389, 11211, 123][session_id as usize];
            let mut breakdown: Vec<SourceShare> =
                per.iter().map(|(&src_as, &bytes)| SourceShare { src_as, bytes }).collect();
            breakdown.sort_by(|a, b| b.bytes.cmp(&a.bytes).then(a.src_as.cmp(&b.src_as)));
            let bytes = breakdown.iter().map(|s| s.bytes).sum();
            DrdosAlert {
                interval: 1_600_000_020 + 60 * k,
                dst_as,
                src_port: port,
                bytes,
                volume_bps: bytes as f64 * 8.0 / 60.0,
                delta: 0.9,
                entropy: 0.8,
                source_breakdown: breakdown,
                session_id,
            }
        })
}

fn session(id: u64, dst_as: u32, port: u16, start: u64, end: u64, truncated: bool) -> AttackSession {
    AttackSession {
        session_id: id,
        dst_as,
        src_port: port,
        start,
        end: Some(end),
        duration_minutes: Some((end - start) as f64 / 60.0),
        peak_volume_bps: 1e7,
        alerts: vec![AlertPoint { interval: start, volume_bps: 1e7 }],
        source_peaks: Vec::new(),
        n_sources: 2,
        multi_vector_group: None,
        truncated,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rules_cover_exactly_the_known_top_contributors(
        alerts in prop::collection::vec(alert_strategy(), 1..12),
        top_n in prop::option::of(1usize..12),
    ) {
        let table = table();
        let mut store = RuleStore::new();
        let mut expected: BTreeSet<(u64, u32, u16, u32)> = BTreeSet::new();
        for a in &alerts {
            let got = store.rules_from_alert(a, &table, top_n);
            let victim_known = !table.reverse(a.dst_as).is_empty();
            let n = top_n.unwrap_or(usize::MAX);
            let want: BTreeSet<(u32, u16, u32)> = if victim_known {
                a.source_breakdown
                    .iter()
                    .take(n)
                    .filter(|s| !table.reverse(s.src_as).is_empty())
                    .map(|s| (s.src_as, a.src_port, a.dst_as))
                    .collect()
            } else {
                BTreeSet::new()
            };
            let have: BTreeSet<(u32, u16, u32)> =
                got.rules.iter().map(|r| (r.src_as, r.matches.src_port, r.dst_as)).collect();
            prop_assert_eq!(&have, &want);
            prop_assert_eq!(got.rules.len(), want.len());
            prop_assert_eq!(got.warnings.is_empty(), victim_known && want.len() == a.source_breakdown.len().min(n));
            for r in &got.rules {
                prop_assert_eq!(&r.matches.src_prefixes[..], table.reverse(r.src_as));
                prop_assert_eq!(&r.matches.dst_prefixes[..], table.reverse(r.dst_as));
            }
            expected.extend(got.rules.iter().map(|r| (r.session_id, r.src_as, r.matches.src_port, r.dst_as)));
        }
        let sessions: BTreeSet<u64> = alerts.iter().map(|a| a.session_id).collect();
        for s in sessions {
            let _ = store.withdraw_for_session(s, 1_700_000_000);
        }
        prop_assert_eq!(store.active().count(), 0);
        prop_assert!(store.rules().all(|r| r.state == RuleState::Withdrawn && r.withdrawn_at.is_some()));
        prop_assert_eq!(store.rules().count(), expected.len());
    }

    #[test]
    fn live_sketches_bounded_by_ports_times_victims(
        flows in prop::collection::vec((0u64..600, prop::sample::select(vec![53u16, 123, 389, 1900]), 1u32..20, 1u32..6), 1..400),
        grace in 0u64..3,
    ) {
        let ports = MonitoredPortTable::default();
        let mut store = SketchStore::new(60, grace);
        let mut open: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
        let mut sorted = flows;
        sorted.sort_by_key(|f| f.0);
        for (ts, port, dst, src) in sorted {
            let flow = AsFlow { timestamp: ts, src_as: src, src_port: port, dst_as: dst, dst_port: 1, packets: 1, bytes: 100 };
            store.fold(&flow);
            open.entry(ts / 60 * 60).or_default().insert(dst);
            while let Some(t) = store.next_due() {
                store.close_interval(t, std::iter::empty());
                open.remove(&t);
            }
            let bound: usize = open.values().map(|d| d.len() * ports.len()).sum();
            prop_assert!(store.live_sketches() <= bound);
        }
    }

    #[test]
    fn matrix_plus_excluded_equals_archive(
        sketches in prop::collection::vec((0u64..4 * 1440, 1u32..5, 1u64..1_000_000), 1..200),
        windows in prop::collection::vec((0u64..4 * 1440, 1u64..300, any::<bool>()), 0..6),
    ) {
        let base = 1_600_041_600u64; // 2020-09-14T00:00:00Z
        let mut by_key: BTreeMap<(u64, u32), u64> = BTreeMap::new();
        for (m, src, b) in &sketches {
            *by_key.entry((base + m * 60, *src)).or_default() += b;
        }
        let mut grouped: BTreeMap<u64, BTreeMap<u32, u64>> = BTreeMap::new();
        for ((t, src), b) in by_key {
            grouped.entry(t).or_default().insert(src, b);
        }
        let archive: Vec<TrafficSketch> = grouped
            .into_iter()
            .map(|(t, per_src)| TrafficSketch {
                interval_start: t,
                src_port: 123,
                dst_as: VICTIM,
                bytes: per_src.values().sum(),
                per_src,
            })
            .collect();
        let sessions: Vec<AttackSession> = windows
            .iter()
            .enumerate()
            .map(|(i, &(m, len, truncated))| session(i as u64 + 1, VICTIM, 123, base + m * 60, base + (m + len) * 60, truncated))
            .collect();
        let from = NaiveDate::from_ymd_opt(2020, 9, 14).unwrap();
        let to = NaiveDate::from_ymd_opt(2020, 9, 17).unwrap();
        let covered: BTreeSet<NaiveDate> = archive.iter().map(|s| day_of(s.interval_start)).collect();
        match traffic_matrix(&archive, &sessions, VICTIM, 123, from, to, None) {
            Ok(m) => {
                let total: u64 = archive.iter().map(|s| s.bytes).sum();
                let kept: u64 = m.bytes.iter().flatten().sum();
                let excluded: u64 = archive
                    .iter()
                    .filter(|s| sessions.iter().any(|x| in_session(x, s.interval_start)))
                    .map(|s| s.bytes)
                    .sum();
                prop_assert_eq!(m.total_bytes, total);
                prop_assert_eq!(m.excluded_bytes, excluded);
                prop_assert_eq!(kept + excluded, total);
            }
            Err(_) => prop_assert!(covered.len() < 4),
        }
    }

    #[test]
    fn generator_is_deterministic_and_on_target(
        seed in any::<u64>(),
        bps in 1e6f64..1e9,
        n in 1usize..50,
        jitter in 0.0f64..0.3,
    ) {
        let text = format!(
            "seed = {seed}\nduration_intervals = 8\n\n[[attack]]\ndst_as = 2354\nports = [389]\nstart = 2\nend = 6\ntotal_bps = {bps}\nn_sources = {n}\njitter = {jitter}\n"
        );
        let s = Scenario::from_toml(&text).unwrap();
        let a = generate(&s, &MonitoredPortTable::default()).unwrap();
        let b = generate(&s, &MonitoredPortTable::default()).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        let target = s.attacks[0].peak_bytes(60) as f64;
        let mut per: BTreeMap<u64, u64> = BTreeMap::new();
        for r in &a.records {
            *per.entry(r.timestamp / 60).or_default() += r.bytes;
        }
        prop_assert_eq!(per.len(), 4);
        for got in per.values() {
            let got = *got as f64;
            prop_assert!(got >= target * (1.0 - jitter) - 1.0 && got <= target * (1.0 + jitter) + 1.0, "{} vs {}", got, target);
        }
    }
}
