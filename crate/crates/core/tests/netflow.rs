use std::net::Ipv4Addr;

use drdos_detect::attacksim::{encode_netflow_v9, EncoderOptions};
use drdos_detect::ingest::{parse_netflow_v9, FlowRecord, TemplateCache};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = FlowRecord> {
    (
        0u64..=u32::MAX as u64,
        any::<u32>(),
        any::<u16>(),
        any::<u32>(),
        any::<u16>(),
        any::<u8>(),
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(|(ts, s, sp, d, dp, proto, a, b)| {
            // the parser rejects bytes < packets
            let (pk, by) = (a.min(b), a.max(b));
            FlowRecord::new(ts, Ipv4Addr::from(s), sp, Ipv4Addr::from(d), dp, proto, pk, by)
        })
}

/// Header then one flowset holding the given template fields, then a data
/// flowset with `payload`.
fn handmade(template: &[(u16, u16)], payload: &[u8], unix_secs: u32) -> Vec<u8> {
    let mut d = Vec::new();
    d.extend(9u16.to_be_bytes());
    d.extend(2u16.to_be_bytes());
    d.extend(0u32.to_be_bytes());
    d.extend(unix_secs.to_be_bytes());
    d.extend(1u32.to_be_bytes());
    d.extend(77u32.to_be_bytes());
    let tlen = 4 + 4 + 4 * template.len();
    d.extend(0u16.to_be_bytes());
    d.extend((tlen as u16).to_be_bytes());
    d.extend(300u16.to_be_bytes());
    d.extend((template.len() as u16).to_be_bytes());
    for (t, l) in template {
        d.extend(t.to_be_bytes());
        d.extend(l.to_be_bytes());
    }
    let pad = (4 - payload.len() % 4) % 4;
    d.extend(300u16.to_be_bytes());
    d.extend(((4 + payload.len() + pad) as u16).to_be_bytes());
    d.extend(payload);
    d.extend(std::iter::repeat_n(0u8, pad));
    d
}

#[test]
fn narrow_counters_and_extra_fields_decode() {
    // 4-byte octets, 2-byte packets, an unused 5-byte field in between
    let template = [(8, 4), (12, 4), (7, 2), (11, 2), (4, 1), (99, 5), (1, 4), (2, 2)];
    let mut payload = Vec::new();
    payload.extend([10, 0, 0, 1]);
    payload.extend([10, 0, 0, 2]);
    payload.extend(389u16.to_be_bytes());
    payload.extend(40000u16.to_be_bytes());
    payload.push(17);
    payload.extend([0xaa; 5]);
    payload.extend(1_000_000u32.to_be_bytes());
    payload.extend(800u16.to_be_bytes());
    let d = handmade(&template, &payload, 1_600_000_123);
    let mut cache = TemplateCache::new();
    let out = parse_netflow_v9(&d, &mut cache).unwrap();
    assert_eq!(
        out.records,
        vec![FlowRecord::new(
            1_600_000_123,
            Ipv4Addr::new(10, 0, 0, 1),
            389,
            Ipv4Addr::new(10, 0, 0, 2),
            40000,
            17,
            800,
            1_000_000
        )]
    );
}

#[test]
fn data_before_template_is_skipped_then_decoded() {
    let records = vec![FlowRecord::new(60, Ipv4Addr::new(1, 2, 3, 4), 123, Ipv4Addr::new(5, 6, 7, 8), 9, 17, 3, 4000)];
    let with_template = encode_netflow_v9(&records, EncoderOptions::default()).unwrap();
    let without = encode_netflow_v9(
        &records,
        EncoderOptions {
            template_every: 0,
            ..EncoderOptions::default()
        },
    )
    .unwrap();
    let mut cache = TemplateCache::new();
    let first = parse_netflow_v9(&without[0], &mut cache).unwrap();
    assert!(first.records.is_empty());
    assert_eq!(first.stats.unknown_template, 1);
    parse_netflow_v9(&with_template[0], &mut cache).unwrap();
    assert_eq!(parse_netflow_v9(&without[0], &mut cache).unwrap().records, records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn encoder_round_trip(
        mut records in prop::collection::vec(record(), 0..200),
        per in 1usize..40,
        every in 1usize..5,
    ) {
        records.sort_by_key(|r| r.timestamp);
        let opts = EncoderOptions { records_per_datagram: per, template_every: every, source_id: 5 };
        let mut cache = TemplateCache::new();
        let mut back = Vec::new();
        for d in encode_netflow_v9(&records, opts).unwrap() {
            prop_assert!(d.len() <= u16::MAX as usize);
            back.extend(parse_netflow_v9(&d, &mut cache).unwrap().records);
        }
        prop_assert_eq!(back, records);
        prop_assert!(cache.len() <= 1);
    }

    #[test]
    fn arbitrary_bytes_never_panic(data in prop::collection::vec(any::<u8>(), 0..1500)) {
        let mut cache = TemplateCache::new();
        let _ = parse_netflow_v9(&data, &mut cache);
    }

    #[test]
    fn hostile_templates_never_panic(
        fields in prop::collection::vec((any::<u16>(), any::<u16>()), 0..20),
        payload in prop::collection::vec(any::<u8>(), 0..600),
        secs in any::<u32>(),
    ) {
        let d = handmade(&fields, &payload, secs);
        let mut cache = TemplateCache::new();
        if let Ok(out) = parse_netflow_v9(&d, &mut cache) {
            prop_assert!(out.records.iter().all(|r| r.timestamp == u64::from(secs)));
        }
        prop_assert!(cache.len() <= 1);
    }

    #[test]
    fn cache_bounded_by_distinct_pairs(ids in prop::collection::vec((0u32..6, 256u16..262), 1..60)) {
        let mut cache = TemplateCache::new();
        let mut pairs = std::collections::BTreeSet::new();
        for (source, template) in ids {
            let mut d = handmade(&[(8, 4)], &[], 0);
            d[16..20].copy_from_slice(&source.to_be_bytes());
            d[24..26].copy_from_slice(&template.to_be_bytes());
            d.truncate(32);
            d[2..4].copy_from_slice(&1u16.to_be_bytes());
            let _ = parse_netflow_v9(&d, &mut cache);
            pairs.insert((source, template));
            prop_assert!(cache.len() <= pairs.len());
        }
    }
}
