//! Per-interval traffic sketches keyed by (source port, destination AS),
//! restricted to the monitored reflection ports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An AS-level flow: addresses replaced by origin AS numbers. Protocol is
/// implicitly UDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsFlow {
    pub src_as: u32,
    pub src_port: u16,
    pub dst_as: u32,
    pub dst_port: u16,
    pub packets: u64,
    pub bytes: u64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoredPort {
    pub port: u16,
    pub service: String,
    /// Bandwidth amplification factor range, when known.
    pub baf: Option<(f64, f64)>,
}

/// UDP source ports whose traffic is aggregated.
#[derive(Debug, Clone)]
pub struct MonitoredPortTable {
    rows: Vec<MonitoredPort>,
    bitmap: Box<[u64; 1024]>,
}

/// (port, service, bandwidth amplification range)
type PortRow = (u16, &'static str, Option<(f64, f64)>);

const DEFAULT_PORTS: [PortRow; 15] = [
    (53, "DNS", Some((28.0, 54.0))),
    (123, "NTP", Some((556.9, 556.9))),
    (389, "CLDAP", Some((56.0, 70.0))),
    (19, "CharGen", Some((358.8, 358.8))),
    (11211, "Memcached", Some((10_000.0, 51_000.0))),
    (111, "SunRPC", Some((7.0, 28.0))),
    (1900, "SSDP", Some((30.8, 30.8))),
    (161, "SNMP", Some((6.3, 6.3))),
    (27005, "SRCDS", None),
    (20800, "Call of Duty", None),
    (137, "NETBIOS", Some((3.8, 3.8))),
    (520, "RIP", Some((131.24, 131.24))),
    (27960, "Quake", Some((63.9, 63.9))),
    (29015, "Steam", Some((5.5, 5.5))),
    (17, "QOTD", Some((140.3, 140.3))),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PortTableError {
    #[error("port table line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("port {0} listed twice")]
    Duplicate(u16),
    #[error("port table is empty")]
    Empty,
    #[error("port table read failed: {0}")]
    Io(String),
}

fn parse_baf(s: &str) -> Result<Option<(f64, f64)>, String> {
    if s == "-" {
        return Ok(None);
    }
    let s = s.replace(',', "");
    let (lo, hi) = match s.split_once("-") {
        Some((lo, hi)) => (lo.to_string(), hi.to_string()),
        None => (s.clone(), s.clone()),
    };
    let lo: f64 = lo.parse().map_err(|_| format!("bad BAF `{s}`"))?;
    let hi: f64 = hi.parse().map_err(|_| format!("bad BAF `{s}`"))?;
    if lo > hi || lo < 0.0 {
        return Err(format!("bad BAF range `{s}`"));
    }
    Ok(Some((lo, hi)))
}

impl MonitoredPortTable {
    pub fn new(rows: Vec<MonitoredPort>) -> Result<Self, PortTableError> {
        if rows.is_empty() {
            return Err(PortTableError::Empty);
        }
        let mut bitmap = Box::new([0u64; 1024]);
        for row in &rows {
            let (word, bit) = (usize::from(row.port / 64), row.port % 64);
            if bitmap[word] & (1 << bit) != 0 {
                return Err(PortTableError::Duplicate(row.port));
            }
            bitmap[word] |= 1 << bit;
        }
        Ok(Self { rows, bitmap })
    }

    /// Reads `<port> <service> [<baf>]` rows. BAF is `-`, a single value or
    /// `low-high`; service names may not contain whitespace except when the
    /// BAF column is present, in which case the last token is the BAF.
    pub fn load<R: BufRead>(source: R) -> Result<Self, PortTableError> {
        let mut rows = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.map_err(|e| PortTableError::Io(e.to_string()))?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| PortTableError::Line { line: i + 1, reason };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let port: u16 = tokens[0]
                .parse()
                .map_err(|_| err(format!("bad port `{}`", tokens[0])))?;
            let (service, baf) = match tokens.len() {
                1 => (String::new(), None),
                2 => (tokens[1].to_string(), None),
                n => (tokens[1..n - 1].join(" "), parse_baf(tokens[n - 1]).map_err(err)?),
            };
            rows.push(MonitoredPort { port, service, baf });
        }
        Self::new(rows)
    }

    pub fn contains(&self, port: u16) -> bool {
        self.bitmap[usize::from(port / 64)] & (1 << (port % 64)) != 0
    }

    pub fn rows(&self) -> &[MonitoredPort] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl Default for MonitoredPortTable {
    fn default() -> Self {
        let rows = DEFAULT_PORTS
            .iter()
            .map(|&(port, service, baf)| MonitoredPort {
                port,
                service: service.to_string(),
                baf,
            })
            .collect();
        Self::new(rows).expect("default port table is valid")
    }
}

/// Keep iff the flow's source port is monitored.
pub fn filter_flow(flow: &AsFlow, ports: &MonitoredPortTable) -> bool {
    ports.contains(flow.src_port)
}

/// Start of the interval containing `timestamp`.
pub fn bucket_of(timestamp: u64, delta_t: u64) -> u64 {
    assert!(delta_t > 0, "interval length must be positive");
    timestamp / delta_t * delta_t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SketchKey {
    pub src_port: u16,
    pub dst_as: u32,
}

/// Aggregate of one interval's flows for one (source port, destination AS).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSketch {
    pub interval_start: u64,
    pub src_port: u16,
    pub dst_as: u32,
    pub bytes: u64,
    /// Bytes contributed by each source AS.
    pub per_src: BTreeMap<u32, u64>,
}

impl TrafficSketch {
    pub fn zero(interval_start: u64, key: SketchKey) -> Self {
        Self {
            interval_start,
            src_port: key.src_port,
            dst_as: key.dst_as,
            bytes: 0,
            per_src: BTreeMap::new(),
        }
    }

    pub fn key(&self) -> SketchKey {
        SketchKey {
            src_port: self.src_port,
            dst_as: self.dst_as,
        }
    }

    /// Source ASes sorted by descending bytes, ties by ascending AS.
    pub fn breakdown(&self) -> Vec<(u32, u64)> {
        let mut v: Vec<(u32, u64)> = self.per_src.iter().map(|(&a, &b)| (a, b)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AggregationStats {
    pub folded_flows: u64,
    pub folded_bytes: u64,
    pub late_flows: u64,
    pub late_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldOutcome {
    Folded,
    Late,
}

#[derive(Debug, Default)]
struct Accum {
    bytes: u64,
    per_src: FxHashMap<u32, u64>,
}

/// Open intervals awaiting closure.
///
/// An interval `t` becomes due once the watermark (largest timestamp
/// observed, or an externally supplied clock) reaches
/// `t + delta_t * (1 + late_grace)`. Flows for already-closed intervals are
/// dropped and counted as late.
#[derive(Debug)]
pub struct SketchStore {
    delta_t: u64,
    late_grace: u64,
    open: BTreeMap<u64, FxHashMap<SketchKey, Accum>>,
    next_to_close: Option<u64>,
    closed_any: bool,
    watermark: u64,
    draining: bool,
    stats: AggregationStats,
}

impl SketchStore {
    pub fn new(delta_t: u64, late_grace: u64) -> Self {
        assert!(delta_t > 0, "interval length must be positive");
        Self {
            delta_t,
            late_grace,
            open: BTreeMap::new(),
            next_to_close: None,
            closed_any: false,
            watermark: 0,
            draining: false,
            stats: AggregationStats::default(),
        }
    }

    pub fn delta_t(&self) -> u64 {
        self.delta_t
    }

    pub fn stats(&self) -> AggregationStats {
        self.stats
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    /// Number of (interval, key) accumulators currently held.
    pub fn live_sketches(&self) -> usize {
        self.open.values().map(FxHashMap::len).sum()
    }

    pub fn fold(&mut self, flow: &AsFlow) -> FoldOutcome {
        let bucket = bucket_of(flow.timestamp, self.delta_t);
        self.watermark = self.watermark.max(flow.timestamp);
        match self.next_to_close {
            Some(next) if bucket < next && self.closed_any => {
                self.stats.late_flows += 1;
                self.stats.late_bytes += flow.bytes;
                return FoldOutcome::Late;
            }
            Some(next) if bucket < next => self.next_to_close = Some(bucket),
            None => self.next_to_close = Some(bucket),
            _ => {}
        }
        let key = SketchKey {
            src_port: flow.src_port,
            dst_as: flow.dst_as,
        };
        let acc = self.open.entry(bucket).or_default().entry(key).or_default();
        acc.bytes += flow.bytes;
        *acc.per_src.entry(flow.src_as).or_default() += flow.bytes;
        self.stats.folded_flows += 1;
        self.stats.folded_bytes += flow.bytes;
        FoldOutcome::Folded
    }

    /// Moves the watermark forward (never backward).
    pub fn advance(&mut self, watermark: u64) {
        self.watermark = self.watermark.max(watermark);
    }

    /// Marks end of input: every interval up to the newest open one is due.
    pub fn drain(&mut self) {
        self.draining = true;
    }

    /// The next interval ready to close, if any.
    pub fn next_due(&self) -> Option<u64> {
        let next = self.next_to_close?;
        if self.draining {
            let last = *self.open.keys().next_back()?;
            return (next <= last).then_some(next);
        }
        let horizon = next.saturating_add(self.delta_t.saturating_mul(1 + self.late_grace));
        (self.watermark >= horizon).then_some(next)
    }

    /// Emits interval `t` (which must be [`Self::next_due`]) in
    /// (src_port, dst_as) order. Keys in `live` that saw no traffic get an
    /// explicit zero sketch.
    pub fn close_interval<I>(&mut self, t: u64, live: I) -> Vec<TrafficSketch>
    where
        I: IntoIterator<Item = SketchKey>,
    {
        assert_eq!(Some(t), self.next_to_close, "intervals close in order");
        let active = self.open.remove(&t).unwrap_or_default();
        let mut keys: BTreeSet<SketchKey> = live.into_iter().collect();
        keys.extend(active.keys().copied());
        let mut active = active;
        let out = keys
            .into_iter()
            .map(|key| match active.remove(&key) {
                Some(acc) => TrafficSketch {
                    interval_start: t,
                    src_port: key.src_port,
                    dst_as: key.dst_as,
                    bytes: acc.bytes,
                    per_src: acc.per_src.into_iter().collect(),
                },
                None => TrafficSketch::zero(t, key),
            })
            .collect();
        self.closed_any = true;
        self.next_to_close = Some(t + self.delta_t);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(ts: u64, src_as: u32, dst_as: u32, port: u16, bytes: u64) -> AsFlow {
        AsFlow {
            src_as,
            src_port: port,
            dst_as,
            dst_port: 40000,
            packets: 1,
            bytes,
            timestamp: ts,
        }
    }

    fn drain_all(store: &mut SketchStore) -> Vec<TrafficSketch> {
        store.drain();
        let mut out = Vec::new();
        while let Some(t) = store.next_due() {
            out.extend(store.close_interval(t, []));
        }
        out
    }

    #[test]
    fn default_table_has_fifteen_ports() {
        let t = MonitoredPortTable::default();
        assert_eq!(t.len(), 15);
        for p in [53, 123, 389, 19, 11211, 111, 1900, 161, 27005, 20800, 137, 520, 27960, 29015, 17] {
            assert!(t.contains(p), "{p}");
        }
    }

    #[test]
    fn filter_examples() {
        let t = MonitoredPortTable::default();
        assert!(filter_flow(&flow(0, 1, 2, 389, 1), &t));
        assert!(!filter_flow(&flow(0, 1, 2, 443, 1), &t));
        assert!(filter_flow(&flow(0, 1, 2, 11211, 1), &t));
    }

    #[test]
    fn port_file_parsing() {
        let text = "# port service baf\n53 DNS 28-54\n11211 Memcached 10,000-51,000\n20800 Call of Duty -\n9999 custom\n";
        let t = MonitoredPortTable::load(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.rows()[1].baf, Some((10_000.0, 51_000.0)));
        assert_eq!(t.rows()[2].service, "Call of Duty");
        assert_eq!(t.rows()[2].baf, None);
        assert!(t.contains(9999) && !t.contains(53 + 1));
        assert_eq!(
            MonitoredPortTable::load("53 DNS\n53 again\n".as_bytes()).unwrap_err(),
            PortTableError::Duplicate(53)
        );
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket_of(125, 60), 120);
        assert_eq!(bucket_of(120, 60), 120);
        assert_eq!(bucket_of(119, 60), 60);
    }

    #[test]
    fn additive_fold() {
        let mut s = SketchStore::new(60, 1);
        s.fold(&flow(10, 7, 9, 123, 100));
        s.fold(&flow(20, 8, 9, 123, 50));
        let out = drain_all(&mut s);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bytes, 150);
        assert_eq!(out[0].per_src, BTreeMap::from([(7, 100), (8, 50)]));
    }

    #[test]
    fn separate_buckets() {
        let mut s = SketchStore::new(60, 1);
        s.fold(&flow(10, 7, 9, 123, 100));
        s.fold(&flow(70, 8, 9, 123, 50));
        let out = drain_all(&mut s);
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].interval_start, out[1].interval_start), (0, 60));
    }

    #[test]
    fn zero_sketch_for_live_model() {
        let mut s = SketchStore::new(60, 1);
        s.fold(&flow(10, 7, 9, 123, 100));
        s.advance(1000);
        let t = s.next_due().unwrap();
        s.close_interval(t, []);
        let live = SketchKey { src_port: 123, dst_as: 9 };
        let out = s.close_interval(s.next_due().unwrap(), [live]);
        assert_eq!(out, vec![TrafficSketch::zero(60, live)]);
    }

    #[test]
    fn deterministic_key_order() {
        let mut s = SketchStore::new(60, 1);
        s.fold(&flow(1, 1, 30, 389, 1));
        s.fold(&flow(2, 1, 10, 389, 1));
        s.fold(&flow(3, 1, 20, 53, 1));
        let keys: Vec<_> = drain_all(&mut s).iter().map(|k| (k.src_port, k.dst_as)).collect();
        assert_eq!(keys, vec![(53, 20), (389, 10), (389, 30)]);
    }

    #[test]
    fn late_grace_and_late_drop() {
        let mut s = SketchStore::new(60, 1);
        s.fold(&flow(10, 1, 2, 53, 5));
        s.fold(&flow(100, 1, 2, 53, 5));
        // interval 0 closes at 120 (+60 grace)
        assert_eq!(s.next_due(), None);
        assert_eq!(s.fold(&flow(30, 1, 2, 53, 5)), FoldOutcome::Folded);
        s.advance(120);
        let first = s.close_interval(s.next_due().unwrap(), []);
        assert_eq!(first[0].bytes, 10);
        assert_eq!(s.fold(&flow(59, 1, 2, 53, 7)), FoldOutcome::Late);
        assert_eq!(s.stats().late_flows, 1);
        assert_eq!(s.stats().late_bytes, 7);
        let rest = drain_all(&mut s);
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].bytes, 5);
    }

    #[test]
    fn earlier_flow_before_first_close_reopens_start() {
        let mut s = SketchStore::new(60, 1);
        s.fold(&flow(125, 1, 2, 53, 1));
        s.fold(&flow(61, 1, 2, 53, 1));
        let out = drain_all(&mut s);
        assert_eq!(out.iter().map(|k| k.interval_start).collect::<Vec<_>>(), vec![60, 120]);
    }

    #[test]
    fn gaps_close_as_empty_intervals() {
        let mut s = SketchStore::new(60, 0);
        s.fold(&flow(0, 1, 2, 53, 1));
        s.fold(&flow(300, 1, 2, 53, 1));
        let mut closed = Vec::new();
        while let Some(t) = s.next_due() {
            closed.push((t, s.close_interval(t, []).len()));
        }
        assert_eq!(closed, vec![(0, 1), (60, 0), (120, 0), (180, 0), (240, 0)]);
    }
}
