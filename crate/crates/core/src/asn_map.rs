//! IPv4 → origin AS mapping by longest-prefix match, plus the reverse
//! AS → announced prefixes view used when deriving filter rules.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::sync::{Arc, RwLock};
use std::time::SystemTime;

use ipnet::Ipv4Net;
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::aggregation::AsFlow;
use crate::ingest::FlowRecord;

/// Returned for addresses no prefix covers.
pub const UNMAPPED_AS: u32 = 0;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("prefix table is empty ({malformed} malformed lines skipped)")]
    Empty { malformed: usize },
    #[error("prefix table read failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub entries: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

/// Immutable longest-prefix-match table.
///
/// Entries are stored in one hash map per prefix length. A lookup probes
/// only the lengths present in the table, longest first.
#[derive(Debug, Clone)]
pub struct PrefixTable {
    by_len: Vec<FxHashMap<u32, u32>>,
    lengths_desc: Vec<u8>,
    reverse: FxHashMap<u32, Vec<Ipv4Net>>,
    loaded_at: SystemTime,
    report: LoadReport,
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

fn parse_line(line: &str) -> Option<Option<(Ipv4Net, u32)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Some(None);
    }
    let mut parts = line.split_whitespace();
    let net: Ipv4Net = parts.next()?.parse().ok()?;
    let asn = parts.next()?;
    let asn = asn
        .strip_prefix("AS")
        .or_else(|| asn.strip_prefix("as"))
        .unwrap_or(asn);
    let asn: u32 = asn.parse().ok()?;
    if asn == UNMAPPED_AS || parts.next().is_some() {
        return None;
    }
    Some(Some((net.trunc(), asn)))
}

impl PrefixTable {
    /// Reads `<cidr> <asn>` lines. `#` starts a comment. Host bits in the
    /// prefix are cleared. A repeated prefix keeps its last AS.
    pub fn load<R: BufRead>(source: R) -> Result<Self, LoadError> {
        let mut entries: BTreeMap<Ipv4Net, u32> = BTreeMap::new();
        let mut report = LoadReport::default();
        for line in source.lines() {
            match parse_line(&line?) {
                Some(Some((net, asn))) => {
                    if entries.insert(net, asn).is_some() {
                        report.duplicates += 1;
                    }
                }
                Some(None) => {}
                None => report.malformed += 1,
            }
        }
        if entries.is_empty() {
            return Err(LoadError::Empty {
                malformed: report.malformed,
            });
        }
        report.entries = entries.len();
        Ok(Self::build(entries, report))
    }

    pub fn from_entries<I: IntoIterator<Item = (Ipv4Net, u32)>>(entries: I) -> Result<Self, LoadError> {
        let entries: BTreeMap<Ipv4Net, u32> = entries
            .into_iter()
            .filter(|(_, asn)| *asn != UNMAPPED_AS)
            .map(|(n, a)| (n.trunc(), a))
            .collect();
        if entries.is_empty() {
            return Err(LoadError::Empty { malformed: 0 });
        }
        let report = LoadReport {
            entries: entries.len(),
            ..Default::default()
        };
        Ok(Self::build(entries, report))
    }

    fn build(entries: BTreeMap<Ipv4Net, u32>, report: LoadReport) -> Self {
        let mut by_len: Vec<FxHashMap<u32, u32>> = vec![FxHashMap::default(); 33];
        let mut reverse: FxHashMap<u32, Vec<Ipv4Net>> = FxHashMap::default();
        for (net, asn) in entries {
            by_len[usize::from(net.prefix_len())].insert(u32::from(net.network()), asn);
            // BTreeMap order keeps every reverse list sorted
            reverse.entry(asn).or_default().push(net);
        }
        let lengths_desc = (0..=32u8)
            .rev()
            .filter(|&l| !by_len[usize::from(l)].is_empty())
            .collect();
        Self {
            by_len,
            lengths_desc,
            reverse,
            loaded_at: SystemTime::now(),
            report,
        }
    }

    /// Origin AS of the longest covering prefix, or [`UNMAPPED_AS`].
    pub fn lookup(&self, addr: Ipv4Addr) -> u32 {
        self.lookup_entry(addr).map_or(UNMAPPED_AS, |(_, asn)| asn)
    }

    /// Longest covering prefix and its AS.
    pub fn lookup_entry(&self, addr: Ipv4Addr) -> Option<(Ipv4Net, u32)> {
        let bits = u32::from(addr);
        self.lengths_desc.iter().find_map(|&len| {
            let network = bits & mask(len);
            self.by_len[usize::from(len)].get(&network).map(|&asn| {
                let net = Ipv4Net::new(Ipv4Addr::from(network), len).expect("len <= 32");
                (net, asn)
            })
        })
    }

    /// Prefixes announced by `asn`, sorted. Empty for unknown AS numbers.
    pub fn reverse(&self, asn: u32) -> &[Ipv4Net] {
        self.reverse.get(&asn).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.report.entries
    }

    pub fn is_empty(&self) -> bool {
        self.report.entries == 0
    }

    pub fn report(&self) -> LoadReport {
        self.report
    }

    pub fn loaded_at(&self) -> SystemTime {
        self.loaded_at
    }

    pub fn as_numbers(&self) -> impl Iterator<Item = u32> + '_ {
        self.reverse.keys().copied()
    }
}

/// Maps a flow's addresses to AS numbers. Adjusted counters are carried.
pub fn map_flow(record: &FlowRecord, table: &PrefixTable) -> AsFlow {
    AsFlow {
        src_as: table.lookup(record.src_ip),
        src_port: record.src_port,
        dst_as: table.lookup(record.dst_ip),
        dst_port: record.dst_port,
        packets: record.adjusted_packets,
        bytes: record.adjusted_bytes,
        timestamp: record.timestamp,
    }
}

/// Shared handle allowing a whole-table swap while readers keep using the
/// snapshot they already hold.
#[derive(Debug, Clone)]
pub struct SharedPrefixTable {
    current: Arc<RwLock<Arc<PrefixTable>>>,
}

impl SharedPrefixTable {
    pub fn new(table: PrefixTable) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(table))),
        }
    }

    pub fn snapshot(&self) -> Arc<PrefixTable> {
        Arc::clone(&self.current.read().expect("prefix table lock poisoned"))
    }

    pub fn swap(&self, table: PrefixTable) -> Arc<PrefixTable> {
        let mut guard = self.current.write().expect("prefix table lock poisoned");
        std::mem::replace(&mut *guard, Arc::new(table))
    }
}
