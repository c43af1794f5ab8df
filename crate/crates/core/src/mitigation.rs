//! Mitigation evidence in BGP update logs: blackholing signatures and
//! temporary origin changes (scrubbing reroutes) around attack sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::asn_map::PrefixTable;
use crate::detection::AttackSession;

pub const BLACKHOLE_NEXT_HOP: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);
pub const BLACKHOLE_COMMUNITY_VALUE: u32 = 666;
pub const BASELINE_LOOKBACK_SECONDS: u64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Community {
    pub asn: u32,
    pub value: u32,
}

impl fmt::Display for Community {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.asn, self.value)
    }
}

impl FromStr for Community {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, v) = s.split_once(':').ok_or_else(|| format!("community {s:?} lacks ':'"))?;
        let asn = a.trim().parse().map_err(|_| format!("bad community AS in {s:?}"))?;
        let value = v.trim().parse().map_err(|_| format!("bad community value in {s:?}"))?;
        Ok(Self { asn, value })
    }
}

impl Serialize for Community {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Community {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Announce,
    Withdraw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BgpUpdate {
    pub ts: u64,
    pub kind: UpdateKind,
    pub prefix: Ipv4Net,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_as: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_hop: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub communities: Vec<Community>,
}

impl BgpUpdate {
    pub fn announce(ts: u64, prefix: Ipv4Net, origin_as: u32, next_hop: Ipv4Addr) -> Self {
        Self {
            ts,
            kind: UpdateKind::Announce,
            prefix,
            origin_as: Some(origin_as),
            next_hop: Some(next_hop),
            communities: Vec::new(),
        }
    }

    pub fn withdraw(ts: u64, prefix: Ipv4Net) -> Self {
        Self {
            ts,
            kind: UpdateKind::Withdraw,
            prefix,
            origin_as: None,
            next_hop: None,
            communities: Vec::new(),
        }
    }

    pub fn with_communities(mut self, communities: Vec<Community>) -> Self {
        self.communities = communities;
        self
    }

    fn validate(&mut self) -> Result<(), UpdateFieldError> {
        self.prefix = self.prefix.trunc();
        match self.kind {
            UpdateKind::Announce if self.origin_as.is_none() => Err(UpdateFieldError::MissingOrigin),
            UpdateKind::Announce if self.next_hop.is_none() => Err(UpdateFieldError::MissingNextHop),
            UpdateKind::Withdraw
                if self.origin_as.is_some() || self.next_hop.is_some() || !self.communities.is_empty() =>
            {
                Err(UpdateFieldError::WithdrawAttributes)
            }
            _ => Ok(()),
        }
    }

    fn is_announce(&self) -> bool {
        self.kind == UpdateKind::Announce
    }
}

#[derive(Debug, Error)]
pub enum UpdateFieldError {
    #[error("invalid update: {0}")]
    Json(#[from] serde_json::Error),
    #[error("announce lacks origin_as")]
    MissingOrigin,
    #[error("announce lacks next_hop")]
    MissingNextHop,
    #[error("withdraw carries announce attributes")]
    WithdrawAttributes,
}

#[derive(Debug, Error)]
pub enum UpdateLogError {
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: UpdateFieldError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn parse_update_line(line: &str) -> Result<BgpUpdate, UpdateFieldError> {
    let mut u: BgpUpdate = serde_json::from_str(line)?;
    u.validate()?;
    Ok(u)
}

/// Reads a JSONL update log and sorts it by timestamp (stable).
pub fn load_updates<R: BufRead>(source: R) -> Result<Vec<BgpUpdate>, UpdateLogError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_update_line(&line).map_err(|source| UpdateLogError::Line { line: i + 1, source })?);
    }
    out.sort_by_key(|u| u.ts);
    Ok(out)
}

/// Inclusive time range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn around(attack_start: u64, attack_end: u64, pre_margin: u64, post_margin: u64) -> Self {
        Self {
            start: attack_start.saturating_sub(pre_margin),
            end: attack_end.saturating_add(post_margin),
        }
    }

    pub fn contains(&self, ts: u64) -> bool {
        (self.start..=self.end).contains(&ts)
    }
}

fn overlaps(a: &Ipv4Net, b: &Ipv4Net) -> bool {
    a.contains(b) || b.contains(a)
}

fn touches_victim(prefix: &Ipv4Net, victim_prefixes: &[Ipv4Net]) -> bool {
    victim_prefixes.iter().any(|v| overlaps(prefix, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    BlackholeNexthop,
    BlackholeCommunity,
    Reroute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reroute {
    pub previous_origin: u32,
    pub temporary_origin: u32,
    pub revert_seen: bool,
    pub revert_time: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationFinding {
    pub kind: FindingKind,
    pub session_id: u64,
    pub prefix: Ipv4Net,
    pub evidence: Vec<BgpUpdate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reroute: Option<Reroute>,
}

/// One finding per matching in-window announce and signature.
pub fn detect_blackholing(
    updates: &[BgpUpdate],
    session_id: u64,
    victim_prefixes: &[Ipv4Net],
    window: Window,
) -> Vec<MitigationFinding> {
    let mut out = Vec::new();
    for u in updates {
        if !u.is_announce() || !window.contains(u.ts) || !touches_victim(&u.prefix, victim_prefixes) {
            continue;
        }
        let mut emit = |kind| {
            out.push(MitigationFinding {
                kind,
                session_id,
                prefix: u.prefix,
                evidence: vec![u.clone()],
                reroute: None,
            })
        };
        if u.next_hop == Some(BLACKHOLE_NEXT_HOP) {
            emit(FindingKind::BlackholeNexthop);
        }
        if u.communities.iter().any(|c| c.value == BLACKHOLE_COMMUNITY_VALUE) {
            emit(FindingKind::BlackholeCommunity);
        }
    }
    out
}

/// Origin AS per prefix before an attack.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Baseline {
    origins: BTreeMap<Ipv4Net, u32>,
}

impl Baseline {
    pub fn from_pairs<I: IntoIterator<Item = (Ipv4Net, u32)>>(pairs: I) -> Self {
        Self {
            origins: pairs.into_iter().map(|(p, a)| (p.trunc(), a)).collect(),
        }
    }

    pub fn from_table(table: &PrefixTable) -> Self {
        Self::from_pairs(
            table
                .as_numbers()
                .flat_map(|asn| table.reverse(asn).iter().map(move |p| (*p, asn))),
        )
    }

    /// State replayed from the updates in `[before - lookback, before)`.
    pub fn from_updates(updates: &[BgpUpdate], before: u64, lookback: u64) -> Self {
        let from = before.saturating_sub(lookback);
        let mut origins = BTreeMap::new();
        for u in updates.iter().filter(|u| u.ts >= from && u.ts < before) {
            match (u.kind, u.origin_as) {
                (UpdateKind::Announce, Some(origin)) => {
                    origins.insert(u.prefix, origin);
                }
                _ => {
                    origins.remove(&u.prefix);
                }
            }
        }
        Self { origins }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Exact entry, else the longest covering one.
    pub fn origin_for(&self, prefix: &Ipv4Net) -> Option<u32> {
        if let Some(&a) = self.origins.get(prefix) {
            return Some(a);
        }
        self.origins
            .iter()
            .filter(|(p, _)| p.contains(prefix))
            .max_by_key(|(p, _)| p.prefix_len())
            .map(|(_, &a)| a)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RerouteOutcome {
    pub findings: Vec<MitigationFinding>,
    /// Distinct in-window prefixes with no baseline origin.
    pub unresolvable: usize,
}

pub fn detect_reroute(
    updates: &[BgpUpdate],
    session_id: u64,
    victim_as: u32,
    victim_prefixes: &[Ipv4Net],
    baseline: &Baseline,
    window: Window,
) -> RerouteOutcome {
    let mut groups: BTreeMap<(Ipv4Net, u32), (u32, Vec<BgpUpdate>)> = BTreeMap::new();
    let mut unresolvable = BTreeSet::new();
    for u in updates {
        let Some(origin) = u.origin_as else { continue };
        if !u.is_announce() || !window.contains(u.ts) || !touches_victim(&u.prefix, victim_prefixes) {
            continue;
        }
        let Some(base) = baseline.origin_for(&u.prefix) else {
            unresolvable.insert(u.prefix);
            continue;
        };
        if origin == base || origin == victim_as {
            continue;
        }
        groups
            .entry((u.prefix, origin))
            .or_insert_with(|| (base, Vec::new()))
            .1
            .push(u.clone());
    }

    let findings = groups
        .into_iter()
        .map(|((prefix, temporary_origin), (previous_origin, evidence))| {
            let first = evidence[0].ts;
            let revert_time = updates
                .iter()
                .find(|u| {
                    u.ts > first && u.is_announce() && u.prefix == prefix && u.origin_as == Some(previous_origin)
                })
                .map(|u| u.ts);
            MitigationFinding {
                kind: FindingKind::Reroute,
                session_id,
                prefix,
                evidence,
                reroute: Some(Reroute {
                    previous_origin,
                    temporary_origin,
                    revert_seen: revert_time.is_some(),
                    revert_time,
                }),
            }
        })
        .collect();
    RerouteOutcome {
        findings,
        unresolvable: unresolvable.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MitigationConfig {
    pub pre_margin: u64,
    pub post_margin: u64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            pre_margin: 600,
            post_margin: 3600,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub findings: Vec<MitigationFinding>,
    pub sessions_analyzed: usize,
    pub unresolvable_prefixes: usize,
    /// Sessions whose victim AS has no prefixes in the table.
    pub unknown_victims: Vec<u64>,
}

/// Runs both detectors for every session. Without an explicit baseline the
/// day of updates before each window supplies it.
pub fn analyze_sessions(
    updates: &[BgpUpdate],
    sessions: &[AttackSession],
    table: &PrefixTable,
    cfg: MitigationConfig,
    baseline: Option<&Baseline>,
) -> MitigationReport {
    let mut report = MitigationReport::default();
    for s in sessions {
        report.sessions_analyzed += 1;
        let victim_prefixes = table.reverse(s.dst_as);
        if victim_prefixes.is_empty() {
            report.unknown_victims.push(s.session_id);
            continue;
        }
        let end = s.end.unwrap_or(s.start);
        let window = Window::around(s.start, end, cfg.pre_margin, cfg.post_margin);
        report
            .findings
            .extend(detect_blackholing(updates, s.session_id, victim_prefixes, window));
        let derived;
        let base = match baseline {
            Some(b) => b,
            None => {
                derived = Baseline::from_updates(updates, window.start, BASELINE_LOOKBACK_SECONDS);
                &derived
            }
        };
        let rr = detect_reroute(updates, s.session_id, s.dst_as, victim_prefixes, base, window);
        report.findings.extend(rr.findings);
        report.unresolvable_prefixes += rr.unresolvable;
    }
    report
}
