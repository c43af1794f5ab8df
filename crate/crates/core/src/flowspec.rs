//! Filtering rules derived from alerts: discard UDP from each contributing
//! source AS's prefixes with the abused source port toward the victim's
//! prefixes, withdrawn when the attack session ends.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use crate::asn_map::{PrefixTable, UNMAPPED_AS};
use crate::detection::DrdosAlert;
use crate::ingest::PROTO_UDP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleState {
    Active,
    Withdrawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub dst_prefixes: Vec<Ipv4Net>,
    pub src_prefixes: Vec<Ipv4Net>,
    pub protocol: u8,
    pub src_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub rule_id: u64,
    pub action: RuleAction,
    #[serde(rename = "match")]
    pub matches: RuleMatch,
    pub src_as: u32,
    pub dst_as: u32,
    pub session_id: u64,
    pub state: RuleState,
    pub created_at: u64,
    pub updated_at: u64,
    pub withdrawn_at: Option<u64>,
}

impl FilterRule {
    /// One `discard udp src <prefix> sport <p> dst <prefix>` line per
    /// source/destination prefix pair, after a comment header.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "# rule {} session {} src-as {} dst-as {} {}\n",
            self.rule_id,
            self.session_id,
            self.src_as,
            self.dst_as,
            match self.state {
                RuleState::Active => "active",
                RuleState::Withdrawn => "withdrawn",
            }
        );
        for src in &self.matches.src_prefixes {
            for dst in &self.matches.dst_prefixes {
                let _ = writeln!(
                    out,
                    "discard udp src {src} sport {} dst {dst}",
                    self.matches.src_port
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum RuleWarning {
    /// The source AS has no known prefixes (includes the unmapped AS).
    UnknownSource { session_id: u64, src_as: u32 },
    UnknownVictim { session_id: u64, dst_as: u32 },
    UnknownSession { session_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum RuleChange {
    Created(FilterRule),
    Withdrawn(FilterRule),
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct AlertRules {
    /// Every rule covering this alert, new or refreshed, by ascending id.
    pub rules: Vec<FilterRule>,
    pub created: Vec<u64>,
    pub warnings: Vec<RuleWarning>,
}

/// Owns every rule ever derived, keyed by (session, source AS).
#[derive(Debug, Default, Clone)]
pub struct RuleStore {
    rules: BTreeMap<u64, FilterRule>,
    by_origin: BTreeMap<(u64, u32), u64>,
    next_id: u64,
}

impl RuleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, rule_id: u64) -> Option<&FilterRule> {
        self.rules.get(&rule_id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &FilterRule> {
        self.rules.values()
    }

    pub fn active(&self) -> impl Iterator<Item = &FilterRule> {
        self.rules.values().filter(|r| r.state == RuleState::Active)
    }

    /// Derives rules for the `top_n` largest contributors (all when
    /// `None`). Repeated alerts of one session refresh `updated_at` on the
    /// existing rules instead of creating new ones.
    pub fn rules_from_alert(
        &mut self,
        alert: &DrdosAlert,
        table: &PrefixTable,
        top_n: Option<usize>,
    ) -> AlertRules {
        let mut out = AlertRules::default();
        let dst_prefixes = table.reverse(alert.dst_as);
        if dst_prefixes.is_empty() || alert.dst_as == UNMAPPED_AS {
            out.warnings.push(RuleWarning::UnknownVictim {
                session_id: alert.session_id,
                dst_as: alert.dst_as,
            });
            return out;
        }
        let mut contributors = alert.source_breakdown.clone();
        contributors.sort_by(|a, b| b.bytes.cmp(&a.bytes).then(a.src_as.cmp(&b.src_as)));
        let n = top_n.unwrap_or(contributors.len()).min(contributors.len());

        for share in &contributors[..n] {
            let src_prefixes = table.reverse(share.src_as);
            if share.src_as == UNMAPPED_AS || src_prefixes.is_empty() {
                out.warnings.push(RuleWarning::UnknownSource {
                    session_id: alert.session_id,
                    src_as: share.src_as,
                });
                continue;
            }
            let origin = (alert.session_id, share.src_as);
            let rule_id = match self.by_origin.get(&origin) {
                Some(&id) => {
                    let rule = self.rules.get_mut(&id).expect("indexed rule exists");
                    if rule.state == RuleState::Active {
                        rule.updated_at = rule.updated_at.max(alert.interval);
                    }
                    id
                }
                None => {
                    self.next_id += 1;
                    let id = self.next_id;
                    self.rules.insert(
                        id,
                        FilterRule {
                            rule_id: id,
                            action: RuleAction::Discard,
                            matches: RuleMatch {
                                dst_prefixes: dst_prefixes.to_vec(),
                                src_prefixes: src_prefixes.to_vec(),
                                protocol: PROTO_UDP,
                                src_port: alert.src_port,
                            },
                            src_as: share.src_as,
                            dst_as: alert.dst_as,
                            session_id: alert.session_id,
                            state: RuleState::Active,
                            created_at: alert.interval,
                            updated_at: alert.interval,
                            withdrawn_at: None,
                        },
                    );
                    self.by_origin.insert(origin, id);
                    out.created.push(id);
                    id
                }
            };
            out.rules.push(self.rules[&rule_id].clone());
        }
        out.rules.sort_by_key(|r| r.rule_id);
        out
    }

    /// Withdraws every active rule of the session. Unknown sessions yield a
    /// warning; a repeated withdrawal returns nothing.
    pub fn withdraw_for_session(
        &mut self,
        session_id: u64,
        at: u64,
    ) -> Result<Vec<FilterRule>, RuleWarning> {
        let ids: Vec<u64> = self
            .by_origin
            .range((session_id, 0)..=(session_id, u32::MAX))
            .map(|(_, &id)| id)
            .collect();
        if ids.is_empty() {
            return Err(RuleWarning::UnknownSession { session_id });
        }
        let mut withdrawn = Vec::new();
        for id in ids {
            let rule = self.rules.get_mut(&id).expect("indexed rule exists");
            if rule.state == RuleState::Active {
                rule.state = RuleState::Withdrawn;
                rule.withdrawn_at = Some(at);
                withdrawn.push(rule.clone());
            }
        }
        withdrawn.sort_by_key(|r| r.rule_id);
        Ok(withdrawn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::SourceShare;

    fn table() -> PrefixTable {
        PrefixTable::load(
            "198.51.100.0/24 2354\n203.0.113.0/24 2354\n10.0.0.0/16 100\n10.1.0.0/16 200\n10.2.0.0/16 300\n"
                .as_bytes(),
        )
        .unwrap()
    }

    fn alert(session_id: u64, interval: u64, sources: &[(u32, u64)]) -> DrdosAlert {
        DrdosAlert {
            interval,
            dst_as: 2354,
            src_port: 389,
            bytes: sources.iter().map(|s| s.1).sum(),
            volume_bps: 0.0,
            delta: 0.9,
            entropy: 0.5,
            source_breakdown: sources
                .iter()
                .map(|&(src_as, bytes)| SourceShare { src_as, bytes })
                .collect(),
            session_id,
        }
    }

    #[test]
    fn one_rule_per_source() {
        let mut store = RuleStore::new();
        let out = store.rules_from_alert(&alert(1, 60, &[(100, 9_000_000), (200, 1_000_000)]), &table(), Some(2));
        assert_eq!(out.rules.len(), 2);
        assert_eq!(out.created, vec![1, 2]);
        for r in &out.rules {
            assert_eq!(r.matches.src_port, 389);
            assert_eq!(r.matches.protocol, PROTO_UDP);
            assert_eq!(r.matches.dst_prefixes.len(), 2);
            assert_eq!(r.matches.src_prefixes, table().reverse(r.src_as).to_vec());
        }
        assert_eq!(out.rules[0].src_as, 100);
    }

    #[test]
    fn repeated_alert_is_idempotent() {
        let mut store = RuleStore::new();
        let a = alert(1, 60, &[(100, 9), (200, 1)]);
        let first = store.rules_from_alert(&a, &table(), None);
        let second = store.rules_from_alert(&alert(1, 120, &[(100, 9), (200, 1)]), &table(), None);
        assert!(second.created.is_empty());
        let ids = |v: &AlertRules| v.rules.iter().map(|r| r.rule_id).collect::<Vec<_>>();
        assert_eq!(ids(&first), ids(&second));
        assert!(second.rules.iter().all(|r| r.updated_at == 120 && r.created_at == 60));
        assert_eq!(store.rules().count(), 2);
    }

    #[test]
    fn unmapped_source_skipped() {
        let mut store = RuleStore::new();
        let out = store.rules_from_alert(&alert(1, 60, &[(0, 50), (100, 40), (999, 30)]), &table(), None);
        assert_eq!(out.rules.iter().map(|r| r.src_as).collect::<Vec<_>>(), vec![100]);
        assert_eq!(
            out.warnings,
            vec![
                RuleWarning::UnknownSource { session_id: 1, src_as: 0 },
                RuleWarning::UnknownSource { session_id: 1, src_as: 999 },
            ]
        );
    }

    #[test]
    fn top_n_breaks_ties_by_as() {
        let mut store = RuleStore::new();
        let out = store.rules_from_alert(&alert(1, 60, &[(300, 5), (200, 5), (100, 5)]), &table(), Some(2));
        assert_eq!(out.rules.iter().map(|r| r.src_as).collect::<Vec<_>>(), vec![100, 200]);
    }

    #[test]
    fn withdrawal_lifecycle() {
        let mut store = RuleStore::new();
        store.rules_from_alert(&alert(1, 60, &[(100, 5), (200, 5), (300, 5)]), &table(), None);
        store.rules_from_alert(&alert(2, 60, &[(100, 5)]), &table(), None);
        let w = store.withdraw_for_session(1, 600).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|r| r.withdrawn_at == Some(600)));
        assert_eq!(store.withdraw_for_session(1, 660).unwrap(), vec![]);
        assert_eq!(store.active().map(|r| r.session_id).collect::<Vec<_>>(), vec![2]);
        assert_eq!(
            store.withdraw_for_session(42, 0).unwrap_err(),
            RuleWarning::UnknownSession { session_id: 42 }
        );
    }

    #[test]
    fn text_rendering() {
        let mut store = RuleStore::new();
        let out = store.rules_from_alert(&alert(1, 60, &[(100, 5)]), &table(), None);
        let text = out.rules[0].render_text();
        assert!(text.contains("discard udp src 10.0.0.0/16 sport 389 dst 198.51.100.0/24"));
        assert!(text.contains("discard udp src 10.0.0.0/16 sport 389 dst 203.0.113.0/24"));
    }
}
