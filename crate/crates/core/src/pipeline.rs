//! Record-at-a-time wiring of ingestion, AS mapping, aggregation, detection
//! and rule derivation.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregation::{filter_flow, FoldOutcome, MonitoredPortTable, SketchStore, TrafficSketch};
use crate::asn_map::{map_flow, PrefixTable, UNMAPPED_AS};
use crate::detection::{
    AnomalyLog, AttackSession, DetectionError, DetectionEvent, Detector, DetectorConfig, DrdosAlert,
};
use crate::flowspec::{FilterRule, RuleStore, RuleWarning};
use crate::ingest::{apply_sampling, FlowRecord, SamplingConfig, PROTO_UDP};

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub detector: DetectorConfig,
    pub ports: MonitoredPortTable,
    pub sampling: SamplingConfig,
    /// Rules per alert; `None` keeps every contributing source AS.
    pub top_n: Option<usize>,
    pub archive_sketches: bool,
    /// Closed intervals a late flow may still land in.
    pub late_grace: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            ports: MonitoredPortTable::default(),
            sampling: SamplingConfig::default(),
            top_n: None,
            archive_sketches: false,
            late_grace: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub flows_parsed: u64,
    pub non_udp: u64,
    pub unmonitored_port: u64,
    pub unmapped_src: u64,
    pub unmapped_dst: u64,
    pub folded: u64,
    pub late_drops: u64,
    pub intervals: u64,
    pub alerts: u64,
    pub anomalies: u64,
    pub sessions: u64,
    pub rules_created: u64,
    pub rules_withdrawn: u64,
    pub rule_warnings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    Sketch(TrafficSketch),
    Alert(DrdosAlert),
    Anomaly(AnomalyLog),
    SessionTerminated(AttackSession),
    SessionFinalized(AttackSession),
    RuleCreated(FilterRule),
    RuleWithdrawn(FilterRule),
    RuleWarning(RuleWarning),
}

#[derive(Debug)]
pub struct Pipeline {
    settings: PipelineSettings,
    table: Arc<PrefixTable>,
    store: SketchStore,
    detector: Detector,
    rules: RuleStore,
    warned: BTreeSet<(u64, u32)>,
    counters: Counters,
    finished: bool,
}

impl Pipeline {
    pub fn new(settings: PipelineSettings, table: Arc<PrefixTable>) -> Self {
        let store = SketchStore::new(settings.detector.delta_t_seconds, settings.late_grace);
        let detector = Detector::new(settings.detector);
        Self {
            settings,
            table,
            store,
            detector,
            rules: RuleStore::new(),
            warned: BTreeSet::new(),
            counters: Counters::default(),
            finished: false,
        }
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn rules(&self) -> &RuleStore {
        &self.rules
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    /// Replaces the prefix table; flows already folded keep their mapping.
    pub fn set_table(&mut self, table: Arc<PrefixTable>) {
        self.table = table;
    }

    /// Feeds one record and returns whatever intervals it made due.
    pub fn push_record(&mut self, record: FlowRecord) -> Result<Vec<PipelineEvent>, DetectionError> {
        self.counters.flows_parsed += 1;
        if record.protocol != PROTO_UDP {
            self.counters.non_udp += 1;
            return Ok(Vec::new());
        }
        if !self.settings.ports.contains(record.src_port) {
            self.counters.unmonitored_port += 1;
            return Ok(Vec::new());
        }
        let record = apply_sampling(record, self.settings.sampling);
        let flow = map_flow(&record, &self.table);
        debug_assert!(filter_flow(&flow, &self.settings.ports));
        if flow.src_as == UNMAPPED_AS {
            self.counters.unmapped_src += 1;
        }
        if flow.dst_as == UNMAPPED_AS {
            self.counters.unmapped_dst += 1;
        }
        match self.store.fold(&flow) {
            FoldOutcome::Folded => self.counters.folded += 1,
            FoldOutcome::Late => self.counters.late_drops += 1,
        }
        self.poll()
    }

    /// Moves the clock forward without data (live mode heartbeats).
    pub fn advance(&mut self, watermark: u64) -> Result<Vec<PipelineEvent>, DetectionError> {
        self.store.advance(watermark);
        self.poll()
    }

    /// Closes every due interval.
    pub fn poll(&mut self) -> Result<Vec<PipelineEvent>, DetectionError> {
        let mut out = Vec::new();
        while let Some(t) = self.store.next_due() {
            let sketches = self.store.close_interval(t, self.detector.live_keys());
            self.counters.intervals += 1;
            if self.settings.archive_sketches {
                out.extend(
                    sketches
                        .iter()
                        .filter(|s| s.bytes > 0)
                        .cloned()
                        .map(PipelineEvent::Sketch),
                );
            }
            let events = self.detector.process_interval(t, &sketches)?;
            self.dispatch(events, &mut out);
        }
        Ok(out)
    }

    /// Ends the input: drains open intervals and closes open sessions as
    /// truncated. Further calls return nothing.
    pub fn finish(&mut self) -> Result<Vec<PipelineEvent>, DetectionError> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.store.drain();
        let mut out = self.poll()?;
        let events = self.detector.finish();
        self.dispatch(events, &mut out);
        self.finished = true;
        Ok(out)
    }

    fn dispatch(&mut self, events: Vec<DetectionEvent>, out: &mut Vec<PipelineEvent>) {
        for event in events {
            match event {
                DetectionEvent::Alert(alert) => {
                    self.counters.alerts += 1;
                    let derived = self
                        .rules
                        .rules_from_alert(&alert, &self.table, self.settings.top_n);
                    out.push(PipelineEvent::Alert(alert));
                    for id in derived.created {
                        self.counters.rules_created += 1;
                        let rule = self.rules.get(id).expect("just created").clone();
                        out.push(PipelineEvent::RuleCreated(rule));
                    }
                    for w in derived.warnings {
                        let origin = match w {
                            RuleWarning::UnknownSource { session_id, src_as } => (session_id, src_as),
                            RuleWarning::UnknownVictim { session_id, .. } => (session_id, u32::MAX),
                            RuleWarning::UnknownSession { session_id } => (session_id, u32::MAX - 1),
                        };
                        if self.warned.insert(origin) {
                            self.counters.rule_warnings += 1;
                            out.push(PipelineEvent::RuleWarning(w));
                        }
                    }
                }
                DetectionEvent::Anomaly(log) => {
                    self.counters.anomalies += 1;
                    out.push(PipelineEvent::Anomaly(log));
                }
                DetectionEvent::SessionTerminated(session) => {
                    let at = session.effective_end();
                    match self.rules.withdraw_for_session(session.session_id, at) {
                        Ok(rules) => {
                            out.push(PipelineEvent::SessionTerminated(session));
                            for r in rules {
                                self.counters.rules_withdrawn += 1;
                                out.push(PipelineEvent::RuleWithdrawn(r));
                            }
                        }
                        Err(w) => {
                            out.push(PipelineEvent::SessionTerminated(session));
                            self.counters.rule_warnings += 1;
                            out.push(PipelineEvent::RuleWarning(w));
                        }
                    }
                }
                DetectionEvent::SessionFinalized(session) => {
                    self.counters.sessions += 1;
                    out.push(PipelineEvent::SessionFinalized(session));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn table() -> Arc<PrefixTable> {
        let mut text = String::from("192.0.2.0/24 2354\n");
        for i in 0..40u32 {
            text.push_str(&format!("10.{i}.0.0/16 {}\n", 1000 + i));
        }
        Arc::new(PrefixTable::load(text.as_bytes()).unwrap())
    }

    fn rec(ts: u64, src: Ipv4Addr, port: u16, bytes: u64) -> FlowRecord {
        FlowRecord::new(ts, src, port, Ipv4Addr::new(192, 0, 2, 10), 5555, PROTO_UDP, bytes / 1400 + 1, bytes)
    }

    fn settings() -> PipelineSettings {
        let mut s = PipelineSettings::default();
        s.detector.warmup_intervals = 1;
        s
    }

    fn run(records: Vec<FlowRecord>, s: PipelineSettings) -> (Vec<PipelineEvent>, Counters) {
        let mut p = Pipeline::new(s, table());
        let mut out = Vec::new();
        for r in records {
            out.extend(p.push_record(r).unwrap());
        }
        out.extend(p.finish().unwrap());
        (out, p.counters())
    }

    fn attack_stream() -> Vec<FlowRecord> {
        let mut v = Vec::new();
        for minute in 0..20u64 {
            let ts = minute * 60;
            v.push(rec(ts, Ipv4Addr::new(10, 0, 0, 1), 389, 10_000));
            if (10..13).contains(&minute) {
                for i in 0..40u8 {
                    v.push(rec(ts + 1, Ipv4Addr::new(10, i, 1, 1), 389, 2_000_000));
                }
            }
        }
        v
    }

    #[test]
    fn counters_track_filtering() {
        let mut records = vec![
            rec(0, Ipv4Addr::new(10, 0, 0, 1), 443, 10),
            rec(0, Ipv4Addr::new(172, 16, 0, 1), 53, 10),
        ];
        let mut tcp = rec(0, Ipv4Addr::new(10, 0, 0, 1), 53, 10);
        tcp.protocol = 6;
        records.push(tcp);
        let (_, c) = run(records, settings());
        assert_eq!(c.flows_parsed, 3);
        assert_eq!(c.non_udp, 1);
        assert_eq!(c.unmonitored_port, 1);
        assert_eq!(c.unmapped_src, 1);
        assert_eq!(c.folded, 1);
    }

    #[test]
    fn attack_yields_alerts_rules_and_withdrawal() {
        let (events, c) = run(attack_stream(), settings());
        assert_eq!(c.alerts, 3);
        assert_eq!(c.sessions, 1);
        assert_eq!(c.rules_created, 40);
        assert_eq!(c.rules_withdrawn, 40);
        let first_alert = events
            .iter()
            .find_map(|e| match e {
                PipelineEvent::Alert(a) => Some(a.interval),
                _ => None,
            })
            .unwrap();
        assert_eq!(first_alert, 600);
        let finalized: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                PipelineEvent::SessionFinalized(s) => Some(s),
                _ => None,
            })
            .collect();
        assert_eq!(finalized.len(), 1);
        assert_eq!((finalized[0].start, finalized[0].end), (600, Some(780)));
        assert!(!finalized[0].truncated);
    }

    #[test]
    fn sketch_archive_optional() {
        let (events, _) = run(attack_stream(), settings());
        assert!(!events.iter().any(|e| matches!(e, PipelineEvent::Sketch(_))));
        let mut s = settings();
        s.archive_sketches = true;
        let (events, _) = run(attack_stream(), s);
        let total: u64 = events
            .iter()
            .filter_map(|e| match e {
                PipelineEvent::Sketch(s) => Some(s.bytes),
                _ => None,
            })
            .sum();
        assert_eq!(total, 20 * 10_000 + 3 * 40 * 2_000_000);
    }

    #[test]
    fn finish_is_idempotent() {
        let mut p = Pipeline::new(settings(), table());
        p.push_record(rec(0, Ipv4Addr::new(10, 0, 0, 1), 53, 10)).unwrap();
        p.finish().unwrap();
        assert!(p.finish().unwrap().is_empty());
    }

    #[test]
    fn event_json_is_flat() {
        let e = PipelineEvent::RuleWarning(RuleWarning::UnknownSession { session_id: 3 });
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"event":"rule_warning","warning":"unknown_session","session_id":3}"#);
        let back: PipelineEvent = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }
}
