use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::aggregation::{SketchKey, TrafficSketch};

use super::{
    correlate_multivector, entropy_gate, volume_gate, AnomalyLog, AttackSession, DetectionError,
    DetectionEvent, DetectorConfig, DrdosAlert, EwmaModel, FailedGate, Phase, SourceShare,
};

/// Hands out session ids in increasing order.
#[derive(Debug, Default, Clone)]
pub struct SessionIds {
    next: u64,
}

impl SessionIds {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn allocate(&mut self) -> u64 {
        self.next += 1;
        self.next
    }
}

/// Model plus open session for one (source port, destination AS) key.
#[derive(Debug, Clone)]
pub struct KeyTracker {
    key: SketchKey,
    model: EwmaModel,
    session: Option<AttackSession>,
}

impl KeyTracker {
    pub fn new(key: SketchKey, model: EwmaModel) -> Self {
        Self {
            key,
            model,
            session: None,
        }
    }

    pub fn model(&self) -> &EwmaModel {
        &self.model
    }

    pub fn session(&self) -> Option<&AttackSession> {
        self.session.as_ref()
    }

    /// Scores one interval, updates or holds the model, evaluates the gates
    /// on anomalous intervals and maintains the attack session.
    pub fn step(
        &mut self,
        sketch: &TrafficSketch,
        cfg: &DetectorConfig,
        ids: &mut SessionIds,
    ) -> Result<Vec<DetectionEvent>, DetectionError> {
        if sketch.key() != self.key {
            return Err(DetectionError::KeyMismatch {
                src_port: sketch.src_port,
                dst_as: sketch.dst_as,
            });
        }
        let obs = self
            .model
            .observe(sketch.interval_start, sketch.bytes as f64, cfg)?;
        let mut events = Vec::new();
        match obs.phase {
            Phase::Learning | Phase::Normal => {}
            Phase::AnomalyStart | Phase::AnomalyOngoing => {
                let volume = volume_gate(sketch, cfg);
                let entropy = entropy_gate(sketch, cfg);
                let breakdown: Vec<SourceShare> = sketch
                    .breakdown()
                    .into_iter()
                    .map(|(src_as, bytes)| SourceShare { src_as, bytes })
                    .collect();
                let failed = if !volume.pass {
                    Some(FailedGate::Volume)
                } else if !entropy.pass {
                    Some(FailedGate::Entropy)
                } else {
                    None
                };
                match failed {
                    None => {
                        let session = self.session.get_or_insert_with(|| {
                            AttackSession::open(
                                ids.allocate(),
                                sketch.dst_as,
                                sketch.src_port,
                                sketch.interval_start,
                            )
                        });
                        let alert = DrdosAlert {
                            interval: sketch.interval_start,
                            dst_as: sketch.dst_as,
                            src_port: sketch.src_port,
                            bytes: sketch.bytes,
                            volume_bps: volume.value,
                            delta: obs.score.delta,
                            entropy: entropy.value,
                            source_breakdown: breakdown,
                            session_id: session.session_id,
                        };
                        session.record(&alert, cfg.delta_t_seconds);
                        events.push(DetectionEvent::Alert(alert));
                    }
                    Some(failed_gate) => events.push(DetectionEvent::Anomaly(AnomalyLog {
                        interval: sketch.interval_start,
                        dst_as: sketch.dst_as,
                        src_port: sketch.src_port,
                        bytes: sketch.bytes,
                        volume_bps: volume.value,
                        delta: obs.score.delta,
                        entropy: entropy.value,
                        source_breakdown: breakdown,
                        failed_gate,
                        session_id: self.session.as_ref().map(|s| s.session_id),
                    })),
                }
            }
            Phase::AnomalyEnd { .. } => {
                if let Some(mut session) = self.session.take() {
                    session.close(sketch.interval_start, false);
                    events.push(DetectionEvent::SessionTerminated(session));
                }
            }
        }
        Ok(events)
    }

    /// Closes an open session at `last_interval`, flagged truncated.
    pub fn truncate(&mut self, last_interval: u64) -> Option<AttackSession> {
        let mut session = self.session.take()?;
        session.close(last_interval, true);
        Some(session)
    }

    /// Whether dropping the model loses nothing: the residual mean and
    /// deviation are far below the rounding granularity of a one-byte
    /// reading, so a fresh model would score and update identically.
    fn is_idle(&self, cfg: &DetectorConfig) -> bool {
        const RESIDUAL: f64 = 1e-100;
        let m = &self.model;
        self.session.is_none()
            && !m.is_frozen()
            && m.warmup_remaining() == 0
            && m.mu() < RESIDUAL
            && m.var() < RESIDUAL * RESIDUAL
            && m.mu() + cfg.theta * m.sigma() < RESIDUAL
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DetectorStats {
    pub intervals: u64,
    pub sketches: u64,
    pub alerts: u64,
    pub anomaly_logs: u64,
    pub sessions: u64,
    pub models_created: u64,
    pub models_evicted: u64,
}

/// All key trackers plus the session log staging area.
#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    trackers: BTreeMap<SketchKey, KeyTracker>,
    ids: SessionIds,
    first_interval: Option<u64>,
    last_interval: Option<u64>,
    held: BTreeMap<u32, Vec<AttackSession>>,
    stats: DetectorStats,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            cfg,
            trackers: BTreeMap::new(),
            ids: SessionIds::default(),
            first_interval: None,
            last_interval: None,
            held: BTreeMap::new(),
            stats: DetectorStats::default(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn stats(&self) -> DetectorStats {
        self.stats
    }

    pub fn tracker(&self, key: &SketchKey) -> Option<&KeyTracker> {
        self.trackers.get(key)
    }

    /// Keys with a model; the aggregation stage emits zero sketches for them.
    pub fn live_keys(&self) -> impl Iterator<Item = SketchKey> + '_ {
        self.trackers.keys().copied()
    }

    /// Processes every sketch of interval `t`. Keys are handled in sketch
    /// order and events are appended in that order.
    pub fn process_interval(
        &mut self,
        t: u64,
        sketches: &[TrafficSketch],
    ) -> Result<Vec<DetectionEvent>, DetectionError> {
        if let Some(last) = self.last_interval {
            if t <= last {
                return Err(DetectionError::OutOfOrder { last, got: t });
            }
        }
        let first = *self.first_interval.get_or_insert(t);
        self.last_interval = Some(t);
        self.stats.intervals += 1;

        let mut events = Vec::new();
        let mut touched: BTreeSet<SketchKey> = BTreeSet::new();
        for sketch in sketches {
            debug_assert_eq!(sketch.interval_start, t);
            let key = sketch.key();
            touched.insert(key);
            self.stats.sketches += 1;
            if !self.trackers.contains_key(&key) {
                if sketch.bytes == 0 {
                    continue;
                }
                let elapsed = (t - first) / self.cfg.delta_t_seconds;
                let warmup = u64::from(self.cfg.warmup_intervals).saturating_sub(elapsed) as u32;
                self.trackers
                    .insert(key, KeyTracker::new(key, EwmaModel::new(warmup)));
                self.stats.models_created += 1;
            }
            let tracker = self.trackers.get_mut(&key).expect("inserted above");
            let produced = tracker.step(sketch, &self.cfg, &mut self.ids)?;
            events.extend(produced);
        }

        // Models the aggregation stage did not cover still observe silence.
        let silent: Vec<SketchKey> = self
            .trackers
            .keys()
            .filter(|k| !touched.contains(k))
            .copied()
            .collect();
        for key in silent {
            let produced = self
                .trackers
                .get_mut(&key)
                .expect("listed above")
                .step(&TrafficSketch::zero(t, key), &self.cfg, &mut self.ids)?;
            events.extend(produced);
        }

        for e in &events {
            match e {
                DetectionEvent::Alert(_) => self.stats.alerts += 1,
                DetectionEvent::Anomaly(_) => self.stats.anomaly_logs += 1,
                DetectionEvent::SessionTerminated(s) => {
                    self.stats.sessions += 1;
                    self.held.entry(s.dst_as).or_default().push(s.clone());
                }
                DetectionEvent::SessionFinalized(_) => {}
            }
        }

        let before = self.trackers.len();
        let cfg = &self.cfg;
        self.trackers.retain(|_, tr| !tr.is_idle(cfg));
        self.stats.models_evicted += (before - self.trackers.len()) as u64;

        events.extend(self.release_settled());
        Ok(events)
    }

    fn victim_has_live_session(&self, dst_as: u32) -> bool {
        self.trackers
            .iter()
            .any(|(k, tr)| k.dst_as == dst_as && tr.session.is_some())
    }

    fn release_settled(&mut self) -> Vec<DetectionEvent> {
        let settled: Vec<u32> = self
            .held
            .keys()
            .copied()
            .filter(|&d| !self.victim_has_live_session(d))
            .collect();
        let mut out = Vec::new();
        for d in settled {
            let mut batch = self.held.remove(&d).unwrap_or_default();
            correlate_multivector(&mut batch);
            batch.sort_by_key(|s| s.session_id);
            out.extend(batch.into_iter().map(DetectionEvent::SessionFinalized));
        }
        out
    }

    /// Ends the run: open sessions close at the last processed interval,
    /// flagged truncated, and every held session is released.
    pub fn finish(&mut self) -> Vec<DetectionEvent> {
        let mut events = Vec::new();
        if let Some(last) = self.last_interval {
            for tracker in self.trackers.values_mut() {
                if let Some(s) = tracker.truncate(last) {
                    self.stats.sessions += 1;
                    self.held.entry(s.dst_as).or_default().push(s.clone());
                    events.push(DetectionEvent::SessionTerminated(s));
                }
            }
        }
        events.extend(self.release_settled());
        events
    }
}
