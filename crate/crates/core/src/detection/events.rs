use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceShare {
    pub src_as: u32,
    pub bytes: u64,
}

/// A gate-passing anomalous interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrdosAlert {
    pub interval: u64,
    pub dst_as: u32,
    pub src_port: u16,
    pub bytes: u64,
    pub volume_bps: f64,
    pub delta: f64,
    pub entropy: f64,
    /// Descending by bytes, ties by ascending AS.
    pub source_breakdown: Vec<SourceShare>,
    pub session_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedGate {
    Volume,
    Entropy,
}

/// An anomalous interval rejected by one of the gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyLog {
    pub interval: u64,
    pub dst_as: u32,
    pub src_port: u16,
    pub bytes: u64,
    pub volume_bps: f64,
    pub delta: f64,
    pub entropy: f64,
    pub source_breakdown: Vec<SourceShare>,
    pub failed_gate: FailedGate,
    /// Set when the interval falls inside an open attack session.
    pub session_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertPoint {
    pub interval: u64,
    pub volume_bps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePeak {
    pub src_as: u32,
    pub peak_bps: f64,
}

/// Consecutive anomalous intervals of one key that produced at least one
/// alert. `start` is the first alert interval; `end` is the first interval
/// back under the threshold (or the last processed interval when
/// `truncated`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSession {
    pub session_id: u64,
    pub dst_as: u32,
    pub src_port: u16,
    pub start: u64,
    pub end: Option<u64>,
    pub duration_minutes: Option<f64>,
    pub peak_volume_bps: f64,
    pub alerts: Vec<AlertPoint>,
    /// Peak per-interval rate of every contributing source AS, ascending AS.
    pub source_peaks: Vec<SourcePeak>,
    pub n_sources: usize,
    pub multi_vector_group: Option<u64>,
    pub truncated: bool,
}

impl AttackSession {
    pub(crate) fn open(session_id: u64, dst_as: u32, src_port: u16, start: u64) -> Self {
        Self {
            session_id,
            dst_as,
            src_port,
            start,
            end: None,
            duration_minutes: None,
            peak_volume_bps: 0.0,
            alerts: Vec::new(),
            source_peaks: Vec::new(),
            n_sources: 0,
            multi_vector_group: None,
            truncated: false,
        }
    }

    pub(crate) fn record(&mut self, alert: &DrdosAlert, delta_t_seconds: u64) {
        self.alerts.push(AlertPoint {
            interval: alert.interval,
            volume_bps: alert.volume_bps,
        });
        self.peak_volume_bps = self.peak_volume_bps.max(alert.volume_bps);
        for share in &alert.source_breakdown {
            let bps = super::bits_per_second(share.bytes, delta_t_seconds);
            match self
                .source_peaks
                .binary_search_by_key(&share.src_as, |p| p.src_as)
            {
                Ok(i) => self.source_peaks[i].peak_bps = self.source_peaks[i].peak_bps.max(bps),
                Err(i) => self.source_peaks.insert(
                    i,
                    SourcePeak {
                        src_as: share.src_as,
                        peak_bps: bps,
                    },
                ),
            }
        }
        self.n_sources = self.source_peaks.len();
    }

    pub(crate) fn close(&mut self, end: u64, truncated: bool) {
        self.end = Some(end);
        self.truncated = truncated;
        self.duration_minutes = Some(end.saturating_sub(self.start) as f64 / 60.0);
    }

    /// End used for overlap tests; open sessions extend indefinitely.
    pub fn effective_end(&self) -> u64 {
        self.end.unwrap_or(u64::MAX)
    }

    /// Duration in intervals of `delta_t_seconds`.
    pub fn duration_intervals(&self, delta_t_seconds: u64) -> Option<u64> {
        self.end.map(|e| (e - self.start) / delta_t_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DetectionEvent {
    Alert(DrdosAlert),
    Anomaly(AnomalyLog),
    /// Emitted the interval a session ends; group assignment may be pending.
    SessionTerminated(AttackSession),
    /// Emitted once the victim has no live session; grouping is final.
    SessionFinalized(AttackSession),
}
