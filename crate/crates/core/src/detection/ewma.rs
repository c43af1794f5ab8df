use serde::{Deserialize, Serialize};

use super::{DetectionError, DetectorConfig};

/// One step of the exponentially weighted mean/variance recurrence. The
/// variance term uses the previous mean and previous variance.
pub fn ewma_update(mu: f64, var: f64, b: f64, alpha: f64) -> (f64, f64) {
    let diff = b - mu;
    let mu_next = alpha * mu + (1.0 - alpha) * b;
    let var_next = (1.0 - alpha) * (var + alpha * diff * diff);
    (mu_next, var_next.max(0.0))
}

/// Deviation of one reading from the model snapshot it was scored against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationScore {
    pub delta: f64,
    pub bytes: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl DeviationScore {
    pub fn compute(mu: f64, sigma: f64, b: f64, cfg: &DetectorConfig) -> Self {
        let delta = ((b - (mu + cfg.theta * sigma)) / (b + cfg.epsilon)).clamp(0.0, 1.0);
        Self {
            delta,
            bytes: b,
            mu,
            sigma,
        }
    }

    pub fn is_anomalous(&self, cfg: &DetectorConfig) -> bool {
        self.delta > cfg.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Warmup: the reading trained the model without being judged.
    Learning,
    Normal,
    AnomalyStart,
    AnomalyOngoing,
    /// First reading back under the threshold; it was used to update.
    AnomalyEnd { started: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub interval: u64,
    pub score: DeviationScore,
    pub phase: Phase,
}

/// Moving average and variance of one key's bytes per interval.
///
/// While frozen the mean and variance stay exactly as they were after the
/// last clean update, and every reading is scored against that snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaModel {
    mu: f64,
    var: f64,
    frozen: bool,
    /// Interval of the last clean update while frozen (None: never trained).
    frozen_since: Option<u64>,
    last_clean: Option<u64>,
    anomaly_start: Option<u64>,
    last_interval: Option<u64>,
    warmup_remaining: u32,
}

impl Default for EwmaModel {
    fn default() -> Self {
        Self::new(0)
    }
}

impl EwmaModel {
    pub fn new(warmup_remaining: u32) -> Self {
        Self::with_state(0.0, 0.0, warmup_remaining)
    }

    pub fn with_state(mu: f64, var: f64, warmup_remaining: u32) -> Self {
        Self {
            mu,
            var: var.max(0.0),
            frozen: false,
            frozen_since: None,
            last_clean: None,
            anomaly_start: None,
            last_interval: None,
            warmup_remaining,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn frozen_since(&self) -> Option<u64> {
        self.frozen_since
    }

    pub fn anomaly_start(&self) -> Option<u64> {
        self.anomaly_start
    }

    pub fn last_interval(&self) -> Option<u64> {
        self.last_interval
    }

    pub fn warmup_remaining(&self) -> u32 {
        self.warmup_remaining
    }

    /// Applies one clean reading. Callers must not update a frozen model.
    pub fn update(&mut self, b: f64, alpha: f64) {
        debug_assert!(!self.frozen, "frozen models are not updated");
        (self.mu, self.var) = ewma_update(self.mu, self.var, b, alpha);
    }

    pub fn score(&self, b: f64, cfg: &DetectorConfig) -> DeviationScore {
        DeviationScore::compute(self.mu, self.sigma(), b, cfg)
    }

    /// Advances the freeze state machine by one interval.
    pub fn observe(
        &mut self,
        interval: u64,
        b: f64,
        cfg: &DetectorConfig,
    ) -> Result<Observation, DetectionError> {
        if let Some(last) = self.last_interval {
            if interval <= last {
                return Err(DetectionError::OutOfOrder { last, got: interval });
            }
        }
        self.last_interval = Some(interval);
        let score = self.score(b, cfg);

        let phase = if self.warmup_remaining > 0 && !self.frozen {
            self.warmup_remaining -= 1;
            self.clean_update(interval, b, cfg);
            Phase::Learning
        } else if score.is_anomalous(cfg) {
            if self.frozen {
                Phase::AnomalyOngoing
            } else {
                self.frozen = true;
                self.frozen_since = self.last_clean;
                self.anomaly_start = Some(interval);
                Phase::AnomalyStart
            }
        } else if self.frozen {
            let started = self.anomaly_start.take().expect("frozen models have a start");
            self.frozen = false;
            self.frozen_since = None;
            self.clean_update(interval, b, cfg);
            Phase::AnomalyEnd { started }
        } else {
            self.clean_update(interval, b, cfg);
            Phase::Normal
        };
        Ok(Observation {
            interval,
            score,
            phase,
        })
    }

    fn clean_update(&mut self, interval: u64, b: f64, cfg: &DetectorConfig) {
        self.update(b, cfg.alpha);
        self.last_clean = Some(interval);
    }
}
