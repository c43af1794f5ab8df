use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// Detection parameters. Defaults: one-minute intervals, θ = 3, τ = 0.5,
/// ν = 5 Mbps, h = 0.4, ε = 1e-6, and α = 0.9 (α has no published value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// EWMA weight of the previous estimate.
    pub alpha: f64,
    /// Standard-deviation multiplier in the deviation score.
    pub theta: f64,
    /// Anomaly threshold on the deviation score.
    pub tau: f64,
    /// Division guard.
    pub epsilon: f64,
    /// Minimum attack volume, bits per second.
    pub nu_bps: f64,
    /// Normalized source-AS entropy threshold.
    pub entropy_h: f64,
    pub delta_t_seconds: u64,
    /// Intervals, counted from the first interval the detector sees, during
    /// which models only learn.
    pub warmup_intervals: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            theta: 3.0,
            tau: 0.5,
            epsilon: 1e-6,
            nu_bps: 5_000_000.0,
            entropy_h: 0.4,
            delta_t_seconds: 60,
            warmup_intervals: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |name, value: f64, ok: bool, range| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { name, value, range })
            }
        };
        check("alpha", self.alpha, self.alpha > 0.0 && self.alpha < 1.0, "(0, 1)")?;
        check("theta", self.theta, self.theta > 0.0 && self.theta.is_finite(), "(0, inf)")?;
        check("tau", self.tau, self.tau > 0.0 && self.tau < 1.0, "(0, 1)")?;
        check("epsilon", self.epsilon, self.epsilon > 0.0 && self.epsilon.is_finite(), "(0, inf)")?;
        check("nu_bps", self.nu_bps, self.nu_bps > 0.0 && self.nu_bps.is_finite(), "(0, inf)")?;
        check(
            "entropy_h",
            self.entropy_h,
            (0.0..1.0).contains(&self.entropy_h),
            "[0, 1)",
        )?;
        check(
            "delta_t_seconds",
            self.delta_t_seconds as f64,
            self.delta_t_seconds > 0,
            "[1, inf)",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!((c.theta, c.tau, c.nu_bps, c.entropy_h), (3.0, 0.5, 5e6, 0.4));
        assert_eq!(c.delta_t_seconds, 60);
    }

    #[test]
    fn rejects_out_of_range() {
        for bad in [
            DetectorConfig { alpha: 1.0, ..Default::default() },
            DetectorConfig { tau: 0.0, ..Default::default() },
            DetectorConfig { entropy_h: 1.0, ..Default::default() },
            DetectorConfig { epsilon: 0.0, ..Default::default() },
            DetectorConfig { delta_t_seconds: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn partial_toml() {
        let c: DetectorConfig = toml::from_str("alpha = 0.8\nwarmup_intervals = 5\n").unwrap();
        assert_eq!(c.alpha, 0.8);
        assert_eq!(c.warmup_intervals, 5);
        assert_eq!(c.theta, 3.0);
        assert!(toml::from_str::<DetectorConfig>("gamma = 1").is_err());
    }
}
