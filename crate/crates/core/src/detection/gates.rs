use crate::aggregation::TrafficSketch;

use super::DetectorConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateResult {
    pub value: f64,
    pub pass: bool,
}

/// Average rate over the whole interval.
pub fn bits_per_second(bytes: u64, delta_t_seconds: u64) -> f64 {
    bytes as f64 * 8.0 / delta_t_seconds as f64
}

/// Passes when the interval's rate is at least ν.
pub fn volume_gate(sketch: &TrafficSketch, cfg: &DetectorConfig) -> GateResult {
    let bps = bits_per_second(sketch.bytes, cfg.delta_t_seconds);
    GateResult {
        value: bps,
        pass: bps >= cfg.nu_bps,
    }
}

/// Shannon entropy of the shares divided by `ln(n)`, where `n` counts the
/// non-zero contributions. Zero for fewer than two contributors.
pub fn normalized_entropy<I: IntoIterator<Item = u64>>(contributions: I) -> f64 {
    let values: Vec<u64> = contributions.into_iter().filter(|&v| v > 0).collect();
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = values.iter().map(|&v| v as f64).sum();
    let h: f64 = values
        .iter()
        .map(|&v| {
            let p = v as f64 / total;
            -p * p.ln()
        })
        .sum();
    (h / (n as f64).ln()).clamp(0.0, 1.0)
}

/// Passes when traffic is spread across source ASes: H > h.
pub fn entropy_gate(sketch: &TrafficSketch, cfg: &DetectorConfig) -> GateResult {
    let h = normalized_entropy(sketch.per_src.values().copied());
    GateResult {
        value: h,
        pass: h > cfg.entropy_h,
    }
}
