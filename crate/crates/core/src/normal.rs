//! Standard normal quantile, backed by `statrs`.

use statrs::distribution::{ContinuousCDF, Normal};

/// `Φ⁻¹(p)`. Returns `∓∞` at `p = 0, 1` and `NaN` outside `[0, 1]`.
pub fn standard_normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    Normal::standard().inverse_cdf(p)
}

/// Two-sided critical value `z_{1−α/2}` for a confidence level `1 − α`.
pub fn two_sided_critical_value(level: f64) -> f64 {
    standard_normal_quantile(0.5 + 0.5 * level)
}
