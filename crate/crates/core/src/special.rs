//! Standard normal helpers.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Probability that a standard Brownian motion started at `x0 > 0` has
/// reached zero by time `t`, i.e. `2Φ(-x0/√t)`.
pub fn hitting_probability(x0: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return if x0 <= 0.0 { 1.0 } else { 0.0 };
    }
    if x0 <= 0.0 {
        return 1.0;
    }
    2.0 * normal_cdf(-x0 / t.sqrt())
}
