//! Gaussian kernels on the half-line and the smoothing operators built from
//! them.
//!
//! With `g_δ(u) = (2πδ)^{-1/2} exp(−u²/2δ)`:
//!
//! | kind        | kernel `K(x0, x)`            |
//! |-------------|------------------------------|
//! | absorbing   | `g_δ(x − x0) − g_δ(x + x0)`  |
//! | reflecting  | `g_δ(x − x0) + g_δ(x + x0)`  |
//! | remainder   | `g_δ(x + x0)`                |
//!
//! so that `reflecting − absorbing = 2·remainder`. Spatial derivatives are
//! analytic: `g_δ⁽ⁿ⁾(u) = (−1)ⁿ δ^{−n/2} Heₙ(u/√δ) g_δ(u)` with the
//! probabilists' Hermite polynomials `Heₙ`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::measure::Measure1D;

/// Highest derivative order accepted by [`smooth_derivative`].
pub const MAX_DERIVATIVE: usize = 6;

/// Half-width of the integration window, in units of `√δ`.
const WINDOW: f64 = 40.0;
const GL_NODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Absorbing,
    Reflecting,
    Remainder,
}

/// A measure on `[0, ∞)` to be smoothed.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    /// Point masses of equal `weight` at `positions`.
    Points { positions: &'a [f64], weight: f64 },
    /// A piecewise-linear distribution function.
    Measure(&'a Measure1D),
    /// An absolutely continuous measure with density `h`, smooth between
    /// consecutive `knots` and zero outside `[knots[0], knots[last]]`.
    Density {
        h: &'a (dyn Fn(f64) -> f64 + Sync),
        knots: &'a [f64],
    },
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return domain(format!("kernel variance delta must be positive, got {delta}"));
    }
    Ok(())
}

/// `Heₙ(y)` by the three-term recurrence.
fn hermite(n: usize, y: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, y);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = y * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `g_δ⁽ⁿ⁾(u)`.
fn gauss_derivative(n: usize, delta: f64, u: f64) -> f64 {
    let g = (-u * u / (2.0 * delta)).exp() / (2.0 * PI * delta).sqrt();
    if n == 0 {
        return g;
    }
    let s = delta.sqrt();
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    sign * hermite(n, u / s) * g / s.powi(n as i32)
}

#[inline]
fn kernel_nth(kind: KernelKind, n: usize, delta: f64, x0: f64, x: f64) -> f64 {
    match kind {
        KernelKind::Absorbing => gauss_derivative(n, delta, x - x0) - gauss_derivative(n, delta, x + x0),
        KernelKind::Reflecting => gauss_derivative(n, delta, x - x0) + gauss_derivative(n, delta, x + x0),
        KernelKind::Remainder => gauss_derivative(n, delta, x + x0),
    }
}

/// Evaluates the kernel of the given kind at `(x0, x)`.
pub fn kernel_eval(kind: KernelKind, delta: f64, x0: f64, x: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(kernel_nth(kind, 0, delta, x0, x))
}

/// `∂ⁿ/∂xⁿ` of the kernel at `(x0, x)`.
pub fn kernel_derivative(kind: KernelKind, delta: f64, n: usize, x0: f64, x: f64) -> Result<f64> {
    check_delta(delta)?;
    if n > MAX_DERIVATIVE {
        return domain(format!("derivative order {n} exceeds {MAX_DERIVATIVE}"));
    }
    Ok(kernel_nth(kind, n, delta, x0, x))
}

/// Applies the smoothing operator of `kind` to `source` at each point of `xs`.
pub fn smooth(source: Source<'_>, delta: f64, kind: KernelKind, xs: &[f64]) -> Result<Vec<f64>> {
    check_delta(delta)?;
    Ok(apply(source, delta, kind, 0, xs))
}

/// `n`-th spatial derivative of the smoothed measure, differentiating the
/// kernel analytically.
pub fn smooth_derivative(
    source: Source<'_>,
    delta: f64,
    kind: KernelKind,
    n: usize,
    xs: &[f64],
) -> Result<Vec<f64>> {
    check_delta(delta)?;
    if n > MAX_DERIVATIVE {
        return domain(format!("derivative order {n} exceeds {MAX_DERIVATIVE}"));
    }
    Ok(apply(source, delta, kind, n, xs))
}

/// The remainder term `∫ g_δ(x + x0) μ(dx0)`.
pub fn remainder_eval(source: Source<'_>, delta: f64, xs: &[f64]) -> Result<Vec<f64>> {
    smooth(source, delta, KernelKind::Remainder, xs)
}

fn apply(source: Source<'_>, delta: f64, kind: KernelKind, n: usize, xs: &[f64]) -> Vec<f64> {
    xs.par_iter()
        .map(|&x| match source {
            Source::Points { positions, weight } => {
                let w = WINDOW * delta.sqrt();
                positions
                    .iter()
                    .filter(|&&p| (p - x).abs() <= w || p + x <= w)
                    .map(|&p| kernel_nth(kind, n, delta, p, x))
                    .sum::<f64>()
                    * weight
            }
            Source::Measure(mu) => mu
                .segments()
                .filter(|s| s.2 > 0.0)
                .map(|(a, b, d)| d * integrate_window(&|x0| kernel_nth(kind, n, delta, x0, x), a, b, x, delta))
                .sum(),
            Source::Density { h, knots } => knots
                .windows(2)
                .map(|k| integrate_window(&|x0| h(x0) * kernel_nth(kind, n, delta, x0, x), k[0], k[1], x, delta))
                .sum(),
        })
        .collect()
}

/// `∫_a^b integrand` restricted to where a kernel centred at `±x` is not
/// negligible, by composite 32-point Gauss–Legendre on pieces of width `√δ`.
fn integrate_window(integrand: &dyn Fn(f64) -> f64, a: f64, b: f64, x: f64, delta: f64) -> f64 {
    let s = delta.sqrt();
    let w = WINDOW * s;
    let lo = a.max(if x < w { 0.0 } else { x - w });
    let hi = b.min(x + w);
    if hi <= lo {
        return 0.0;
    }
    let pieces = ((hi - lo) / s).ceil().max(1.0) as usize;
    let h = (hi - lo) / pieces as f64;
    let (nodes, weights) = gauss_legendre();
    let mut total = 0.0;
    for p in 0..pieces {
        let c = lo + (p as f64 + 0.5) * h;
        let r = 0.5 * h;
        let mut acc = 0.0;
        for (t, wt) in nodes.iter().zip(weights) {
            acc += wt * integrand(c + r * t);
        }
        total += acc * r;
    }
    total
}

/// Nodes and weights of the 32-point Gauss–Legendre rule on `[-1, 1]`.
fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_NODES;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Newton on P_n from the Chebyshev-like initial guess
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        (nodes, weights)
    })
}
