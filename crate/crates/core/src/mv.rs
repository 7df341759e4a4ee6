//! The deterministic-loss formulation: the map `Γ`, its Picard iteration,
//! the pathwise comparison bound and the regime certificates.
//!
//! For a candidate loss `L` and driver path `z`, a particle started at `X₀`
//! is absorbed by time `t` iff `X₀ ≤ sup_{s≤t} (α f(L_s) − z_s)`. Averaging
//! the initial distribution function over driver paths gives
//!
//! ```text
//! Γ(L)_t = (1/M) Σ_j F₀( sup_{s≤t} (α f(L_s) − z_{j,s}) ),
//! ```
//!
//! whose fixed points are the solutions. The supremum runs over grid times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{DriverEnsemble, DriverSpec};
use crate::error::{domain, invalid, Result};
use crate::feedback::FeedbackFn;
use crate::grid::{LossPath, TimeGrid};
use crate::measure::Measure1D;
use crate::pjc::check_initial_admissible;
use crate::special::hitting_probability;

/// Paths per work unit in [`gamma_map`]. Fixed, so sums do not depend on
/// the number of threads.
const CHUNK: usize = 512;

/// `M_t = max_{s ≤ t} (α f(L_s) − z_s)` on the grid.
pub fn sup_functional(l: &LossPath, f: &FeedbackFn, alpha: f64, z: &[f64]) -> Vec<f64> {
    let af = scaled_feedback(l, f, alpha);
    let mut out = Vec::with_capacity(z.len());
    let mut m = f64::NEG_INFINITY;
    for (a, zi) in af.iter().zip(z) {
        m = m.max(a - zi);
        out.push(m);
    }
    out
}

fn scaled_feedback(l: &LossPath, f: &FeedbackFn, alpha: f64) -> Vec<f64> {
    l.values()
        .iter()
        .map(|&v| if alpha == 0.0 { 0.0 } else { alpha * f.eval_clamped(v) })
        .collect()
}

fn check_grids(l: &LossPath, drivers: &DriverEnsemble) -> Result<()> {
    if l.grid() != drivers.grid() {
        return invalid("loss path and drivers live on different grids");
    }
    Ok(())
}

/// `Σ_j F₀(M^j_t)` over paths `range`, one entry per grid time.
fn partial_sums(af: &[f64], drivers: &DriverEnsemble, nu0: &Measure1D, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut acc = vec![0.0; af.len()];
    for j in range {
        let z = drivers.path(j);
        let mut m = f64::NEG_INFINITY;
        let mut fm = 0.0;
        for ((a, zi), s) in af.iter().zip(z).zip(acc.iter_mut()) {
            let c = a - zi;
            if c > m {
                m = c;
                fm = nu0.cdf(m);
            }
            *s += fm;
        }
    }
    acc
}

fn ranges(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    (0..k).map(|b| b * n / k..(b + 1) * n / k).collect()
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK..((c + 1) * CHUNK).min(n)).collect()
}

fn add_in_order(parts: &[Vec<f64>]) -> Vec<f64> {
    let mut total = vec![0.0; parts[0].len()];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn to_loss(grid: TimeGrid, sums: &[f64], count: usize) -> Result<LossPath> {
    let values = sums.iter().map(|s| (s / count as f64).min(1.0)).collect();
    LossPath::new(grid, values)
}

/// `Γ(L)` over the driver ensemble.
pub fn gamma_map(
    l: &LossPath,
    drivers: &DriverEnsemble,
    nu0: &Measure1D,
    alpha: f64,
    f: &FeedbackFn,
) -> Result<LossPath> {
    check_grids(l, drivers)?;
    let af = scaled_feedback(l, f, alpha);
    let parts: Vec<Vec<f64>> = chunk_ranges(drivers.n_paths())
        .into_par_iter()
        .map(|r| partial_sums(&af, drivers, nu0, r))
        .collect();
    to_loss(*l.grid(), &add_in_order(&parts), drivers.n_paths())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardConfig {
    pub nu0: Measure1D,
    pub alpha: f64,
    pub f: FeedbackFn,
    pub tol: f64,
    pub max_iter: usize,
    /// Number of batches for standard errors.
    pub batches: usize,
}

impl PicardConfig {
    pub fn new(nu0: Measure1D, alpha: f64, f: FeedbackFn) -> Self {
        Self {
            nu0,
            alpha,
            f,
            tol: 1e-4,
            max_iter: 100,
            batches: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    /// `d_k = ‖L^{(k+1)} − L^{(k)}‖_T`.
    pub distances: Vec<f64>,
    /// Batch standard error of each `d_k`.
    pub distance_se: Vec<f64>,
    /// `d_{k+1}/d_k`.
    pub ratios: Vec<f64>,
    /// Standard error of each ratio, by the delta method.
    pub ratio_se: Vec<f64>,
    /// Contraction certificate at the final iterate against the initial guess.
    pub certificate: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Iterates `L ← Γ(L)` on a fixed driver ensemble from `initial`.
pub fn solve_picard(
    cfg: &PicardConfig,
    drivers: &DriverEnsemble,
    initial: &LossPath,
) -> Result<(LossPath, PicardDiagnostics)> {
    check_grids(initial, drivers)?;
    if cfg.batches < 2 || cfg.batches > drivers.n_paths() {
        return invalid(format!(
            "{} batches requested for {} driver paths",
            cfg.batches,
            drivers.n_paths()
        ));
    }
    let grid = *initial.grid();
    let batch_ranges = ranges(drivers.n_paths(), cfg.batches);
    let sizes: Vec<f64> = batch_ranges.iter().map(|r| r.len() as f64).collect();
    let batch_gamma = |l: &LossPath| -> Vec<Vec<f64>> {
        let af = scaled_feedback(l, &cfg.f, cfg.alpha);
        batch_ranges
            .par_iter()
            .map(|r| partial_sums(&af, drivers, &cfg.nu0, r.clone()))
            .collect()
    };

    let mut current = initial.clone();
    let mut prev_batches: Option<Vec<Vec<f64>>> = None;
    let mut distances = Vec::new();
    let mut distance_se = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter.max(1) {
        let batches = batch_gamma(&current);
        let next = to_loss(grid, &add_in_order(&batches), drivers.n_paths())?;
        let (d, t_star) = sup_with_arg(next.values(), current.values());
        // batch means of the change at the maximising time
        let means: Vec<f64> = match &prev_batches {
            Some(pb) => batches
                .iter()
                .zip(pb)
                .zip(&sizes)
                .map(|((b, p), m)| (b[t_star] - p[t_star]) / m)
                .collect(),
            None => batches.iter().zip(&sizes).map(|(b, m)| b[t_star] / m).collect(),
        };
        distances.push(d);
        distance_se.push(standard_error(&means));
        prev_batches = Some(batches);
        current = next;
        if d < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log_warn(&format!(
            "Picard iteration stopped after {} iterations at distance {:.3e}",
            distances.len(),
            distances.last().copied().unwrap_or(f64::NAN)
        ));
    }
    let mut ratios = Vec::new();
    let mut ratio_se = Vec::new();
    for k in 0..distances.len().saturating_sub(1) {
        let (a, b) = (distances[k], distances[k + 1]);
        let (sa, sb) = (distance_se[k], distance_se[k + 1]);
        if a > 0.0 {
            ratios.push(b / a);
            ratio_se.push(((sb / a).powi(2) + (b * sa / (a * a)).powi(2)).sqrt());
        }
    }
    let certificate = contraction_certificate(
        cfg.alpha,
        &cfg.nu0,
        &cfg.f,
        current.terminal(),
        initial.terminal(),
    )
    .unwrap_or(f64::INFINITY);
    let iterations = distances.len();
    Ok((
        current,
        PicardDiagnostics {
            distances,
            distance_se,
            ratios,
            ratio_se,
            certificate,
            converged,
            iterations,
        },
    ))
}

fn log_warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn sup_with_arg(a: &[f64], b: &[f64]) -> (f64, usize) {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .enumerate()
        .fold((0.0, 0), |(m, i), (j, d)| if d > m { (d, j) } else { (m, i) })
}

fn standard_error(xs: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (var / k).sqrt()
}

/// Both sides of the pathwise comparison bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonGap {
    /// `max_t |Γ(L)_t − Γ(L̄)_t|`.
    pub lhs: f64,
    /// `max_t max(mean_j ν₀((M̄, M]), mean_j ν₀((M, M̄]))`.
    pub rhs: f64,
}

/// Compares `Γ(L)` and `Γ(L̄)` on shared drivers.
///
/// The difference is accumulated sample by sample, in the same order as the
/// two interval masses, so `lhs ≤ rhs` holds in floating point and not just
/// in exact arithmetic.
pub fn comparison_gap(
    l: &LossPath,
    lbar: &LossPath,
    drivers: &DriverEnsemble,
    nu0: &Measure1D,
    alpha: f64,
    f: &FeedbackFn,
) -> Result<ComparisonGap> {
    check_grids(l, drivers)?;
    check_grids(lbar, drivers)?;
    let af = scaled_feedback(l, f, alpha);
    let afb = scaled_feedback(lbar, f, alpha);
    let n = af.len();
    let parts: Vec<[Vec<f64>; 3]> = chunk_ranges(drivers.n_paths())
        .into_par_iter()
        .map(|r| {
            let mut acc = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            for j in r {
                let z = drivers.path(j);
                let (mut m, mut mb) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for i in 0..n {
                    m = m.max(af[i] - z[i]);
                    mb = mb.max(afb[i] - z[i]);
                    acc[0][i] += nu0.cdf(m) - nu0.cdf(mb);
                    acc[1][i] += nu0.interval_mass(mb, m);
                    acc[2][i] += nu0.interval_mass(m, mb);
                }
            }
            acc
        })
        .collect();
    let mut tot = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for p in &parts {
        for (t, q) in tot.iter_mut().zip(p) {
            for (a, b) in t.iter_mut().zip(q) {
                *a += b;
            }
        }
    }
    let m = drivers.n_paths() as f64;
    let lhs = tot[0].iter().map(|d| d.abs() / m).fold(0.0, f64::max);
    let rhs = tot[1]
        .iter()
        .zip(&tot[2])
        .map(|(p, q)| p.max(*q) / m)
        .fold(0.0, f64::max);
    Ok(ComparisonGap { lhs, rhs })
}

/// `|α| ‖V₀‖_∞ ‖f‖_{Lip(L_T ∨ L̄_T)}`; a value below 1 certifies the weak
/// feedback regime on `[0, T]`.
pub fn contraction_certificate(
    alpha: f64,
    nu0: &Measure1D,
    f: &FeedbackFn,
    l_t: f64,
    lbar_t: f64,
) -> Result<f64> {
    Ok(alpha.abs() * nu0.sup_density() * f.lipschitz_constant(l_t.max(lbar_t))?)
}

/// First grid time with `L_t ≥ 1 − α ‖V₀‖_∞`, if any.
pub fn uniqueness_horizon(l: &LossPath, alpha: f64, sup_density: f64) -> Result<Option<f64>> {
    let q = alpha * sup_density;
    if q >= 1.0 {
        return domain(format!("alpha·sup density = {q} ≥ 1: no horizon bound applies"));
    }
    let level = 1.0 - q;
    Ok(l.values()
        .iter()
        .position(|&v| v >= level)
        .map(|i| l.grid().time(i)))
}

/// `A_t = α ∫ 2Φ(−x₀/√t) ν₀(dx₀)`, the drift that makes `X₀ + B` a
/// solution without any jump.
pub fn nonphysical_drift(nu0: &Measure1D, alpha: f64, grid: &TimeGrid) -> Vec<f64> {
    grid.times()
        .map(|t| {
            if t <= 0.0 {
                return 0.0;
            }
            let p: f64 = nu0
                .segments()
                .filter(|s| s.2 > 0.0)
                .map(|(a, b, d)| d * adaptive_simpson(&|x| hitting_probability(x, t), a, b, 1e-13))
                .sum();
            alpha * p
        })
        .collect()
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            return left + right + err / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Outcome of the continuous-but-unphysical construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonphysicalReport {
    pub drift: Vec<f64>,
    /// The candidate `L = A/α`.
    pub candidate: LossPath,
    pub gamma: LossPath,
    /// `‖Γ(L) − L‖_T`.
    pub residual: f64,
    /// Whether `ν₀` passes the no-immediate-jump check at `α`.
    pub admissible: bool,
}

/// Drives the system with `Z = B + A` and checks that the continuous
/// candidate `αL = A` is a fixed point of `Γ` up to sampling error.
pub fn nonphysical_scenario(
    nu0: &Measure1D,
    alpha: f64,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<NonphysicalReport> {
    if !(alpha > 0.0) {
        return domain(format!("the construction needs alpha > 0, got {alpha}"));
    }
    let drift = nonphysical_drift(nu0, alpha, &grid);
    let spec = DriverSpec::brownian().with_drift(drift.clone());
    let drivers = DriverEnsemble::generate(&spec, grid, n_paths, seed)?;
    let candidate = LossPath::new(grid, drift.iter().map(|a| (a / alpha).min(1.0)).collect())?;
    let gamma = gamma_map(&candidate, &drivers, nu0, alpha, &FeedbackFn::Linear)?;
    let residual = gamma.sup_distance(&candidate);
    let admissible = check_initial_admissible(nu0, alpha, &FeedbackFn::Linear)?;
    Ok(NonphysicalReport {
        drift,
        candidate,
        gamma,
        residual,
        admissible,
    })
}
