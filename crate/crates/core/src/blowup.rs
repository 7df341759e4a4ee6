//! Jumps of the loss: detection on computed paths, sizing by the physical
//! jump condition, restart from the shifted measure, and the polynomial-gap
//! certificate near the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::feedback::FeedbackFn;
use crate::grid::{LossPath, TimeGrid};
use crate::kernels::{smooth, KernelKind, Source};
use crate::measure::Measure1D;
use crate::particle::{simulate_particles, InitialLaw, ParticleConfig, PreJumpState};
use crate::pjc::{jump_size, jump_size_general, JumpQuery};

/// A jump found on a loss path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub size: f64,
}

/// Grid steps whose increment exceeds `threshold`; runs of consecutive such
/// steps are merged into one jump stamped with the first step's time.
pub fn detect_jumps(l: &LossPath, threshold: f64) -> Result<Vec<Jump>> {
    if !(threshold > 0.0) {
        return domain(format!("jump threshold must be positive, got {threshold}"));
    }
    let mut out: Vec<Jump> = Vec::new();
    let mut last_step = None;
    for (i, d) in l.increments() {
        if d <= threshold {
            continue;
        }
        let time = l.grid().time(i);
        match (out.last_mut(), last_step) {
            (Some(j), Some(p)) if p + 1 == i => j.size += d,
            _ => out.push(Jump { time, size: d }),
        }
        last_step = Some(i);
    }
    Ok(out)
}

/// Default particle-path threshold `10/N`.
pub fn particle_threshold(n: usize) -> f64 {
    10.0 / n as f64
}

/// Physical jump of an (estimated) pre-jump measure under linear feedback.
pub fn jump_from_density(v_minus: &Measure1D, alpha: f64) -> Result<f64> {
    jump_size(v_minus, alpha)
}

/// The post-jump measure `F⁺(x) = F⁻(x + αΔ) − F⁻(αΔ)`.
pub fn restart_density(v_minus: &Measure1D, alpha: f64, delta_l: f64) -> Result<Measure1D> {
    if !(delta_l >= 0.0) {
        return domain(format!("jump size must be nonnegative, got {delta_l}"));
    }
    if delta_l == 0.0 {
        return Ok(v_minus.clone());
    }
    v_minus.shifted_left(alpha * delta_l)
}

/// As [`restart_density`] for a general feedback: the shift is
/// `α (f(L⁻ + Δ) − f(L⁻))`.
pub fn restart_density_with(
    v_minus: &Measure1D,
    alpha: f64,
    f: &FeedbackFn,
    l_minus: f64,
    delta_l: f64,
) -> Result<Measure1D> {
    if !(delta_l >= 0.0) {
        return domain(format!("jump size must be nonnegative, got {delta_l}"));
    }
    if delta_l == 0.0 {
        return Ok(v_minus.clone());
    }
    let shift = alpha * (f.eval_clamped(l_minus + delta_l) - f.eval_clamped(l_minus));
    v_minus.shifted_left(shift)
}

/// Kernel estimate of the measure carried by `positions` (each of mass
/// `weight`), as a piecewise-linear distribution function sampled with
/// spacing `√δ / 8` and rescaled to the total mass of the positions.
///
/// Positions at or below zero have crossed the boundary but not yet been
/// removed by a cascade. Their mass is kept in a layer of width
/// [`BOUNDARY_LAYER`] at the origin, where it triggers the jump condition.
pub fn estimate_measure(positions: &[f64], weight: f64, delta: f64) -> Result<Measure1D> {
    if !(delta > 0.0) {
        return domain(format!("bandwidth must be positive, got {delta}"));
    }
    let alive: Vec<f64> = positions.iter().copied().filter(|&x| x > 0.0).collect();
    if alive.is_empty() {
        return invalid("no positive positions to estimate from");
    }
    let boundary = (positions.len() - alive.len()) as f64 * weight;
    let s = delta.sqrt();
    let top = alive.iter().copied().fold(0.0, f64::max) + 8.0 * s;
    let h = s / 8.0;
    let xs: Vec<f64> = (0..=(top / h).ceil() as usize).map(|i| i as f64 * h).collect();
    let values = smooth(
        Source::Points {
            positions: &alive,
            weight,
        },
        delta,
        KernelKind::Absorbing,
        &xs,
    )?;
    let mut m = Measure1D::from_density_samples(&xs, &values)?;
    if boundary > 0.0 {
        let mut breaks = vec![0.0, BOUNDARY_LAYER];
        let mut cdf = vec![0.0, boundary + m.cdf(BOUNDARY_LAYER)];
        breaks.extend_from_slice(&m.breakpoints()[1..]);
        cdf.extend(m.cdf_values()[1..].iter().map(|c| c + boundary));
        m = Measure1D::new(breaks, cdf)?;
    }
    // the absorbing kernel leaks mass near the origin; restore the count
    m.with_mass((positions.len() as f64 * weight).min(1.0))
}

pub const BOUNDARY_LAYER: f64 = 1e-12;

/// A jump together with the measures on either side of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlowupEvent {
    pub time: f64,
    /// Jump size from the jump condition on the estimated measure.
    pub delta_l: f64,
    /// Loss just before the jump.
    pub l_minus: f64,
    pub pre: Measure1D,
    /// `None` when the jump absorbs all remaining mass.
    pub post: Option<Measure1D>,
}

impl BlowupEvent {
    /// Sizes the jump from a captured pre-cascade particle state.
    ///
    /// The positions are smoothed with bandwidth `delta` by
    /// [`estimate_measure`].
    pub fn from_pre_jump(state: &PreJumpState, alpha: f64, f: &FeedbackFn, delta: f64) -> Result<Self> {
        let l_minus = state.loss_before;
        let pre = estimate_measure(&state.positions, state.weight, delta)?;
        let delta_l = jump_size_general(&JumpQuery {
            mu: &pre,
            alpha,
            f,
            l_minus,
        })?;
        let shift = alpha * (f.eval_clamped(l_minus + delta_l) - f.eval_clamped(l_minus));
        let post = if pre.cdf(shift) < pre.total_mass() {
            Some(restart_density_with(&pre, alpha, f, l_minus, delta_l)?)
        } else {
            None
        };
        Ok(Self {
            time: state.time,
            delta_l,
            l_minus,
            pre,
            post,
        })
    }
}

/// Outcome of re-running a particle system from the post-jump measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartReport {
    pub event: BlowupEvent,
    /// Cascade size observed in the particle run.
    pub particle_jump: f64,
    /// Original loss from the jump time on.
    pub original: Vec<f64>,
    /// Restarted loss on the same times.
    pub restarted: Vec<f64>,
    /// `max |original − restarted|`.
    pub sup_gap: f64,
}

/// Runs `cfg` until its first cascade of at least `threshold`, sizes the
/// jump from the smoothed pre-jump state, and restarts a fresh system
/// (seed `restart_seed`) from the shifted measure at the jump time.
///
/// Returns `None` when no such cascade happens before the horizon.
pub fn blowup_restart(
    cfg: &ParticleConfig,
    threshold: f64,
    delta: f64,
    restart_seed: u64,
) -> Result<Option<RestartReport>> {
    let mut first = cfg.clone();
    first.capture_jump = Some(threshold);
    first.density = None;
    let run = simulate_particles(&first)?;
    let Some(state) = run.pre_jump else {
        return Ok(None);
    };
    let event = BlowupEvent::from_pre_jump(&state, cfg.alpha, &cfg.f, delta)?;
    let original: Vec<f64> = run.loss.values()[state.step..].to_vec();
    if original.len() < 2 {
        return Ok(None);
    }
    let l_plus = (event.l_minus + event.delta_l).min(1.0);
    let restarted = match &event.post {
        Some(post) if l_plus < 1.0 => {
            let dt = cfg.grid.dt();
            let mut again = cfg.clone();
            again.initial = InitialLaw::Measure(post.clone());
            again.initial_loss = l_plus;
            again.grid = TimeGrid::new(dt * (original.len() - 1) as f64, dt)?;
            again.seed = restart_seed;
            again.capture_jump = None;
            again.density = None;
            simulate_particles(&again)?.loss.into_values()
        }
        _ => vec![l_plus; original.len()],
    };
    let sup_gap = original
        .iter()
        .zip(&restarted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Some(RestartReport {
        event,
        particle_jump: state.cascade_size,
        original,
        restarted,
        sup_gap,
    }))
}

/// Sampling of `(0, x_max]` used by [`short_time_certificate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x_max: f64,
    pub samples: usize,
}

impl Default for Probe {
    fn default() -> Self {
        Self {
            x_max: 0.25,
            samples: 512,
        }
    }
}

/// Constants of a bound `V(x) ≤ 1/α − c xⁿ` on `(0, x0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub c: f64,
    pub n: u32,
    pub x0: f64,
}

pub const MAX_CERTIFICATE_DEGREE: u32 = 8;

/// Looks for the smallest `n ≤ 8` and largest `c` with
/// `V(x) ≤ 1/α − c xⁿ` at the probe points `x_k = k·x_max/samples`.
///
/// A bound with degree below the order at which the gap `1/α − V` vanishes
/// cannot hold with a useful `c` all the way to the origin, so the order is
/// first read off the two points nearest zero, `p = log₂(gap(x₂)/gap(x₁))`,
/// and `n` is the least integer not below `p` (up to a small slack). The
/// constant is then exact on the samples: `c = min gap(x)/xⁿ` over the
/// longest initial run of samples with a positive gap, which ends at `x0`.
pub fn short_time_certificate(v: &dyn Fn(f64) -> f64, alpha: f64, probe: Probe) -> Result<Option<Certificate>> {
    if !(alpha > 0.0) {
        return domain(format!("the certificate needs alpha > 0, got {alpha}"));
    }
    if probe.samples < 2 || !(probe.x_max > 0.0) {
        return invalid("the probe needs at least two samples on a positive interval");
    }
    let h = probe.x_max / probe.samples as f64;
    let gap = |x: f64| 1.0 / alpha - v(x);
    let xs: Vec<f64> = (1..=probe.samples).map(|k| k as f64 * h).collect();
    let gaps: Vec<f64> = xs.iter().map(|&x| gap(x)).collect();
    let run = gaps.iter().take_while(|&&g| g > 0.0).count();
    if run < 2 {
        return Ok(None);
    }
    let order = (gaps[1] / gaps[0]).log2();
    let n = (order - 0.05).ceil().max(1.0);
    if !(n <= MAX_CERTIFICATE_DEGREE as f64) {
        return Ok(None);
    }
    let c = xs[..run]
        .iter()
        .zip(&gaps)
        .map(|(x, g)| g / x.powf(n))
        .fold(f64::INFINITY, f64::min);
    if !(c > 0.0 && c.is_finite()) {
        return Ok(None);
    }
    Ok(Some(Certificate {
        c,
        n: n as u32,
        x0: xs[run - 1],
    }))
}

/// [`short_time_certificate`] for the density of a measure.
pub fn short_time_certificate_measure(mu: &Measure1D, alpha: f64, probe: Probe) -> Result<Option<Certificate>> {
    short_time_certificate(&|x| mu.density(x), alpha, probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(values: Vec<f64>) -> LossPath {
        let g = TimeGrid::new(0.1 * (values.len() - 1) as f64, 0.1).unwrap();
        LossPath::new(g, values).unwrap()
    }

    #[test]
    fn jump_detection_examples() {
        let ramp = path((0..=10).map(|i| 0.04 * i as f64).collect());
        assert!(detect_jumps(&ramp, 0.05).unwrap().is_empty());
        let step = path(vec![0.0, 0.01, 0.02, 0.03, 0.33, 0.34, 0.35]);
        let j = detect_jumps(&step, 0.05).unwrap();
        assert_eq!(j.len(), 1);
        assert!((j[0].time - 0.4).abs() < 1e-12 && (j[0].size - 0.3).abs() < 1e-12);
        let double = path(vec![0.0, 0.0, 0.2, 0.5, 0.5, 0.7]);
        let j = detect_jumps(&double, 0.05).unwrap();
        assert_eq!(j.len(), 2);
        assert!((j[0].size - 0.5).abs() < 1e-12 && (j[0].time - 0.2).abs() < 1e-12);
        assert!((j[1].time - 0.5).abs() < 1e-12);
        assert!(detect_jumps(&double, 0.0).is_err());
    }

    #[test]
    fn restart_examples() {
        let u = Measure1D::uniform(0.0, 1.0).unwrap();
        assert_eq!(restart_density(&u, 1.0, 0.0).unwrap(), u);
        let r = restart_density(&u, 1.0, 0.2).unwrap();
        assert!((r.total_mass() - 0.8).abs() < 1e-15);
        assert!((r.cdf(0.4) - 0.4).abs() < 1e-15 && r.density(0.79) == 1.0 && r.density(0.81) == 0.0);
    }

    #[test]
    fn restart_mass_at_a_physical_jump() {
        let m = Measure1D::from_densities(vec![0.0, 0.25, 1.0, 1.5], &[2.0, 0.0, 1.0]).unwrap();
        let d = jump_from_density(&m, 1.0).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let post = restart_density(&m, 1.0, d).unwrap();
        assert!((post.total_mass() - (m.total_mass() - d)).abs() < 1e-12);
        // density just right of 0 matches the pre-jump density right of αΔ
        assert_eq!(post.density(1e-9), m.density(0.5 + 1e-9));
    }

    #[test]
    fn certificate_examples() {
        let alpha = 2.0;
        let p = Probe::default();
        let quad = short_time_certificate(&|x| 1.0 / alpha - x * x, alpha, p).unwrap().unwrap();
        assert_eq!(quad.n, 2);
        assert!((quad.c - 1.0).abs() < 1e-6 && quad.x0 == p.x_max);
        let flat = short_time_certificate(&|_| 1.0 / alpha - 0.1, alpha, p).unwrap().unwrap();
        assert_eq!(flat.n, 1);
        assert!((flat.c - 0.1 / p.x_max).abs() < 1e-12);
        let bad = short_time_certificate(&|x| 1.0 / alpha - (-1.0 / x).exp(), alpha, p).unwrap();
        assert_eq!(bad, None);
        let above = short_time_certificate(&|_| 1.0 / alpha + 0.1, alpha, p).unwrap();
        assert_eq!(above, None);
    }

    #[test]
    fn estimated_measure_keeps_mass() {
        let positions: Vec<f64> = (1..=2000).map(|i| i as f64 / 1000.0).collect();
        let m = estimate_measure(&positions, 1.0 / 2000.0, 1e-4).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 2e-3);
        // the boundary leak is of order √δ times the density near 0
        assert!((m.cdf(1.0) - 0.5).abs() < 5e-3, "{}", m.cdf(1.0));
    }

    #[test]
    fn crossed_positions_form_a_boundary_layer() {
        let mut positions: Vec<f64> = (1..=900).map(|i| 0.1 + i as f64 / 1000.0).collect();
        positions.extend(std::iter::repeat(-0.01).take(100));
        let m = estimate_measure(&positions, 1e-3, 1e-4).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        assert!((m.cdf(2.0 * BOUNDARY_LAYER) - 0.1).abs() < 1e-9);
        // with α = 4 the layer alone pushes the front past the bulk at 0.1
        let d = jump_from_density(&m, 4.0).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
        let d = jump_from_density(&m, 0.5).unwrap();
        assert!((d - 0.1).abs() < 1e-6, "{d}");
    }
}
