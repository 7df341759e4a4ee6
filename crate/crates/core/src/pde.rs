//! Finite differences for the Brownian, linear-feedback case:
//!
//! ```text
//! ∂_t V = ½ ∂_xx V + α L′ ∂_x V,   L′ = ½ ∂_x V(0),   V(0) = 0
//! ```
//!
//! on `[0, X_max]` with `V(X_max) = 0`. Each step is one backward-Euler
//! solve with the transport term upwinded and its coefficient lagged; the
//! flux is then recomputed from the new profile and the solve repeated
//! `inner_corrections` times. The loss rate is the scheme's own outflow
//! through the first cell, diffusive `V_1/(2dx)` plus upwind transport
//! `α L′ V_1`, so mass and loss balance step by step. The transport part
//! vanishes as `dx → 0` for regular solutions and carries the feedback loop
//! when the flux blows up.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::grid::{LossPath, TimeGrid};
use crate::measure::Measure1D;

/// Default explosion test: flux `L²` norm over a window of this length...
pub const EXPLOSION_WINDOW: f64 = 0.05;
/// ...exceeding this cap.
pub const EXPLOSION_CAP: f64 = 50.0;
/// Per-step clipped negative mass above which a warning is recorded.
const CLIP_WARNING: f64 = 1e-6;

/// Profile `V_j` at `x_j = j·dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeState {
    pub dx: f64,
    pub values: Vec<f64>,
    pub loss: f64,
    pub time: f64,
}

impl PdeState {
    pub fn x_max(&self) -> f64 {
        self.dx * (self.values.len() - 1) as f64
    }

    /// `Σ V_j dx`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx
    }

    /// `V` at `x` by linear interpolation, zero beyond the grid.
    pub fn value_at(&self, x: f64) -> f64 {
        if x < 0.0 || x >= self.x_max() {
            return 0.0;
        }
        let s = x / self.dx;
        let j = s.floor() as usize;
        let w = s - j as f64;
        (1.0 - w) * self.values[j] + w * self.values[j + 1]
    }
}

/// `½ ∂_x V(0)` by the second-order one-sided difference.
pub fn boundary_flux(state: &PdeState) -> Result<f64> {
    if state.values.len() < 4 {
        return invalid("the flux stencil needs at least four grid points");
    }
    Ok(flux(&state.values, state.dx))
}

fn flux(v: &[f64], dx: f64) -> f64 {
    0.5 * (4.0 * v[1] - v[2]) / (2.0 * dx)
}

/// Mass leaving through `x = 0` per unit time in one step of the scheme.
fn outflow(v: &[f64], dx: f64, speed: f64) -> f64 {
    v[1] * (0.5 / dx + speed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeConfig {
    /// Initial profile on `x_j = j·dx`; the endpoints are forced to zero.
    pub v0: Vec<f64>,
    pub dx: f64,
    pub alpha: f64,
    pub grid: TimeGrid,
    pub inner_corrections: usize,
    pub explosion_window: f64,
    pub explosion_cap: f64,
    /// Times at which to keep the profile.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

impl PdeConfig {
    /// Cell averages of `nu0` on a grid reaching `10 + 6√T` beyond its
    /// support.
    pub fn from_measure(nu0: &Measure1D, alpha: f64, grid: TimeGrid, dx: f64) -> Result<Self> {
        let support = *nu0.breakpoints().last().unwrap();
        let x_max = support + 10.0 + 6.0 * grid.horizon().sqrt();
        let v0 = cell_averages(nu0, dx, x_max)?;
        Ok(Self::with_profile(v0, dx, alpha, grid))
    }

    /// Samples a density function on a grid reaching `x_max`.
    pub fn from_fn(v0: impl Fn(f64) -> f64, x_max: f64, dx: f64, alpha: f64, grid: TimeGrid) -> Result<Self> {
        let j = points(x_max, dx)?;
        Ok(Self::with_profile((0..=j).map(|i| v0(i as f64 * dx)).collect(), dx, alpha, grid))
    }

    pub fn with_profile(v0: Vec<f64>, dx: f64, alpha: f64, grid: TimeGrid) -> Self {
        Self {
            v0,
            dx,
            alpha,
            grid,
            inner_corrections: 2,
            explosion_window: EXPLOSION_WINDOW,
            explosion_cap: EXPLOSION_CAP,
            snapshot_times: Vec::new(),
        }
    }
}

fn points(x_max: f64, dx: f64) -> Result<usize> {
    if !(dx > 0.0 && x_max > 3.0 * dx) {
        return invalid(format!("need dx > 0 and X_max > 3dx, got dx = {dx}, X_max = {x_max}"));
    }
    Ok((x_max / dx).ceil() as usize)
}

fn cell_averages(nu0: &Measure1D, dx: f64, x_max: f64) -> Result<Vec<f64>> {
    let j = points(x_max, dx)?;
    Ok((0..=j)
        .map(|i| {
            let x = i as f64 * dx;
            nu0.interval_mass((x - 0.5 * dx).max(0.0), x + 0.5 * dx) / dx
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeSolution {
    pub loss: LossPath,
    /// `L′` at each grid time (zero at `t = 0` by convention).
    pub flux: Vec<f64>,
    pub snapshots: Vec<PdeState>,
    pub final_state: PdeState,
    /// Set when the flux test fires; the run stops there and the loss path
    /// is held constant afterwards.
    pub explosion_time: Option<f64>,
    /// `1 − L_t − Σ V dx` at each grid time.
    pub mass_defect: Vec<f64>,
    pub max_clip: f64,
    pub warnings: Vec<String>,
}

/// Runs the scheme on `cfg.grid`.
pub fn solve_pde(cfg: &PdeConfig) -> Result<PdeSolution> {
    if !(cfg.alpha >= 0.0) {
        return domain(format!("the scheme needs alpha ≥ 0, got {}", cfg.alpha));
    }
    let n = cfg.v0.len();
    if n < 4 {
        return invalid("the spatial grid needs at least four points");
    }
    if cfg.v0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return invalid("the initial profile must be finite and nonnegative");
    }
    let grid = cfg.grid;
    let (dt, dx) = (grid.dt(), cfg.dx);
    let mut v = cfg.v0.clone();
    v[0] = 0.0;
    v[n - 1] = 0.0;
    let initial_mass = v.iter().sum::<f64>() * dx;

    let snap_steps: Vec<usize> = cfg.snapshot_times.iter().map(|&t| grid.index_of(t)).collect();
    let mut snapshots = Vec::new();
    let mut snap = |v: &[f64], loss: f64, step: usize| {
        for _ in snap_steps.iter().filter(|&&s| s == step) {
            snapshots.push(PdeState {
                dx,
                values: v.to_vec(),
                loss,
                time: grid.time(step),
            });
        }
    };

    let mut loss = 0.0;
    let mut losses = vec![0.0];
    let mut fluxes = vec![0.0];
    let mut defects = vec![1.0 - initial_mass];
    let mut warnings = Vec::new();
    let mut max_clip: f64 = 0.0;
    let mut explosion_time = None;
    let mut tri = Tridiagonal::new(n - 2);
    let mut next = vec![0.0; n];
    let mut lambda: f64 = 0.0;
    if !(cfg.explosion_cap > 0.0 && cfg.explosion_window > 0.0) {
        return domain("explosion detection needs positive cap and window");
    }
    let width = ((cfg.explosion_window / dt).round() as usize).max(1);
    let mut window_sq = 0.0;
    snap(&v, loss, 0);

    for step in 1..grid.len() {
        let mut speed = 0.0;
        for _ in 0..=cfg.inner_corrections {
            speed = cfg.alpha * lambda.max(0.0);
            tri.solve(&v, &mut next, dt, dx, speed);
            lambda = outflow(&next, dx, speed);
        }
        let clip: f64 = next.iter_mut().filter(|x| **x < 0.0).map(|x| std::mem::replace(x, 0.0)).sum::<f64>() * -dx;
        if clip > CLIP_WARNING {
            warnings.push(format!("step {step}: clipped negative mass {clip:.3e}"));
        }
        max_clip = max_clip.max(clip);
        std::mem::swap(&mut v, &mut next);
        lambda = outflow(&v, dx, speed);
        if !lambda.is_finite() {
            explosion_time = Some(grid.time(step));
            break;
        }
        loss = (loss + dt * lambda.max(0.0)).min(1.0);
        losses.push(loss);
        fluxes.push(lambda);
        defects.push(1.0 - loss - v.iter().sum::<f64>() * dx);
        snap(&v, loss, step);
        // running form of detect_explosion
        window_sq += lambda * lambda * dt;
        if step > width {
            window_sq -= fluxes[step - width] * fluxes[step - width] * dt;
        }
        if window_sq.max(0.0).sqrt() > cfg.explosion_cap {
            explosion_time = Some(grid.time(step));
            break;
        }
    }
    let completed = losses.len() - 1;
    let last = *losses.last().unwrap();
    losses.resize(grid.len(), last);
    Ok(PdeSolution {
        loss: LossPath::new(grid, losses)?,
        flux: fluxes,
        snapshots,
        final_state: PdeState {
            dx,
            values: v,
            loss: last,
            time: grid.time(completed),
        },
        explosion_time,
        mass_defect: defects,
        max_clip,
        warnings,
    })
}

/// Interior system of one step:
/// `(1 + dt/dx² + dt·c/dx) V_j − dt/(2dx²) V_{j−1} − (dt/(2dx²) + dt·c/dx) V_{j+1} = V^n_j`.
struct Tridiagonal {
    c_prime: Vec<f64>,
    d_prime: Vec<f64>,
}

impl Tridiagonal {
    fn new(m: usize) -> Self {
        Self {
            c_prime: vec![0.0; m],
            d_prime: vec![0.0; m],
        }
    }

    /// Thomas algorithm; `old` and `out` include the two boundary points.
    fn solve(&mut self, old: &[f64], out: &mut [f64], dt: f64, dx: f64, speed: f64) {
        let m = self.c_prime.len();
        let r = dt / (2.0 * dx * dx);
        let t = dt * speed / dx;
        let (a, b, c) = (-r, 1.0 + 2.0 * r + t, -r - t);
        self.c_prime[0] = c / b;
        self.d_prime[0] = old[1] / b;
        for i in 1..m {
            let denom = b - a * self.c_prime[i - 1];
            self.c_prime[i] = c / denom;
            self.d_prime[i] = (old[i + 1] - a * self.d_prime[i - 1]) / denom;
        }
        out[0] = 0.0;
        out[m + 1] = 0.0;
        out[m] = self.d_prime[m - 1];
        for i in (0..m - 1).rev() {
            out[i + 1] = self.d_prime[i] - self.c_prime[i] * out[i + 2];
        }
    }
}

/// `v(x) = −α V(x − αL)` at points `xs ≥ αL`, the supercooled Stefan
/// temperature whose freezing front sits at `αL`.
pub fn stefan_transform(state: &PdeState, alpha: f64, xs: &[f64]) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return domain(format!("the transform needs alpha > 0, got {alpha}"));
    }
    let front = alpha * state.loss;
    xs.iter()
        .map(|&x| {
            if x < front {
                return domain(format!("{x} lies behind the front at {front}"));
            }
            Ok(-alpha * state.value_at(x - front))
        })
        .collect()
}

/// First time at which `(∫_{t−w}^t L′(s)² ds)^{1/2}` exceeds `cap`, with
/// the flux sampled at spacing `dt` (right-endpoint rule).
pub fn detect_explosion(flux: &[f64], dt: f64, window: f64, cap: f64) -> Result<Option<f64>> {
    if !(cap > 0.0 && window > 0.0 && dt > 0.0) {
        return domain("explosion detection needs positive cap, window and dt");
    }
    let width = ((window / dt).round() as usize).max(1);
    let mut acc = 0.0;
    for i in 1..flux.len() {
        acc += flux[i] * flux[i] * dt;
        if i > width {
            acc -= flux[i - width] * flux[i - width] * dt;
        }
        if acc.max(0.0).sqrt() > cap {
            return Ok(Some(i as f64 * dt));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(f: impl Fn(f64) -> f64, dx: f64, n: usize) -> PdeState {
        PdeState {
            dx,
            values: (0..n).map(|j| f(j as f64 * dx)).collect(),
            loss: 0.0,
            time: 0.0,
        }
    }

    #[test]
    fn flux_examples() {
        let dx = 0.01;
        assert!((boundary_flux(&state(|x| x, dx, 50)).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(boundary_flux(&state(|_| 0.0, dx, 50)).unwrap(), 0.0);
        assert!(boundary_flux(&state(|x| x * x, dx, 50)).unwrap().abs() <= dx);
        assert!(boundary_flux(&state(|x| x, dx, 3)).is_err());
    }

    #[test]
    fn explosion_examples() {
        assert_eq!(detect_explosion(&[0.0; 100], 0.01, 0.05, 1.0).unwrap(), None);
        // constant flux c: the windowed norm reaches c·√w at the first window end
        let c = 10.0;
        let f = vec![c; 100];
        let t = detect_explosion(&f, 0.01, 0.05, c * 0.05f64.sqrt() * 0.99).unwrap().unwrap();
        assert!((t - 0.05).abs() < 1e-12);
        assert_eq!(detect_explosion(&f, 0.01, 0.05, c * 0.05f64.sqrt() * 1.01).unwrap(), None);
    }

    #[test]
    fn zero_profile_stays_zero() {
        let g = TimeGrid::new(0.1, 0.01).unwrap();
        let sol = solve_pde(&PdeConfig::with_profile(vec![0.0; 100], 0.05, 1.0, g)).unwrap();
        assert!(sol.loss.values().iter().all(|&l| l == 0.0));
        assert!(sol.final_state.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heat_equation_loss() {
        // V(t, x) = (1+t)^{-3/2} x exp(−x²/2(1+t)) solves the Dirichlet heat
        // equation; its mass is (1+t)^{-1/2}, so L(1) = 1 − 1/√2
        let g = TimeGrid::new(1.0, 1e-3).unwrap();
        let cfg = PdeConfig::from_fn(|x| x * (-x * x / 2.0).exp(), 16.0, 5e-3, 0.0, g).unwrap();
        let sol = solve_pde(&cfg).unwrap();
        assert!((sol.loss.terminal() - (1.0 - 0.5f64.sqrt())).abs() < 2e-3);
        for d in &sol.mass_defect {
            assert!(d.abs() < 10.0 * 5e-3 * 5e-3 + 10.0 * 1e-3);
        }
        let exact = |x: f64| 2f64.powf(-1.5) * x * (-x * x / 4.0).exp();
        for x in [0.5, 1.0, 2.0] {
            assert!((sol.final_state.value_at(x) - exact(x)).abs() < 1e-3);
        }
    }

    #[test]
    fn stefan_front_and_slope() {
        let mut s = state(|x| x * (-x).exp(), 1e-3, 3000);
        assert_eq!(stefan_transform(&s, 1.0, &[0.0, 0.5]).unwrap(), vec![0.0, -s.value_at(0.5)]);
        s.loss = 0.2;
        let alpha = 1.5;
        let front = alpha * s.loss;
        let v = stefan_transform(&s, alpha, &[front, front + s.dx]).unwrap();
        assert_eq!(v[0], 0.0);
        // v′(front) = −α ∂_x V(0) = −2α L′
        let slope = (v[1] - v[0]) / s.dx;
        let lp = boundary_flux(&s).unwrap();
        assert!((slope + 2.0 * alpha * lp).abs() < 10.0 * s.dx);
        assert!(stefan_transform(&s, alpha, &[0.1]).is_err());
    }
}

