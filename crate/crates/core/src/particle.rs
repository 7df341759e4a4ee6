//! The finite particle system: `N` Brownian particles absorbed at the
//! origin, each absorption pushing every survivor down through the feedback
//! `α f(L)`.
//!
//! One time step is: every alive particle takes its Gaussian increment
//! (plus the common increment), then the contagion cascade is resolved as
//! the least fixed point of
//!
//! ```text
//! k ↦ #{ i : X_i ≤ α (f(L + k w) − f(L)) },   w = particle weight,
//! ```
//!
//! started from the particles already at or below zero. The `k*` particles
//! below the final threshold are absorbed and the survivors shift down by
//! that threshold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{DriverSpec, RngPolicy, INITIAL_STREAM};
use crate::error::{domain, invalid, Error, Result};
use crate::feedback::FeedbackFn;
use crate::grid::{LossPath, TimeGrid};
use crate::kernels::{smooth, KernelKind, Source};
use crate::measure::Measure1D;

/// Particles sharing one random stream. Stream `2 + b` drives particles
/// `b·BLOCK .. (b+1)·BLOCK`, so the draws a particle sees depend only on
/// its index and the seed.
pub const BLOCK: usize = 1024;

/// How initial positions are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    /// I.i.d. draws from the normalised measure by inverse CDF.
    Measure(Measure1D),
    /// Every particle at the same point (a degenerate start used in tests).
    Point(f64),
    /// Explicit positions, one per particle.
    Positions(Vec<f64>),
}

/// Kernel density output requested from a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityOutput {
    pub delta: f64,
    /// Output times, snapped to the nearest grid time.
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParticleConfig {
    pub n: usize,
    pub alpha: f64,
    pub f: FeedbackFn,
    pub initial: InitialLaw,
    pub grid: TimeGrid,
    pub driver: DriverSpec,
    pub seed: u64,
    /// Loss already incurred at time 0. Particles then carry weight
    /// `(1 − initial_loss)/N`; used to restart a run after a jump.
    pub initial_loss: f64,
    /// Kill a particle that stays positive over a step with the Brownian
    /// bridge crossing probability.
    pub bridge_correction: bool,
    pub density: Option<DensityOutput>,
    /// Keep the pre-cascade state of the first step whose cascade absorbs
    /// at least this much mass.
    pub capture_jump: Option<f64>,
}

impl ParticleConfig {
    pub fn new(n: usize, alpha: f64, initial: InitialLaw, grid: TimeGrid, seed: u64) -> Self {
        Self {
            n,
            alpha,
            f: FeedbackFn::Linear,
            initial,
            grid,
            driver: DriverSpec::brownian(),
            seed,
            initial_loss: 0.0,
            bridge_correction: false,
            density: None,
            capture_jump: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid("the particle system needs N ≥ 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return domain(format!("particle feedback needs alpha ≥ 0, got {}", self.alpha));
        }
        if !self.f.is_nondecreasing() {
            return domain("the cascade needs a nondecreasing feedback function");
        }
        if !(0.0..1.0).contains(&self.initial_loss) {
            return invalid(format!("initial loss {} outside [0, 1)", self.initial_loss));
        }
        if let InitialLaw::Positions(p) = &self.initial {
            if p.len() != self.n {
                return invalid(format!("{} positions given for N = {}", p.len(), self.n));
            }
        }
        if let Some(d) = &self.density {
            if !(d.delta > 0.0) {
                return domain(format!("density bandwidth must be positive, got {}", d.delta));
            }
        }
        self.driver.validate(&self.grid)
    }
}

/// Positions, status and running loss of the particle system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    pub alive: Vec<bool>,
    /// Absorption time, `+∞` while alive.
    pub default_time: Vec<f64>,
    pub loss: f64,
    /// Mass carried by each particle.
    pub weight: f64,
    pub step: usize,
}

impl ParticleEnsemble {
    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_positions(&self) -> Vec<f64> {
        self.positions
            .iter()
            .zip(&self.alive)
            .filter(|(_, &a)| a)
            .map(|(&x, _)| x)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensitySnapshot {
    pub t: f64,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

/// The alive particles just before the first large cascade.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreJumpState {
    pub step: usize,
    pub time: f64,
    pub loss_before: f64,
    /// Alive positions after that step's increments, before the cascade.
    pub positions: Vec<f64>,
    pub weight: f64,
    pub cascade_size: f64,
}

#[derive(Debug, Clone)]
pub struct ParticleRun {
    pub loss: LossPath,
    pub ensemble: ParticleEnsemble,
    pub snapshots: Vec<DensitySnapshot>,
    pub pre_jump: Option<PreJumpState>,
}

impl ParticleRun {
    pub fn default_times(&self) -> &[f64] {
        &self.ensemble.default_time
    }
}

/// Size `k*` of the cascade among `sorted` positions for `N` particles of
/// weight `1/N` and current loss `l_prev`.
pub fn resolve_cascade(sorted: &[f64], alpha: f64, n: usize, f: &FeedbackFn, l_prev: f64) -> usize {
    resolve_weighted(sorted, alpha, 1.0 / n as f64, f, l_prev)
}

fn threshold(alpha: f64, f: &FeedbackFn, l_prev: f64, mass: f64) -> f64 {
    if mass == 0.0 {
        return 0.0;
    }
    alpha * (f.eval_clamped(l_prev + mass) - f.eval_clamped(l_prev))
}

fn resolve_weighted(sorted: &[f64], alpha: f64, weight: f64, f: &FeedbackFn, l_prev: f64) -> usize {
    let mut k = sorted.partition_point(|&x| x <= 0.0);
    loop {
        let th = threshold(alpha, f, l_prev, k as f64 * weight);
        let next = sorted.partition_point(|&x| x <= th);
        if next <= k {
            return k;
        }
        k = next;
    }
}

/// Kernel estimate `(w)·Σ_alive G_δ(X_i, x)` of the density of alive mass.
pub fn estimate_density(ensemble: &ParticleEnsemble, delta: f64, xs: &[f64]) -> Result<Vec<f64>> {
    let alive = ensemble.alive_positions();
    smooth(
        Source::Points {
            positions: &alive,
            weight: ensemble.weight,
        },
        delta,
        KernelKind::Absorbing,
        xs,
    )
}

fn initial_positions(cfg: &ParticleConfig, policy: &RngPolicy) -> Vec<f64> {
    match &cfg.initial {
        InitialLaw::Point(x) => vec![*x; cfg.n],
        InitialLaw::Positions(p) => p.clone(),
        InitialLaw::Measure(mu) => {
            let mut rng = policy.stream(INITIAL_STREAM);
            let m = mu.total_mass();
            (0..cfg.n)
                .map(|_| {
                    let u: f64 = Open01.sample(&mut rng);
                    mu.quantile(u * m)
                })
                .collect()
        }
    }
}

struct Stepper<'a> {
    cfg: &'a ParticleConfig,
    ens: ParticleEnsemble,
    rngs: Vec<ChaCha8Rng>,
    common: Vec<f64>,
    scale: f64,
    bridge_var: f64,
    /// Scratch buffer for cascade candidates.
    cand: Vec<f64>,
}

impl Stepper<'_> {
    fn diffuse(&mut self, step: usize) -> Result<()> {
        let c = self.common[step];
        let scale = self.scale;
        let bridge = self.cfg.bridge_correction && self.bridge_var > 0.0;
        let var = self.bridge_var;
        let ens = &mut self.ens;
        let bad = ens
            .positions
            .par_chunks_mut(BLOCK)
            .zip(ens.alive.par_chunks(BLOCK))
            .zip(self.rngs.par_iter_mut())
            .map(|((pos, alive), rng)| {
                let mut bad = false;
                for (x, &a) in pos.iter_mut().zip(alive) {
                    // draw even for dead particles so that runs stay coupled
                    let xi: f64 = StandardNormal.sample(rng);
                    let u: f64 = if bridge { rng.random() } else { 1.0 };
                    if !a {
                        continue;
                    }
                    let before = *x;
                    *x += scale * xi + c;
                    if bridge && before > 0.0 && *x > 0.0 && u < (-2.0 * before * *x / var).exp() {
                        *x = 0.0;
                    }
                    bad |= !x.is_finite();
                }
                bad
            })
            .reduce(|| false, |a, b| a || b);
        if bad {
            return Err(Error::NonFinite {
                step,
                what: "particle position overflowed".into(),
            });
        }
        Ok(())
    }

    /// Resolves the cascade at the current positions; returns the number
    /// of particles absorbed.
    fn cascade(&mut self, t: f64) -> usize {
        let cfg = self.cfg;
        let w = self.ens.weight;
        let l = self.ens.loss;
        let ens = &mut self.ens;
        let k0 = ens
            .positions
            .iter()
            .zip(&ens.alive)
            .filter(|(&x, &a)| a && x <= 0.0)
            .count();
        if k0 == 0 {
            return 0;
        }
        let n_alive = ens.alive.iter().filter(|&&a| a).count();
        // gather candidates below a bound, growing it until the fixed
        // point's threshold lies inside; every iterate below it then sees
        // the same counts as on the full set
        let mut probe = (2 * k0 + 16).min(n_alive);
        let k = loop {
            let bound = threshold(cfg.alpha, &cfg.f, l, probe as f64 * w);
            self.cand.clear();
            self.cand.extend(
                ens.positions
                    .iter()
                    .zip(&ens.alive)
                    .filter(|(&x, &a)| a && x <= bound)
                    .map(|(&x, _)| x),
            );
            self.cand.sort_unstable_by(f64::total_cmp);
            let k = resolve_weighted(&self.cand, cfg.alpha, w, &cfg.f, l);
            let th = threshold(cfg.alpha, &cfg.f, l, k as f64 * w);
            if th <= bound || self.cand.len() == n_alive {
                break k;
            }
            probe = (2 * probe.max(k)).min(n_alive);
        };
        let th = threshold(cfg.alpha, &cfg.f, l, k as f64 * w);
        let shift = if th.is_finite() { th } else { 0.0 };
        let mut absorbed = 0;
        for ((x, a), d) in ens.positions.iter_mut().zip(ens.alive.iter_mut()).zip(ens.default_time.iter_mut()) {
            if !*a {
                continue;
            }
            if *x <= th {
                *a = false;
                *d = t;
                absorbed += 1;
            }
            *x -= shift;
        }
        debug_assert_eq!(absorbed, k);
        absorbed
    }
}

/// Runs the particle system on `cfg.grid`.
pub fn simulate_particles(cfg: &ParticleConfig) -> Result<ParticleRun> {
    cfg.validate()?;
    let policy = RngPolicy::new(cfg.seed);
    let grid = cfg.grid;
    let n = cfg.n;
    let weight = (1.0 - cfg.initial_loss) / n as f64;
    let positions = initial_positions(cfg, &policy);
    let n_blocks = n.div_ceil(BLOCK);
    let rho = cfg.driver.rho;
    let mut st = Stepper {
        cfg,
        ens: ParticleEnsemble {
            positions,
            alive: vec![true; n],
            default_time: vec![f64::INFINITY; n],
            loss: cfg.initial_loss,
            weight,
            step: 0,
        },
        rngs: (0..n_blocks).map(|b| policy.path_stream(b)).collect(),
        common: cfg.driver.common_increments(&grid, &policy),
        scale: cfg.driver.idiosyncratic_scale(&grid),
        bridge_var: (1.0 - rho * rho) * grid.dt(),
        cand: Vec::new(),
    };

    let snap_steps: Vec<usize> = cfg
        .density
        .as_ref()
        .map(|d| d.times.iter().map(|&t| grid.index_of(t)).collect())
        .unwrap_or_default();
    let mut snapshots = Vec::new();
    let mut take_snapshots = |ens: &ParticleEnsemble, step: usize| -> Result<()> {
        if let Some(d) = &cfg.density {
            for _ in snap_steps.iter().filter(|&&s| s == step) {
                snapshots.push(DensitySnapshot {
                    t: grid.time(step),
                    xs: d.xs.clone(),
                    values: estimate_density(ens, d.delta, &d.xs)?,
                });
            }
        }
        Ok(())
    };

    let mut dead = st.cascade(0.0);
    st.ens.loss = cfg.initial_loss + dead as f64 * weight;
    let mut values = Vec::with_capacity(grid.len());
    values.push(st.ens.loss.min(1.0));
    take_snapshots(&st.ens, 0)?;
    let mut pre_jump = None;

    for step in 1..grid.len() {
        let t = grid.time(step);
        st.diffuse(step - 1)?;
        let snapshot_positions = cfg
            .capture_jump
            .filter(|_| pre_jump.is_none())
            .map(|_| st.ens.alive_positions());
        let loss_before = st.ens.loss;
        let k = st.cascade(t);
        dead += k;
        st.ens.loss = cfg.initial_loss + dead as f64 * weight;
        st.ens.step = step;
        if let (Some(th), Some(positions)) = (cfg.capture_jump, snapshot_positions) {
            let size = k as f64 * weight;
            if size >= th {
                pre_jump = Some(PreJumpState {
                    step,
                    time: t,
                    loss_before,
                    positions,
                    weight,
                    cascade_size: size,
                });
            }
        }
        values.push(st.ens.loss.min(1.0));
        take_snapshots(&st.ens, step)?;
    }
    drop(take_snapshots);
    Ok(ParticleRun {
        loss: LossPath::new(grid, values)?,
        ensemble: st.ens,
        snapshots,
        pre_jump,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::hitting_probability;
    use proptest::prelude::*;

    #[test]
    fn cascade_examples() {
        let lin = FeedbackFn::Linear;
        assert_eq!(resolve_cascade(&[0.5, 0.6, 0.7, 0.8], 1.0, 4, &lin, 0.0), 0);
        assert_eq!(resolve_cascade(&[-0.1, 0.2, 0.3, 2.0], 1.0, 4, &lin, 0.0), 3);
        assert_eq!(resolve_cascade(&[-0.5, -0.2], 1.0, 2, &lin, 0.0), 2);
    }

    #[test]
    fn cascade_tie_counts_as_absorbed() {
        // k0 = 1 gives threshold exactly 0.25
        assert_eq!(resolve_cascade(&[0.0, 0.25, 0.9], 1.0, 4, &FeedbackFn::Linear, 0.0), 2);
    }

    #[test]
    fn neglog_cascade_absorbs_everything_near_full_loss() {
        let sorted = [-0.1, 5.0, 50.0];
        // f(L + 1/N) = ∞ once L + 1/N reaches 1
        assert_eq!(resolve_cascade(&sorted, 0.1, 3, &FeedbackFn::NegLog, 2.0 / 3.0), 3);
    }

    fn cfg(n: usize, alpha: f64, seed: u64) -> ParticleConfig {
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        ParticleConfig::new(n, alpha, InitialLaw::Measure(Measure1D::uniform(0.0, 2.0).unwrap()), grid, seed)
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate_particles(&cfg(3000, 1.0, 7)).unwrap();
        let b = simulate_particles(&cfg(3000, 1.0, 7)).unwrap();
        assert_eq!(a.loss.values(), b.loss.values());
        assert_eq!(a.ensemble.positions, b.ensemble.positions);
        let c = simulate_particles(&cfg(3000, 1.0, 8)).unwrap();
        assert_ne!(a.loss.values(), c.loss.values());
    }

    #[test]
    fn free_particles_hit_at_the_reflection_rate() {
        // α = 0 from X₀ = 1: P(τ ≤ 1) = 2Φ(−1); grid monitoring misses
        // some crossings, the bridge correction restores them
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let n = 40_000;
        let exact = hitting_probability(1.0, 1.0);
        let mut c = ParticleConfig::new(n, 0.0, InitialLaw::Point(1.0), grid, 3);
        let plain = simulate_particles(&c).unwrap().loss.terminal();
        c.bridge_correction = true;
        let bridged = simulate_particles(&c).unwrap().loss.terminal();
        let tol = 4.0 / (n as f64).sqrt();
        assert!((bridged - exact).abs() < tol, "bridged {bridged} vs {exact}");
        assert!(plain < exact && exact - plain < tol + 1.5 * grid.dt().sqrt());
    }

    #[test]
    fn loss_counts_dead_particles() {
        let run = simulate_particles(&cfg(2000, 1.5, 1)).unwrap();
        let e = &run.ensemble;
        let dead = e.alive.iter().filter(|&&a| !a).count();
        assert!((e.loss - dead as f64 / 2000.0).abs() < 1e-15);
        for ((&x, &a), &d) in e.positions.iter().zip(&e.alive).zip(&e.default_time) {
            if a {
                assert!(x > 0.0 && d.is_infinite());
            } else {
                assert!(x <= 0.0 && d <= 1.0);
            }
        }
        for v in run.loss.values() {
            let k = v * 2000.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn estimate_density_is_a_kernel_sum() {
        let ens = ParticleEnsemble {
            positions: vec![0.3, 0.7, -0.1],
            alive: vec![true, true, false],
            default_time: vec![f64::INFINITY, f64::INFINITY, 0.5],
            loss: 1.0 / 3.0,
            weight: 1.0 / 3.0,
            step: 1,
        };
        let delta = 0.02;
        let g = |x0: f64, x: f64| {
            let c = (2.0 * std::f64::consts::PI * delta).sqrt();
            ((-(x - x0).powi(2) / (2.0 * delta)).exp() - (-(x + x0).powi(2) / (2.0 * delta)).exp()) / c
        };
        let xs = [0.0, 0.2, 0.5, 1.0];
        let v = estimate_density(&ens, delta, &xs).unwrap();
        assert_eq!(v[0], 0.0);
        for (x, got) in xs.iter().zip(v) {
            let want = (g(0.3, *x) + g(0.7, *x)) / 3.0;
            assert!((got - want).abs() < 1e-14);
        }
        let fine: Vec<f64> = (0..=4000).map(|i| i as f64 * 1e-3).collect();
        let d = estimate_density(&ens, delta, &fine).unwrap();
        let mass: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1]) * 1e-3).sum();
        assert!(mass <= 2.0 / 3.0 + 1e-8);
    }

    #[test]
    fn captures_the_pre_jump_state() {
        let grid = TimeGrid::new(0.2, 1e-3).unwrap();
        let mut c = ParticleConfig::new(
            5000,
            4.0,
            InitialLaw::Measure(Measure1D::uniform(0.1, 0.4).unwrap()),
            grid,
            5,
        );
        c.capture_jump = Some(0.1);
        let run = simulate_particles(&c).unwrap();
        let pj = run.pre_jump.expect("strong feedback should produce a cascade");
        let jump = run.loss.values()[pj.step] - run.loss.values()[pj.step - 1];
        assert!((jump - pj.cascade_size).abs() < 1e-12 && jump >= 0.1);
        assert_eq!(pj.loss_before, run.loss.values()[pj.step - 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cascade_is_least_fixed_point(
            mut xs in proptest::collection::vec(-0.2f64..1.5, 1..60),
            alpha in 0.0f64..4.0,
            l in 0.0f64..0.5,
            neglog in any::<bool>(),
        ) {
            xs.sort_by(f64::total_cmp);
            let f = if neglog { FeedbackFn::NegLog } else { FeedbackFn::Linear };
            let n = 2 * xs.len();
            let g = |k: usize| {
                let th = threshold(alpha, &f, l, k as f64 / n as f64);
                xs.iter().filter(|&&x| x <= th).count()
            };
            let k = resolve_cascade(&xs, alpha, n, &f, l);
            prop_assert_eq!(g(k), k);
            let k0 = xs.iter().filter(|&&x| x <= 0.0).count();
            for j in k0..k {
                prop_assert!(g(j) > j);
            }
        }

        #[test]
        fn cascade_matches_jump_condition(
            mut xs in proptest::collection::vec(0.001f64..1.0, 1..40),
            alpha in 0.1f64..4.0,
        ) {
            // one particle at the boundary starts the cascade; it stops at the
            // first j with ν̂([0, αj/N]) ≤ j/N, an exact balance counting as a stop
            xs.push(0.0);
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let k = resolve_cascade(&xs, alpha, n, &FeedbackFn::Linear, 0.0);
            let count = |th: f64| xs.iter().filter(|&&x| x <= th).count();
            let first = (1..=n).find(|&j| count(alpha * j as f64 / n as f64) <= j).unwrap();
            prop_assert_eq!(k, first);
        }

        #[test]
        fn loss_monotone_in_alpha(a1 in 0.0f64..2.0, a2 in 0.0f64..2.0, seed in 0u64..50) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let grid = TimeGrid::new(0.3, 0.01).unwrap();
            let law = InitialLaw::Measure(Measure1D::uniform(0.0, 1.0).unwrap());
            let r1 = simulate_particles(&ParticleConfig::new(500, lo, law.clone(), grid, seed)).unwrap();
            let r2 = simulate_particles(&ParticleConfig::new(500, hi, law, grid, seed)).unwrap();
            for (x, y) in r1.loss.values().iter().zip(r2.loss.values()) {
                prop_assert!(x <= y);
            }
        }
    }
}
