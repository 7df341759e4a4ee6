use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use contagion::blowup::{blowup_restart, detect_jumps, particle_threshold, restart_density, Jump};
use contagion::mv::{
    comparison_gap, contraction_certificate, nonphysical_scenario, solve_picard, PicardConfig,
};
use contagion::particle::{simulate_particles, DensityOutput, InitialLaw, ParticleConfig};
use contagion::pde::{solve_pde, PdeConfig};
use contagion::pjc::{check_initial_admissible, jump_size, jump_size_general, JumpQuery};
use contagion::{DriverEnsemble, DriverSpec, FeedbackFn, LossPath, Measure1D, TimeGrid};

use crate::config::{DensityRequest, RunConfig, Scenario};
use crate::output::Table;
use crate::{CliError, Report};

pub fn execute(cfg: &RunConfig) -> Result<Report, CliError> {
    match cfg.scenario {
        Scenario::Simulate => simulate(cfg),
        Scenario::SolveMv => solve_mv(cfg),
        Scenario::SolvePde => solve_pde_scenario(cfg),
        Scenario::JumpSize => jump(cfg),
        Scenario::CheckRegime => check_regime(cfg),
        Scenario::VerifyComparison => verify_comparison(cfg),
        Scenario::Nonphysical => nonphysical(cfg),
        Scenario::BlowupRestart => blowup_restart_scenario(cfg),
    }
}

fn grid(cfg: &RunConfig) -> TimeGrid {
    cfg.grid.expect("validated: time-stepping scenarios have a grid")
}

fn driver(cfg: &RunConfig) -> DriverSpec {
    if cfg.rho > 0.0 {
        DriverSpec::with_common_noise(cfg.rho, cfg.common_path.clone())
    } else {
        DriverSpec::brownian()
    }
}

fn particle_config(cfg: &RunConfig) -> ParticleConfig {
    let mut p = ParticleConfig::new(cfg.n, cfg.alpha, InitialLaw::Measure(cfg.nu0.clone()), grid(cfg), cfg.seed);
    p.f = cfg.f.clone();
    p.driver = driver(cfg);
    p.bridge_correction = cfg.bridge_correction;
    p
}

fn loss_table(l: &LossPath) -> Table {
    let mut t = Table::new(&["t", "L"]);
    for (s, v) in l.grid().times().zip(l.values()) {
        t.push(vec![s, *v]);
    }
    t
}

fn density_xs(d: &DensityRequest) -> Vec<f64> {
    let h = d.x_max / (d.points - 1) as f64;
    (0..d.points).map(|i| i as f64 * h).collect()
}

fn jumps_json(jumps: &[Jump]) -> Value {
    json!(jumps.iter().map(|j| json!({"time": j.time, "size": j.size})).collect::<Vec<_>>())
}

fn simulate(cfg: &RunConfig) -> Result<Report, CliError> {
    let mut p = particle_config(cfg);
    if let Some(d) = &cfg.density {
        p.density = Some(DensityOutput {
            delta: d.delta.expect("validated: simulate densities have a bandwidth"),
            times: d.times.clone(),
            xs: density_xs(d),
        });
    }
    let run = simulate_particles(&p)?;
    let mut r = Report::default();
    r.files.push(("loss".into(), loss_table(&run.loss).to_bytes()?));
    if !run.snapshots.is_empty() {
        let mut t = Table::new(&["t", "x", "V"]);
        for s in &run.snapshots {
            for (x, v) in s.xs.iter().zip(&s.values) {
                t.push(vec![s.t, *x, *v]);
            }
        }
        r.files.push(("density".into(), t.to_bytes()?));
    }
    let threshold = cfg.jump_threshold.unwrap_or_else(|| particle_threshold(cfg.n));
    let jumps = detect_jumps(&run.loss, threshold)?;
    r.lines.push(format!("final loss {}", run.loss.terminal()));
    r.lines.push(format!("jumps above {threshold}: {}", jumps.len()));
    r.diagnostics.insert("final_loss".into(), json!(run.loss.terminal()));
    r.diagnostics.insert("alive".into(), json!(run.ensemble.n_alive()));
    r.diagnostics.insert("jumps".into(), jumps_json(&jumps));
    Ok(r)
}

fn solve_mv(cfg: &RunConfig) -> Result<Report, CliError> {
    let g = grid(cfg);
    let drivers = DriverEnsemble::generate(&driver(cfg), g, cfg.m, cfg.seed)?;
    let mut pc = PicardConfig::new(cfg.nu0.clone(), cfg.alpha, cfg.f.clone());
    pc.tol = cfg.tol;
    pc.max_iter = cfg.max_iter;
    pc.batches = pc.batches.min(cfg.m).max(2);
    let (l, diag) = solve_picard(&pc, &drivers, &LossPath::zero(g))?;
    let mut r = Report::default();
    r.files.push(("loss".into(), loss_table(&l).to_bytes()?));
    let diag_json = serde_json::to_value(&diag).expect("plain data");
    r.files.push(("diag".into(), pretty(&diag_json)));
    r.lines.push(format!(
        "converged: {} after {} iterations, last distance {:e}",
        diag.converged,
        diag.iterations,
        diag.distances.last().copied().unwrap_or(f64::NAN)
    ));
    r.lines.push(format!("final loss {}", l.terminal()));
    r.diagnostics.insert("picard".into(), diag_json);
    Ok(r)
}

fn solve_pde_scenario(cfg: &RunConfig) -> Result<Report, CliError> {
    if cfg.f != FeedbackFn::Linear {
        return Err(CliError::Config(vec!["solve-pde supports linear feedback only".into()]));
    }
    if cfg.rho != 0.0 {
        return Err(CliError::Config(vec!["solve-pde has no common noise; set rho to 0".into()]));
    }
    let g = grid(cfg);
    let mut pc = PdeConfig::from_measure(&cfg.nu0, cfg.alpha, g, cfg.dx)?;
    pc.explosion_cap = cfg.explosion_cap;
    pc.explosion_window = cfg.explosion_window;
    if let Some(d) = &cfg.density {
        pc.snapshot_times = d.times.clone();
    }
    let sol = solve_pde(&pc)?;
    let mut t = Table::new(&["t", "L", "flux", "mass_defect"]);
    for (i, (fl, d)) in sol.flux.iter().zip(&sol.mass_defect).enumerate() {
        t.push(vec![g.time(i), sol.loss.values()[i], *fl, *d]);
    }
    let mut r = Report {
        explosion_time: sol.explosion_time,
        ..Report::default()
    };
    r.files.push(("loss".into(), t.to_bytes()?));
    if let Some(d) = &cfg.density {
        let xs = density_xs(d);
        let mut t = Table::new(&["t", "x", "V"]);
        for s in &sol.snapshots {
            for &x in &xs {
                t.push(vec![s.time, x, s.value_at(x)]);
            }
        }
        r.files.push(("snapshots".into(), t.to_bytes()?));
    }
    r.lines.push(format!("final loss {}", sol.final_state.loss));
    if let Some(te) = sol.explosion_time {
        r.abort = Some(format!("boundary flux exceeded the cap {} at t = {te}", cfg.explosion_cap));
    }
    let max_defect = sol.mass_defect.iter().map(|d| d.abs()).fold(0.0, f64::max);
    r.diagnostics.insert("max_mass_defect".into(), json!(max_defect));
    r.diagnostics.insert("max_clip".into(), json!(sol.max_clip));
    r.diagnostics.insert("warnings".into(), json!(sol.warnings));
    Ok(r)
}

fn jump(cfg: &RunConfig) -> Result<Report, CliError> {
    let d = jump_size_general(&JumpQuery {
        mu: &cfg.nu0,
        alpha: cfg.alpha,
        f: &cfg.f,
        l_minus: cfg.loss_bound,
    })?;
    let admissible = check_initial_admissible(&cfg.nu0, cfg.alpha, &cfg.f)?;
    let mut r = Report::default();
    r.lines.push(format!("jump size {d}"));
    r.lines.push(format!("admissible: {admissible}"));
    let body = json!({"jump_size": d, "admissible": admissible});
    r.files.push(("jump".into(), pretty(&body)));
    r.diagnostics.insert("jump_size".into(), json!(d));
    Ok(r)
}

fn check_regime(cfg: &RunConfig) -> Result<Report, CliError> {
    let c = contraction_certificate(cfg.alpha, &cfg.nu0, &cfg.f, cfg.loss_bound, cfg.loss_bound)?;
    let admissible = check_initial_admissible(&cfg.nu0, cfg.alpha, &cfg.f)?;
    let mut r = Report::default();
    r.lines.push(format!("weak-feedback: {}, certificate {c}", c < 1.0));
    r.lines.push(format!("admissible: {admissible}"));
    let body = json!({"weak_feedback": c < 1.0, "certificate": c, "admissible": admissible});
    r.files.push(("regime".into(), pretty(&body)));
    r.diagnostics.insert("certificate".into(), json!(c));
    Ok(r)
}

/// A random nondecreasing path from 0 to at most 0.9.
fn random_path(rng: &mut ChaCha8Rng, g: TimeGrid) -> LossPath {
    let top = rng.random_range(0.0..0.9);
    let w: Vec<f64> = (1..g.len()).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = w.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut acc = 0.0;
    let mut v = Vec::with_capacity(g.len());
    v.push(0.0);
    for x in w {
        acc += x / s * top;
        v.push(acc.min(top));
    }
    LossPath::new(g, v).expect("finite nondecreasing values")
}

fn verify_comparison(cfg: &RunConfig) -> Result<Report, CliError> {
    let g = grid(cfg);
    let drivers = DriverEnsemble::generate(&driver(cfg), g, cfg.m, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut t = Table::new(&["pair", "lhs", "rhs"]);
    let mut violations = 0;
    for k in 0..cfg.pairs {
        let (l, lb) = (random_path(&mut rng, g), random_path(&mut rng, g));
        let gap = comparison_gap(&l, &lb, &drivers, &cfg.nu0, cfg.alpha, &cfg.f)?;
        violations += usize::from(!(gap.lhs <= gap.rhs));
        t.push(vec![k as f64, gap.lhs, gap.rhs]);
    }
    let mut r = Report::default();
    r.lines.push("pair lhs rhs".into());
    for row in &t.rows {
        r.lines.push(format!("{} {} {}", row[0], row[1], row[2]));
    }
    r.files.push(("comparison".into(), t.to_bytes()?));
    r.lines.push(format!("pairs: {}, violations: {violations}", cfg.pairs));
    if violations > 0 {
        r.abort = Some(format!("comparison bound violated in {violations} pairs"));
    }
    r.diagnostics.insert("violations".into(), json!(violations));
    Ok(r)
}

fn nonphysical(cfg: &RunConfig) -> Result<Report, CliError> {
    let g = grid(cfg);
    let rep = nonphysical_scenario(&cfg.nu0, cfg.alpha, g, cfg.m, cfg.seed)?;
    let mut t = Table::new(&["t", "A", "L", "gamma_L"]);
    for (i, s) in g.times().enumerate() {
        t.push(vec![s, rep.drift[i], rep.candidate.values()[i], rep.gamma.values()[i]]);
    }
    let mut r = Report::default();
    r.files.push(("nonphysical".into(), t.to_bytes()?));
    r.lines.push(format!("residual {}", rep.residual));
    r.lines.push(format!("admissible: {}", rep.admissible));
    r.diagnostics.insert("residual".into(), json!(rep.residual));
    r.diagnostics.insert("admissible".into(), json!(rep.admissible));
    Ok(r)
}

fn measure_json(m: &Measure1D) -> Value {
    json!({"kind": "cdf", "breakpoints": m.breakpoints(), "cdf": m.cdf_values()})
}

fn blowup_restart_scenario(cfg: &RunConfig) -> Result<Report, CliError> {
    let p = particle_config(cfg);
    let threshold = cfg.jump_threshold.unwrap_or_else(|| particle_threshold(cfg.n));
    let restart_seed = cfg.restart_seed.unwrap_or(cfg.seed.wrapping_add(1));
    let mut r = Report::default();
    let Some(rep) = blowup_restart(&p, threshold, cfg.restart_delta, restart_seed)? else {
        r.lines.push(format!("no cascade of at least {threshold} before the horizon"));
        r.diagnostics.insert("event".into(), Value::Null);
        return Ok(r);
    };
    let g = grid(cfg);
    let mut t = Table::new(&["t", "original", "restarted"]);
    for (i, (a, b)) in rep.original.iter().zip(&rep.restarted).enumerate() {
        t.push(vec![rep.event.time + i as f64 * g.dt(), *a, *b]);
    }
    r.files.push(("restart".into(), t.to_bytes()?));
    let event = json!({
        "time": rep.event.time,
        "delta_l": rep.event.delta_l,
        "l_minus": rep.event.l_minus,
        "particle_jump": rep.particle_jump,
        "sup_gap": rep.sup_gap,
        "post": rep.event.post.as_ref().map(measure_json),
    });
    r.files.push(("event".into(), pretty(&event)));
    r.lines.push(format!(
        "cascade at t = {}: particles {}, jump condition {}",
        rep.event.time, rep.particle_jump, rep.event.delta_l
    ));
    r.lines.push(format!("restart sup gap {}", rep.sup_gap));
    r.diagnostics.insert("event".into(), event);
    Ok(r)
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("a JSON value serialises");
    s.push('\n');
    s.into_bytes()
}

fn density_measure(xs: &[f64], values: &[f64]) -> Result<Measure1D, CliError> {
    Ok(Measure1D::from_density_samples(xs, values)?)
}

/// Jumps on a loss path, and the physical jump of a pre-jump density if one
/// is given. `loss` holds `(t, L)` columns, `density` `(x, V)` columns.
pub fn blowup_events(
    loss: (&[f64], &[f64]),
    density: Option<(&[f64], &[f64])>,
    alpha: f64,
    threshold: f64,
) -> Result<Value, CliError> {
    let (ts, ls) = loss;
    if ts.len() < 2 {
        return Err(CliError::Input("the loss file needs at least two rows".into()));
    }
    let dt = ts[1] - ts[0];
    let g = TimeGrid::new(ts[ts.len() - 1] - ts[0], dt)?;
    if g.len() != ts.len() {
        return Err(CliError::Input(format!(
            "loss times are not a uniform grid from {} with step {dt}",
            ts[0]
        )));
    }
    let path = LossPath::new(g, ls.to_vec())?;
    let jumps: Vec<Jump> = detect_jumps(&path, threshold)?
        .into_iter()
        .map(|j| Jump {
            time: j.time + ts[0],
            size: j.size,
        })
        .collect();
    let mut out = json!({"threshold": threshold, "events": jumps_json(&jumps)});
    if let Some((xs, vs)) = density {
        let m = density_measure(xs, vs)?;
        out["jump_condition"] = json!(jump_size(&m, alpha)?);
    }
    Ok(out)
}

/// The post-jump measure for a pre-jump density: `(x, cdf)` rows at the
/// shifted breakpoints. Without `delta_l` the physical jump is used.
pub fn restart_table(xs: &[f64], values: &[f64], alpha: f64, delta_l: Option<f64>) -> Result<(f64, Table), CliError> {
    let m = density_measure(xs, values)?;
    let d = match delta_l {
        Some(d) => d,
        None => jump_size(&m, alpha)?,
    };
    let post = restart_density(&m, alpha, d)?;
    let mut t = Table::new(&["x", "cdf"]);
    for (x, c) in post.breakpoints().iter().zip(post.cdf_values()) {
        t.push(vec![*x, *c]);
    }
    Ok((d, t))
}
