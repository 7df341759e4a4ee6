//! Run configuration: a JSON document validated field by field so that every
//! problem is reported at once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde_json::{Map, Value};

use contagion::{FeedbackFn, Measure1D, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Simulate,
    SolveMv,
    SolvePde,
    JumpSize,
    CheckRegime,
    VerifyComparison,
    Nonphysical,
    BlowupRestart,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Simulate,
        Scenario::SolveMv,
        Scenario::SolvePde,
        Scenario::JumpSize,
        Scenario::CheckRegime,
        Scenario::VerifyComparison,
        Scenario::Nonphysical,
        Scenario::BlowupRestart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Simulate => "simulate",
            Scenario::SolveMv => "solve-mv",
            Scenario::SolvePde => "solve-pde",
            Scenario::JumpSize => "jump-size",
            Scenario::CheckRegime => "check-regime",
            Scenario::VerifyComparison => "verify-comparison",
            Scenario::Nonphysical => "nonphysical",
            Scenario::BlowupRestart => "blowup-restart",
        }
    }

    fn needs_grid(self) -> bool {
        !matches!(self, Scenario::JumpSize | Scenario::CheckRegime)
    }

    /// Output roles with their default file names; the first is the primary
    /// output that `--out FILE` names.
    pub fn outputs(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Scenario::Simulate => &[("loss", "loss.csv"), ("density", "density.csv")],
            Scenario::SolveMv => &[("loss", "loss.csv"), ("diag", "diag.json")],
            Scenario::SolvePde => &[("loss", "loss.csv"), ("snapshots", "snapshots.csv")],
            Scenario::JumpSize => &[("jump", "jump.json")],
            Scenario::CheckRegime => &[("regime", "regime.json")],
            Scenario::VerifyComparison => &[("comparison", "comparison.csv")],
            Scenario::Nonphysical => &[("nonphysical", "nonphysical.csv")],
            Scenario::BlowupRestart => &[("restart", "restart.csv"), ("event", "event.json")],
        }
    }

    pub fn primary_output(self) -> &'static str {
        self.outputs()[0].0
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scenario \"{s}\""))
    }
}

/// Density snapshots: kernel estimates for `simulate` (which needs `delta`),
/// the solved profile for `solve-pde`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRequest {
    pub delta: Option<f64>,
    pub times: Vec<f64>,
    pub x_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub alpha: f64,
    pub rho: f64,
    pub f: FeedbackFn,
    pub nu0: Measure1D,
    /// Absent only for scenarios without time stepping.
    pub grid: Option<TimeGrid>,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub dx: f64,
    pub bridge_correction: bool,
    pub common_path: Option<Vec<f64>>,
    pub density: Option<DensityRequest>,
    pub jump_threshold: Option<f64>,
    pub restart_delta: f64,
    pub restart_seed: Option<u64>,
    pub pairs: usize,
    pub loss_bound: f64,
    pub explosion_cap: f64,
    pub explosion_window: f64,
    pub out: PathBuf,
    /// File names by output role, defaults filled in.
    pub files: BTreeMap<String, String>,
    /// The document this was parsed from, after overrides; stored in the
    /// manifest so a run can be replayed.
    pub source: Value,
}

/// Scalar fields that command-line flags may replace.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `(role, file name)` pairs.
    pub files: Vec<(String, String)>,
    /// File name for the scenario's primary output.
    pub primary_file: Option<String>,
}

const FIELDS: &[&str] = &[
    "scenario",
    "alpha",
    "rho",
    "f",
    "nu0",
    "grid",
    "n",
    "m",
    "seed",
    "tol",
    "max_iter",
    "dx",
    "bridge_correction",
    "common_path",
    "density",
    "jump_threshold",
    "restart_delta",
    "restart_seed",
    "pairs",
    "loss_bound",
    "explosion_cap",
    "explosion_window",
    "out",
    "files",
];

struct Fields<'a, 'e> {
    obj: &'a Map<String, Value>,
    prefix: &'static str,
    errors: &'e mut Vec<String>,
}

impl<'a, 'e> Fields<'a, 'e> {
    fn new(obj: &'a Map<String, Value>, prefix: &'static str, allowed: &[&str], errors: &'e mut Vec<String>) -> Self {
        for k in obj.keys() {
            if !allowed.contains(&k.as_str()) {
                errors.push(format!("unknown field: {prefix}{k}"));
            }
        }
        Self { obj, prefix, errors }
    }

    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn missing(&mut self, key: &str) {
        let msg = format!("missing field: {}{key}", self.prefix);
        self.err(msg);
    }

    fn f64_opt(&mut self, key: &str) -> Option<f64> {
        match self.obj.get(key)? {
            Value::Number(n) => n.as_f64(),
            _ => {
                let msg = format!("{}{key} must be a number", self.prefix);
                self.err(msg);
                None
            }
        }
    }

    fn f64_req(&mut self, key: &str) -> Option<f64> {
        if !self.obj.contains_key(key) {
            self.missing(key);
            return None;
        }
        self.f64_opt(key)
    }

    fn u64_opt(&mut self, key: &str) -> Option<u64> {
        let v = self.obj.get(key)?;
        match v.as_u64() {
            Some(n) => Some(n),
            None => {
                let msg = format!("{}{key} must be a nonnegative integer", self.prefix);
                self.err(msg);
                None
            }
        }
    }

    fn bool_opt(&mut self, key: &str) -> Option<bool> {
        match self.obj.get(key)? {
            Value::Bool(b) => Some(*b),
            _ => {
                let msg = format!("{}{key} must be true or false", self.prefix);
                self.err(msg);
                None
            }
        }
    }

    fn str_opt(&mut self, key: &str) -> Option<&'a str> {
        match self.obj.get(key)? {
            Value::String(s) => Some(s.as_str()),
            _ => {
                let msg = format!("{}{key} must be a string", self.prefix);
                self.err(msg);
                None
            }
        }
    }

    fn numbers(&mut self, key: &str) -> Option<Vec<f64>> {
        let v = self.obj.get(key)?;
        let xs: Option<Vec<f64>> = v.as_array().and_then(|a| a.iter().map(Value::as_f64).collect());
        if xs.is_none() {
            let msg = format!("{}{key} must be an array of numbers", self.prefix);
            self.err(msg);
        }
        xs
    }

    fn object(&mut self, key: &str) -> Option<&'a Map<String, Value>> {
        match self.obj.get(key)? {
            Value::Object(o) => Some(o),
            _ => {
                let msg = format!("{}{key} must be an object", self.prefix);
                self.err(msg);
                None
            }
        }
    }

    fn positive(&mut self, key: &str, v: Option<f64>) -> Option<f64> {
        match v {
            Some(x) if x > 0.0 && x.is_finite() => Some(x),
            Some(x) => {
                let msg = format!("{}{key} must be positive, got {x}", self.prefix);
                self.err(msg);
                None
            }
            None => None,
        }
    }
}

/// Parses a measure on its own, as `nu0` or as the serialised
/// `{breakpoints, cdf}` form.
pub fn parse_measure(text: &str) -> Result<Measure1D, Vec<String>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    let Some(obj) = doc.as_object() else {
        return Err(vec!["a measure must be a JSON object".into()]);
    };
    let mut errors = Vec::new();
    match parse_nu0(obj, &mut errors) {
        Some(m) if errors.is_empty() => Ok(m),
        _ => Err(errors),
    }
}

fn parse_nu0(obj: &Map<String, Value>, errors: &mut Vec<String>) -> Option<Measure1D> {
    let kind = match obj.get("kind") {
        None if obj.contains_key("cdf") => Some("cdf"),
        k => k.and_then(Value::as_str),
    };
    let allowed: &[&str] = match kind {
        Some("uniform") => &["kind", "a", "b"],
        Some("densities") => &["kind", "breakpoints", "densities"],
        Some("cdf") => &["kind", "breakpoints", "cdf"][usize::from(!obj.contains_key("kind"))..],
        _ => &["kind", "a", "b", "breakpoints", "densities", "cdf"],
    };
    let mut fl = Fields::new(obj, "nu0.", allowed, errors);
    let measure = match kind {
        None if !obj.contains_key("kind") => {
            fl.missing("kind");
            return None;
        }
        Some("uniform") => {
            let (a, b) = (fl.f64_req("a"), fl.f64_req("b"));
            Measure1D::uniform(a?, b?)
        }
        Some("densities") => {
            let bps = fl.numbers("breakpoints");
            let d = fl.numbers("densities");
            if !obj.contains_key("breakpoints") {
                fl.missing("breakpoints");
            }
            if !obj.contains_key("densities") {
                fl.missing("densities");
            }
            Measure1D::from_densities(bps?, &d?)
        }
        Some("cdf") => {
            let bps = fl.numbers("breakpoints");
            let c = fl.numbers("cdf");
            if !obj.contains_key("breakpoints") {
                fl.missing("breakpoints");
            }
            if !obj.contains_key("cdf") {
                fl.missing("cdf");
            }
            Measure1D::new(bps?, c?)
        }
        other => {
            fl.err(format!(
                "nu0.kind must be one of uniform, densities, cdf; got {}",
                other.map_or_else(|| obj["kind"].to_string(), |s| format!("\"{s}\""))
            ));
            return None;
        }
    };
    match measure {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(format!("nu0: {e}"));
            None
        }
    }
}

fn parse_grid(obj: &Map<String, Value>, errors: &mut Vec<String>) -> Option<TimeGrid> {
    let mut fl = Fields::new(obj, "grid.", &["horizon", "dt"], errors);
    let h = fl.f64_req("horizon");
    let dt = fl.f64_req("dt");
    match TimeGrid::new(h?, dt?) {
        Ok(g) => Some(g),
        Err(e) => {
            errors.push(format!("grid: {e}"));
            None
        }
    }
}

fn parse_density(obj: &Map<String, Value>, errors: &mut Vec<String>) -> Option<DensityRequest> {
    let mut fl = Fields::new(obj, "density.", &["delta", "times", "x_max", "points"], errors);
    let delta = fl.f64_opt("delta");
    let delta = fl.positive("delta", delta);
    let times = fl.numbers("times");
    if !obj.contains_key("times") {
        fl.missing("times");
    }
    let x_max = fl.f64_req("x_max");
    let x_max = fl.positive("x_max", x_max);
    let points = fl.u64_opt("points").unwrap_or(401);
    if points < 2 {
        fl.err("density.points must be at least 2".into());
    }
    Some(DensityRequest {
        delta,
        times: times?,
        x_max: x_max?,
        points: points as usize,
    })
}

fn valid_file_name(n: &str) -> bool {
    !n.is_empty() && !n.contains(['/', '\\']) && n != "." && n != ".."
}

/// Parses and validates a configuration, applying `overrides` first.
///
/// On failure every problem found is returned, one message per entry.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<RunConfig, Vec<String>> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    let Some(obj) = doc.as_object_mut() else {
        return Err(vec!["configuration must be a JSON object".into()]);
    };
    if let Some(s) = overrides.scenario {
        match obj.get("scenario").and_then(Value::as_str) {
            Some(given) if given != s.name() => {
                return Err(vec![format!(
                    "config is for scenario \"{given}\" but the {s} subcommand was used"
                )]);
            }
            _ => {
                obj.insert("scenario".into(), Value::String(s.name().into()));
            }
        }
    }
    if let Some(seed) = overrides.seed {
        obj.insert("seed".into(), seed.into());
    }
    if let Some(out) = &overrides.out {
        obj.insert("out".into(), Value::String(out.to_string_lossy().into_owned()));
    }
    let mut file_overrides = overrides.files.clone();
    let current = obj.get("scenario").and_then(Value::as_str).and_then(|s| s.parse::<Scenario>().ok());
    if let (Some(name), Some(k)) = (&overrides.primary_file, current) {
        file_overrides.push((k.primary_output().to_string(), name.clone()));
    }
    if !file_overrides.is_empty() {
        let files = obj.entry("files").or_insert_with(|| Value::Object(Map::new()));
        if let Value::Object(f) = files {
            for (role, name) in file_overrides {
                f.insert(role, Value::String(name));
            }
        }
    }
    let obj = doc.as_object().expect("checked above");
    let mut errors = Vec::new();
    let mut fl = Fields::new(obj, "", FIELDS, &mut errors);

    let scenario = match fl.str_opt("scenario") {
        Some(s) => match s.parse::<Scenario>() {
            Ok(k) => Some(k),
            Err(e) => {
                fl.err(e);
                None
            }
        },
        None => {
            if !obj.contains_key("scenario") {
                fl.missing("scenario");
            }
            None
        }
    };
    let alpha = fl.f64_req("alpha");
    let rho = fl.f64_opt("rho").unwrap_or(0.0);
    if !(0.0..1.0).contains(&rho) {
        fl.err(format!("rho must be in [0,1), got {rho}"));
    }
    let n = fl.u64_opt("n").unwrap_or(10_000) as usize;
    let m = fl.u64_opt("m").unwrap_or(20_000) as usize;
    if n == 0 || m == 0 {
        fl.err("n and m must be at least 1".into());
    }
    let seed = fl.u64_opt("seed").unwrap_or(0);
    let tol = fl.f64_opt("tol");
    let tol = fl.positive("tol", tol).unwrap_or(1e-4);
    let max_iter = fl.u64_opt("max_iter").unwrap_or(100) as usize;
    let dx = fl.f64_opt("dx");
    let dx = fl.positive("dx", dx).unwrap_or(2e-3);
    let bridge_correction = fl.bool_opt("bridge_correction").unwrap_or(false);
    let common_path = fl.numbers("common_path");
    let jump_threshold = fl.f64_opt("jump_threshold");
    let jump_threshold = fl.positive("jump_threshold", jump_threshold);
    let restart_delta = fl.f64_opt("restart_delta");
    let restart_delta = fl.positive("restart_delta", restart_delta).unwrap_or(1e-4);
    let restart_seed = fl.u64_opt("restart_seed");
    let pairs = fl.u64_opt("pairs").unwrap_or(100) as usize;
    let loss_bound = fl.f64_opt("loss_bound").unwrap_or(0.0);
    if !(0.0..1.0).contains(&loss_bound) {
        fl.err(format!("loss_bound must be in [0,1), got {loss_bound}"));
    }
    let explosion_cap = fl.f64_opt("explosion_cap");
    let explosion_cap = fl.positive("explosion_cap", explosion_cap).unwrap_or(50.0);
    let explosion_window = fl.f64_opt("explosion_window");
    let explosion_window = fl.positive("explosion_window", explosion_window).unwrap_or(0.05);
    let out = PathBuf::from(fl.str_opt("out").unwrap_or("out"));
    let f_val = obj.get("f").cloned();
    let nu0_obj = fl.object("nu0");
    let grid_obj = fl.object("grid");
    let density_obj = fl.object("density");
    let files_obj = fl.object("files");
    let has_nu0 = obj.contains_key("nu0");
    let has_grid = obj.contains_key("grid");

    let f = match f_val {
        None => Some(FeedbackFn::Linear),
        Some(v) => match serde_json::from_value::<FeedbackFn>(v) {
            Ok(f) => Some(f),
            Err(e) => {
                errors.push(format!("f: {e}"));
                None
            }
        },
    };
    let nu0 = match nu0_obj {
        Some(o) => parse_nu0(o, &mut errors),
        None => {
            if !has_nu0 {
                errors.push("missing field: nu0".into());
            }
            None
        }
    };
    let grid = match grid_obj {
        Some(o) => parse_grid(o, &mut errors),
        None => {
            if !has_grid && scenario.is_some_and(Scenario::needs_grid) {
                errors.push("missing field: grid".into());
            }
            None
        }
    };
    let density = density_obj.and_then(|o| parse_density(o, &mut errors));
    if let (Some(k), Some(d)) = (scenario, &density) {
        match k {
            Scenario::Simulate if d.delta.is_none() => errors.push("missing field: density.delta".into()),
            Scenario::Simulate | Scenario::SolvePde => {}
            _ => errors.push(format!("density output is not available for {k}")),
        }
    }
    let mut files = BTreeMap::new();
    if let Some(k) = scenario {
        for (role, name) in k.outputs() {
            files.insert(role.to_string(), name.to_string());
        }
        for (role, name) in files_obj.into_iter().flatten() {
            match (files.get_mut(role), name.as_str()) {
                (Some(slot), Some(n)) if valid_file_name(n) => *slot = n.to_string(),
                (Some(_), _) => errors.push(format!("files.{role} must be a plain file name")),
                (None, _) => errors.push(format!("unknown field: files.{role}")),
            }
        }
        let mut names: Vec<&String> = files.values().collect();
        names.sort();
        names.dedup();
        if names.len() < files.len() || files.values().any(|n| n == crate::MANIFEST) {
            errors.push("output file names must be distinct and differ from the manifest".into());
        }
    }
    if let (Some(p), Some(g)) = (&common_path, &grid) {
        if p.len() != g.len() {
            errors.push(format!("common_path has {} points, grid has {}", p.len(), g.len()));
        }
    }
    if common_path.is_some() && rho == 0.0 {
        errors.push("common_path needs rho > 0".into());
    }

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(RunConfig {
        scenario: scenario.expect("no errors"),
        alpha: alpha.expect("no errors"),
        rho,
        f: f.expect("no errors"),
        nu0: nu0.expect("no errors"),
        grid,
        n,
        m,
        seed,
        tol,
        max_iter,
        dx,
        bridge_correction,
        common_path,
        density,
        jump_threshold,
        restart_delta,
        restart_seed,
        pairs,
        loss_bound,
        explosion_cap,
        explosion_window,
        out,
        files,
        source: doc,
    })
}
