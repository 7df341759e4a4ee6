//! Scenario runner behind the `contagion` binary: validated JSON configs in,
//! CSV/JSON outputs and a manifest out.

pub mod config;
pub mod output;
mod scenarios;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use thiserror::Error;

pub use config::{parse_config, parse_measure, Overrides, RunConfig, Scenario};
pub use scenarios::{blowup_events, restart_table};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("{0}")]
    Input(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Core(#[from] contagion::Error),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    /// 2 for numerical aborts, 1 for everything the user can fix.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) | CliError::Core(contagion::Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

/// What a scenario produced, before anything is written.
#[derive(Debug, Default)]
pub struct Report {
    /// Lines for standard output.
    pub lines: Vec<String>,
    /// Output files by role; `RunConfig::files` maps roles to file names.
    pub files: Vec<(String, Vec<u8>)>,
    pub explosion_time: Option<f64>,
    /// Set when the run finished but hit a numerical stop condition.
    pub abort: Option<String>,
    pub diagnostics: Map<String, Value>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: u8,
    pub manifest: PathBuf,
    pub lines: Vec<String>,
}

fn config_hash(source: &Value) -> String {
    output::sha256_hex(serde_json::to_string(source).expect("a JSON value serialises").as_bytes())
}

/// Runs a validated config, writes its outputs and manifest into `cfg.out`.
///
/// Numerical failures still leave a manifest behind; the error is returned
/// after it is written.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let result = scenarios::execute(cfg);
    fs::create_dir_all(&cfg.out)?;
    let mut manifest = json!({
        "scenario": cfg.scenario.name(),
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.source,
        "config_sha256": config_hash(&cfg.source),
        "threads": rayon::current_num_threads(),
    });
    let m = manifest.as_object_mut().expect("object literal");
    let outcome = match result {
        Ok(report) => {
            let mut hashes = Map::new();
            for (role, bytes) in &report.files {
                let name = &cfg.files[role];
                fs::write(cfg.out.join(name), bytes)?;
                hashes.insert(name.clone(), Value::String(output::sha256_hex(bytes)));
            }
            m.insert("outputs".into(), Value::Object(hashes));
            m.insert("explosion_time".into(), json!(report.explosion_time));
            m.insert("diagnostics".into(), Value::Object(report.diagnostics));
            let (status, code) = match &report.abort {
                Some(msg) => {
                    m.insert("message".into(), Value::String(msg.clone()));
                    ("numerical-abort", 2)
                }
                None => ("ok", 0),
            };
            m.insert("status".into(), status.into());
            let mut lines = report.lines;
            if let Some(msg) = report.abort {
                lines.push(format!("numerical abort: {msg}"));
            }
            Ok((code, lines))
        }
        Err(e) => {
            m.insert("status".into(), "error".into());
            m.insert("message".into(), Value::String(e.to_string()));
            m.insert("outputs".into(), json!({}));
            Err(e)
        }
    };
    m.insert("wall_time_s".into(), json!(start.elapsed().as_secs_f64()));
    let path = cfg.out.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("a JSON value serialises");
    text.push('\n');
    fs::write(&path, text)?;
    let (exit_code, lines) = outcome?;
    Ok(RunOutcome {
        exit_code,
        manifest: path,
        lines,
    })
}

/// Re-runs the config stored in a manifest and compares output digests.
///
/// Returns the mismatching file names (empty when the replay reproduces the
/// original exactly) together with the new outcome.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<(Vec<String>, RunOutcome), CliError> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", manifest_path.display())))?;
    let (Some(source), Some(expected)) = (manifest.get("config"), manifest.get("outputs").and_then(Value::as_object))
    else {
        return Err(CliError::Input(format!(
            "{}: not a run manifest (needs config and outputs)",
            manifest_path.display()
        )));
    };
    let overrides = Overrides {
        out,
        ..Overrides::default()
    };
    let cfg = parse_config(&source.to_string(), &overrides).map_err(CliError::Config)?;
    let outcome = run(&cfg)?;
    let fresh: Value = serde_json::from_str(&fs::read_to_string(&outcome.manifest)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", outcome.manifest.display())))?;
    let fresh = fresh.get("outputs").and_then(Value::as_object).cloned().unwrap_or_default();
    let mut mismatched: Vec<String> = expected
        .iter()
        .filter(|(k, v)| fresh.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    mismatched.extend(fresh.keys().filter(|k| !expected.contains_key(*k)).cloned());
    Ok((mismatched, outcome))
}
