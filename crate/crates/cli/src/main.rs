use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use contagion::pjc::{jump_size_general, JumpQuery};
use contagion::FeedbackFn;
use contagion_cli::output::read_columns;
use contagion_cli::{
    blowup_events, parse_config, parse_measure, replay, restart_table, run, CliError, Overrides, Scenario,
};

/// Environment variable read when `--threads` is absent.
const THREADS_ENV: &str = "CONTAGION_THREADS";

#[derive(Parser)]
#[command(name = "contagion", version, about = "Contagion with absorption: particles, fixed point, PDE and jumps")]
struct Cli {
    /// Worker threads (default: CONTAGION_THREADS, else all cores). Results
    /// do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, or a file name with an extension for the primary
    /// output (other outputs and the manifest go next to it).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verify {
    /// Pathwise comparison bound on random pairs of loss paths.
    Comparison(RunArgs),
}

#[derive(Subcommand)]
enum Command {
    /// Run a config whose `scenario` field picks the scenario.
    Run(RunArgs),
    /// Run a named scenario from a config.
    Scenario {
        name: Scenario,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Finite particle system with cascades.
    Simulate {
        #[command(flatten)]
        args: RunArgs,
        /// File name for kernel density snapshots (needs `density` in the config).
        #[arg(long)]
        density_out: Option<String>,
    },
    /// Fixed-point iteration for the mean-field loss.
    SolveMv {
        #[command(flatten)]
        args: RunArgs,
        /// File name for the iteration diagnostics.
        #[arg(long)]
        diag: Option<String>,
    },
    /// Finite-difference solve of the boundary-loss PDE.
    SolvePde {
        #[command(flatten)]
        args: RunArgs,
        /// File name for profile snapshots (needs `density` in the config).
        #[arg(long)]
        snapshots: Option<String>,
    },
    /// Physical jump size, from a config or directly from a measure.
    JumpSize {
        #[arg(long, conflicts_with_all = ["measure", "f", "l_minus"], required_unless_present = "measure")]
        config: Option<PathBuf>,
        #[arg(long, requires = "config")]
        seed: Option<u64>,
        #[arg(long, requires = "config")]
        out: Option<PathBuf>,
        /// Measure JSON: `{breakpoints, cdf}` or a `nu0` object.
        #[arg(long, requires = "alpha")]
        measure: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Feedback kind (linear or neglog).
        #[arg(long)]
        f: Option<String>,
        /// Loss already realised before the jump.
        #[arg(long)]
        l_minus: Option<f64>,
    },
    /// Weak-feedback certificate and initial admissibility.
    CheckRegime(RunArgs),
    /// Pathwise comparison bound on random pairs of loss paths.
    VerifyComparison(RunArgs),
    /// Verification harnesses.
    Verify {
        #[command(subcommand)]
        what: Verify,
    },
    /// Continuous but unphysical solution driven by an added drift.
    Nonphysical(RunArgs),
    /// First large cascade, its jump size, and a restart from after it.
    BlowupRestart(RunArgs),
    /// Jumps on a loss path (JSON on standard output).
    Blowup {
        /// CSV with columns t, loss.
        #[arg(long)]
        loss: PathBuf,
        /// CSV with columns x, density of the pre-jump state.
        #[arg(long)]
        density: Option<PathBuf>,
        #[arg(long)]
        alpha: f64,
        /// Increment per step that counts as a jump.
        #[arg(long, default_value_t = 0.02)]
        threshold: f64,
    },
    /// Shift a pre-jump density past its jump and write the result.
    Restart {
        /// CSV with columns x, density.
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        alpha: f64,
        /// Jump size; the physical jump of the density when absent.
        #[arg(long)]
        delta_l: Option<f64>,
        /// Output CSV with columns x, cdf.
        #[arg(long, default_value = "restart.csv")]
        out: PathBuf,
    },
    /// Re-run a manifest and check that every output is byte-identical.
    Replay {
        manifest: PathBuf,
        /// Write the replay here instead of the recorded directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Prints a line, ignoring a closed pipe (e.g. output piped into `head`).
fn say(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn set_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| CliError::Config(vec![format!("{THREADS_ENV} must be a positive integer, got \"{v}\"")]))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config(vec!["thread count must be at least 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(vec![format!("thread pool: {e}")]))?;
    }
    Ok(())
}

/// Splits `--out` into a directory and, when it names a file, the primary
/// output's file name.
fn split_out(out: Option<PathBuf>) -> (Option<PathBuf>, Option<String>) {
    match out {
        Some(p) if p.extension().is_some() => {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            let dir = match p.parent() {
                Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
                _ => PathBuf::from("."),
            };
            (Some(dir), name)
        }
        other => (other, None),
    }
}

fn run_config(args: RunArgs, scenario: Option<Scenario>, files: Vec<(&str, Option<String>)>) -> Result<u8, CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    let (out, primary_file) = split_out(args.out);
    let overrides = Overrides {
        scenario,
        seed: args.seed,
        out,
        files: files
            .into_iter()
            .filter_map(|(role, name)| name.map(|n| (role.to_string(), n)))
            .collect(),
        primary_file,
    };
    let cfg = parse_config(&text, &overrides).map_err(CliError::Config)?;
    let outcome = run(&cfg)?;
    for l in &outcome.lines {
        say(l);
    }
    Ok(outcome.exit_code)
}

fn direct_jump_size(measure: &Path, alpha: f64, f: Option<String>, l_minus: Option<f64>) -> Result<u8, CliError> {
    let text =
        fs::read_to_string(measure).map_err(|e| CliError::Input(format!("{}: {e}", measure.display())))?;
    let mu = parse_measure(&text).map_err(CliError::Config)?;
    let f: FeedbackFn = match f {
        None => FeedbackFn::Linear,
        Some(kind) => serde_json::from_value(serde_json::json!({ "kind": kind }))
            .map_err(|e| CliError::Config(vec![format!("--f: {e}")]))?,
    };
    let d = jump_size_general(&JumpQuery {
        mu: &mu,
        alpha,
        f: &f,
        l_minus: l_minus.unwrap_or(0.0),
    })?;
    say(&d.to_string());
    Ok(0)
}

fn two_columns(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let (_, mut cols) = read_columns(path)?;
    if cols.len() < 2 {
        return Err(CliError::Input(format!("{}: needs two columns", path.display())));
    }
    let b = cols.swap_remove(1);
    let a = cols.swap_remove(0);
    Ok((a, b))
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    set_threads(cli.threads)?;
    match cli.command {
        Command::Run(a) => run_config(a, None, vec![]),
        Command::Scenario { name, args } => run_config(args, Some(name), vec![]),
        Command::Simulate { args, density_out } => {
            run_config(args, Some(Scenario::Simulate), vec![("density", density_out)])
        }
        Command::SolveMv { args, diag } => run_config(args, Some(Scenario::SolveMv), vec![("diag", diag)]),
        Command::SolvePde { args, snapshots } => {
            run_config(args, Some(Scenario::SolvePde), vec![("snapshots", snapshots)])
        }
        Command::JumpSize {
            config,
            seed,
            out,
            measure,
            alpha,
            f,
            l_minus,
        } => match (config, measure, alpha) {
            (Some(config), _, _) => run_config(RunArgs { config, seed, out }, Some(Scenario::JumpSize), vec![]),
            (None, Some(m), Some(a)) => direct_jump_size(&m, a, f, l_minus),
            _ => Err(CliError::Config(vec!["jump-size needs --config, or --measure with --alpha".into()])),
        },
        Command::CheckRegime(a) => run_config(a, Some(Scenario::CheckRegime), vec![]),
        Command::VerifyComparison(a) | Command::Verify { what: Verify::Comparison(a) } => {
            run_config(a, Some(Scenario::VerifyComparison), vec![])
        }
        Command::Nonphysical(a) => run_config(a, Some(Scenario::Nonphysical), vec![]),
        Command::BlowupRestart(a) => run_config(a, Some(Scenario::BlowupRestart), vec![]),
        Command::Blowup {
            loss,
            density,
            alpha,
            threshold,
        } => {
            let (ts, ls) = two_columns(&loss)?;
            let dens = density.as_deref().map(two_columns).transpose()?;
            let events = blowup_events(
                (&ts, &ls),
                dens.as_ref().map(|(x, v)| (x.as_slice(), v.as_slice())),
                alpha,
                threshold,
            )?;
            say(&serde_json::to_string_pretty(&events).expect("a JSON value serialises"));
            Ok(0)
        }
        Command::Restart {
            density,
            alpha,
            delta_l,
            out,
        } => {
            let (xs, vs) = two_columns(&density)?;
            let (d, table) = restart_table(&xs, &vs, alpha, delta_l)?;
            fs::write(&out, table.to_bytes()?)?;
            say(&format!("jump {d}, post-jump measure written to {}", out.display()));
            Ok(0)
        }
        Command::Replay { manifest, out } => {
            let (mismatched, outcome) = replay(&manifest, out)?;
            for l in &outcome.lines {
                say(l);
            }
            if mismatched.is_empty() {
                say("replay: all outputs identical");
                Ok(outcome.exit_code)
            } else {
                eprintln!("replay: outputs differ: {}", mismatched.join(", "));
                Ok(2)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            match &e {
                CliError::Config(errs) => {
                    for msg in errs {
                        eprintln!("error: {msg}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
