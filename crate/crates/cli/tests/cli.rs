use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn contagion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contagion"))
        .args(args)
        .env_remove("CONTAGION_THREADS")
        .output()
        .expect("the binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SIMULATE: &str = r#"{
    "scenario": "simulate", "alpha": 0.8, "n": 3000, "seed": 4,
    "nu0": {"kind": "uniform", "a": 0, "b": 1.5},
    "grid": {"horizon": 0.2, "dt": 0.002},
    "density": {"delta": 0.1, "times": [0.1, 0.2], "x_max": 2, "points": 21}
}"#;

#[test]
fn check_regime_prints_the_certificate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"scenario": "check-regime", "alpha": 0.5, "nu0": {"kind": "uniform", "a": 0.5, "b": 1.5}}"#,
    );
    let out = tmp.path().join("out");
    let o = contagion(&["check-regime", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("weak-feedback: true, certificate 0.5"));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert!(m["config_sha256"].as_str().unwrap().len() == 64);
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_errors_are_all_reported_with_exit_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"scenario": "simulate", "rho": 1.2, "nu0": {"kind": "uniform", "a": 0, "b": 1}, "grid": {"horizon": 1, "dt": 0.1}}"#,
    );
    let o = contagion(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("error: missing field: alpha"), "{err}");
    assert!(err.contains("error: rho must be in [0,1)"), "{err}");
}

#[test]
fn subcommand_and_config_scenario_must_agree() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SIMULATE);
    let o = contagion(&["solve-pde", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scenario \"simulate\""));
}

#[test]
fn repeated_runs_are_byte_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SIMULATE);
    let dirs: Vec<_> = ["1", "3"]
        .iter()
        .map(|threads| {
            let d = tmp.path().join(format!("t{threads}"));
            let o = contagion(&["--threads", threads, "simulate", "--config", &cfg, "--out", d.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            d
        })
        .collect();
    let again = tmp.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_contagion"))
        .args(["simulate", "--config", &cfg, "--out", again.to_str().unwrap()])
        .env("CONTAGION_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(manifest(&again)["threads"], 2);
    for name in ["loss.csv", "density.csv"] {
        let first = fs::read(dirs[0].join(name)).unwrap();
        assert_eq!(first, fs::read(dirs[1].join(name)).unwrap(), "{name}");
        assert_eq!(first, fs::read(again.join(name)).unwrap(), "{name}");
    }
    assert_eq!(manifest(&dirs[0])["outputs"], manifest(&dirs[1])["outputs"]);
}

#[test]
fn csv_outputs_have_a_header_full_precision_and_lf_endings() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SIMULATE);
    let out = tmp.path().join("o");
    let o = contagion(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let number = regex_free_check;
    for (name, header) in [("loss.csv", "t,L"), ("density.csv", "t,x,V")] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(header));
        for line in lines {
            for field in line.split(',') {
                assert!(number(field), "{name}: {field}");
            }
        }
    }
}

/// `d.dddddddddddddddde±x`: 17 significant digits in scientific notation.
fn regex_free_check(field: &str) -> bool {
    let f = field.strip_prefix('-').unwrap_or(field);
    let Some((mantissa, exp)) = f.split_once('e') else {
        return false;
    };
    let b = mantissa.as_bytes();
    mantissa.len() == 18
        && b[0].is_ascii_digit()
        && b[1] == b'.'
        && b[2..].iter().all(u8::is_ascii_digit)
        && exp.trim_start_matches('-').parse::<u32>().is_ok()
        && field.parse::<f64>().is_ok()
}

#[test]
fn out_can_name_the_primary_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SIMULATE);
    let target = tmp.path().join("run").join("L.csv");
    let o = contagion(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        target.to_str().unwrap(),
        "--density-out",
        "dens.csv",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("run");
    for name in ["L.csv", "dens.csv", "manifest.json"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    let m = manifest(&dir);
    assert!(m["outputs"]["L.csv"].is_string());
    assert!(m["outputs"]["dens.csv"].is_string());
}

#[test]
fn replay_reproduces_outputs_and_flags_tampering() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SIMULATE);
    let out = tmp.path().join("first");
    let o = contagion(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "11"]);
    assert_eq!(o.status.code(), Some(0));
    let manifest_path = out.join("manifest.json");
    let second = tmp.path().join("second");
    let o = contagion(&["replay", manifest_path.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("all outputs identical"));
    assert_eq!(manifest(&second)["seed"], 11);
    assert_eq!(fs::read(out.join("loss.csv")).unwrap(), fs::read(second.join("loss.csv")).unwrap());

    let mut m = manifest(&out);
    m["outputs"]["loss.csv"] = Value::String("0".repeat(64));
    let forged = tmp.path().join("forged.json");
    fs::write(&forged, m.to_string()).unwrap();
    let third = tmp.path().join("third");
    let o = contagion(&["replay", forged.to_str().unwrap(), "--out", third.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.csv"));
}

#[test]
fn pde_explosion_exits_2_with_the_time_in_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "p.json",
        r#"{"scenario": "solve-pde", "alpha": 2, "dx": 0.005,
            "nu0": {"kind": "uniform", "a": 0, "b": 0.5},
            "grid": {"horizon": 0.05, "dt": 0.0001}}"#,
    );
    let out = tmp.path().join("pde");
    let o = contagion(&["solve-pde", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    let m = manifest(&out);
    assert_eq!(m["status"], "numerical-abort");
    let t = m["explosion_time"].as_f64().unwrap();
    assert!(t > 0.0 && t < 0.05);
}

#[test]
fn weak_pde_run_succeeds_with_snapshots() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "p.json",
        r#"{"scenario": "solve-pde", "alpha": 0.5, "dx": 0.01,
            "nu0": {"kind": "uniform", "a": 0, "b": 2},
            "grid": {"horizon": 0.2, "dt": 0.001},
            "density": {"times": [0, 0.2], "x_max": 3, "points": 31}}"#,
    );
    let out = tmp.path().join("pde");
    let o = contagion(&["solve-pde", "--config", &cfg, "--out", out.to_str().unwrap(), "--snapshots", "V.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("V.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 31);
    assert_eq!(manifest(&out)["explosion_time"], Value::Null);
}

#[test]
fn jump_size_from_a_measure_file() {
    let tmp = TempDir::new().unwrap();
    // density 2 on [0, 1/2] with alpha = 1 loses everything at once
    let m = write_config(tmp.path(), "m.json", r#"{"breakpoints": [0, 0.5], "cdf": [0, 1]}"#);
    let o = contagion(&["jump-size", "--measure", &m, "--alpha", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 1.0);
    let o = contagion(&["jump-size", "--measure", &m, "--alpha", "0.4"]);
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn blowup_and_restart_subcommands() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("L.csv"), "t,L\n0,0\n0.1,0.01\n0.2,0.5\n0.3,0.52\n").unwrap();
    // density 3 on [0, 0.2] then 0.4 on [0.2, 1]: a partial jump for alpha = 1
    fs::write(
        tmp.path().join("V.csv"),
        "x,V\n0,3\n0.1999,3\n0.2,0.4\n1,0.4\n1.0001,0\n",
    )
    .unwrap();
    let p = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();
    let o = contagion(&["blowup", "--loss", &p("L.csv"), "--density", &p("V.csv"), "--alpha", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let events: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(events["events"].as_array().unwrap().len(), 1);
    assert!((events["events"][0]["time"].as_f64().unwrap() - 0.2).abs() < 1e-12);
    let d = events["jump_condition"].as_f64().unwrap();
    assert!(d > 0.0 && d < 1.0, "{d}");

    let o = contagion(&["restart", "--density", &p("V.csv"), "--alpha", "1", "--out", &p("R.csv")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(p("R.csv")).unwrap();
    assert!(text.starts_with("x,cdf\n"));
    let last: f64 = text.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    // the restart keeps what the jump did not take
    assert!((last - (0.92 - d)).abs() < 1e-3, "{last} {d}");
    assert!((d - 0.6 / 0.6 * 0.52 / 0.6).abs() < 1e-3, "{d}");
}

#[test]
fn verify_comparison_passes_on_shared_drivers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "v.json",
        r#"{"scenario": "verify-comparison", "alpha": 0.5, "m": 500, "pairs": 5,
            "nu0": {"kind": "uniform", "a": 0.2, "b": 1},
            "grid": {"horizon": 0.1, "dt": 0.005}}"#,
    );
    let out = tmp.path().join("v");
    let o = contagion(&["verify", "comparison", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("violations: 0"));
    assert_eq!(fs::read_to_string(out.join("comparison.csv")).unwrap().lines().count(), 6);
}
