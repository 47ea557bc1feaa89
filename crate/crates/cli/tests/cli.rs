use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fiberload"));
    cmd.env_remove("FIBERLOAD_SPECIES");
    cmd
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hcpcf.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fiberload")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(text.trim()).expect("stderr is a JSON error");
    v["error"].clone()
}

fn small_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(shipped_config()).unwrap();
    let text = text
        .replace("n_atoms = 10000", "n_atoms = 400")
        .replace("recapture_atoms = 2000", "recapture_atoms = 200");
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn capture_range_matches_closed_form() {
    let cfg = shipped_config();
    let v = stdout_json(&run(&["capture-range", "--config", cfg.to_str().unwrap()]));
    assert_eq!(v["command"], "capture-range");
    assert_eq!(v["schema_version"], 1);
    let range = v["payload"]["capture_range_m"].as_f64().unwrap();
    assert!((range - 175.4e-6).abs() < 1e-6, "{range}");
    let nu = v["payload"]["transverse_trap_frequency_hz"].as_f64().unwrap();
    assert!((nu / 80e3 - 1.0).abs() < 0.02);
}

#[test]
fn capture_range_rejects_threshold_above_depth() {
    let cfg = shipped_config();
    let out = run(&["capture-range", "--config", cfg.to_str().unwrap(), "--threshold-K", "0.01"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["category"], "config");
}

#[test]
fn runs_without_config() {
    let v = stdout_json(&run(&["capture-range"]));
    assert!(v["payload"]["capture_range_m"].as_f64().unwrap() > 0.0);
}

#[test]
fn spectrum_writes_csv_and_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shipped_config();
    let csv = dir.path().join("s.csv");
    let json = dir.path().join("s.json");
    let out = run(&[
        "spectrum",
        "--config",
        cfg.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("detuning_hz,transmission,optical_depth"));
    assert_eq!(lines.count(), 601);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let points = v["payload"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 601);
    for p in points {
        let t = p["transmission"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&t));
    }
}

#[test]
fn probe_counts_feed_fit_od() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shipped_config();
    let csv = dir.path().join("counts.csv");
    let out = run(&[
        "probe-counts",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["seed"], 5);
    let photons = v["payload"]["photons_per_gate"].as_f64().unwrap();
    assert!((photons - 53.4).abs() < 0.1);

    let fit = stdout_json(&run(&[
        "fit-od",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
    ]));
    let p = &fit["payload"];
    assert_eq!(p["converged"], true);
    for (name, truth, tol) in [("od_f0", 300.0, 45.0), ("od_f1", 1000.0, 150.0), ("od_f2", 1000.0, 150.0)] {
        let got = p["best_fit"][name].as_f64().unwrap();
        assert!((got - truth).abs() < tol, "{name}: {got}");
        assert!(p["standard_errors"][name].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn fit_od_with_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = std::fs::read_to_string(shipped_config()).unwrap() + "\n[fit]\nbootstrap_replicates = 20\n";
    let cfg = dir.path().join("boot.toml");
    std::fs::write(&cfg, &cfg_text).unwrap();
    let csv = dir.path().join("counts.csv");
    assert!(run(&["probe-counts", "--config", cfg.to_str().unwrap(), "--csv", csv.to_str().unwrap()])
        .status
        .success());
    let fit = stdout_json(&run(&["fit-od", "--config", cfg.to_str().unwrap(), "--data", csv.to_str().unwrap()]));
    let u = &fit["payload"]["uncertainties"];
    assert!(u["method"].to_string().contains("bootstrap"), "{u}");
    assert_eq!(fit["seed"], 1);
}

#[test]
fn atom_number_from_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    // A quarter of 1 nW absorbed for 100 ns.
    let mut text = String::from("time_s,power_ref_W,power_atoms_W\n");
    for i in 0..=100 {
        let t = i as f64 * 1e-9;
        let atoms = if i < 100 { 0.75e-9 } else { 1e-9 };
        text.push_str(&format!("{t:e},{:e},{atoms:e}\n", 1e-9));
    }
    std::fs::write(&trace, text).unwrap();
    let cfg = shipped_config();
    let v = stdout_json(&run(&[
        "atom-number",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        trace.to_str().unwrap(),
    ]));
    let p = &v["payload"];
    assert!(p["estimate"]["atom_number"].as_f64().unwrap() > 0.0);
    assert!(p["column_od"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_loading_single_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let traj = dir.path().join("traj.csv");
    let v = stdout_json(&run(&[
        "simulate-loading",
        "--config",
        cfg.to_str().unwrap(),
        "--recapture",
        "--trajectories",
        traj.to_str().unwrap(),
    ]));
    let r = &v["payload"]["result"];
    assert_eq!(r["n_sampled"], 400);
    let hist = r["fate_histogram"].as_object().unwrap();
    let total: u64 = hist.values().map(|x| x.as_u64().unwrap()).sum();
    assert_eq!(total, 400);
    assert!(v["payload"]["recapture"]["thermal"]["cumulative_survival"].is_array());
    let rows = std::fs::read_to_string(&traj).unwrap().lines().count();
    assert_eq!(rows, 401);

    let csv = dir.path().join("sweep.csv");
    let v = stdout_json(&run(&[
        "simulate-loading",
        "--config",
        cfg.to_str().unwrap(),
        "--sweep",
        "--csv",
        csv.to_str().unwrap(),
    ]));
    assert_eq!(v["payload"]["sweep"].as_array().unwrap().len(), 5);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("trap_depth_K,efficiency,efficiency_stderr\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn too_few_atoms_is_a_config_error() {
    let out = run(&["simulate-loading", "--atoms", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_fails() {
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text, needle) in [
        ("unknown.toml", "[trap]\nbogus = 1\n", "bogus"),
        ("units.toml", "[trap]\ntrap_depth_mK = 5\n", "trap_depth_K"),
        ("syntax.toml", "[trap\n", "TOML"),
        ("negative.toml", "[trap]\ntrap_depth_K = -1.0\n", "trap_depth_K"),
    ] {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        let out = run(&["spectrum", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        let err = stderr_error(&out);
        assert_eq!(err["code"], 2);
        assert!(err["message"].as_str().unwrap().contains(needle), "{name}: {err}");
    }
    let out = run(&["spectrum", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("order.csv", "detuning_hz,counts\n2,10\n1,10\n"),
        ("header.csv", "freq,counts\n1,10\n2,10\n"),
        ("value.csv", "detuning_hz,counts\n1,ten\n2,10\n"),
        ("empty.csv", "detuning_hz,counts\n"),
    ] {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        let out = run(&["fit-od", "--data", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(3), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(stderr_error(&out)["category"], "data");
    }
    let out = run(&["atom-number", "--data", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_species_file_is_a_config_error() {
    let out = run(&["spectrum", "--species", "/nonexistent/species.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn echo_rerun_reproduces_payload_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (csv1, csv2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let (out1, out2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let first = run(&[
        "simulate-loading",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--csv",
        csv1.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert!(first.status.success());
    // Re-run from the envelope alone: the echo carries the overridden seed.
    let second = run(&[
        "simulate-loading",
        "--config",
        out1.to_str().unwrap(),
        "--csv",
        csv2.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    let a: Value = serde_json::from_str(&std::fs::read_to_string(&out1).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&std::fs::read_to_string(&out2).unwrap()).unwrap();
    assert_eq!(a["seed"], 9);
    assert_eq!(a["payload"], b["payload"]);
    assert_eq!(a["config"], b["config"]);
    assert_eq!(std::fs::read(&csv1).unwrap(), std::fs::read(&csv2).unwrap());

    let (s1, s2) = (dir.path().join("s1.csv"), dir.path().join("s2.csv"));
    for (path, cfg) in [(&s1, cfg.clone()), (&s2, out1.clone())] {
        assert!(run(&["spectrum", "--config", cfg.to_str().unwrap(), "--csv", path.to_str().unwrap()])
            .status
            .success());
    }
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let one = stdout_json(&run(&["simulate-loading", "--config", cfg.to_str().unwrap(), "--threads", "1"]));
    let four = stdout_json(&run(&["simulate-loading", "--config", cfg.to_str().unwrap(), "--threads", "4"]));
    assert_eq!(one["payload"], four["payload"]);
}
