use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kamtori::io::TorusFile;
use kamtori::poisson::registry::build_system;
use kamtori::{Frequency, TorusState};
use serde_json::{json, Value};
use tempfile::TempDir;

fn kamtori(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kamtori")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn pendulum_config(eps: f64) -> Value {
    json!({
        "system": { "name": "pendulum", "params": { "epsilon": eps } },
        "omega": [0.6180339887498949],
        "gamma": 0.1,
        "sigma": 1.0,
        "initial_torus": "flat",
        "modes": [64],
        "rho_0": 0.5
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Solves the pendulum at `eps` into `dir/run`; returns the config and output paths.
fn solved(dir: &Path, eps: f64) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "pendulum.json", &pendulum_config(eps));
    let out = dir.join("run");
    let res = kamtori(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    (cfg, out)
}

#[test]
fn solve_writes_artifacts_that_round_trip() {
    let tmp = TempDir::new().unwrap();
    let (_, out) = solved(tmp.path(), 1e-3);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["verdict"], "converged");
    let final_eps = report["final_eps"].as_f64().unwrap();
    assert!(final_eps <= 1e-12);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));

    let file: TorusFile = serde_json::from_value(read_json(&out.join("torus.json"))).unwrap();
    assert_eq!((file.n, file.m, file.cutoffs.clone()), (1, 2, vec![64]));
    let sys = build_system("pendulum", &[("epsilon".to_string(), 1e-3)].into()).unwrap();
    let freq = Frequency::new(file.omega.clone(), 0.1, 1.0).unwrap();
    let st = TorusState::new(sys, file.to_embedding().unwrap(), freq, 0.0).unwrap();
    assert!((st.eps() - final_eps).abs() <= 1e-12 * final_eps, "{} vs {final_eps}", st.eps());

    let samples = fs::read_to_string(out.join("samples.csv")).unwrap();
    let mut lines = samples.lines();
    assert_eq!(lines.next().unwrap(), "theta_0,k_0,k_1,e_0,e_1");
    assert!(lines.count() >= 129);
}

#[test]
fn reruns_are_identical() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = solved(tmp.path(), 1e-3);
    let again = tmp.path().join("again");
    assert_eq!(code(&kamtori(&["solve", "--config", s(&cfg), "--out", s(&again)])), 0);
    for f in ["report.json", "torus.json", "samples.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn strip_loss_violation_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = pendulum_config(1e-3);
    cfg["delta_0"] = json!(0.05);
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let res = kamtori(&["solve", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("delta_0") && stderr(&res).contains("rho_0/12"), "{}", stderr(&res));
}

#[test]
fn malformed_config_reports_location() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, "{\n  \"system\": { \"name\": \"pendulum\" },\n  \"omega\": [0.6,\n}").unwrap();
    let res = kamtori(&["solve", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("line 4"), "{}", stderr(&res));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&kamtori(&[])), 1);
    assert_eq!(code(&kamtori(&["solve", "--config"])), 1);
    assert_eq!(code(&kamtori(&["--help"])), 0);
}

#[test]
fn unreachable_target_keeps_best_effort_torus() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = pendulum_config(1e-3);
    cfg["solver"] = json!({ "target": 1e-20, "max_iter": 6 });
    let path = write_config(tmp.path(), "tight.json", &cfg);
    let out = tmp.path().join("o");
    let res = kamtori(&["solve", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    let report = read_json(&out.join("report.json"));
    assert_ne!(report["verdict"], "converged");
    assert!(report["final_eps"].as_f64().unwrap() <= 1e-12);
    assert!(out.join("torus.json").is_file());
}

#[test]
fn verify_accepts_converged_and_names_corruption() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = solved(tmp.path(), 1e-3);
    let torus = out.join("torus.json");
    let res = kamtori(&["verify", "--torus", s(&torus), "--config", s(&cfg), "--horizon", "5", "--samples", "8"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let v = read_json(&out.join("verify.json"));
    assert!(v["failed"].as_array().unwrap().is_empty());

    let mut file = read_json(&torus);
    let list = file["coefficients"][0].as_array_mut().unwrap();
    let (idx, _) = list
        .iter()
        .enumerate()
        .filter(|(_, c)| c[0][0].as_i64().unwrap() != 0)
        .max_by(|a, b| a.1[2].as_f64().unwrap().abs().total_cmp(&b.1[2].as_f64().unwrap().abs()))
        .unwrap();
    let im = list[idx][2].as_f64().unwrap();
    list[idx][2] = json!(-im);
    let bad = tmp.path().join("bad");
    fs::create_dir_all(&bad).unwrap();
    let corrupted = write_config(&bad, "torus.json", &file);
    let res = kamtori(&["verify", "--torus", s(&corrupted), "--config", s(&cfg), "--samples", "8"]);
    assert_eq!(code(&res), 2);
    let v = read_json(&bad.join("verify.json"));
    let failed: Vec<&str> = v["failed"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(failed.contains(&"conjugacy") && failed.contains(&"invariance"), "{failed:?}");
    assert!(stderr(&res).contains("conjugacy"));
}

#[test]
fn zero_horizon_still_runs_identity_checks() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = solved(tmp.path(), 1e-3);
    let res = kamtori(&["verify", "--torus", s(&out.join("torus.json")), "--config", s(&cfg), "--horizon", "0"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let v = read_json(&out.join("verify.json"));
    let checks = v["checks"].as_array().unwrap();
    let conj = checks.iter().find(|c| c["name"] == "conjugacy").unwrap();
    assert_eq!(conj["value"].as_f64(), Some(0.0));
    assert_eq!(checks.len(), 4);
}

#[test]
fn verify_rejects_mismatched_torus() {
    let tmp = TempDir::new().unwrap();
    let (_, out) = solved(tmp.path(), 1e-3);
    let cfg = write_config(
        tmp.path(),
        "c4.json",
        &json!({
            "system": { "name": "coupled4d" },
            "omega": [0.97, 0.599492969087398],
            "gamma": 0.05, "sigma": 2.0, "modes": [8, 8], "rho_0": 0.5
        }),
    );
    let res = kamtori(&["verify", "--torus", s(&out.join("torus.json")), "--config", s(&cfg)]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("torus"), "{}", stderr(&res));
}

#[test]
fn certify_exit_codes_and_labels() {
    let tmp = TempDir::new().unwrap();
    // flat torus of the unperturbed pendulum: zero error
    let (_, out) = solved(tmp.path(), 0.0);
    let mut cfg = pendulum_config(0.0);
    cfg["certificate"] = json!({ "c_mode": "user", "c": 1.0, "r": 1.0 });
    let user = write_config(tmp.path(), "user.json", &cfg);
    let res = kamtori(&["certify", "--torus", s(&out.join("torus.json")), "--config", s(&user)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let c = read_json(&out.join("certificate.json"));
    assert_eq!(c["verdict"], "certified");
    assert_eq!(c["kappa"].as_f64(), Some(0.0));
    assert_eq!(c["rigorous"], true);

    // the flat guess at eps = 1e-3 has kappa far above 1/2 with c = 1
    let flat_dir = tmp.path().join("flat");
    fs::create_dir_all(&flat_dir).unwrap();
    let mut flat = read_json(&out.join("torus.json"));
    flat["coefficients"] = json!([[], [[[0], 0.6180339887498949, 0.0]]]);
    let flat_torus = write_config(&flat_dir, "torus.json", &flat);
    let mut cfg = pendulum_config(1e-3);
    cfg["certificate"] = json!({ "c_mode": "user", "c": 1.0 });
    let user = write_config(tmp.path(), "user3.json", &cfg);
    let res = kamtori(&["certify", "--torus", s(&flat_torus), "--config", s(&user)]);
    assert_eq!(code(&res), 3);
    let c = read_json(&flat_dir.join("certificate.json"));
    assert!(c["kappa"].as_f64().unwrap() > 0.5);
    assert_eq!(c["kappa_condition"]["pass"], false);

    let heur = write_config(tmp.path(), "heur.json", &pendulum_config(1e-3));
    let res = kamtori(&["certify", "--torus", s(&flat_torus), "--config", s(&heur)]);
    assert!(matches!(code(&res), 0 | 3));
    let c = read_json(&flat_dir.join("certificate.json"));
    assert!(c["label"].as_str().unwrap().contains("non-rigorous"));
    assert_eq!(c["rigorous"], false);
}

fn sweep_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(&header, vec!["value", "eps0", "iterations", "final_eps", "distance", "verdict", "error"]);
    r.records().map(|x| x.unwrap()).collect()
}

fn column(rows: &[csv::StringRecord], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn epsilon_sweep_distances_scale_linearly() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", &pendulum_config(1e-3));
    let out = tmp.path().join("sweep");
    let res = kamtori(&["sweep", "--config", s(&cfg), "--param", "epsilon", "--values", "1e-2,1e-3,1e-4", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = sweep_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| &r[5] == "converged"));
    let d = column(&rows, 4);
    for w in d.windows(2) {
        let ratio = w[0] / w[1];
        assert!((5.0..20.0).contains(&ratio), "{d:?}");
    }
    assert!(out.join("run_002/torus.json").is_file());
}

#[test]
fn mode_sweep_is_resolution_independent() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", &pendulum_config(1e-3));
    let out = tmp.path().join("sweep");
    let res = kamtori(&["sweep", "--config", s(&cfg), "--param", "modes", "--values", "32,64,128", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = sweep_rows(&out.join("sweep.csv"));
    let eps = column(&rows, 3);
    assert!(eps.iter().all(|e| *e <= 1e-12), "{eps:?}");
    let d = column(&rows, 4);
    assert!(d.iter().all(|x| (x - d[2]).abs() <= 1e-10 * d[2]), "{d:?}");
}

#[test]
fn sweep_input_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", &pendulum_config(1e-3));
    let out = tmp.path().join("sweep");
    for (param, values) in [("epsilon", ""), ("epsilon", " , "), ("stiffness", "1"), ("modes", "2.5")] {
        let res = kamtori(&["sweep", "--config", s(&cfg), "--param", param, "--values", values, "--out", s(&out)]);
        assert_eq!(code(&res), 1, "{param} {values:?}: {}", stderr(&res));
    }
}

#[test]
fn failed_sweep_runs_are_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", &pendulum_config(1e-3));
    let out = tmp.path().join("sweep");
    let res = kamtori(&["sweep", "--config", s(&cfg), "--param", "modes", "--values", "2,32", "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    let rows = sweep_rows(&out.join("sweep.csv"));
    assert_eq!(&rows[0][5], "error");
    assert!(rows[0][6].contains("modes"));
    assert_eq!(&rows[1][5], "converged");
}

#[test]
fn shipped_configs_solve() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = TempDir::new().unwrap();
    for name in ["pendulum", "scaled2d", "coupled4d"] {
        let cfg = root.join(format!("{name}.json"));
        let out = tmp.path().join(name);
        let res = kamtori(&["solve", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&res), 0, "{name}: {}", stderr(&res));
        let res = kamtori(&["verify", "--torus", s(&out.join("torus.json")), "--config", s(&cfg), "--samples", "8"]);
        assert_eq!(code(&res), 0, "{name}: {}", stderr(&res));
    }
}
