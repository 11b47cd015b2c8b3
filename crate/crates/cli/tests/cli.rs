use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nmlf::model::SwitchedSystem;
use nmlf::net::MlfBundle;
use nmlf::sim::{check_practical_stability, StabilityConfig, SwitchPolicy};
use serde_json::Value;
use tempfile::TempDir;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn nmlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmlf"))
        .args(args)
        .env("NMLF_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Trains the linear pair; returns the output directory.
fn train_pair(dir: &TempDir, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = dir.path().join(name);
    let cfg = config("no_common_lf.json");
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = nmlf(&args);
    (out, o)
}

#[test]
fn train_then_verify_and_repeat_bytes() {
    let dir = TempDir::new().unwrap();
    let (a, o) = train_pair(&dir, "a", &["--workers", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&a.join("report.json"));
    assert_eq!(report["outcome"], "certified");

    let cfg = config("no_common_lf.json");
    let v = nmlf(&["verify", "--config", s(&cfg), "--weights", s(&a.join("weights.json"))]);
    assert_eq!(code(&v), 0);
    let outcome: Value = serde_json::from_slice(&v.stdout).unwrap();
    assert_eq!(outcome["status"], "certified");

    let (b, o) = train_pair(&dir, "b", &["--workers", "1"]);
    assert_eq!(code(&o), 0);
    for f in ["report.json", "weights.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    // a widened switching set is not covered by the same weights
    let w = nmlf(&[
        "verify",
        "--config",
        s(&cfg),
        "--weights",
        s(&a.join("weights.json")),
        "--arbitrary-switching",
    ]);
    assert_eq!(code(&w), 1);
    let outcome: Value = serde_json::from_slice(&w.stdout).unwrap();
    let cex = outcome["counterexamples"].as_array().unwrap();
    assert!(cex.iter().any(|c| c["label"]["clause"] == "switching"));
}

#[test]
fn zero_rounds_exhausts_with_empty_report() {
    let dir = TempDir::new().unwrap();
    let (out, o) = train_pair(&dir, "z", &["--max-rounds", "0", "--retries", "0"]);
    assert_eq!(code(&o), 1);
    let report = json(&out.join("report.json"));
    assert_eq!(report["outcome"], "exhausted");
    assert_eq!(report["rounds_executed"], 0);
    assert!(out.join("weights.json").exists());
}

#[test]
fn random_weights_do_not_verify() {
    let dir = TempDir::new().unwrap();
    let (out, _) = train_pair(&dir, "r", &["--max-rounds", "0", "--retries", "0", "--seed", "5"]);
    let cfg = config("no_common_lf.json");
    let v = nmlf(&["verify", "--config", s(&cfg), "--weights", s(&out.join("weights.json"))]);
    assert_ne!(code(&v), 0);
    let outcome: Value = serde_json::from_slice(&v.stdout).unwrap();
    assert!(!outcome["counterexamples"].as_array().unwrap().is_empty());
}

#[test]
fn mode_count_mismatch_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let three = config("three_mode_discrete.json");
    let out = dir.path().join("w");
    let o = nmlf(&["train", "--config", s(&three), "--out", s(&out), "--max-rounds", "0", "--retries", "0"]);
    assert_eq!(code(&o), 1);
    let pair = config("no_common_lf.json");
    let v = nmlf(&["verify", "--config", s(&pair), "--weights", s(&out.join("weights.json"))]);
    assert_eq!(code(&v), 2);
}

#[test]
fn invalid_inputs_exit_two() {
    let dir = TempDir::new().unwrap();
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(config("no_common_lf.json")).unwrap()).unwrap();
    doc["epsilon_b"] = 6.0.into();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, doc.to_string()).unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&nmlf(&["train", "--config", s(&bad), "--out", s(&out)])), 2);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&nmlf(&["train", "--config", s(&missing), "--out", s(&out)])), 2);
    assert_eq!(code(&nmlf(&["train", "--bogus"])), 2);

    let cfg = config("no_common_lf.json");
    let o = Command::new(env!("CARGO_BIN_EXE_nmlf"))
        .args(["simulate", "--config", s(&cfg), "--out", s(&out)])
        .env("NMLF_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = nmlf(&["train", "--config", s(&cfg), "--out", s(&out), "--delta", "0"]);
    assert_eq!(code(&o), 2);
}

fn read_grid(path: &Path) -> Vec<Vec<Option<f64>>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|c| (!c.is_empty()).then(|| c.parse().unwrap())).collect())
        .collect()
}

#[test]
fn pendulum_grid_matches_direct_evaluation() {
    let dir = TempDir::new().unwrap();
    let cfg = config("pendulum.json");
    let w = dir.path().join("w");
    let o = nmlf(&["train", "--config", s(&cfg), "--out", s(&w), "--max-rounds", "0", "--retries", "0"]);
    assert_eq!(code(&o), 1);
    let g = dir.path().join("g");
    let o = nmlf(&[
        "export-grid",
        "--config",
        s(&cfg),
        "--weights",
        s(&w.join("weights.json")),
        "--resolution",
        "200",
        "--out",
        s(&g),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let sys = SwitchedSystem::load_config(&cfg).unwrap();
    let bundle = MlfBundle::decode_weights(&fs::read_to_string(w.join("weights.json")).unwrap()).unwrap();
    let manifest = json(&g.join("manifest.json"));
    assert_eq!(manifest["resolution"], 200);
    let pts: Vec<f64> = manifest["axes"][0]["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let cols: Vec<f64> = manifest["axes"][1]["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (id, net) in bundle.iter() {
        let grid = read_grid(&g.join(format!("V_{id}.csv")));
        assert_eq!(grid.len(), 200);
        assert!(grid.iter().all(|r| r.len() == 200));
        // the lattice passes through the equilibrium at the centre of the box
        assert_eq!(grid[100][100], Some(0.0));
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut glo, mut ghi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (r, row) in grid.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                let x = [pts[r], cols[c]];
                assert_eq!(cell.is_some(), sys.domain.shape.contains(&x));
                if let Some(v) = cell {
                    let direct = net.value(&x);
                    assert_eq!(*v, direct);
                    lo = lo.min(direct);
                    hi = hi.max(direct);
                    glo = glo.min(*v);
                    ghi = ghi.max(*v);
                }
            }
        }
        assert_eq!((lo, hi), (glo, ghi));
    }
    let mask = fs::read_to_string(g.join("mask.csv")).unwrap();
    let mask: Vec<&str> = mask.lines().collect();
    assert_eq!(mask.len(), 200);
    assert_eq!(mask[100].split(',').nth(100), Some("0"));
}

#[test]
fn simulate_matches_library_report() {
    let dir = TempDir::new().unwrap();
    let cfg = config("three_mode_discrete.json");
    let out = dir.path().join("sim");
    let o = nmlf(&[
        "simulate",
        "--config",
        s(&cfg),
        "--policy",
        "greedy-destabilize",
        "--inits",
        "12",
        "--seed",
        "4",
        "--record",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, json(&out.join("report.json")));

    let sys = SwitchedSystem::load_config(&cfg).unwrap();
    let (report, trajs) = check_practical_stability(
        &sys,
        &SwitchPolicy::GreedyDestabilize,
        12,
        &StabilityConfig::for_system(&sys),
        4,
    )
    .unwrap();
    assert_eq!(printed, serde_json::to_value(&report).unwrap());
    assert!(out.join("traj_002.csv").exists());
    assert!(!out.join("traj_003.csv").exists());
    let csv = fs::read_to_string(out.join("traj_000.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,x1,x2,mode"));
    assert_eq!(csv.lines().count(), trajs[0].times.len() + 1);
    let events: Value = serde_json::from_str(&fs::read_to_string(out.join("traj_000_events.json")).unwrap()).unwrap();
    assert_eq!(events.as_array().unwrap().len(), trajs[0].events.len());
}

#[test]
fn greedy_switching_everywhere_destabilizes_the_pair() {
    let dir = TempDir::new().unwrap();
    let cfg = config("no_common_lf.json");
    let out = dir.path().join("sim");
    let o = nmlf(&[
        "simulate",
        "--config",
        s(&cfg),
        "--arbitrary-switching",
        "--policy",
        "greedy-destabilize",
        "--inits",
        "20",
        "--init-radius",
        "0.5",
        "--record",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["max_growth"].as_f64().unwrap() > 10.0, "{report}");
    assert!(report["fraction"].as_f64().unwrap() < 1.0);
}
