//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use nmlf::interval::Interval;
use nmlf::loss::{total_loss, total_loss_grad, LossConfig, SampleBank};
use nmlf::model::{ModeId, SwitchedSystem, TimeSemantics};
use nmlf::net::{derive_seed, Bundle, LyapunovNet, MlfBundle, QuadraticCandidate};
use nmlf::sim::{check_practical_stability, StabilityConfig, SwitchPolicy};
use nmlf::train::sample_bank;
use nmlf::verify::{certify, grid_falsify, phi_point, VerificationStatus, VerifyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

const BENCHMARKS: [&str; 4] = [
    "pendulum.json",
    "no_common_lf.json",
    "three_mode_discrete.json",
    "three_mode_continuous.json",
];
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const MAX_RETRIES: usize = 8;
const SEED: &str = "0";

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> SwitchedSystem {
    SwitchedSystem::load_config(config(name)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn nmlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmlf"))
        .args(args)
        .env("NMLF_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdicts(Vec<(String, bool)>);

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, detail: &str) {
        say(&format!("acceptance {id}: {} ({detail})", if pass { "PASS" } else { "FAIL" }));
        self.0.push((id.to_string(), pass));
    }
}

/// One `nmlf train` run followed by `nmlf verify` on its weights.
struct TrainRun {
    dir: PathBuf,
    certified: bool,
    attempts: usize,
    elapsed: Duration,
    reverified: bool,
}

impl TrainRun {
    fn meets_budget(&self) -> bool {
        self.certified && self.reverified && self.attempts <= MAX_RETRIES + 1 && self.elapsed <= TRAIN_BUDGET
    }

    fn summary(&self) -> String {
        format!(
            "certified={} attempts={} time={:.0}s reverified={}",
            self.certified,
            self.attempts,
            self.elapsed.as_secs_f64(),
            self.reverified
        )
    }

    fn weights(&self) -> PathBuf {
        self.dir.join("weights.json")
    }
}

fn train(root: &Path, name: &str, tag: &str) -> TrainRun {
    let dir = root.join(tag);
    let cfg = config(name);
    let start = Instant::now();
    let o = nmlf(&["train", "--config", s(&cfg), "--out", s(&dir), "--seed", SEED, "--workers", "1"]);
    let elapsed = start.elapsed();
    let report: Value = fs::read_to_string(dir.join("report.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(Value::Null);
    let certified = o.status.code() == Some(0) && report["outcome"] == "certified";
    let attempts = report["attempts"].as_array().map_or(0, Vec::len);
    let reverified = certified
        && nmlf(&["verify", "--config", s(&cfg), "--weights", s(&dir.join("weights.json"))])
            .status
            .code()
            == Some(0);
    TrainRun {
        dir,
        certified,
        attempts,
        elapsed,
        reverified,
    }
}

fn pendulum(root: &Path, v: &mut Verdicts) -> TrainRun {
    let run = train(root, "pendulum.json", "pendulum");
    v.record("1 pendulum certifies and re-verifies", run.meets_budget(), &run.summary());
    run
}

fn no_common_lf(root: &Path, v: &mut Verdicts) -> TrainRun {
    let run = train(root, "no_common_lf.json", "no_common_lf");
    let sim = root.join("greedy");
    let cfg = config("no_common_lf.json");
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
        s(&sim),
    ]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap_or(Value::Null);
    let growth = report["max_growth"].as_f64().unwrap_or(f64::NAN);
    let widened = load("no_common_lf.json").with_arbitrary_switching();
    let falsified = fs::read_to_string(run.weights())
        .ok()
        .and_then(|t| MlfBundle::decode_weights(&t).ok())
        .and_then(|b| grid_falsify(&b, &widened, 500).ok().flatten());
    let switching = falsified.as_ref().is_some_and(|c| c.label.is_switching());
    v.record(
        "2 switching-dependent pair certifies; arbitrary switching destabilizes",
        run.meets_budget() && growth > 10.0 && switching,
        &format!(
            "{}; greedy max growth {growth:.1}; widened-region violation {}",
            run.summary(),
            falsified.map_or("none".into(), |c| c.label.to_string())
        ),
    );
    run
}

fn three_mode(root: &Path, v: &mut Verdicts) -> (TrainRun, TrainRun) {
    let discrete = train(root, "three_mode_discrete.json", "three_mode_discrete");
    // information only: the weights against the switching predicate stated on values
    let printed = if discrete.certified {
        let cfg = config("three_mode_discrete.json");
        let o = nmlf(&[
            "verify",
            "--config",
            s(&cfg),
            "--weights",
            s(&discrete.weights()),
            "--switch-check",
            "value",
        ]);
        let out: Value = serde_json::from_slice(&o.stdout).unwrap_or(Value::Null);
        out["status"].as_str().unwrap_or("error").to_string()
    } else {
        "n/a".into()
    };
    let continuous = train(root, "three_mode_continuous.json", "three_mode_continuous");
    v.record(
        "3 three-mode systems certify",
        discrete.meets_budget() && continuous.meets_budget(),
        &format!(
            "discrete: {} (value-form switching check: {printed}); continuous: {}",
            discrete.summary(),
            continuous.summary()
        ),
    );
    (discrete, continuous)
}

fn rel_close(a: f64, e: f64) -> bool {
    (a - e).abs() <= 1e-4 * a.abs().max(e.abs()) || (a - e).abs() < 1e-7
}

/// Smallest |hinge argument| over the bank.
fn kink_distance(b: &MlfBundle, sys: &SwitchedSystem, bank: &SampleBank, c: &LossConfig) -> f64 {
    let discrete = sys.time == TimeSemantics::Discrete;
    let mut m = f64::INFINITY;
    for smp in &bank.domain {
        for (id, net) in b.iter() {
            let fx = sys.eval_dynamics(id, &smp.x).unwrap();
            let v = net.value(&smp.x);
            let d = if discrete {
                net.value(&fx) - v
            } else {
                net.gradient(&smp.x).iter().zip(&fx).map(|(a, b)| a * b).sum()
            };
            m = m.min((d + c.epsilon).abs()).min((c.epsilon - v).abs());
        }
    }
    for ((i, j), pts) in &bank.switching {
        for smp in pts {
            let xj = if discrete { sys.eval_dynamics(*j, &smp.x).unwrap() } else { smp.x.clone() };
            let h = b.get(*j).unwrap().value(&xj) - b.get(*i).unwrap().value(&smp.x) + c.epsilon;
            m = m.min(h.abs());
        }
    }
    m
}

fn gradients(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut draws, mut resampled, mut bad) = (0, 0, Vec::new());
    let mut k = 0u64;
    while draws < 24 {
        k += 1;
        let name = BENCHMARKS[draws % BENCHMARKS.len()];
        let sys = load(name);
        let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(2..=12)).collect();
        let b = MlfBundle::init(sys.mode_ids(), &sys.equilibrium, &hidden, k, 1.0).unwrap();
        let bank = sample_bank(&sys, 12, 4, k).unwrap();
        let c = LossConfig::default();
        if kink_distance(&b, &sys, &bank, &c) < 1e-4 {
            resampled += 1;
            continue;
        }
        // input gradient of every candidate at a random point
        let x = bank.domain[0].x.clone();
        for (id, net) in b.iter() {
            let g = net.gradient(&x);
            for i in 0..x.len() {
                let h = 1e-6;
                let (mut a, mut z) = (x.clone(), x.clone());
                a[i] += h;
                z[i] -= h;
                let fd = (net.value(&a) - net.value(&z)) / (2.0 * h);
                if !rel_close(g[i], fd) {
                    bad.push(format!("{name} mode {id} dV/dx{i}: {} vs {fd}", g[i]));
                }
            }
        }
        // parameter gradient of the total loss
        let (_, grad) = total_loss_grad(&b, &sys, &bank, &c).unwrap();
        for (id, net) in b.iter() {
            let p = net.params();
            for i in 0..p.len() {
                let h = 1e-6;
                let mut probe = b.clone();
                let mut q = p.clone();
                q[i] = p[i] + h;
                probe.get_mut(id).unwrap().set_params(&q);
                let up = total_loss(&probe, &sys, &bank, &c).unwrap().total;
                q[i] = p[i] - h;
                probe.get_mut(id).unwrap().set_params(&q);
                let down = total_loss(&probe, &sys, &bank, &c).unwrap().total;
                let fd = (up - down) / (2.0 * h);
                if !rel_close(grad[&id][i], fd) {
                    bad.push(format!("{name} mode {id} dL/dp{i}: {} vs {fd}", grad[&id][i]));
                }
            }
        }
        draws += 1;
    }
    v.record(
        "4 gradients match central differences",
        bad.is_empty(),
        &format!("{draws} draws, {resampled} resampled near kinks, {} mismatches {:?}", bad.len(), bad.first()),
    );
}

fn random_box(rng: &mut ChaCha8Rng, sys: &SwitchedSystem) -> Vec<Interval> {
    let bbox = sys.domain.shape.bounding_box();
    let frac = 10f64.powf(rng.gen_range(-3.0..0.0));
    bbox.0
        .iter()
        .map(|i| {
            let w = i.width() * frac;
            let lo = rng.gen_range(i.lo()..=i.hi() - w);
            Interval::new(lo, lo + w).unwrap()
        })
        .collect()
}

fn soundness(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut escapes, mut evals) = (0usize, 0usize);
    let draws = 60;
    for d in 0..draws {
        let sys = load(BENCHMARKS[d % BENCHMARKS.len()]);
        let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(2..=16)).collect();
        let net = LyapunovNet::init_scaled(sys.dim(), &hidden, d as u64, sys.equilibrium.clone(), rng.gen_range(0.5..4.0)).unwrap();
        let bx = random_box(&mut rng, &sys);
        let (venc, genc) = net.enclosures(&bx);
        let fenc: BTreeMap<ModeId, Vec<Interval>> = sys
            .mode_ids()
            .map(|m| (m, sys.eval_dynamics_interval(m, &bx).unwrap()))
            .collect();
        for _ in 0..1000 {
            let x: Vec<f64> = bx.iter().map(|i| rng.gen_range(i.lo()..=i.hi())).collect();
            let mut check = |i: &Interval, p: f64| {
                evals += 1;
                if !i.contains(p) {
                    escapes += 1;
                }
            };
            check(&venc, net.value(&x));
            for (i, g) in genc.iter().zip(net.gradient(&x)) {
                check(i, g);
            }
            for (m, enc) in &fenc {
                for (i, f) in enc.iter().zip(sys.eval_dynamics(*m, &x).unwrap()) {
                    check(i, f);
                }
            }
        }
    }
    v.record(
        "5 interval enclosures contain point values",
        escapes == 0,
        &format!("{draws} boxes x 1000 samples, {evals} evaluations, {escapes} escapes"),
    );
}

fn radial(sign: &str, switch: bool) -> SwitchedSystem {
    let f = [format!("{sign}x1"), format!("{sign}x2")];
    let mut doc = json!({
        "time": "continuous",
        "state": ["x1", "x2"],
        "domain": {"ball": {"radius": 1}},
        "epsilon_b": 0.1,
        "modes": [{"id": 1, "f": f}]
    });
    if switch {
        doc["modes"] = json!([{"id": 1, "f": f}, {"id": 2, "f": f}]);
        doc["switches"] = json!([{"from": 1, "to": 2, "box": [0.3, 0.6, -0.2, 0.2]}]);
    }
    SwitchedSystem::from_json_value(&doc).unwrap()
}

fn oracle_agreement(v: &mut Verdicts) {
    let cases = [
        ("contraction", radial("-", false), VerificationStatus::Certified),
        ("expansion", radial("", false), VerificationStatus::Violated),
        ("equal candidates on a switch", radial("-", true), VerificationStatus::Violated),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (label, sys, expected) in cases {
        let b = Bundle::uniform(sys.mode_ids(), QuadraticCandidate::norm_squared(2));
        let start = Instant::now();
        let out = certify(&b, &sys, &VerifyConfig::default()).unwrap();
        let grid = grid_falsify(&b, &sys, 500).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let revalid = out
            .confirmed()
            .chain(grid.iter())
            .all(|c| phi_point(&b, &sys, &c.point).unwrap().is_some());
        let agree = (out.status == VerificationStatus::Certified) == grid.is_none();
        let ok = out.status == expected && agree && revalid && secs <= 60.0;
        pass &= ok;
        notes.push(format!("{label}: {:?}/{} {secs:.1}s", out.status, if grid.is_some() { "found" } else { "clean" }));
    }
    v.record("6 certifier and lattice oracle agree", pass, &notes.join("; "));
}

fn practical_stability(certified: &[&str], v: &mut Verdicts) {
    let policies = [
        SwitchPolicy::Never,
        SwitchPolicy::Always,
        SwitchPolicy::Random {
            p: 0.5,
            seed: derive_seed(0, 1),
        },
        SwitchPolicy::GreedyDestabilize,
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for name in certified {
        let sys = load(name);
        let cfg = StabilityConfig::for_system(&sys);
        let mut cells = Vec::new();
        for p in &policies {
            let (r, _) = check_practical_stability(&sys, p, 100, &cfg, 0).unwrap();
            pass &= r.fraction == 1.0;
            cells.push(format!("{} {:.2} (exited {})", r.policy, r.fraction, r.exited));
        }
        notes.push(format!("{}: {}", name.trim_end_matches(".json"), cells.join(", ")));
    }
    pass &= !certified.is_empty();
    v.record("7 trajectories settle in the exclusion ball", pass, &notes.join("; "));
}

fn determinism(root: &Path, first: &TrainRun, v: &mut Verdicts) {
    let again = train(root, "pendulum.json", "pendulum_again");
    let same = |f: &str| match (fs::read(first.dir.join(f)), fs::read(again.dir.join(f))) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    let (r, w) = (same("report.json"), same("weights.json"));
    v.record(
        "8 repeated pendulum run is byte-identical",
        r && w,
        &format!("report identical={r} weights identical={w}"),
    );
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let root = TempDir::new().unwrap();
    let mut v = Verdicts(Vec::new());
    gradients(&mut v);
    soundness(&mut v);
    oracle_agreement(&mut v);
    let pend = pendulum(root.path(), &mut v);
    let pair = no_common_lf(root.path(), &mut v);
    let (disc, cont) = three_mode(root.path(), &mut v);
    let certified: Vec<&str> = [
        ("pendulum.json", &pend),
        ("no_common_lf.json", &pair),
        ("three_mode_discrete.json", &disc),
        ("three_mode_continuous.json", &cont),
    ]
    .into_iter()
    .filter(|(_, r)| r.certified)
    .map(|(n, _)| n)
    .collect();
    practical_stability(&certified, &mut v);
    determinism(root.path(), &pend, &mut v);

    v.0.sort();
    let failed: Vec<&str> = v.0.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect();
    say(&format!("acceptance: {} of {} criteria pass", v.0.len() - failed.len(), v.0.len()));
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
