//! `nmlf`: train, certify, simulate and export neural multiple Lyapunov
//! functions for switched systems.
//!
//! Exit status is 0 on success or a certificate, 1 for an honest negative
//! (exhausted training, violated certificate) and 2 for usage, config or
//! I/O errors.

mod grid;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nmlf::model::SwitchedSystem;
use nmlf::net::{derive_seed, Candidate, MlfBundle};
use nmlf::sim::{check_practical_stability, StabilityConfig, SwitchPolicy};
use nmlf::train::{cegis, CegisOutcome, RunSettings, TrainError};
use nmlf::verify::{certify, SwitchCheck, VerificationStatus};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            _ => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "nmlf", version, about = "Neural multiple Lyapunov functions for switched systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn and certify a bundle with counterexample-guided training.
    Train(TrainArgs),
    /// Certify saved weights against a system.
    Verify(VerifyArgs),
    /// Write per-mode value grids for plotting (two-dimensional systems).
    ExportGrid(GridArgs),
    /// Simulate trajectories under a switching policy.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct SystemArgs {
    /// System config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace every switching region by the domain's bounding box.
    #[arg(long)]
    arbitrary_switching: bool,
}

#[derive(Args, Debug, Default)]
struct CertifierArgs {
    /// Smallest box width the certifier bisects.
    #[arg(long)]
    delta: Option<f64>,
    /// Certifier threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Strictness margin for cleared boxes.
    #[arg(long)]
    margin: Option<f64>,
    /// Box budget.
    #[arg(long)]
    max_boxes: Option<u64>,
    #[arg(long, value_enum)]
    switch_check: Option<SwitchCheckArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SwitchCheckArg {
    Value,
    Successor,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Output directory for `weights.json` and `report.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps_per_round: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    retries: Option<usize>,
    #[command(flatten)]
    certifier: CertifierArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Also write the outcome here; it always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    certifier: CertifierArgs,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Lattice points per axis.
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Never,
    Always,
    Random,
    GreedyDestabilize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_enum, default_value = "never")]
    policy: PolicyArg,
    /// Switching probability for the random policy.
    #[arg(long, default_value_t = 0.5)]
    switch_prob: f64,
    /// Number of initial states.
    #[arg(long, default_value_t = 100)]
    inits: usize,
    /// Draw initial states on the sphere of this radius about the
    /// equilibrium instead of uniformly in the domain.
    #[arg(long)]
    init_radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time horizon (continuous) or number of steps (discrete).
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Final fraction of the horizon a run must spend in the ε_b ball.
    #[arg(long)]
    tail: Option<f64>,
    /// Trajectories to write; all by default.
    #[arg(long)]
    record: Option<usize>,
    /// Write every k-th state.
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_system(args: &SystemArgs) -> Result<(SwitchedSystem, RunSettings), CliError> {
    let text = read(&args.config)?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", args.config.display())))?;
    let sys = SwitchedSystem::from_json_value(&doc).map_err(|e| invalid(format!("{}: {e}", args.config.display())))?;
    let settings =
        RunSettings::from_config_value(&doc).map_err(|e| invalid(format!("{}: {e}", args.config.display())))?;
    let sys = if args.arbitrary_switching {
        sys.with_arbitrary_switching()
    } else {
        sys
    };
    Ok((sys, settings))
}

fn load_weights(path: &Path, sys: &SwitchedSystem) -> Result<MlfBundle, CliError> {
    let bundle = MlfBundle::decode_weights(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let ours: Vec<_> = sys.mode_ids().collect();
    let theirs: Vec<_> = bundle.mode_ids().collect();
    if ours != theirs {
        return Err(invalid(format!(
            "weights cover modes {theirs:?} but the system has modes {ours:?}"
        )));
    }
    if let Some((m, net)) = bundle.iter().find(|(_, n)| n.input_dim() != sys.dim()) {
        return Err(invalid(format!(
            "mode {m} takes {} inputs, the system has {} states",
            net.input_dim(),
            sys.dim()
        )));
    }
    Ok(bundle)
}

fn apply_certifier(settings: &mut RunSettings, args: &CertifierArgs) {
    let v = &mut settings.verify;
    if let Some(d) = args.delta {
        v.delta = d;
    }
    if let Some(w) = args.workers {
        v.workers = w;
    }
    if let Some(m) = args.margin {
        v.margin = m;
    }
    if let Some(b) = args.max_boxes {
        v.max_boxes = b;
    }
    if let Some(s) = args.switch_check {
        v.switch_check = match s {
            SwitchCheckArg::Value => SwitchCheck::Value,
            SwitchCheckArg::Successor => SwitchCheck::Successor,
        };
    }
}

fn check_settings(s: &RunSettings) -> Result<(), CliError> {
    let positive = |name: &str, v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(CliError::Usage(format!("{name} must be positive, got {v}")))
        }
    };
    positive("delta", s.verify.delta)?;
    positive("epsilon", s.loss.epsilon)?;
    if !(s.loss.alpha >= 0.0 && s.loss.beta >= 0.0) {
        return Err(CliError::Usage("alpha and beta must be non-negative".into()));
    }
    if !(s.training.learning_rate >= 0.0 && s.training.learning_rate.is_finite()) {
        return Err(CliError::Usage("lr must be a non-negative number".into()));
    }
    if s.verify.workers == 0 {
        return Err(CliError::Usage("workers must be at least 1".into()));
    }
    if s.network.hidden.is_empty() || s.network.hidden.contains(&0) {
        return Err(CliError::Usage("hidden widths must be positive".into()));
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let (sys, mut s) = load_system(&args.system)?;
    let t = &mut s.training;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.steps_per_round {
        t.steps_per_round = v;
    }
    if let Some(v) = args.max_rounds {
        t.max_rounds = v;
    }
    if let Some(v) = args.retries {
        t.retries = v;
    }
    if let Some(v) = args.epsilon {
        s.loss.epsilon = v;
    }
    if let Some(v) = args.alpha {
        s.loss.alpha = v;
    }
    if let Some(v) = args.beta {
        s.loss.beta = v;
    }
    if let Some(v) = args.hidden {
        s.network.hidden = v;
    }
    apply_certifier(&mut s, &args.certifier);
    check_settings(&s)?;
    create_dir(&args.out)?;
    let (bundle, report) = match cegis(&sys, &s.training, &s.loss, &s.network, &s.verify) {
        Ok(r) => r,
        Err(e @ (TrainError::NonFinite { .. } | TrainError::Verify(_) | TrainError::Loss(_))) => {
            return Err(CliError::Failed(e.to_string()))
        }
        Err(e) => return Err(invalid(e)),
    };
    write(&args.out.join("weights.json"), &bundle.encode_weights())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&args.out.join("report.json"), &text)?;
    match report.outcome {
        CegisOutcome::Certified => {
            info!("certified after {} rounds", report.rounds_executed);
            Ok(())
        }
        CegisOutcome::Exhausted => Err(CliError::Failed(format!(
            "no certificate after {} attempts ({} rounds)",
            report.attempts.len(),
            report.rounds_executed
        ))),
    }
}

fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let (sys, mut s) = load_system(&args.system)?;
    apply_certifier(&mut s, &args.certifier);
    check_settings(&s)?;
    let bundle = load_weights(&args.weights, &sys)?;
    let out = certify(&bundle, &sys, &s.verify).map_err(invalid)?;
    let text = serde_json::to_string_pretty(&out).expect("outcome serializes");
    println!("{text}");
    if let Some(p) = &args.out {
        write(p, &text)?;
    }
    match out.status {
        VerificationStatus::Certified => Ok(()),
        status => Err(CliError::Failed(format!(
            "{status:?} with {} counterexamples",
            out.counterexamples.len()
        ))),
    }
}

fn export_grid(args: GridArgs) -> Result<(), CliError> {
    let (sys, _) = load_system(&args.system)?;
    let bundle = load_weights(&args.weights, &sys)?;
    if sys.dim() != 2 {
        return Err(CliError::Usage(format!("grid export needs 2 states, the system has {}", sys.dim())));
    }
    if args.resolution < 2 {
        return Err(CliError::Usage("resolution must be at least 2".into()));
    }
    create_dir(&args.out)?;
    let export = grid::GridExport::build(&bundle, &sys, args.resolution);
    for (name, text) in export.files() {
        write(&args.out.join(name), &text)?;
    }
    info!("wrote {} mode grids to {}", export.values.len(), args.out.display());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (sys, _) = load_system(&args.system)?;
    let mut cfg = StabilityConfig::for_system(&sys);
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    if let Some(dt) = args.dt {
        cfg.dt = dt;
    }
    if let Some(t) = args.tail {
        cfg.tail = t;
    }
    cfg.init_radius = args.init_radius;
    if !(0.0..=1.0).contains(&cfg.tail) {
        return Err(CliError::Usage("tail must lie in [0, 1]".into()));
    }
    if args.thin == 0 {
        return Err(CliError::Usage("thin must be at least 1".into()));
    }
    if let Some(r) = cfg.init_radius {
        if !(r > 0.0 && r.is_finite()) {
            return Err(CliError::Usage("init-radius must be positive".into()));
        }
    }
    let policy = match args.policy {
        PolicyArg::Never => SwitchPolicy::Never,
        PolicyArg::Always => SwitchPolicy::Always,
        PolicyArg::Random => SwitchPolicy::Random {
            p: args.switch_prob,
            seed: derive_seed(args.seed, 1),
        },
        PolicyArg::GreedyDestabilize => SwitchPolicy::GreedyDestabilize,
    };
    let (report, trajs) = check_practical_stability(&sys, &policy, args.inits, &cfg, args.seed).map_err(invalid)?;
    create_dir(&args.out)?;
    let keep = args.record.unwrap_or(trajs.len()).min(trajs.len());
    for (k, tr) in trajs.iter().take(keep).enumerate() {
        let thinned = tr.thinned(args.thin);
        let path = args.out.join(format!("traj_{k:03}.csv"));
        let mut buf = Vec::new();
        thinned.write_csv(&mut buf).map_err(invalid)?;
        write(&path, std::str::from_utf8(&buf).expect("csv is utf-8"))?;
        write(&args.out.join(format!("traj_{k:03}_events.json")), &tr.events_json())?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&args.out.join("report.json"), &text)?;
    println!("{text}");
    if report.fraction < 1.0 {
        warn!(
            "{} of {} runs did not settle in the ε_b ball",
            report.trajectories - report.settled,
            report.trajectories
        );
    }
    Ok(())
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("NMLF_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Error,
        Ok("trace") => log::LevelFilter::Trace,
        Ok(other) => return Err(CliError::Usage(format!("NMLF_LOG must be quiet, info or trace, got {other:?}"))),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    Ok(())
}

fn run() -> Result<(), CliError> {
    init_logging()?;
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match cli.command {
        Command::Train(a) => train(a),
        Command::Verify(a) => verify(a),
        Command::ExportGrid(a) => export_grid(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Failed(msg) => warn!("{msg}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.code())
        }
    }
}
