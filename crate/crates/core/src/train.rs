//! Counterexample-guided synthesis: sample, descend on the total loss,
//! certify, feed violations back, repeat.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{LossConfig, LossError, LossProblem, Sample, SampleBank};
use crate::model::{pointer_from, BoxRegion, ConfigError, ModeId, SwitchedSystem};
use crate::net::{derive_seed, MlfBundle, NetError};
use crate::verify::{certify, Counterexample, VerificationStatus, VerifyConfig, VerifyError, ViolationLabel};

/// Rejection-sampling attempts allowed per requested point.
const REJECTION_FACTOR: usize = 1000;
/// Jittered copies injected with every counterexample.
const JITTER_COPIES: usize = 8;
/// Jitter radius as a fraction of the domain diameter.
const JITTER_FRACTION: f64 = 0.005;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot sample {0}: no accepted point after bounded rejection")]
    EmptyRegion(String),
    #[error("sample counts must be at least 1")]
    BadCounts,
    #[error("non-finite loss or gradient at round {round}, step {step}")]
    NonFinite { round: usize, step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Gradient,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub steps_per_round: usize,
    pub max_rounds: usize,
    pub domain_samples: usize,
    pub region_samples: usize,
    pub seed: u64,
    /// Restarts with a fresh seed after an exhausted attempt.
    pub retries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            optimizer: Optimizer::Adam,
            steps_per_round: 1000,
            max_rounds: 40,
            domain_samples: 3000,
            region_samples: 500,
            seed: 0,
            retries: 8,
        }
    }
}

/// Hidden layer widths and the input scale used at initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetArch {
    pub hidden: Vec<usize>,
    /// Defaults to the half-width of the domain's bounding box.
    pub input_scale: Option<f64>,
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch {
            hidden: vec![16, 16],
            input_scale: None,
        }
    }
}

/// Training, loss, network and certifier settings, read from the optional
/// `run` section of a system config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub training: TrainConfig,
    pub loss: LossConfig,
    pub network: NetArch,
    pub verify: VerifyConfig,
}

impl RunSettings {
    /// Settings from the `run` member of a config document; defaults when
    /// it is absent.
    pub fn from_config_value(doc: &serde_json::Value) -> Result<RunSettings, ConfigError> {
        match doc.get("run") {
            None => Ok(RunSettings::default()),
            Some(v) => serde_path_to_error::deserialize(v)
                .map_err(|e| {
                    let inner = pointer_from(e.path());
                    let path = if inner == "/" { "/run".to_string() } else { format!("/run{inner}") };
                    ConfigError::new(path, e.inner().to_string())
                }),
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, b: &BoxRegion) -> Vec<f64> {
    b.0.iter()
        .map(|i| if i.width() > 0.0 { rng.gen_range(i.lo()..=i.hi()) } else { i.lo() })
        .collect()
}

fn rejection(
    rng: &mut ChaCha8Rng,
    bounds: &BoxRegion,
    count: usize,
    what: &str,
    accept: impl Fn(&[f64]) -> bool,
) -> Result<Vec<Sample>, TrainError> {
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        if tries >= REJECTION_FACTOR * count {
            return Err(TrainError::EmptyRegion(what.into()));
        }
        tries += 1;
        let x = uniform_in(rng, bounds);
        if accept(&x) {
            out.push(Sample::seed(x));
        }
    }
    Ok(out)
}

/// `n` uniform points of `D_V` and `n_ij` uniform points of each
/// `D_ij ∩ D_V`, deterministic in `seed`.
pub fn sample_bank(sys: &SwitchedSystem, n: usize, n_ij: usize, seed: u64) -> Result<SampleBank, TrainError> {
    if n == 0 || n_ij == 0 {
        return Err(TrainError::BadCounts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = sys.domain.shape.bounding_box();
    let domain = rejection(&mut rng, &bbox, n, "the domain", |x| sys.in_verification_region(x))?;
    let mut switching = BTreeMap::new();
    for (&(i, j), region) in &sys.switches {
        let pts = rejection(&mut rng, region, n_ij, &format!("switching region {i}->{j}"), |x| {
            sys.in_verification_region(x)
        })?;
        switching.insert((i, j), pts);
    }
    Ok(SampleBank { domain, switching })
}

/// Adaptive-moment state for one parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..p.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            p[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Optimiser state carried across rounds of one attempt.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    adam: BTreeMap<ModeId, Adam>,
}

/// Full-batch descent on the total loss. Returns the loss before each step
/// followed by the loss after the last one.
pub fn train_round(
    bundle: &mut MlfBundle,
    sys: &SwitchedSystem,
    bank: &SampleBank,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    state: &mut OptimizerState,
    round: usize,
) -> Result<Vec<f64>, TrainError> {
    let problem = LossProblem::new(sys, bank)?;
    let mut trace = Vec::with_capacity(cfg.steps_per_round + 1);
    for step in 0..cfg.steps_per_round {
        let (loss, grads) = problem.evaluate(bundle, loss_cfg, true)?;
        let grads = grads.expect("gradient requested");
        if !loss.total.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { round, step });
        }
        trace.push(loss.total);
        if loss.total == 0.0 {
            // every hinge is inactive; the gradient is zero
            return Ok(trace);
        }
        for (id, net) in bundle.iter_mut() {
            let g = &grads[&id];
            let mut p = net.params();
            match cfg.optimizer {
                Optimizer::Gradient => p.iter_mut().zip(g).for_each(|(p, g)| *p -= cfg.learning_rate * g),
                Optimizer::Adam => state
                    .adam
                    .entry(id)
                    .or_insert_with(|| Adam::new(p.len()))
                    .step(&mut p, g, cfg.learning_rate),
            }
            net.set_params(&p);
        }
    }
    let last = problem.evaluate(bundle, loss_cfg, false)?.0.total;
    if !last.is_finite() {
        return Err(TrainError::NonFinite {
            round,
            step: cfg.steps_per_round,
        });
    }
    trace.push(last);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CegisOutcome {
    Certified,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub loss: f64,
    pub status: VerificationStatus,
    /// Counterexamples (before jitter) added to the domain set.
    pub cex_mode: usize,
    /// Counterexamples (before jitter) added to switching sets.
    pub cex_switch: usize,
    pub boxes_processed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptReport {
    pub seed: u64,
    pub rounds: Vec<RoundReport>,
    pub outcome: CegisOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CegisReport {
    pub outcome: CegisOutcome,
    /// Rounds executed over all attempts.
    pub rounds_executed: usize,
    pub final_loss: Option<f64>,
    pub attempts: Vec<AttemptReport>,
}

/// Adds `c` and its jittered copies to the bank. Copies are clamped to the
/// switching box and dropped if they leave `D_V`.
fn inject(sys: &SwitchedSystem, bank: &mut SampleBank, c: &Counterexample, rng: &mut ChaCha8Rng) {
    let radius = JITTER_FRACTION * sys.domain.shape.diameter();
    let region = match c.label {
        ViolationLabel::Switching { from, to } => Some(&sys.switches[&(from, to)]),
        _ => None,
    };
    let mut pts = vec![c.point.clone()];
    for _ in 0..JITTER_COPIES {
        let mut x: Vec<f64> = c.point.iter().map(|v| v + rng.gen_range(-radius..=radius)).collect();
        if let Some(r) = region {
            r.clamp(&mut x);
        }
        if sys.in_verification_region(&x) {
            pts.push(x);
        }
    }
    let target = match c.label {
        ViolationLabel::Switching { from, to } => bank.switching.entry((from, to)).or_default(),
        _ => &mut bank.domain,
    };
    target.extend(pts.into_iter().map(Sample::counterexample));
}

fn input_scale(sys: &SwitchedSystem, arch: &NetArch) -> f64 {
    arch.input_scale.unwrap_or_else(|| {
        sys.domain
            .shape
            .bounding_box()
            .0
            .iter()
            .map(|i| 0.5 * i.width())
            .fold(0.0, f64::max)
    })
}

/// One attempt from a fresh seed.
fn attempt(
    sys: &SwitchedSystem,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    arch: &NetArch,
    vcfg: &VerifyConfig,
    seed: u64,
    round_offset: usize,
) -> Result<(MlfBundle, AttemptReport, Option<f64>), TrainError> {
    let mut bundle = MlfBundle::init(sys.mode_ids(), &sys.equilibrium, &arch.hidden, seed, input_scale(sys, arch))?;
    let mut bank = sample_bank(sys, cfg.domain_samples, cfg.region_samples, derive_seed(seed, 1))?;
    let mut jitter = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut state = OptimizerState::default();
    let mut report = AttemptReport {
        seed,
        rounds: Vec::new(),
        outcome: CegisOutcome::Exhausted,
    };
    let mut last_loss = None;
    for k in 0..cfg.max_rounds {
        let trace = train_round(&mut bundle, sys, &bank, cfg, loss_cfg, &mut state, k)?;
        let loss = *trace.last().expect("non-empty trace");
        last_loss = Some(loss);
        let out = certify(&bundle, sys, vcfg)?;
        let (mut cex_mode, mut cex_switch) = (0, 0);
        if out.status != VerificationStatus::Certified {
            for c in &out.counterexamples {
                if c.label.is_switching() {
                    cex_switch += 1;
                } else {
                    cex_mode += 1;
                }
                inject(sys, &mut bank, c, &mut jitter);
            }
        }
        info!(
            "round={} loss={loss} cex_mode={cex_mode} cex_switch={cex_switch}",
            round_offset + k + 1
        );
        debug!(
            "status={:?} boxes={} depth={} bank_cex={}",
            out.status,
            out.boxes_processed,
            out.max_depth,
            bank.counterexample_count()
        );
        report.rounds.push(RoundReport {
            round: round_offset + k + 1,
            loss,
            status: out.status,
            cex_mode,
            cex_switch,
            boxes_processed: out.boxes_processed,
        });
        if out.status == VerificationStatus::Certified {
            report.outcome = CegisOutcome::Certified;
            break;
        }
    }
    Ok((bundle, report, last_loss))
}

/// Runs attempts until one certifies or the retry budget is spent. The
/// returned bundle is from the last attempt.
pub fn cegis(
    sys: &SwitchedSystem,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    arch: &NetArch,
    vcfg: &VerifyConfig,
) -> Result<(MlfBundle, CegisReport), TrainError> {
    let mut report = CegisReport {
        outcome: CegisOutcome::Exhausted,
        rounds_executed: 0,
        final_loss: None,
        attempts: Vec::new(),
    };
    let mut bundle = None;
    for a in 0..=cfg.retries {
        let seed = derive_seed(cfg.seed, a as u64);
        info!("attempt={} seed={seed}", a + 1);
        let (b, att, loss) = attempt(sys, cfg, loss_cfg, arch, vcfg, seed, report.rounds_executed)?;
        report.rounds_executed += att.rounds.len();
        report.final_loss = loss;
        let done = att.outcome == CegisOutcome::Certified;
        report.attempts.push(att);
        bundle = Some(b);
        if done {
            report.outcome = CegisOutcome::Certified;
            break;
        }
        if cfg.max_rounds == 0 {
            break;
        }
    }
    let bundle = bundle.expect("at least one attempt");
    Ok((bundle, report))
}
