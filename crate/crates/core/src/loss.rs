//! Empirical mode-wise and switching losses and their parameter gradients.
//!
//! Every hinge sum is accumulated exactly and rounded once, so loss values do
//! not depend on sample order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModeId, ModelError, SwitchedSystem, TimeSemantics};
use crate::net::{Bundle, LyapunovNet, MlfBundle, Workspace};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty sample set for {0}")]
    EmptySamples(String),
    #[error("{op} requires {expected:?} semantics")]
    Semantics {
        op: &'static str,
        expected: TimeSemantics,
    },
    #[error("bundle has no network for mode {0}")]
    MissingMode(ModeId),
    #[error("non-finite dynamics at {x:?} in mode {mode}")]
    NonFiniteDynamics { mode: ModeId, x: Vec<f64> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.01,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleOrigin {
    Seed,
    Counterexample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub origin: SampleOrigin,
}

impl Sample {
    pub fn seed(x: Vec<f64>) -> Sample {
        Sample {
            x,
            origin: SampleOrigin::Seed,
        }
    }

    pub fn counterexample(x: Vec<f64>) -> Sample {
        Sample {
            x,
            origin: SampleOrigin::Counterexample,
        }
    }
}

/// Training points: `domain` is shared by every mode, `switching` holds one
/// set per switching pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBank {
    pub domain: Vec<Sample>,
    pub switching: BTreeMap<(ModeId, ModeId), Vec<Sample>>,
}

impl SampleBank {
    pub fn counterexample_count(&self) -> usize {
        self.domain
            .iter()
            .chain(self.switching.values().flatten())
            .filter(|s| s.origin == SampleOrigin::Counterexample)
            .count()
    }
}

/// Per-component loss values and their weighted total.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub modes: BTreeMap<ModeId, f64>,
    pub switches: BTreeMap<(ModeId, ModeId), f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `Σ mode + β Σ switch`.
    pub fn compose(
        modes: BTreeMap<ModeId, f64>,
        switches: BTreeMap<(ModeId, ModeId), f64>,
        beta: f64,
    ) -> LossBreakdown {
        let m = exact_sum(modes.values().copied());
        let s = exact_sum(switches.values().copied());
        LossBreakdown {
            modes,
            switches,
            total: m + beta * s,
        }
    }
}

/// Correctly rounded sum of a sequence (Shewchuk's non-overlapping partials).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the partials from the top, with the half-way correction
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn net_for(bundle: &MlfBundle, mode: ModeId) -> Result<&LyapunovNet, LossError> {
    bundle.get(mode).ok_or(LossError::MissingMode(mode))
}

fn require(sys: &SwitchedSystem, op: &'static str, expected: TimeSemantics) -> Result<(), LossError> {
    if sys.time != expected {
        return Err(LossError::Semantics { op, expected });
    }
    Ok(())
}

/// Mode-wise points with their images `f_i(x)` precomputed.
#[derive(Debug, Clone)]
struct ModeTerms {
    mode: ModeId,
    points: Vec<Vec<f64>>,
    images: Vec<Vec<f64>>,
}

/// Switching points; `images` holds `f_j(x)` for discrete systems.
#[derive(Debug, Clone)]
struct SwitchTerms {
    from: ModeId,
    to: ModeId,
    points: Vec<Vec<f64>>,
    images: Option<Vec<Vec<f64>>>,
}

/// Parameter gradients keyed by mode.
pub type ModeGrads = BTreeMap<ModeId, Vec<f64>>;

/// A sample bank bound to a system, with the exclusion ball filtered out and
/// the dynamics evaluated once, ready for repeated loss/gradient evaluation.
#[derive(Debug, Clone)]
pub struct LossProblem {
    time: TimeSemantics,
    modes: Vec<ModeTerms>,
    switches: Vec<SwitchTerms>,
}

fn images(sys: &SwitchedSystem, mode: ModeId, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LossError> {
    points
        .iter()
        .map(|x| {
            let fx = sys.eval_dynamics(mode, x)?;
            if fx.iter().all(|v| v.is_finite()) {
                Ok(fx)
            } else {
                Err(LossError::NonFiniteDynamics {
                    mode,
                    x: x.clone(),
                })
            }
        })
        .collect()
}

impl LossProblem {
    pub fn new(sys: &SwitchedSystem, bank: &SampleBank) -> Result<LossProblem, LossError> {
        let keep = |s: &&Sample| !sys.in_exclusion_ball(&s.x);
        let domain: Vec<Vec<f64>> = bank.domain.iter().filter(keep).map(|s| s.x.clone()).collect();
        if domain.is_empty() {
            return Err(LossError::EmptySamples("the domain".into()));
        }
        let modes = sys
            .mode_ids()
            .map(|mode| {
                Ok(ModeTerms {
                    mode,
                    images: images(sys, mode, &domain)?,
                    points: domain.clone(),
                })
            })
            .collect::<Result<_, LossError>>()?;
        let mut switches = Vec::new();
        for (&(from, to), samples) in &bank.switching {
            let points: Vec<Vec<f64>> = samples.iter().filter(keep).map(|s| s.x.clone()).collect();
            if points.is_empty() {
                continue;
            }
            let imgs = match sys.time {
                TimeSemantics::Continuous => None,
                TimeSemantics::Discrete => Some(images(sys, to, &points)?),
            };
            switches.push(SwitchTerms {
                from,
                to,
                points,
                images: imgs,
            });
        }
        Ok(LossProblem {
            time: sys.time,
            modes,
            switches,
        })
    }

    /// Loss breakdown, and the per-mode parameter gradients of the total when
    /// `with_grad` is set.
    pub fn evaluate(
        &self,
        bundle: &MlfBundle,
        cfg: &LossConfig,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<ModeGrads>), LossError> {
        let mut grads: Option<ModeGrads> = with_grad.then(|| {
            bundle
                .iter()
                .map(|(id, n)| (id, vec![0.0; n.num_params()]))
                .collect()
        });
        // accumulated value weights per mode for the equilibrium shift
        let mut shift: BTreeMap<ModeId, f64> = BTreeMap::new();
        let mut ws = Workspace::default();
        let mut mode_losses = BTreeMap::new();
        for t in &self.modes {
            let net = net_for(bundle, t.mode)?;
            let g = grads.as_mut().map(|g| g.get_mut(&t.mode).expect("gradient slot"));
            let (loss, a) = mode_term(net, t, self.time, cfg, &mut ws, g);
            *shift.entry(t.mode).or_default() += a;
            mode_losses.insert(t.mode, loss);
        }
        let mut switch_losses = BTreeMap::new();
        for t in &self.switches {
            let (ni, nj) = (net_for(bundle, t.from)?, net_for(bundle, t.to)?);
            let (loss, a) = switch_term(ni, nj, t, cfg, &mut ws, grads.as_mut(), cfg.beta);
            *shift.entry(t.from).or_default() += a.0;
            *shift.entry(t.to).or_default() += a.1;
            switch_losses.insert((t.from, t.to), loss);
        }
        if let Some(g) = grads.as_mut() {
            for (mode, a) in shift {
                let net = net_for(bundle, mode)?;
                net.accumulate_offset_grad(a, &mut ws, g.get_mut(&mode).expect("gradient slot"));
            }
        }
        Ok((LossBreakdown::compose(mode_losses, switch_losses, cfg.beta), grads))
    }
}

/// Returns the mode loss and the total value weight applied (for the shift).
fn mode_term(
    net: &LyapunovNet,
    t: &ModeTerms,
    time: TimeSemantics,
    cfg: &LossConfig,
    ws: &mut Workspace,
    mut grad: Option<&mut Vec<f64>>,
) -> (f64, f64) {
    let n = t.points.len() as f64;
    let zero = vec![0.0; t.points.first().map_or(0, Vec::len)];
    let mut decrease = Vec::with_capacity(t.points.len());
    let mut positivity = Vec::with_capacity(t.points.len());
    let mut total_a = 0.0;
    for (x, fx) in t.points.iter().zip(&t.images) {
        match time {
            TimeSemantics::Continuous => {
                let (v, lie) = net.value_and_directional(x, fx, ws);
                let d = lie + cfg.epsilon;
                let p = cfg.epsilon - v;
                decrease.push(relu(d));
                positivity.push(relu(p));
                if let Some(g) = grad.as_deref_mut() {
                    let a = if p > 0.0 { -cfg.alpha / n } else { 0.0 };
                    let c = if d > 0.0 { 1.0 / n } else { 0.0 };
                    if a != 0.0 || c != 0.0 {
                        net.backward_tangent(ws, a, c, g);
                        total_a += a;
                    }
                }
            }
            TimeSemantics::Discrete => {
                let v = net.value(x);
                // leaves the successor pass in `ws` for the first backward call
                let (v_next, _) = net.value_and_directional(fx, &zero, ws);
                let d = v_next - v + cfg.epsilon;
                let p = cfg.epsilon - v;
                decrease.push(relu(d));
                positivity.push(relu(p));
                if let Some(g) = grad.as_deref_mut() {
                    if d > 0.0 {
                        net.backward_tangent(ws, 1.0 / n, 0.0, g);
                        total_a += 1.0 / n;
                    }
                    let a = (if d > 0.0 { -1.0 / n } else { 0.0 })
                        + (if p > 0.0 { -cfg.alpha / n } else { 0.0 });
                    if a != 0.0 {
                        net.value_and_directional(x, &zero, ws);
                        net.backward_tangent(ws, a, 0.0, g);
                        total_a += a;
                    }
                }
            }
        }
    }
    let loss = exact_sum(decrease) / n + cfg.alpha * (exact_sum(positivity) / n);
    (loss, total_a)
}

/// Returns the unweighted switch loss and the value weights applied to the
/// source and destination networks. Gradients are scaled by `beta`.
fn switch_term(
    ni: &LyapunovNet,
    nj: &LyapunovNet,
    t: &SwitchTerms,
    cfg: &LossConfig,
    ws: &mut Workspace,
    mut grads: Option<&mut ModeGrads>,
    beta: f64,
) -> (f64, (f64, f64)) {
    let n = t.points.len() as f64;
    let zero = vec![0.0; t.points.first().map_or(0, Vec::len)];
    let mut hinges = Vec::with_capacity(t.points.len());
    let (mut ai, mut aj) = (0.0, 0.0);
    for (k, x) in t.points.iter().enumerate() {
        let xj = t.images.as_ref().map_or(x, |im| &im[k]);
        let vi = ni.value(x);
        let vj = nj.value(xj);
        let h = vj - vi + cfg.epsilon;
        hinges.push(relu(h));
        if h > 0.0 && beta != 0.0 {
            if let Some(g) = grads.as_deref_mut() {
                let w = beta / n;
                nj.value_and_directional(xj, &zero, ws);
                nj.backward_tangent(ws, w, 0.0, g.get_mut(&t.to).expect("gradient slot"));
                ni.value_and_directional(x, &zero, ws);
                ni.backward_tangent(ws, -w, 0.0, g.get_mut(&t.from).expect("gradient slot"));
                aj += w;
                ai -= w;
            }
        }
    }
    (exact_sum(hinges) / n, (ai, aj))
}

fn mode_problem(
    sys: &SwitchedSystem,
    mode: ModeId,
    samples: &[Sample],
) -> Result<LossProblem, LossError> {
    let bank = SampleBank {
        domain: samples.to_vec(),
        switching: BTreeMap::new(),
    };
    let mut p = LossProblem::new(sys, &bank)?;
    p.modes.retain(|t| t.mode == mode);
    if p.modes.is_empty() {
        return Err(ModelError::UnknownMode(mode).into());
    }
    Ok(p)
}

fn switch_problem(
    sys: &SwitchedSystem,
    pair: (ModeId, ModeId),
    samples: &[Sample],
) -> Result<Option<SwitchTerms>, LossError> {
    sys.mode(pair.0)?;
    sys.mode(pair.1)?;
    let points: Vec<Vec<f64>> = samples
        .iter()
        .filter(|s| !sys.in_exclusion_ball(&s.x))
        .map(|s| s.x.clone())
        .collect();
    if points.is_empty() {
        return Ok(None);
    }
    let imgs = match sys.time {
        TimeSemantics::Continuous => None,
        TimeSemantics::Discrete => Some(images(sys, pair.1, &points)?),
    };
    Ok(Some(SwitchTerms {
        from: pair.0,
        to: pair.1,
        points,
        images: imgs,
    }))
}

fn single_mode_loss(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    mode: ModeId,
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let p = mode_problem(sys, mode, samples)?;
    let net = net_for(bundle, mode)?;
    let mut ws = Workspace::default();
    Ok(mode_term(net, &p.modes[0], sys.time, cfg, &mut ws, None).0)
}

fn single_switch_loss(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    pair: (ModeId, ModeId),
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let Some(t) = switch_problem(sys, pair, samples)? else {
        return Ok(0.0);
    };
    let (ni, nj) = (net_for(bundle, pair.0)?, net_for(bundle, pair.1)?);
    let mut ws = Workspace::default();
    Ok(switch_term(ni, nj, &t, cfg, &mut ws, None, 0.0).0)
}

/// Continuous-time mode loss: mean decrease hinge plus `α` times the mean
/// positivity hinge.
pub fn mode_loss_ct(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    mode: ModeId,
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    require(sys, "mode_loss_ct", TimeSemantics::Continuous)?;
    single_mode_loss(bundle, sys, mode, samples, cfg)
}

/// Discrete-time mode loss.
pub fn mode_loss_dt(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    mode: ModeId,
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    require(sys, "mode_loss_dt", TimeSemantics::Discrete)?;
    single_mode_loss(bundle, sys, mode, samples, cfg)
}

/// Continuous-time switching loss `mean relu(V_j(x) − V_i(x) + ε)`. An empty
/// set contributes 0.
pub fn switch_loss_ct(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    pair: (ModeId, ModeId),
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    require(sys, "switch_loss_ct", TimeSemantics::Continuous)?;
    single_switch_loss(bundle, sys, pair, samples, cfg)
}

/// Discrete-time switching loss `mean relu(V_j(f_j(x)) − V_i(x) + ε)`.
pub fn switch_loss_dt(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    pair: (ModeId, ModeId),
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    require(sys, "switch_loss_dt", TimeSemantics::Discrete)?;
    single_switch_loss(bundle, sys, pair, samples, cfg)
}

/// Semantics-matched total loss over a whole bank.
pub fn total_loss(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    bank: &SampleBank,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    Ok(LossProblem::new(sys, bank)?.evaluate(bundle, cfg, false)?.0)
}

/// Total loss and its gradient with respect to every mode's parameters.
pub fn total_loss_grad(
    bundle: &MlfBundle,
    sys: &SwitchedSystem,
    bank: &SampleBank,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ModeGrads), LossError> {
    let (b, g) = LossProblem::new(sys, bank)?.evaluate(bundle, cfg, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Convenience for tests and tools: a bundle whose every mode uses `net`.
pub fn uniform_bundle(sys: &SwitchedSystem, net: &LyapunovNet) -> MlfBundle {
    Bundle::uniform(sys.mode_ids(), net.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_cancels_without_loss() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum([]), 0.0);
    }

    proptest! {
        #[test]
        fn exact_sum_is_order_invariant(mut v in prop::collection::vec(-1e6f64..1e6, 0..200), k in 0usize..200) {
            let a = exact_sum(v.iter().copied());
            let n = v.len().max(1);
            v.rotate_left(k % n);
            v.reverse();
            prop_assert_eq!(a.to_bits(), exact_sum(v.iter().copied()).to_bits());
        }
    }
}
