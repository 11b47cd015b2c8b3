//! Sound search for violations of the multiple-Lyapunov conditions.
//!
//! [`certify`] runs interval branch-and-bound over the verification region
//! `D_V = D \ B_{ε_b}(x*)`. A box is cleared for a clause when the interval
//! enclosure proves the clause's strict complement on the whole box. Boxes
//! that cannot be cleared are bisected along their longest axis until their
//! width drops below `δ`, at which point a representative point is checked
//! exactly.
//!
//! The root box is split into a fixed set of subtrees that are explored
//! independently and merged in order, so the outcome does not depend on the
//! number of workers.

mod smtlib;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::Dual;
use crate::interval::Interval;
use crate::model::{squared_distance, Membership, ModeId, SwitchedSystem, TimeSemantics};
use crate::net::{Bundle, Candidate};

pub use smtlib::{export_smtlib, parse_sexprs, SExpr, SmtEncode};

/// Number of bisections applied to the root box before the subtrees are
/// handed out.
const SPLIT_LEVELS: u32 = 4;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("point {0:?} is outside the verification region")]
    OutsideRegion(Vec<f64>),
    #[error("bundle has no candidate for mode {0}")]
    MissingMode(ModeId),
    #[error("candidate for mode {mode} takes {got} inputs, system has {expected} states")]
    Dimension {
        mode: ModeId,
        expected: usize,
        got: usize,
    },
}

/// Which clause of the violation predicate a point falsifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "clause", rename_all = "kebab-case")]
pub enum ViolationLabel {
    Positivity { mode: ModeId },
    Decrease { mode: ModeId },
    Switching { from: ModeId, to: ModeId },
}

impl fmt::Display for ViolationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationLabel::Positivity { mode } => write!(f, "positivity({mode})"),
            ViolationLabel::Decrease { mode } => write!(f, "decrease({mode})"),
            ViolationLabel::Switching { from, to } => write!(f, "switching({from},{to})"),
        }
    }
}

impl ViolationLabel {
    pub fn is_switching(&self) -> bool {
        matches!(self, ViolationLabel::Switching { .. })
    }
}

/// A point reported by the certifier. `confirmed` points falsify their
/// clause exactly; unconfirmed ones are centres of boxes that could not be
/// resolved at the requested width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub point: Vec<f64>,
    pub label: ViolationLabel,
    pub confirmed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerificationStatus {
    Certified,
    Violated,
    ResolutionLimit,
}

/// Which inequality is checked on switching regions of discrete systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchCheck {
    /// `V_j(x) < V_i(x)` on `D_ij`.
    #[default]
    Value,
    /// `V_j(f_j(x)) < V_i(x)` on `D_ij`; identical to `Value` for
    /// continuous systems.
    Successor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Boxes narrower than this are point-checked instead of bisected.
    pub delta: f64,
    /// Strictness margin: boxes are cleared only when each condition holds
    /// by more than this.
    pub margin: f64,
    pub workers: usize,
    /// Upper bound on the number of reported points.
    pub max_counterexamples: usize,
    /// Upper bound on the number of boxes processed.
    pub max_boxes: u64,
    pub switch_check: SwitchCheck,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            delta: 1e-3,
            margin: 0.0,
            workers: 1,
            max_counterexamples: 64,
            max_boxes: 4_000_000,
            switch_check: SwitchCheck::Value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub status: VerificationStatus,
    pub counterexamples: Vec<Counterexample>,
    pub boxes_processed: u64,
    pub max_depth: u32,
    /// Whether the box budget ran out before the search finished.
    pub budget_exhausted: bool,
}

impl VerificationOutcome {
    pub fn confirmed(&self) -> impl Iterator<Item = &Counterexample> {
        self.counterexamples.iter().filter(|c| c.confirmed)
    }
}

fn check_bundle<C: Candidate>(bundle: &Bundle<C>, sys: &SwitchedSystem) -> Result<(), VerifyError> {
    for m in sys.mode_ids() {
        let c = bundle.get(m).ok_or(VerifyError::MissingMode(m))?;
        if c.input_dim() != sys.dim() {
            return Err(VerifyError::Dimension {
                mode: m,
                expected: sys.dim(),
                got: c.input_dim(),
            });
        }
    }
    Ok(())
}

fn all_clauses(sys: &SwitchedSystem) -> Vec<ViolationLabel> {
    let mut v = Vec::new();
    for mode in sys.mode_ids() {
        v.push(ViolationLabel::Positivity { mode });
        v.push(ViolationLabel::Decrease { mode });
    }
    for &(from, to) in sys.switches.keys() {
        v.push(ViolationLabel::Switching { from, to });
    }
    v
}

/// Left-hand side `g(x)` of a clause, violated when `g(x) ≥ 0`; `None` when
/// the dynamics cannot be evaluated there.
fn clause_value<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    x: &[f64],
    label: ViolationLabel,
    switch_check: SwitchCheck,
) -> Option<f64> {
    let cand = |m: ModeId| bundle.get(m).expect("bundle checked");
    let g = match label {
        ViolationLabel::Positivity { mode } => -cand(mode).value(x),
        ViolationLabel::Decrease { mode } => {
            let fx = sys.eval_dynamics(mode, x).ok()?;
            match sys.time {
                TimeSemantics::Continuous => {
                    cand(mode).gradient(x).iter().zip(&fx).map(|(a, b)| a * b).sum()
                }
                TimeSemantics::Discrete => cand(mode).value(&fx) - cand(mode).value(x),
            }
        }
        ViolationLabel::Switching { from, to } => {
            let vi = cand(from).value(x);
            let vj = if switch_check == SwitchCheck::Successor && sys.time == TimeSemantics::Discrete {
                cand(to).value(&sys.eval_dynamics(to, x).ok()?)
            } else {
                cand(to).value(x)
            };
            vj - vi
        }
    };
    g.is_finite().then_some(g)
}

fn clause_applies(sys: &SwitchedSystem, x: &[f64], label: ViolationLabel) -> bool {
    match label {
        ViolationLabel::Switching { from, to } => sys.switches[&(from, to)].contains(x),
        _ => true,
    }
}

/// First violated clause at `x`, scanning modes in ascending order
/// (positivity, then decrease) and then switching pairs in order.
pub fn phi_point<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    x: &[f64],
) -> Result<Option<ViolationLabel>, VerifyError> {
    phi_point_with(bundle, sys, x, SwitchCheck::Value)
}

pub fn phi_point_with<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    x: &[f64],
    switch_check: SwitchCheck,
) -> Result<Option<ViolationLabel>, VerifyError> {
    check_bundle(bundle, sys)?;
    if x.len() != sys.dim() || !sys.in_verification_region(x) {
        return Err(VerifyError::OutsideRegion(x.to_vec()));
    }
    Ok(all_clauses(sys)
        .into_iter()
        .find(|&l| violated_at(bundle, sys, x, l, switch_check)))
}

fn violated_at<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    x: &[f64],
    label: ViolationLabel,
    switch_check: SwitchCheck,
) -> bool {
    clause_applies(sys, x, label)
        && clause_value(bundle, sys, x, label, switch_check).is_none_or(|g| g >= 0.0)
}

/// Per-box cache of candidate and dynamics enclosures.
struct BoxEval<'a, C> {
    bundle: &'a Bundle<C>,
    sys: &'a SwitchedSystem,
    bx: &'a [Interval],
    cands: Vec<Option<(Interval, Vec<Interval>)>>,
    dynamics: Vec<Option<Option<Vec<Interval>>>>,
    seed: Option<Vec<Dual>>,
    dual_values: Vec<Option<Dual>>,
    dual_dynamics: Vec<Option<Option<Vec<Dual>>>>,
}

impl<'a, C: Candidate> BoxEval<'a, C> {
    fn new(bundle: &'a Bundle<C>, sys: &'a SwitchedSystem, bx: &'a [Interval]) -> Self {
        let n = sys.modes.len();
        BoxEval {
            bundle,
            sys,
            bx,
            cands: vec![None; n],
            dynamics: vec![None; n],
            seed: None,
            dual_values: vec![None; n],
            dual_dynamics: vec![None; n],
        }
    }

    fn seed(&mut self) -> &[Dual] {
        if self.seed.is_none() {
            self.seed = Some(Dual::seed(self.bx));
        }
        self.seed.as_deref().unwrap()
    }

    fn value_dual(&mut self, m: ModeId) -> Dual {
        let k = m.0 as usize - 1;
        if self.dual_values[k].is_none() {
            let x = self.seed().to_vec();
            self.dual_values[k] = Some(self.bundle.get(m).expect("bundle checked").value_dual(&x));
        }
        self.dual_values[k].clone().unwrap()
    }

    fn dynamics_dual(&mut self, m: ModeId) -> Option<Vec<Dual>> {
        let k = m.0 as usize - 1;
        if self.dual_dynamics[k].is_none() {
            let x = self.seed().to_vec();
            let img = self
                .sys
                .eval_dynamics_dual(m, &x)
                .ok()
                .filter(|v| v.iter().all(Dual::is_finite));
            self.dual_dynamics[k] = Some(img);
        }
        self.dual_dynamics[k].clone().unwrap()
    }

    /// The clause's `g` in dual arithmetic over the box.
    fn clause_dual(&mut self, label: ViolationLabel, switch_check: SwitchCheck) -> Option<Dual> {
        let successor = |ev: &mut Self, m: ModeId| -> Option<Dual> {
            let img = ev.dynamics_dual(m)?;
            Some(ev.bundle.get(m).expect("bundle checked").value_dual(&img))
        };
        let g = match label {
            ViolationLabel::Positivity { mode } => -self.value_dual(mode),
            ViolationLabel::Decrease { mode } => match self.sys.time {
                TimeSemantics::Continuous => {
                    let f = self.dynamics_dual(mode)?;
                    let x = self.seed().to_vec();
                    self.bundle.get(mode).expect("bundle checked").directional_dual(&x, &f)
                }
                TimeSemantics::Discrete => successor(self, mode)? - self.value_dual(mode),
            },
            ViolationLabel::Switching { from, to } => {
                let vj = if switch_check == SwitchCheck::Successor && self.sys.time == TimeSemantics::Discrete {
                    successor(self, to)?
                } else {
                    self.value_dual(to)
                };
                vj - self.value_dual(from)
            }
        };
        g.is_finite().then_some(g)
    }

    fn cand(&mut self, m: ModeId) -> &(Interval, Vec<Interval>) {
        let k = m.0 as usize - 1;
        if self.cands[k].is_none() {
            self.cands[k] = Some(self.bundle.get(m).expect("bundle checked").enclosures(self.bx));
        }
        self.cands[k].as_ref().unwrap()
    }

    fn dyn_image(&mut self, m: ModeId) -> Option<Vec<Interval>> {
        let k = m.0 as usize - 1;
        if self.dynamics[k].is_none() {
            let img = self
                .sys
                .eval_dynamics_interval(m, self.bx)
                .ok()
                .filter(|v| v.iter().all(Interval::is_finite));
            self.dynamics[k] = Some(img);
        }
        self.dynamics[k].clone().unwrap()
    }

    fn successor_value(&mut self, m: ModeId) -> Option<Interval> {
        let img = self.dyn_image(m)?;
        let v = self.bundle.get(m).expect("bundle checked").value_enclosure(&img);
        v.is_finite().then_some(v)
    }

    /// Enclosure of the clause's `g` over the box.
    fn clause(&mut self, label: ViolationLabel, switch_check: SwitchCheck) -> Option<Interval> {
        let g = match label {
            ViolationLabel::Positivity { mode } => -self.cand(mode).0,
            ViolationLabel::Decrease { mode } => match self.sys.time {
                TimeSemantics::Continuous => {
                    let f = self.dyn_image(mode)?;
                    Interval::dot(&self.cand(mode).1, &f)
                }
                TimeSemantics::Discrete => {
                    let next = self.successor_value(mode)?;
                    next - self.cand(mode).0
                }
            },
            ViolationLabel::Switching { from, to } => {
                let vi = self.cand(from).0;
                let vj = if switch_check == SwitchCheck::Successor
                    && self.sys.time == TimeSemantics::Discrete
                {
                    self.successor_value(to)?
                } else {
                    self.cand(to).0
                };
                vj - vi
            }
        };
        g.is_finite().then_some(g)
    }
}

struct Pending {
    label: ViolationLabel,
    /// Upper bound of `g + μ` over the box; larger means more room for a
    /// violation.
    potential: f64,
}

struct Item {
    bx: Vec<Interval>,
    depth: u32,
    pending: Vec<Pending>,
}

impl Item {
    fn potential(&self) -> f64 {
        self.pending
            .iter()
            .map(|p| p.potential)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn max_width(bx: &[Interval]) -> f64 {
    bx.iter().map(Interval::width).fold(0.0, f64::max)
}

fn bisect_longest(bx: &[Interval]) -> (Vec<Interval>, Vec<Interval>) {
    let k = (0..bx.len())
        .max_by(|&a, &b| bx[a].width().total_cmp(&bx[b].width()).then(b.cmp(&a)))
        .expect("non-empty box");
    let (l, r) = bx[k].bisect();
    let mut a = bx.to_vec();
    let mut b = bx.to_vec();
    a[k] = l;
    b[k] = r;
    (a, b)
}

fn center(bx: &[Interval]) -> Vec<f64> {
    bx.iter().map(Interval::mid).collect()
}

#[derive(Default)]
struct SubtreeResult {
    counterexamples: Vec<Counterexample>,
    boxes: u64,
    max_depth: u32,
    unresolved: bool,
    budget_exhausted: bool,
}

struct Search<'a, C> {
    bundle: &'a Bundle<C>,
    sys: &'a SwitchedSystem,
    cfg: &'a VerifyConfig,
    cex_cap: usize,
    box_budget: u64,
}

impl<'a, C: Candidate> Search<'a, C> {
    /// Clauses still open on `bx`, or `None` when the box misses `D_V`.
    fn assess(&self, bx: &[Interval], candidates: &[ViolationLabel]) -> Option<Vec<Pending>> {
        if self.sys.verification_membership(bx) == Membership::Outside {
            return None;
        }
        let mut ev = BoxEval::new(self.bundle, self.sys, bx);
        let mut out = Vec::new();
        for &label in candidates {
            if let ViolationLabel::Switching { from, to } = label {
                if self.sys.switches[&(from, to)].membership(bx) == Membership::Outside {
                    continue;
                }
            }
            let mut g = ev.clause(label, self.cfg.switch_check);
            if g.is_none_or(|g| g.hi() >= -self.cfg.margin) {
                g = self.refine(&mut ev, bx, label).or(g);
            }
            match g {
                Some(g) if g.hi() < -self.cfg.margin => {}
                Some(g) => out.push(Pending {
                    label,
                    potential: g.hi() + self.cfg.margin,
                }),
                None => out.push(Pending {
                    label,
                    potential: f64::INFINITY,
                }),
            }
        }
        Some(out)
    }

    /// Centred-form enclosure `g(c) + ∇g(B)·(B − c)`, intersected with the
    /// dual value enclosure and the plain one.
    fn refine(&self, ev: &mut BoxEval<'_, C>, bx: &[Interval], label: ViolationLabel) -> Option<Interval> {
        let dual = ev.clause_dual(label, self.cfg.switch_check)?;
        let c = center(bx);
        let cbx: Vec<Interval> = c.iter().map(|v| Interval::point(*v)).collect();
        let at_c = BoxEval::new(self.bundle, self.sys, &cbx).clause(label, self.cfg.switch_check)?;
        let mut g = dual.centred(at_c, &c, bx).intersection(&dual.value)?;
        if let Some(plain) = ev.clause(label, self.cfg.switch_check) {
            g = g.intersection(&plain)?;
        }
        g.is_finite().then_some(g)
    }

    fn in_clause_region(&self, x: &[f64], label: ViolationLabel) -> bool {
        self.sys.in_verification_region(x) && clause_applies(self.sys, x, label)
    }

    /// A point of `bx ∩ D_V` (and of the switching region for switching
    /// clauses), preferring the centre.
    fn representative(&self, bx: &[Interval], label: ViolationLabel) -> Option<Vec<f64>> {
        let c = center(bx);
        if self.in_clause_region(&c, label) {
            return Some(c);
        }
        let n = bx.len();
        if n <= 4 {
            // 5-point lattice per axis
            let total = 5usize.pow(n as u32);
            for idx in 0..total {
                let mut k = idx;
                let p: Vec<f64> = bx
                    .iter()
                    .map(|i| {
                        let t = (k % 5) as f64 / 4.0;
                        k /= 5;
                        (i.lo() + t * i.width()).min(i.hi())
                    })
                    .collect();
                if self.in_clause_region(&p, label) {
                    return Some(p);
                }
            }
        }
        // project the centre into the region
        let mut p = c;
        if let ViolationLabel::Switching { from, to } = label {
            self.sys.switches[&(from, to)].clamp(&mut p);
        }
        let eq = &self.sys.equilibrium;
        let d = squared_distance(&p, eq).sqrt();
        let r = self.sys.domain.exclusion_radius;
        if d > 0.0 && d < r {
            let s = r * (1.0 + 1e-9) / d;
            p.iter_mut().zip(eq).for_each(|(v, e)| *v = e + (*v - e) * s);
        }
        if let crate::model::DomainShape::Ball { center, radius } = &self.sys.domain.shape {
            let d = squared_distance(&p, center).sqrt();
            if d > *radius {
                let s = radius * (1.0 - 1e-12) / d;
                p.iter_mut().zip(center).for_each(|(v, c)| *v = c + (*v - c) * s);
            }
        }
        self.in_clause_region(&p, label).then_some(p)
    }

    /// Exact check of `label` at a point of the box; `Some(point)` when it
    /// is violated there.
    fn confirm(&self, bx: &[Interval], label: ViolationLabel) -> Option<Vec<f64>> {
        let c = center(bx);
        let p = if self.in_clause_region(&c, label) {
            c
        } else {
            self.representative(bx, label)?
        };
        violated_at(self.bundle, self.sys, &p, label, self.cfg.switch_check).then_some(p)
    }

    fn run(&self, root: Vec<Interval>) -> SubtreeResult {
        let mut res = SubtreeResult::default();
        let clauses = all_clauses(self.sys);
        let Some(pending) = self.assess(&root, &clauses) else {
            return res;
        };
        let mut stack = vec![Item {
            bx: root,
            depth: SPLIT_LEVELS,
            pending,
        }];
        while let Some(mut item) = stack.pop() {
            if item.pending.is_empty() {
                continue;
            }
            if res.counterexamples.len() >= self.cex_cap {
                res.unresolved = true;
                break;
            }
            if res.boxes >= self.box_budget {
                res.budget_exhausted = true;
                res.unresolved = true;
                if let Some(p) = self.representative(&item.bx, item.pending[0].label) {
                    res.counterexamples.push(Counterexample {
                        point: p,
                        label: item.pending[0].label,
                        confirmed: false,
                    });
                }
                break;
            }
            res.boxes += 1;
            res.max_depth = res.max_depth.max(item.depth);

            // exact check at the centre: cheap and finds violations early
            let mut found = Vec::new();
            for p in &item.pending {
                if let Some(x) = self.confirm_center(&item.bx, p.label) {
                    found.push(p.label);
                    res.counterexamples.push(Counterexample {
                        point: x,
                        label: p.label,
                        confirmed: true,
                    });
                    break;
                }
            }
            item.pending.retain(|p| !found.contains(&p.label));
            if item.pending.is_empty() {
                continue;
            }

            if max_width(&item.bx) < self.cfg.delta {
                let mut confirmed = None;
                for p in &item.pending {
                    if let Some(x) = self.confirm(&item.bx, p.label) {
                        confirmed = Some(Counterexample {
                            point: x,
                            label: p.label,
                            confirmed: true,
                        });
                        break;
                    }
                }
                match confirmed {
                    Some(c) => res.counterexamples.push(c),
                    None => {
                        res.unresolved = true;
                        let label = item.pending[0].label;
                        if let Some(p) = self.representative(&item.bx, label) {
                            res.counterexamples.push(Counterexample {
                                point: p,
                                label,
                                confirmed: false,
                            });
                        }
                    }
                }
                continue;
            }

            let labels: Vec<ViolationLabel> = item.pending.iter().map(|p| p.label).collect();
            let (a, b) = bisect_longest(&item.bx);
            let mut children: Vec<Item> = [a, b]
                .into_iter()
                .filter_map(|bx| {
                    self.assess(&bx, &labels).map(|pending| Item {
                        bx,
                        depth: item.depth + 1,
                        pending,
                    })
                })
                .filter(|c| !c.pending.is_empty())
                .collect();
            // the more promising child is explored first
            children.sort_by(|x, y| x.potential().total_cmp(&y.potential()));
            stack.extend(children);
        }
        if res.counterexamples.iter().any(|c| !c.confirmed) {
            res.unresolved = true;
        }
        res
    }

    fn confirm_center(&self, bx: &[Interval], label: ViolationLabel) -> Option<Vec<f64>> {
        let c = center(bx);
        (self.in_clause_region(&c, label)
            && violated_at(self.bundle, self.sys, &c, label, self.cfg.switch_check))
        .then_some(c)
    }
}

fn subtree_roots(sys: &SwitchedSystem) -> Vec<Vec<Interval>> {
    let mut roots = vec![sys.domain.shape.bounding_box().0];
    for _ in 0..SPLIT_LEVELS {
        roots = roots
            .iter()
            .flat_map(|b| {
                let (l, r) = bisect_longest(b);
                [l, r]
            })
            .collect();
    }
    roots
}

/// Interval branch-and-bound over `D_V`.
pub fn certify<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    cfg: &VerifyConfig,
) -> Result<VerificationOutcome, VerifyError> {
    check_bundle(bundle, sys)?;
    let roots = subtree_roots(sys);
    let n = roots.len();
    let search = Search {
        bundle,
        sys,
        cfg,
        cex_cap: cfg.max_counterexamples.div_ceil(n).max(1),
        box_budget: (cfg.max_boxes / n as u64).max(1),
    };
    let results: Vec<SubtreeResult> = if cfg.workers <= 1 {
        roots.into_iter().map(|r| search.run(r)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        pool.install(|| roots.into_par_iter().map(|r| search.run(r)).collect())
    };
    let mut out = VerificationOutcome {
        status: VerificationStatus::Certified,
        counterexamples: Vec::new(),
        boxes_processed: 0,
        max_depth: 0,
        budget_exhausted: false,
    };
    let mut unresolved = false;
    for r in results {
        out.boxes_processed += r.boxes;
        out.max_depth = out.max_depth.max(r.max_depth);
        out.budget_exhausted |= r.budget_exhausted;
        unresolved |= r.unresolved;
        out.counterexamples.extend(r.counterexamples);
    }
    out.counterexamples.truncate(cfg.max_counterexamples.max(1));
    out.status = if out.counterexamples.iter().any(|c| c.confirmed) {
        VerificationStatus::Violated
    } else if unresolved {
        VerificationStatus::ResolutionLimit
    } else {
        VerificationStatus::Certified
    };
    Ok(out)
}

/// Lattice `lo + (hi − lo)·k/res`, `k = 0..res`, over the domain's bounding box,
/// restricted to `D_V`, in row-major order (last axis fastest).
pub fn grid_points(sys: &SwitchedSystem, resolution: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    let bbox = sys.domain.shape.bounding_box();
    let n = bbox.dim();
    let total = resolution.checked_pow(n as u32).expect("grid size");
    (0..total).filter_map(move |idx| {
        let mut k = idx;
        let mut p = vec![0.0; n];
        for axis in (0..n).rev() {
            let i = &bbox.0[axis];
            p[axis] = i.lo() + i.width() * (k % resolution) as f64 / resolution as f64;
            k /= resolution;
        }
        sys.in_verification_region(&p).then_some(p)
    })
}

/// Exhaustive lattice scan of `D_V` with [`phi_point`]; the first violation
/// found, if any.
pub fn grid_falsify<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    resolution: usize,
) -> Result<Option<Counterexample>, VerifyError> {
    Ok(grid_violations(bundle, sys, resolution, 1)?.into_iter().next())
}

/// Up to `limit` lattice violations.
pub fn grid_violations<C: Candidate>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    resolution: usize,
    limit: usize,
) -> Result<Vec<Counterexample>, VerifyError> {
    check_bundle(bundle, sys)?;
    let mut out = Vec::new();
    for p in grid_points(sys, resolution) {
        if out.len() >= limit {
            break;
        }
        if let Some(label) = phi_point(bundle, sys, &p)? {
            out.push(Counterexample {
                point: p,
                label,
                confirmed: true,
            });
        }
    }
    Ok(out)
}
