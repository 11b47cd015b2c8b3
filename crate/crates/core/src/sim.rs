//! Trajectories of a switched system under explicit switching policies.
//!
//! Continuous systems are integrated with classical fixed-step RK4; discrete
//! systems apply the active map once per step. Switching is decided at step
//! boundaries: when the state lies in `D_ij` for the active mode `i`, the
//! policy may move to `j`, and the new mode drives the next step.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{squared_distance, DomainShape, ModeId, ModelError, SwitchedSystem, TimeSemantics};
use crate::net::derive_seed;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial state {0:?} is outside the domain")]
    OutsideDomain(Vec<f64>),
    #[error("time step must be positive and finite")]
    BadStep,
    #[error("switch probability must lie in [0, 1]")]
    BadProbability,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SwitchPolicy {
    Never,
    /// Switch whenever allowed, to the lowest-numbered destination.
    Always,
    /// Switch with probability `p` when allowed, to a uniformly chosen
    /// destination.
    Random { p: f64, seed: u64 },
    /// Pick the mode that makes `‖x − x*‖` grow fastest (continuous) or
    /// largest after the step (discrete); stay on ties.
    GreedyDestabilize,
}

impl SwitchPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SwitchPolicy::Never => "never",
            SwitchPolicy::Always => "always",
            SwitchPolicy::Random { .. } => "random",
            SwitchPolicy::GreedyDestabilize => "greedy-destabilize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub from: ModeId,
    pub to: ModeId,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Mode active when leaving each state (the last entry repeats the
    /// final mode).
    pub modes: Vec<ModeId>,
    pub events: Vec<SwitchEvent>,
    /// Left the domain inflated by a factor of two.
    pub exited: bool,
    /// Produced a non-finite state.
    pub non_finite: bool,
}

impl Trajectory {
    pub fn write_csv(&self, w: impl Write) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|k| format!("x{k}")));
        header.push("mode".into());
        out.write_record(&header)?;
        for ((t, x), m) in self.times.iter().zip(&self.states).zip(&self.modes) {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(f64::to_string));
            row.push(m.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Every `every`-th sample plus the final one; events are kept whole.
    pub fn thinned(&self, every: usize) -> Trajectory {
        let every = every.max(1);
        let last = self.states.len() - 1;
        let keep = |i: usize| i.is_multiple_of(every) || i == last;
        fn pick<T: Clone>(v: &[T], keep: impl Fn(usize) -> bool) -> Vec<T> {
            v.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, x)| x.clone()).collect()
        }
        Trajectory {
            times: pick(&self.times, keep),
            states: pick(&self.states, keep),
            modes: pick(&self.modes, keep),
            events: self.events.clone(),
            ..*self
        }
    }

    pub fn events_json(&self) -> String {
        serde_json::to_string_pretty(&self.events).expect("events serialize")
    }

    pub fn norm_from(&self, center: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let c = center.to_vec();
        self.states.iter().map(move |x| squared_distance(x, &c).sqrt())
    }
}

fn inflated_contains(sys: &SwitchedSystem, x: &[f64]) -> bool {
    match &sys.domain.shape {
        DomainShape::Ball { center, radius } => squared_distance(x, center) <= 4.0 * radius * radius,
        DomainShape::Box(b) => b.0.iter().zip(x).all(|(i, v)| {
            let (m, h) = (i.mid(), i.width());
            (v - m).abs() <= h
        }),
    }
}

fn rk4(sys: &SwitchedSystem, mode: ModeId, x: &[f64], dt: f64) -> Result<Vec<f64>, ModelError> {
    let add = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> { a.iter().zip(k).map(|(a, k)| a + s * k).collect() };
    let k1 = sys.eval_dynamics(mode, x)?;
    let k2 = sys.eval_dynamics(mode, &add(x, &k1, dt / 2.0))?;
    let k3 = sys.eval_dynamics(mode, &add(x, &k2, dt / 2.0))?;
    let k4 = sys.eval_dynamics(mode, &add(x, &k3, dt))?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Growth measure used by the greedy policy: `d‖x − x*‖²/dt` or
/// `‖f(x) − x*‖²`.
fn growth(sys: &SwitchedSystem, mode: ModeId, x: &[f64]) -> Result<f64, ModelError> {
    let f = sys.eval_dynamics(mode, x)?;
    Ok(match sys.time {
        TimeSemantics::Continuous => 2.0 * x.iter().zip(&sys.equilibrium).zip(&f).map(|((x, e), f)| (x - e) * f).sum::<f64>(),
        TimeSemantics::Discrete => squared_distance(&f, &sys.equilibrium),
    })
}

fn choose(
    sys: &SwitchedSystem,
    policy: &SwitchPolicy,
    rng: &mut ChaCha8Rng,
    mode: ModeId,
    x: &[f64],
) -> Result<ModeId, ModelError> {
    let options: Vec<ModeId> = sys.outgoing(mode).filter(|(_, b)| b.contains(x)).map(|(j, _)| j).collect();
    if options.is_empty() {
        return Ok(mode);
    }
    Ok(match policy {
        SwitchPolicy::Never => mode,
        SwitchPolicy::Always => options[0],
        SwitchPolicy::Random { p, .. } => {
            if rng.gen::<f64>() < *p {
                options[rng.gen_range(0..options.len())]
            } else {
                mode
            }
        }
        SwitchPolicy::GreedyDestabilize => {
            let mut best = (growth(sys, mode, x)?, mode);
            for j in options {
                let g = growth(sys, j, x)?;
                if g > best.0 {
                    best = (g, j);
                }
            }
            best.1
        }
    })
}

/// Simulates from `x0` in `initial_mode`. `horizon` is a time for continuous
/// systems and a step count for discrete ones; `dt` is ignored for discrete
/// systems.
pub fn simulate(
    sys: &SwitchedSystem,
    x0: &[f64],
    initial_mode: ModeId,
    policy: &SwitchPolicy,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory, SimError> {
    sys.mode(initial_mode)?;
    if x0.len() != sys.dim() || !sys.domain.shape.contains(x0) {
        return Err(SimError::OutsideDomain(x0.to_vec()));
    }
    let (steps, dt) = match sys.time {
        TimeSemantics::Continuous => {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(SimError::BadStep);
            }
            ((horizon / dt).round() as usize, dt)
        }
        TimeSemantics::Discrete => (horizon.round() as usize, 1.0),
    };
    let seed = match policy {
        SwitchPolicy::Random { p, seed } => {
            if !(0.0..=1.0).contains(p) {
                return Err(SimError::BadProbability);
            }
            *seed
        }
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Trajectory {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        modes: Vec::new(),
        events: Vec::new(),
        exited: false,
        non_finite: false,
    };
    let mut mode = initial_mode;
    let mut x = x0.to_vec();
    for k in 0..steps {
        let t = k as f64 * dt;
        let next_mode = choose(sys, policy, &mut rng, mode, &x)?;
        if next_mode != mode {
            tr.events.push(SwitchEvent {
                t,
                from: mode,
                to: next_mode,
                state: x.clone(),
            });
            mode = next_mode;
        }
        tr.modes.push(mode);
        let next = match sys.time {
            TimeSemantics::Continuous => rk4(sys, mode, &x, dt),
            TimeSemantics::Discrete => sys.eval_dynamics(mode, &x),
        };
        let next = match next {
            Ok(v) if v.iter().all(|c| c.is_finite()) => v,
            _ => {
                tr.non_finite = true;
                break;
            }
        };
        x = next;
        tr.times.push((k + 1) as f64 * dt);
        tr.states.push(x.clone());
        if !inflated_contains(sys, &x) {
            tr.exited = true;
            break;
        }
    }
    tr.modes.push(mode);
    Ok(tr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub policy: String,
    pub trajectories: usize,
    /// Trajectories inside `B_{ε_b}(x*)` for the whole final `tail` of the
    /// horizon.
    pub settled: usize,
    pub fraction: f64,
    pub entered: usize,
    pub exited: usize,
    pub non_finite: usize,
    /// Largest `max_t ‖x(t) − x*‖ / ‖x(0) − x*‖` over the runs.
    pub max_growth: f64,
    pub tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Fraction of the horizon a trajectory must spend inside the ball at
    /// the end to count as having entered and remained.
    pub tail: f64,
    /// Initial states on the sphere of this radius instead of uniform in D.
    pub init_radius: Option<f64>,
}

impl StabilityConfig {
    pub fn for_system(sys: &SwitchedSystem) -> StabilityConfig {
        match sys.time {
            TimeSemantics::Continuous => StabilityConfig {
                horizon: 200.0,
                dt: 0.01,
                tail: 0.25,
                init_radius: None,
            },
            TimeSemantics::Discrete => StabilityConfig {
                horizon: 200.0,
                dt: 1.0,
                tail: 0.25,
                init_radius: None,
            },
        }
    }
}

/// Deterministic initial states: uniform in `D` (rejection from the bounding
/// box) or uniform on a sphere about `x*`.
pub fn initial_states(sys: &SwitchedSystem, n: usize, seed: u64, radius: Option<f64>) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = sys.domain.shape.bounding_box();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = match radius {
            None => bbox.0.iter().map(|i| rng.gen_range(i.lo()..=i.hi())).collect(),
            Some(r) => {
                let d: Vec<f64> = (0..sys.dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(1e-3..=1.0).contains(&norm) {
                    continue;
                }
                d.iter().zip(&sys.equilibrium).map(|(v, e)| e + r * v / norm).collect()
            }
        };
        if sys.domain.shape.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Simulates `n_inits` runs (initial modes cycling through `1..=N`) and
/// counts those that end up and stay inside `B_{ε_b}(x*)`.
pub fn check_practical_stability(
    sys: &SwitchedSystem,
    policy: &SwitchPolicy,
    n_inits: usize,
    cfg: &StabilityConfig,
    seed: u64,
) -> Result<(StabilityReport, Vec<Trajectory>), SimError> {
    let inits = initial_states(sys, n_inits, seed, cfg.init_radius);
    let modes: Vec<ModeId> = sys.mode_ids().collect();
    let r = sys.domain.exclusion_radius;
    let mut rep = StabilityReport {
        policy: policy.name().into(),
        trajectories: n_inits,
        settled: 0,
        fraction: 0.0,
        entered: 0,
        exited: 0,
        non_finite: 0,
        max_growth: 0.0,
        tail: cfg.tail,
    };
    let mut trajs = Vec::with_capacity(n_inits);
    for (k, x0) in inits.iter().enumerate() {
        // give each random run its own stream
        let pol = match policy {
            SwitchPolicy::Random { p, seed } => SwitchPolicy::Random {
                p: *p,
                seed: derive_seed(*seed, k as u64),
            },
            other => *other,
        };
        let tr = simulate(sys, x0, modes[k % modes.len()], &pol, cfg.horizon, cfg.dt)?;
        let norms: Vec<f64> = tr.norm_from(&sys.equilibrium).collect();
        let n0 = norms[0];
        if n0 > 0.0 {
            rep.max_growth = rep.max_growth.max(norms.iter().fold(0.0_f64, |a, b| a.max(*b)) / n0);
        }
        rep.exited += tr.exited as usize;
        rep.non_finite += tr.non_finite as usize;
        rep.entered += norms.iter().any(|n| *n <= r) as usize;
        let complete = !tr.exited && !tr.non_finite;
        let end = tr.times.last().copied().unwrap_or(0.0);
        let from = end - cfg.tail * end;
        let settled = complete
            && tr
                .times
                .iter()
                .zip(&norms)
                .filter(|(t, _)| **t >= from)
                .all(|(_, n)| *n <= r);
        rep.settled += settled as usize;
        trajs.push(tr);
    }
    rep.fraction = if n_inits == 0 { 1.0 } else { rep.settled as f64 / n_inits as f64 };
    Ok((rep, trajs))
}
