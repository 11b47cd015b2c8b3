//! Switched systems with state-dependent switching regions.
//!
//! A [`SwitchedSystem`] is loaded from a JSON document:
//!
//! ```json
//! {
//!   "time": "continuous",
//!   "state": ["s", "v"],
//!   "constants": {"b": 0.1},
//!   "equilibrium": [0, 0],
//!   "domain": {"ball": {"radius": 3}},
//!   "epsilon_b": 0.15,
//!   "modes": [{"id": 1, "f": ["v", "-9.81*sin(s) - b*v"]}],
//!   "switches": [{"from": 1, "to": 2, "box": [-2.2, -1.8, -3, 3]}]
//! }
//! ```
//!
//! Boxes are flat lists `[x1min, x1max, x2min, x2max, ...]`. `equilibrium`
//! defaults to the origin and `constants` to empty. A ball domain may carry
//! an explicit `"center"`; it defaults to the equilibrium. The domain may
//! instead be `{"box": [...]}`. Unknown top-level keys are ignored so that a
//! single file can also carry run settings for the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Expr, ExprError};
use crate::dual::Dual;
use crate::interval::Interval;

/// Mode index in `Q = {1, …, N}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeId(pub u32);

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSemantics {
    Continuous,
    Discrete,
}

/// A configuration problem, located by a JSON-pointer path.
#[derive(Debug, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub(crate) fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown mode {0}")]
    UnknownMode(ModeId),
    #[error("expected a {expected}-dimensional state, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("mode {mode}: {source}")]
    Eval { mode: ModeId, source: ExprError },
}

/// Three-valued answer of a conservative set-membership test on a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Inside,
    Outside,
    Straddles,
}

/// Axis-aligned closed box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion(pub Vec<Interval>);

impl BoxRegion {
    /// Decodes `[x1min, x1max, x2min, x2max, …]`.
    pub fn from_flat(v: &[f64]) -> Result<BoxRegion, String> {
        if v.is_empty() || !v.len().is_multiple_of(2) {
            return Err(format!(
                "box needs an even, non-zero number of bounds, got {}",
                v.len()
            ));
        }
        v.chunks(2)
            .enumerate()
            .map(|(k, c)| {
                Interval::new(c[0], c[1]).map_err(|e| format!("axis {}: {e}", k + 1))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BoxRegion)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|i| [i.lo(), i.hi()]).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.0.iter().zip(x).all(|(i, v)| i.contains(*v))
    }

    pub fn intersects(&self, other: &BoxRegion) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a.intersects(b))
    }

    pub fn membership(&self, b: &[Interval]) -> Membership {
        if b.iter().zip(&self.0).all(|(x, r)| x.is_subset_of(r)) {
            Membership::Inside
        } else if b.iter().zip(&self.0).any(|(x, r)| !x.intersects(r)) {
            Membership::Outside
        } else {
            Membership::Straddles
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.0.iter().map(Interval::mid).collect()
    }

    /// Corners in binary counting order over the axes.
    pub fn corners(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let n = self.0.len();
        (0..1usize << n).map(move |mask| {
            (0..n)
                .map(|k| {
                    if mask >> k & 1 == 1 {
                        self.0[k].hi()
                    } else {
                        self.0[k].lo()
                    }
                })
                .collect()
        })
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, i) in x.iter_mut().zip(&self.0) {
            *v = v.clamp(i.lo(), i.hi());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainShape {
    Ball { center: Vec<f64>, radius: f64 },
    Box(BoxRegion),
}

/// Working domain `D` together with the excluded ball radius `ε_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub shape: DomainShape,
    pub exclusion_radius: f64,
}

/// Enclosure of `Σ (xᵢ − cᵢ)²` over a box.
pub fn squared_distance_enclosure(b: &[Interval], c: &[f64]) -> Interval {
    b.iter()
        .zip(c)
        .fold(Interval::point(0.0), |acc, (x, ci)| {
            acc + (*x - Interval::point(*ci)).sqr()
        })
}

pub fn squared_distance(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl DomainShape {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            DomainShape::Ball { center, radius } => squared_distance(x, center) <= radius * radius,
            DomainShape::Box(b) => b.contains(x),
        }
    }

    pub fn membership(&self, b: &[Interval]) -> Membership {
        match self {
            DomainShape::Ball { center, radius } => {
                let d = squared_distance_enclosure(b, center);
                let r2 = Interval::point(*radius).sqr();
                if d.hi() <= r2.lo() {
                    Membership::Inside
                } else if d.lo() > r2.hi() {
                    Membership::Outside
                } else {
                    Membership::Straddles
                }
            }
            DomainShape::Box(r) => r.membership(b),
        }
    }

    /// Smallest box containing the shape.
    pub fn bounding_box(&self) -> BoxRegion {
        match self {
            DomainShape::Ball { center, radius } => BoxRegion(
                center
                    .iter()
                    .map(|c| Interval::raw(c - radius, c + radius))
                    .collect(),
            ),
            DomainShape::Box(b) => b.clone(),
        }
    }

    /// Distance from `p` to the boundary (negative when outside).
    pub fn inradius_about(&self, p: &[f64]) -> f64 {
        match self {
            DomainShape::Ball { center, radius } => radius - squared_distance(p, center).sqrt(),
            DomainShape::Box(b) => b
                .0
                .iter()
                .zip(p)
                .map(|(i, v)| (v - i.lo()).min(i.hi() - v))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Largest distance between two points of the shape.
    pub fn diameter(&self) -> f64 {
        match self {
            DomainShape::Ball { radius, .. } => 2.0 * radius,
            DomainShape::Box(b) => b.0.iter().map(|i| i.width() * i.width()).sum::<f64>().sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainShape::Ball { center, .. } => center.len(),
            DomainShape::Box(b) => b.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub id: ModeId,
    pub dynamics: Vec<Expr>,
    /// Expression sources as written in the configuration.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedSystem {
    pub time: TimeSemantics,
    pub state_vars: Vec<String>,
    pub constants: BTreeMap<String, f64>,
    pub equilibrium: Vec<f64>,
    pub domain: Domain,
    pub modes: Vec<Mode>,
    pub switches: BTreeMap<(ModeId, ModeId), BoxRegion>,
    /// Set for arbitrary-switching studies where regions overlap by design.
    pub allow_overlapping_switches: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBall {
    radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum RawDomain {
    Ball(RawBall),
    Box(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMode {
    id: u32,
    f: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitch {
    from: u32,
    to: u32,
    #[serde(rename = "box")]
    region: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    time: TimeSemantics,
    state: Vec<String>,
    #[serde(default)]
    constants: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    equilibrium: Option<Vec<f64>>,
    domain: RawDomain,
    epsilon_b: f64,
    modes: Vec<RawMode>,
    #[serde(default)]
    switches: Vec<RawSwitch>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    allow_overlapping_switches: bool,
    /// Run settings; read by the training driver, not by the model.
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    run: Option<serde_json::Value>,
}

pub(crate) fn pointer_from(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Tolerance for the fixed-point check of the equilibrium.
const EQUILIBRIUM_TOL: f64 = 1e-9;

impl SwitchedSystem {
    pub fn load_config(path: impl AsRef<Path>) -> Result<SwitchedSystem, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(SwitchedSystem::from_json_str(&text)?)
    }

    pub fn from_json_str(text: &str) -> Result<SwitchedSystem, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let raw: RawSystem = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| ConfigError::new(pointer_from(e.path()), e.inner().to_string()))?;
        Self::from_raw(raw)
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<SwitchedSystem, ConfigError> {
        let raw: RawSystem = serde_path_to_error::deserialize(value)
            .map_err(|e| ConfigError::new(pointer_from(e.path()), e.inner().to_string()))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawSystem) -> Result<SwitchedSystem, ConfigError> {
        let n = raw.state.len();
        if n == 0 {
            return Err(ConfigError::new("/state", "at least one state variable"));
        }
        for (k, name) in raw.state.iter().enumerate() {
            let ok = name
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !ok {
                return Err(ConfigError::new(
                    format!("/state/{k}"),
                    format!("`{name}` is not a valid identifier"),
                ));
            }
            if raw.state[..k].contains(name) {
                return Err(ConfigError::new(
                    format!("/state/{k}"),
                    format!("duplicate variable `{name}`"),
                ));
            }
        }
        for (k, v) in &raw.constants {
            if !v.is_finite() {
                return Err(ConfigError::new(format!("/constants/{k}"), "must be finite"));
            }
        }
        let equilibrium = raw.equilibrium.clone().unwrap_or_else(|| vec![0.0; n]);
        if equilibrium.len() != n || equilibrium.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::new(
                "/equilibrium",
                format!("expected {n} finite coordinates"),
            ));
        }

        let shape = match &raw.domain {
            RawDomain::Ball(b) => {
                if !(b.radius.is_finite() && b.radius > 0.0) {
                    return Err(ConfigError::new("/domain/ball/radius", "must be positive"));
                }
                let center = b.center.clone().unwrap_or_else(|| equilibrium.clone());
                if center.len() != n {
                    return Err(ConfigError::new(
                        "/domain/ball/center",
                        format!("expected {n} coordinates"),
                    ));
                }
                DomainShape::Ball {
                    center,
                    radius: b.radius,
                }
            }
            RawDomain::Box(v) => {
                let b = BoxRegion::from_flat(v).map_err(|m| ConfigError::new("/domain/box", m))?;
                if b.dim() != n {
                    return Err(ConfigError::new(
                        "/domain/box",
                        format!("expected {} bounds", 2 * n),
                    ));
                }
                DomainShape::Box(b)
            }
        };
        let eps = raw.epsilon_b;
        if !(eps.is_finite() && eps > 0.0) {
            return Err(ConfigError::new("/epsilon_b", "must be positive"));
        }
        let inradius = shape.inradius_about(&equilibrium);
        if inradius <= 0.0 {
            return Err(ConfigError::new(
                "/equilibrium",
                "equilibrium must lie in the interior of the domain",
            ));
        }
        if eps >= inradius {
            return Err(ConfigError::new(
                "/epsilon_b",
                format!("must be smaller than the domain inradius {inradius} about the equilibrium"),
            ));
        }

        if raw.modes.is_empty() {
            return Err(ConfigError::new("/modes", "at least one mode"));
        }
        let mut modes = Vec::with_capacity(raw.modes.len());
        for (k, m) in raw.modes.iter().enumerate() {
            if m.id as usize != k + 1 {
                return Err(ConfigError::new(
                    format!("/modes/{k}/id"),
                    format!("modes must be numbered 1..N in order; expected {}", k + 1),
                ));
            }
            if m.f.len() != n {
                return Err(ConfigError::new(
                    format!("/modes/{k}/f"),
                    format!("expected {n} expressions, got {}", m.f.len()),
                ));
            }
            let dynamics = m
                .f
                .iter()
                .enumerate()
                .map(|(c, src)| {
                    expr::parse(src, &raw.state, &raw.constants)
                        .map_err(|e| ConfigError::new(format!("/modes/{k}/f/{c}"), e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            modes.push(Mode {
                id: ModeId(m.id),
                dynamics,
                sources: m.f.clone(),
            });
        }

        let mut switches = BTreeMap::new();
        for (k, s) in raw.switches.iter().enumerate() {
            let path = format!("/switches/{k}");
            let nmodes = modes.len() as u32;
            if s.from == 0 || s.from > nmodes || s.to == 0 || s.to > nmodes {
                return Err(ConfigError::new(&path, "switch refers to an unknown mode"));
            }
            if s.from == s.to {
                return Err(ConfigError::new(&path, "switch must connect two distinct modes"));
            }
            let region = BoxRegion::from_flat(&s.region)
                .map_err(|m| ConfigError::new(format!("{path}/box"), m))?;
            if region.dim() != n {
                return Err(ConfigError::new(
                    format!("{path}/box"),
                    format!("expected {} bounds", 2 * n),
                ));
            }
            if shape.membership(&region.0) == Membership::Outside {
                return Err(ConfigError::new(
                    format!("{path}/box"),
                    "switching region does not meet the domain",
                ));
            }
            let key = (ModeId(s.from), ModeId(s.to));
            if switches.insert(key, region).is_some() {
                return Err(ConfigError::new(&path, "duplicate switching pair"));
            }
        }
        if !raw.allow_overlapping_switches {
            let keys: Vec<_> = switches.keys().copied().collect();
            for (a, ka) in keys.iter().enumerate() {
                for kb in &keys[a + 1..] {
                    if switches[ka].intersects(&switches[kb]) {
                        let idx = raw
                            .switches
                            .iter()
                            .position(|s| (ModeId(s.from), ModeId(s.to)) == *kb)
                            .unwrap_or(0);
                        return Err(ConfigError::new(
                            format!("/switches/{idx}/box"),
                            format!(
                                "switching regions {}->{} and {}->{} overlap",
                                ka.0, ka.1, kb.0, kb.1
                            ),
                        ));
                    }
                }
            }
        }

        let sys = SwitchedSystem {
            time: raw.time,
            state_vars: raw.state.clone(),
            constants: raw.constants.clone(),
            equilibrium,
            domain: Domain {
                shape,
                exclusion_radius: eps,
            },
            modes,
            switches,
            allow_overlapping_switches: raw.allow_overlapping_switches,
        };
        for (k, m) in sys.modes.iter().enumerate() {
            let fx = sys
                .eval_dynamics(m.id, &sys.equilibrium)
                .map_err(|e| ConfigError::new(format!("/modes/{k}/f"), e.to_string()))?;
            let target: Vec<f64> = match sys.time {
                TimeSemantics::Continuous => vec![0.0; n],
                TimeSemantics::Discrete => sys.equilibrium.clone(),
            };
            if fx
                .iter()
                .zip(&target)
                .any(|(a, b)| (a - b).abs() > EQUILIBRIUM_TOL)
            {
                return Err(ConfigError::new(
                    format!("/modes/{k}/f"),
                    "the equilibrium is not a fixed point of this mode",
                ));
            }
        }
        Ok(sys)
    }

    fn to_raw(&self) -> RawSystem {
        let domain = match &self.domain.shape {
            DomainShape::Ball { center, radius } => RawDomain::Ball(RawBall {
                radius: *radius,
                center: (center != &self.equilibrium).then(|| center.clone()),
            }),
            DomainShape::Box(b) => RawDomain::Box(b.to_flat()),
        };
        RawSystem {
            time: self.time,
            state: self.state_vars.clone(),
            constants: self.constants.clone(),
            equilibrium: Some(self.equilibrium.clone()),
            domain,
            epsilon_b: self.domain.exclusion_radius,
            modes: self
                .modes
                .iter()
                .map(|m| RawMode {
                    id: m.id.0,
                    f: m.sources.clone(),
                })
                .collect(),
            switches: self
                .switches
                .iter()
                .map(|((i, j), b)| RawSwitch {
                    from: i.0,
                    to: j.0,
                    region: b.to_flat(),
                })
                .collect(),
            allow_overlapping_switches: self.allow_overlapping_switches,
            run: None,
        }
    }

    /// JSON document that reloads to an equal system.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.to_raw()).expect("system serializes")
    }

    pub fn dim(&self) -> usize {
        self.state_vars.len()
    }

    pub fn mode_ids(&self) -> impl Iterator<Item = ModeId> + '_ {
        self.modes.iter().map(|m| m.id)
    }

    pub fn mode(&self, id: ModeId) -> Result<&Mode, ModelError> {
        id.0.checked_sub(1)
            .and_then(|k| self.modes.get(k as usize))
            .ok_or(ModelError::UnknownMode(id))
    }

    /// `f_i(x)`: the vector field (continuous) or the successor state
    /// (discrete).
    pub fn eval_dynamics(&self, mode: ModeId, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let m = self.mode(mode)?;
        if x.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        m.dynamics
            .iter()
            .map(|e| e.eval_point(x))
            .collect::<Result<_, _>>()
            .map_err(|source| ModelError::Eval { mode, source })
    }

    pub fn eval_dynamics_interval(
        &self,
        mode: ModeId,
        b: &[Interval],
    ) -> Result<Vec<Interval>, ModelError> {
        let m = self.mode(mode)?;
        m.dynamics
            .iter()
            .map(|e| e.eval_interval(b))
            .collect::<Result<_, _>>()
            .map_err(|source| ModelError::Eval { mode, source })
    }

    /// `f_mode` with gradient enclosures over the box the duals were seeded
    /// on.
    pub fn eval_dynamics_dual(&self, mode: ModeId, x: &[Dual]) -> Result<Vec<Dual>, ModelError> {
        let m = self.mode(mode)?;
        m.dynamics
            .iter()
            .map(|e| e.eval_dual(x))
            .collect::<Result<_, _>>()
            .map_err(|source| ModelError::Eval { mode, source })
    }

    /// `x ∈ B_{ε_b}(x*)` (closed ball).
    pub fn in_exclusion_ball(&self, x: &[f64]) -> bool {
        let r = self.domain.exclusion_radius;
        squared_distance(x, &self.equilibrium) <= r * r
    }

    /// `x ∈ D_V = {x ∈ D : ‖x − x*‖ ≥ ε_b}`.
    pub fn in_verification_region(&self, x: &[f64]) -> bool {
        let r = self.domain.exclusion_radius;
        self.domain.shape.contains(x) && squared_distance(x, &self.equilibrium) >= r * r
    }

    /// Conservative membership of a box in `D_V`.
    pub fn verification_membership(&self, b: &[Interval]) -> Membership {
        let dom = self.domain.shape.membership(b);
        if dom == Membership::Outside {
            return Membership::Outside;
        }
        let d = squared_distance_enclosure(b, &self.equilibrium);
        let r2 = Interval::point(self.domain.exclusion_radius).sqr();
        let outside_ball = if d.lo() >= r2.hi() {
            Membership::Inside
        } else if d.hi() < r2.lo() {
            Membership::Outside
        } else {
            Membership::Straddles
        };
        match (dom, outside_ball) {
            (_, Membership::Outside) => Membership::Outside,
            (Membership::Inside, Membership::Inside) => Membership::Inside,
            _ => Membership::Straddles,
        }
    }

    /// Regions a trajectory in `mode` may switch out of, with their targets.
    pub fn outgoing(&self, mode: ModeId) -> impl Iterator<Item = (ModeId, &BoxRegion)> + '_ {
        self.switches
            .iter()
            .filter(move |((i, _), _)| *i == mode)
            .map(|((_, j), b)| (*j, b))
    }

    /// Same modes and domain, with every ordered pair of distinct modes
    /// allowed to switch anywhere in the domain.
    pub fn with_arbitrary_switching(&self) -> SwitchedSystem {
        let bbox = self.domain.shape.bounding_box();
        let mut switches = BTreeMap::new();
        for i in self.mode_ids() {
            for j in self.mode_ids() {
                if i != j {
                    switches.insert((i, j), bbox.clone());
                }
            }
        }
        SwitchedSystem {
            switches,
            allow_overlapping_switches: true,
            ..self.clone()
        }
    }
}
