//! SMT-LIB2 export of the violation query, for external delta-SAT solvers.
//!
//! The document asserts `∃x ∈ D_V : Φ(x)`; `unsat` means the bundle is a
//! certificate. Networks are unrolled into `let`-bound `tanh` terms.

use std::fmt::Write as _;

use crate::expr::{BinaryOp, Expr, UnaryOp};
use crate::model::{DomainShape, SwitchedSystem, TimeSemantics};
use crate::net::{Bundle, LyapunovNet, QuadraticCandidate};

use super::SwitchCheck;

/// Candidates that can be written as SMT-LIB terms over named variables.
pub trait SmtEncode {
    /// Term for `V(x)`.
    fn smt_value(&self, vars: &[String]) -> String;
    /// Term for `∇V(x)·d` given the direction components as terms.
    fn smt_directional(&self, vars: &[String], dir: &[String]) -> String;
}

/// Decimal literal; negative values become `(- …)`.
pub(crate) fn num(v: f64) -> String {
    if v == 0.0 {
        return "0.0".into();
    }
    if v < 0.0 {
        return format!("(- {})", num(-v));
    }
    let s = format!("{v}");
    if s.contains('.') {
        s
    } else {
        s + ".0"
    }
}

fn sum(terms: Vec<String>) -> String {
    match terms.len() {
        0 => "0.0".into(),
        1 => terms.into_iter().next().unwrap(),
        _ => format!("(+ {})", terms.join(" ")),
    }
}

fn affine(weights: &[f64], inputs: &[String], bias: f64) -> String {
    let mut t: Vec<String> = weights
        .iter()
        .zip(inputs)
        .map(|(w, x)| format!("(* {} {x})", num(*w)))
        .collect();
    t.push(num(bias));
    sum(t)
}

fn linear(weights: &[f64], inputs: &[String]) -> String {
    sum(weights
        .iter()
        .zip(inputs)
        .map(|(w, x)| format!("(* {} {x})", num(*w)))
        .collect())
}

impl LyapunovNet {
    /// `let` bindings for the hidden activations; returns the opening text,
    /// the number of opened `let`s and the names of the last layer's units.
    fn smt_hidden(&self, vars: &[String]) -> (String, usize, Vec<String>) {
        let layers = self.layers();
        let mut open = String::new();
        let mut names: Vec<String> = vars.to_vec();
        for (li, l) in layers[..layers.len() - 1].iter().enumerate() {
            let rows = l.weight_rows();
            let next: Vec<String> = (0..rows.len()).map(|j| format!("nmlf_h{}_{}", li + 1, j + 1)).collect();
            let binds: Vec<String> = rows
                .iter()
                .zip(l.bias())
                .zip(&next)
                .map(|((r, b), n)| format!("({n} (tanh {}))", affine(r, &names, *b)))
                .collect();
            let _ = write!(open, "(let ({}) ", binds.join(" "));
            names = next;
        }
        (open, layers.len() - 1, names)
    }
}

impl SmtEncode for LyapunovNet {
    fn smt_value(&self, vars: &[String]) -> String {
        let (open, lets, last) = self.smt_hidden(vars);
        let out = self.layers().last().unwrap();
        let offset = self.raw_value(self.equilibrium());
        format!(
            "{open}(- {} {}){}",
            affine(&out.weight_rows()[0], &last, out.bias()[0]),
            num(offset),
            ")".repeat(lets)
        )
    }

    fn smt_directional(&self, vars: &[String], dir: &[String]) -> String {
        let (mut text, mut lets, _) = self.smt_hidden(vars);
        let layers = self.layers();
        let nh = layers.len() - 1;
        // adjoints g_l = ∂v/∂h_l, then ∂v/∂x
        let mut adj: Vec<String> = layers[nh].weight_rows()[0].iter().map(|w| num(*w)).collect();
        for li in (0..nh).rev() {
            let rows = layers[li].weight_rows();
            let scaled: Vec<String> = (0..rows.len()).map(|j| format!("nmlf_a{}_{}", li + 1, j + 1)).collect();
            let binds: Vec<String> = adj
                .iter()
                .zip(&scaled)
                .enumerate()
                .map(|(j, (a, n))| {
                    let h = format!("nmlf_h{}_{}", li + 1, j + 1);
                    format!("({n} (* {a} (- 1.0 (* {h} {h}))))")
                })
                .collect();
            let _ = write!(text, "(let ({}) ", binds.join(" "));
            lets += 1;
            let cols = rows[0].len();
            adj = (0..cols)
                .map(|k| {
                    let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
                    linear(&col, &scaled)
                })
                .collect();
        }
        let terms = adj
            .iter()
            .zip(dir)
            .map(|(g, d)| format!("(* {g} {d})"))
            .collect();
        format!("{text}{}{}", sum(terms), ")".repeat(lets))
    }
}

impl SmtEncode for QuadraticCandidate {
    fn smt_value(&self, vars: &[String]) -> String {
        sum(vars
            .iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((x, c), w)| format!("(* {} (- {x} {}) (- {x} {}))", num(*w), num(*c), num(*c)))
            .collect())
    }

    fn smt_directional(&self, vars: &[String], dir: &[String]) -> String {
        sum(vars
            .iter()
            .zip(&self.center)
            .zip(&self.weights)
            .zip(dir)
            .map(|(((x, c), w), d)| format!("(* {} (- {x} {}) {d})", num(2.0 * w), num(*c)))
            .collect())
    }
}

fn expr_term(e: &Expr, vars: &[String]) -> String {
    match e {
        Expr::Lit(c) => num(*c),
        Expr::Var(i) => vars[*i].clone(),
        Expr::Unary(op, a) => {
            let a = expr_term(a, vars);
            match op {
                UnaryOp::Neg => format!("(- {a})"),
                UnaryOp::Abs => format!("(ite (>= {a} 0.0) {a} (- {a}))"),
                UnaryOp::Sin => format!("(sin {a})"),
                UnaryOp::Cos => format!("(cos {a})"),
                UnaryOp::Tan => format!("(tan {a})"),
                UnaryOp::Exp => format!("(exp {a})"),
            }
        }
        Expr::Binary(op, a, b) => {
            let sym = match op {
                BinaryOp::Add => "+",
                BinaryOp::Sub => "-",
                BinaryOp::Mul => "*",
                BinaryOp::Div => "/",
            };
            format!("({sym} {} {})", expr_term(a, vars), expr_term(b, vars))
        }
        Expr::Pow(a, n) => {
            let a = expr_term(a, vars);
            match n {
                0 => "1.0".into(),
                1 => a,
                _ => format!("(* {})", vec![a; *n as usize].join(" ")),
            }
        }
    }
}

fn call(name: &str, args: &[String]) -> String {
    format!("({name} {})", args.join(" "))
}

/// The violation query for `bundle` on `sys` as an SMT-LIB2 document.
pub fn export_smtlib<C: SmtEncode>(
    bundle: &Bundle<C>,
    sys: &SwitchedSystem,
    switch_check: SwitchCheck,
) -> String {
    let vars = &sys.state_vars;
    let params: String = vars.iter().map(|v| format!("({v} Real)")).collect::<Vec<_>>().join(" ");
    let mut doc = String::new();
    let _ = writeln!(doc, "; violation query: sat iff some state in D_V breaks a multiple-Lyapunov condition");
    let _ = writeln!(doc, "; modes: {}  switching pairs: {}", sys.modes.len(), sys.switches.len());
    let _ = writeln!(doc, "(set-logic QF_NRA)");
    for v in vars {
        let _ = writeln!(doc, "(declare-fun {v} () Real)");
    }
    for m in &sys.modes {
        let id = m.id.0;
        for (k, e) in m.dynamics.iter().enumerate() {
            let _ = writeln!(doc, "(define-fun f_{id}_{} ({params}) Real {})", k + 1, expr_term(e, vars));
        }
        let c = bundle.get(m.id).expect("bundle covers every mode");
        let _ = writeln!(doc, "(define-fun V_{id} ({params}) Real {})", c.smt_value(vars));
        let image: Vec<String> = (1..=vars.len()).map(|k| call(&format!("f_{id}_{k}"), vars)).collect();
        match sys.time {
            TimeSemantics::Continuous => {
                let _ = writeln!(doc, "(define-fun LV_{id} ({params}) Real {})", c.smt_directional(vars, &image));
            }
            TimeSemantics::Discrete => {
                let _ = writeln!(
                    doc,
                    "(define-fun DV_{id} ({params}) Real (- {} {}))",
                    call(&format!("V_{id}"), &image),
                    call(&format!("V_{id}"), vars)
                );
            }
        }
    }
    for ((i, j), b) in &sys.switches {
        let bounds: Vec<String> = b
            .0
            .iter()
            .zip(vars)
            .map(|(iv, v)| format!("(<= {} {v}) (<= {v} {})", num(iv.lo()), num(iv.hi())))
            .collect();
        let _ = writeln!(doc, "(define-fun in_D_{i}_{j} ({params}) Bool (and {}))", bounds.join(" "));
    }
    let dist2 = |c: &[f64]| {
        sum(vars
            .iter()
            .zip(c)
            .map(|(v, c)| format!("(* (- {v} {}) (- {v} {}))", num(*c), num(*c)))
            .collect())
    };
    let domain = match &sys.domain.shape {
        DomainShape::Ball { center, radius } => format!("(<= {} {})", dist2(center), num(radius * radius)),
        DomainShape::Box(b) => format!(
            "(and {})",
            b.0.iter()
                .zip(vars)
                .map(|(iv, v)| format!("(<= {} {v}) (<= {v} {})", num(iv.lo()), num(iv.hi())))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    };
    let r = sys.domain.exclusion_radius;
    let _ = writeln!(doc, "(assert {domain})");
    let _ = writeln!(doc, "(assert (>= {} {}))", dist2(&sys.equilibrium), num(r * r));
    let mut clauses = Vec::new();
    for m in sys.mode_ids() {
        let id = m.0;
        clauses.push(format!("(<= {} 0.0)", call(&format!("V_{id}"), vars)));
        let dec = match sys.time {
            TimeSemantics::Continuous => format!("LV_{id}"),
            TimeSemantics::Discrete => format!("DV_{id}"),
        };
        clauses.push(format!("(>= {} 0.0)", call(&dec, vars)));
    }
    for (i, j) in sys.switches.keys() {
        let vj = if switch_check == SwitchCheck::Successor && sys.time == TimeSemantics::Discrete {
            let image: Vec<String> = (1..=vars.len()).map(|k| call(&format!("f_{j}_{k}"), vars)).collect();
            call(&format!("V_{j}"), &image)
        } else {
            call(&format!("V_{j}"), vars)
        };
        clauses.push(format!(
            "(and {} (>= {vj} {}))",
            call(&format!("in_D_{i}_{j}"), vars),
            call(&format!("V_{i}"), vars)
        ));
    }
    let _ = writeln!(doc, "(assert (or {}))", clauses.join(" "));
    let _ = writeln!(doc, "(check-sat)");
    let _ = writeln!(doc, "(exit)");
    doc
}

#[derive(Debug, Clone, PartialEq)]
pub enum SExpr {
    Atom(String),
    List(Vec<SExpr>),
}

impl SExpr {
    pub fn head(&self) -> Option<&str> {
        match self {
            SExpr::List(v) => match v.first() {
                Some(SExpr::Atom(a)) => Some(a),
                _ => None,
            },
            SExpr::Atom(_) => None,
        }
    }
}

/// Minimal SMT-LIB2 reader: parentheses, symbols, numerals, decimals, and
/// `;` comments. Returns the top-level forms.
pub fn parse_sexprs(text: &str) -> Result<Vec<SExpr>, String> {
    let mut stack: Vec<Vec<SExpr>> = vec![Vec::new()];
    let mut chars = text.char_indices().peekable();
    while let Some((pos, c)) = chars.next() {
        match c {
            ';' => {
                for (_, c) in chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
            }
            '(' => stack.push(Vec::new()),
            ')' => {
                let done = stack.pop().unwrap();
                let parent = stack
                    .last_mut()
                    .ok_or_else(|| format!("unbalanced `)` at byte {pos}"))?;
                parent.push(SExpr::List(done));
            }
            c if c.is_whitespace() => {}
            c if c.is_ascii_graphic() => {
                let mut atom = String::from(c);
                while let Some(&(_, n)) = chars.peek() {
                    if n.is_whitespace() || n == '(' || n == ')' || n == ';' {
                        break;
                    }
                    if !n.is_ascii_graphic() || n == '"' || n == '|' {
                        return Err(format!("unsupported character {n:?} in atom"));
                    }
                    atom.push(n);
                    chars.next();
                }
                if c == '"' || c == '|' {
                    return Err(format!("unsupported token at byte {pos}"));
                }
                stack.last_mut().unwrap().push(SExpr::Atom(atom));
            }
            c => return Err(format!("unexpected character {c:?} at byte {pos}")),
        }
        if stack.is_empty() {
            return Err(format!("unbalanced `)` at byte {pos}"));
        }
    }
    if stack.len() != 1 {
        return Err("unterminated list".into());
    }
    Ok(stack.pop().unwrap())
}
