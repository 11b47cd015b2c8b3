//! Per-mode neural Lyapunov candidates.
//!
//! Each candidate is a fully connected network `v(x)` with `tanh` hidden
//! layers and a linear scalar output, shifted so that
//! `V(x) = v(x) − v(x*)` vanishes exactly at the equilibrium.
//!
//! Parameter gradients cover losses built from `V(x)` and directional
//! derivatives `∇V(x)·d` (the Lie derivative when `d = f(x)`). The directional
//! derivative is computed by pushing a tangent through the forward pass, and
//! the combined value/tangent pass is then reversed by hand.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::Dual;
use crate::interval::Interval;
use crate::model::ModeId;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("malformed weight document: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Anything that can stand in for `V_i`: point value and gradient plus
/// sound enclosures of both over a box.
pub trait Candidate: Send + Sync {
    fn input_dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn value_enclosure(&self, b: &[Interval]) -> Interval;
    fn gradient_enclosure(&self, b: &[Interval]) -> Vec<Interval>;

    fn enclosures(&self, b: &[Interval]) -> (Interval, Vec<Interval>) {
        (self.value_enclosure(b), self.gradient_enclosure(b))
    }

    /// `V` over the box the duals were seeded on, with a gradient enclosure.
    fn value_dual(&self, x: &[Dual]) -> Dual;

    /// `∇V(x)·d(x)` over the seeded box, with a gradient enclosure.
    fn directional_dual(&self, x: &[Dual], d: &[Dual]) -> Dual;
}

/// Dense layer `W·h + b`, weights stored row-major (`rows` outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Layer, NetError> {
        let rows = weights.len();
        let cols = weights.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(NetError::Shape("empty weight matrix".into()));
        }
        if weights.iter().any(|r| r.len() != cols) {
            return Err(NetError::Shape("ragged weight matrix".into()));
        }
        if bias.len() != rows {
            return Err(NetError::Shape(format!(
                "bias has {} entries for {rows} rows",
                bias.len()
            )));
        }
        let weights: Vec<f64> = weights.into_iter().flatten().collect();
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(NetError::Malformed("non-finite parameter".into()));
        }
        Ok(Layer {
            rows,
            cols,
            weights,
            bias,
        })
    }

    fn zeros(rows: usize, cols: usize) -> Layer {
        Layer {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    #[inline]
    fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.cols..(j + 1) * self.cols]
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weight_rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One loss contribution `value_weight·V(x) + grad_weight·∇V(x)`.
#[derive(Debug, Clone)]
pub struct PointTerm {
    pub x: Vec<f64>,
    pub value_weight: f64,
    pub grad_weight: Option<Vec<f64>>,
}

/// Reusable buffers for the value/tangent pass.
#[derive(Debug, Default)]
pub struct Workspace {
    h: Vec<Vec<f64>>,
    hd: Vec<Vec<f64>>,
    zd: Vec<Vec<f64>>,
    hbar: Vec<f64>,
    hdbar: Vec<f64>,
    zbar: Vec<f64>,
    zdbar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovNet {
    layers: Vec<Layer>,
    equilibrium: Vec<f64>,
    offset: f64,
}

impl LyapunovNet {
    /// Glorot-uniform weights and uniform biases in `[-1, 1]`, deterministic
    /// in `seed`. Equilibrium at the origin.
    pub fn init(state_dim: usize, hidden: &[usize], seed: u64) -> Result<LyapunovNet, NetError> {
        Self::init_scaled(state_dim, hidden, seed, vec![0.0; state_dim], 1.0)
    }

    /// Like [`LyapunovNet::init`], with the first layer's weights divided by
    /// `input_scale` so that pre-activations stay `O(1)` over a domain of that
    /// radius.
    pub fn init_scaled(
        state_dim: usize,
        hidden: &[usize],
        seed: u64,
        equilibrium: Vec<f64>,
        input_scale: f64,
    ) -> Result<LyapunovNet, NetError> {
        if state_dim == 0 {
            return Err(NetError::Architecture("state dimension must be positive".into()));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(NetError::Architecture(
                "need at least one hidden layer, all widths >= 1".into(),
            ));
        }
        if equilibrium.len() != state_dim {
            return Err(NetError::Shape("equilibrium dimension".into()));
        }
        if !(input_scale.is_finite() && input_scale > 0.0) {
            return Err(NetError::Architecture("input scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == 0 {
                limit /= input_scale;
            }
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            let bias = (0..fan_out).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            layers.push(Layer {
                rows: fan_out,
                cols: fan_in,
                weights,
                bias,
            });
        }
        Ok(Self::from_layers(layers, equilibrium))
    }

    /// Network with every parameter zero, so `V ≡ 0`.
    pub fn zeros(state_dim: usize, hidden: &[usize]) -> LyapunovNet {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        Self::from_layers(layers, vec![0.0; state_dim])
    }

    pub fn from_layers(layers: Vec<Layer>, equilibrium: Vec<f64>) -> LyapunovNet {
        let mut net = LyapunovNet {
            layers,
            equilibrium,
            offset: 0.0,
        };
        net.refresh_offset();
        net
    }

    fn validate(layers: &[Layer], equilibrium: &[f64]) -> Result<(), NetError> {
        let first = layers
            .first()
            .ok_or_else(|| NetError::Shape("no layers".into()))?;
        if first.cols != equilibrium.len() {
            return Err(NetError::Shape(format!(
                "input width {} does not match state dimension {}",
                first.cols,
                equilibrium.len()
            )));
        }
        for w in layers.windows(2) {
            if w[1].cols != w[0].rows {
                return Err(NetError::Shape(format!(
                    "layer expects {} inputs but previous layer has {} outputs",
                    w[1].cols, w[0].rows
                )));
            }
        }
        if layers.last().map(|l| l.rows) != Some(1) {
            return Err(NetError::Shape("output width must be 1".into()));
        }
        if layers.len() < 2 {
            return Err(NetError::Shape("need at least one hidden layer".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn equilibrium(&self) -> &[f64] {
        &self.equilibrium
    }

    /// `[input, hidden…, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].cols];
        w.extend(self.layers.iter().map(|l| l.rows));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Flat parameter vector: for each layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites the parameters (same layout as [`LyapunovNet::params`]) and
    /// recomputes `v(x*)`.
    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
        self.refresh_offset();
    }

    fn refresh_offset(&mut self) {
        let eq = self.equilibrium.clone();
        self.offset = self.raw_value(&eq);
    }

    /// `v(x)` without the equilibrium shift.
    pub fn raw_value(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let (hidden, out) = self.layers.split_at(self.layers.len() - 1);
        for l in hidden {
            h = (0..l.rows)
                .map(|j| (l.bias[j] + dot(l.row(j), &h)).tanh())
                .collect();
        }
        out[0].bias[0] + dot(out[0].row(0), &h)
    }

    /// `V(x) = v(x) − v(x*)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.raw_value(x) - self.offset
    }

    /// Reverse-mode `∇V(x)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (hidden, out) = self.layers.split_at(self.layers.len() - 1);
        let mut acts = Vec::with_capacity(hidden.len() + 1);
        acts.push(x.to_vec());
        for l in hidden {
            let h = acts.last().unwrap();
            let next = (0..l.rows)
                .map(|j| (l.bias[j] + dot(l.row(j), h)).tanh())
                .collect();
            acts.push(next);
        }
        let mut g = out[0].weights.clone();
        for (l, h) in hidden.iter().zip(&acts[1..]).rev() {
            let mut gin = vec![0.0; l.cols];
            for j in 0..l.rows {
                let t = g[j] * (1.0 - h[j] * h[j]);
                for (gi, w) in gin.iter_mut().zip(l.row(j)) {
                    *gi += t * w;
                }
            }
            g = gin;
        }
        g
    }

    /// `(V(x), ∇V(x)·d)` in a single forward pass.
    pub fn value_and_directional(&self, x: &[f64], d: &[f64], ws: &mut Workspace) -> (f64, f64) {
        let (v, vd) = self.forward_tangent(x, d, ws);
        (v - self.offset, vd)
    }

    fn forward_tangent(&self, x: &[f64], d: &[f64], ws: &mut Workspace) -> (f64, f64) {
        let nh = self.layers.len() - 1;
        ws.h.resize_with(nh + 1, Vec::new);
        ws.hd.resize_with(nh + 1, Vec::new);
        ws.zd.resize_with(nh, Vec::new);
        ws.h[0].clear();
        ws.h[0].extend_from_slice(x);
        ws.hd[0].clear();
        ws.hd[0].extend_from_slice(d);
        for (li, l) in self.layers[..nh].iter().enumerate() {
            let (lower_h, upper_h) = ws.h.split_at_mut(li + 1);
            let (lower_hd, upper_hd) = ws.hd.split_at_mut(li + 1);
            let (hin, hdin) = (&lower_h[li], &lower_hd[li]);
            let (hout, hdout) = (&mut upper_h[0], &mut upper_hd[0]);
            let zd = &mut ws.zd[li];
            hout.clear();
            hdout.clear();
            zd.clear();
            for j in 0..l.rows {
                let row = l.row(j);
                let y = (l.bias[j] + dot(row, hin)).tanh();
                let zdj = dot(row, hdin);
                hout.push(y);
                zd.push(zdj);
                hdout.push((1.0 - y * y) * zdj);
            }
        }
        let out = &self.layers[nh];
        let w = out.row(0);
        (out.bias[0] + dot(w, &ws.h[nh]), dot(w, &ws.hd[nh]))
    }

    /// Accumulates `∂/∂θ [a·v(x) + c·∇v(x)·d]` for the last
    /// [`LyapunovNet::value_and_directional`] call on `ws` into `grad` (flat
    /// layout). The equilibrium shift is not included.
    pub fn backward_tangent(&self, ws: &mut Workspace, a: f64, c: f64, grad: &mut [f64]) {
        let nh = self.layers.len() - 1;
        let out = &self.layers[nh];
        let w = out.row(0);
        // offsets of each layer's block in the flat vector
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.num_params();
        }
        {
            let o = offsets[nh];
            let (h, hd) = (&ws.h[nh], &ws.hd[nh]);
            for i in 0..out.cols {
                grad[o + i] += a * h[i] + c * hd[i];
            }
            grad[o + out.cols] += a;
        }
        ws.hbar.clear();
        ws.hbar.extend(w.iter().map(|wi| a * wi));
        ws.hdbar.clear();
        ws.hdbar.extend(w.iter().map(|wi| c * wi));
        for li in (0..nh).rev() {
            let l = &self.layers[li];
            let (h, zd) = (&ws.h[li + 1], &ws.zd[li]);
            ws.zbar.clear();
            ws.zdbar.clear();
            for j in 0..l.rows {
                let s = 1.0 - h[j] * h[j];
                let zdb = s * ws.hdbar[j];
                let hb = ws.hbar[j] - 2.0 * h[j] * zd[j] * ws.hdbar[j];
                ws.zbar.push(s * hb);
                ws.zdbar.push(zdb);
            }
            let o = offsets[li];
            let (hin, hdin) = (&ws.h[li], &ws.hd[li]);
            for j in 0..l.rows {
                let (zb, zdb) = (ws.zbar[j], ws.zdbar[j]);
                let row = &mut grad[o + j * l.cols..o + (j + 1) * l.cols];
                for i in 0..l.cols {
                    row[i] += zb * hin[i] + zdb * hdin[i];
                }
                grad[o + l.rows * l.cols + j] += zb;
            }
            if li > 0 {
                let mut hbar = vec![0.0; l.cols];
                let mut hdbar = vec![0.0; l.cols];
                for j in 0..l.rows {
                    let (zb, zdb) = (ws.zbar[j], ws.zdbar[j]);
                    for (i, wji) in l.row(j).iter().enumerate() {
                        hbar[i] += wji * zb;
                        hdbar[i] += wji * zdb;
                    }
                }
                ws.hbar = hbar;
                ws.hdbar = hdbar;
            }
        }
    }

    /// Adds `∂/∂θ [value_weight·V(x) + grad_weight·∇V(x)]` into `grad`,
    /// excluding the `−v(x*)` shift (see [`LyapunovNet::accumulate_offset_grad`]).
    /// Returns the term's value.
    pub fn accumulate_term_grad(
        &self,
        x: &[f64],
        value_weight: f64,
        grad_weight: Option<&[f64]>,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        let zero;
        let d = match grad_weight {
            Some(d) => d,
            None => {
                zero = vec![0.0; x.len()];
                &zero
            }
        };
        let (v, vd) = self.forward_tangent(x, d, ws);
        let c = if grad_weight.is_some() { 1.0 } else { 0.0 };
        self.backward_tangent(ws, value_weight, c, grad);
        value_weight * (v - self.offset) + c * vd
    }

    /// Gradient contribution of `−total_value_weight·v(x*)`, the backward path
    /// of the equilibrium shift.
    pub fn accumulate_offset_grad(&self, total_value_weight: f64, ws: &mut Workspace, grad: &mut [f64]) {
        if total_value_weight == 0.0 {
            return;
        }
        let eq = self.equilibrium.clone();
        let zero = vec![0.0; eq.len()];
        self.forward_tangent(&eq, &zero, ws);
        self.backward_tangent(ws, -total_value_weight, 0.0, grad);
    }

    /// Exact parameter gradient of `Σ value_weight·V(x) + grad_weight·∇V(x)`
    /// over the terms, including the backward path of `v(x*)`.
    pub fn grad_params(&self, terms: &[PointTerm]) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        let mut ws = Workspace::default();
        let mut total_a = 0.0;
        for t in terms {
            self.accumulate_term_grad(&t.x, t.value_weight, t.grad_weight.as_deref(), &mut ws, &mut grad);
            total_a += t.value_weight;
        }
        self.accumulate_offset_grad(total_a, &mut ws, &mut grad);
        grad
    }

    /// Interval forward pass; returns the hidden activations of the last
    /// hidden layer enclosures of every layer.
    fn interval_activations(&self, b: &[Interval]) -> Vec<Vec<Interval>> {
        let nh = self.layers.len() - 1;
        let mut acts: Vec<Vec<Interval>> = Vec::with_capacity(nh + 1);
        acts.push(b.to_vec());
        for l in &self.layers[..nh] {
            let h = acts.last().unwrap();
            let next = (0..l.rows)
                .map(|j| {
                    let z = l
                        .row(j)
                        .iter()
                        .zip(h)
                        .fold(Interval::point(l.bias[j]), |acc, (w, hi)| acc + hi.scale(*w));
                    z.tanh()
                })
                .collect();
            acts.push(next);
        }
        acts
    }

    fn value_from_acts(&self, acts: &[Vec<Interval>]) -> Interval {
        let out = self.layers.last().unwrap();
        let v = out
            .row(0)
            .iter()
            .zip(acts.last().unwrap())
            .fold(Interval::point(out.bias[0]), |acc, (w, h)| acc + h.scale(*w));
        v - Interval::point(self.offset)
    }

    fn gradient_from_acts(&self, acts: &[Vec<Interval>]) -> Vec<Interval> {
        let nh = self.layers.len() - 1;
        let mut g: Vec<Interval> = self.layers[nh]
            .row(0)
            .iter()
            .map(|w| Interval::point(*w))
            .collect();
        for li in (0..nh).rev() {
            let l = &self.layers[li];
            let h = &acts[li + 1];
            let mut gin = vec![Interval::point(0.0); l.cols];
            for j in 0..l.rows {
                let deriv = (Interval::point(1.0) - h[j].sqr()).intersection(&Interval::raw(0.0, 1.0));
                let t = g[j] * deriv.unwrap_or(Interval::raw(0.0, 1.0));
                for (gi, w) in gin.iter_mut().zip(l.row(j)) {
                    *gi = *gi + t.scale(*w);
                }
            }
            g = gin;
        }
        g
    }

    fn dual_layer(l: &Layer, h: &[Dual], n: usize, with_bias: bool) -> Vec<Dual> {
        (0..l.rows)
            .map(|j| {
                let z = Dual::weighted_sum(l.row(j), h, n);
                if with_bias {
                    z.add_const(l.bias[j])
                } else {
                    z
                }
            })
            .collect()
    }

    pub fn value_dual(&self, x: &[Dual]) -> Dual {
        let n = x.first().map_or(0, |d| d.grad.len());
        let nh = self.layers.len() - 1;
        let mut h = x.to_vec();
        for l in &self.layers[..nh] {
            h = Self::dual_layer(l, &h, n, true).into_iter().map(Dual::tanh).collect();
        }
        let out = Self::dual_layer(&self.layers[nh], &h, n, true).remove(0);
        out.add_const(-self.offset)
    }

    /// Forward tangent pass in dual arithmetic: `∇v(x)·d(x)` with its
    /// gradient in the seeded variables.
    pub fn directional_dual(&self, x: &[Dual], d: &[Dual]) -> Dual {
        let n = x.first().map_or(0, |d| d.grad.len());
        let nh = self.layers.len() - 1;
        let mut h = x.to_vec();
        let mut t = d.to_vec();
        for l in &self.layers[..nh] {
            let z = Self::dual_layer(l, &h, n, true);
            let u = Self::dual_layer(l, &t, n, false);
            h = z.into_iter().map(Dual::tanh).collect();
            t = h
                .iter()
                .zip(u)
                .map(|(hj, uj)| {
                    let slope = Dual::constant(Interval::point(1.0), n) - hj.clone().sqr();
                    slope * uj
                })
                .collect();
        }
        Self::dual_layer(&self.layers[nh], &t, n, false).remove(0)
    }

    /// Enclosures of `V` and `∇V` over a box from one interval forward pass.
    pub fn enclosures(&self, b: &[Interval]) -> (Interval, Vec<Interval>) {
        let acts = self.interval_activations(b);
        (self.value_from_acts(&acts), self.gradient_from_acts(&acts))
    }
}

impl Candidate for LyapunovNet {
    fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    fn value(&self, x: &[f64]) -> f64 {
        LyapunovNet::value(self, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        LyapunovNet::gradient(self, x)
    }

    fn value_enclosure(&self, b: &[Interval]) -> Interval {
        self.value_from_acts(&self.interval_activations(b))
    }

    fn gradient_enclosure(&self, b: &[Interval]) -> Vec<Interval> {
        self.gradient_from_acts(&self.interval_activations(b))
    }

    fn enclosures(&self, b: &[Interval]) -> (Interval, Vec<Interval>) {
        LyapunovNet::enclosures(self, b)
    }

    fn value_dual(&self, x: &[Dual]) -> Dual {
        LyapunovNet::value_dual(self, x)
    }

    fn directional_dual(&self, x: &[Dual], d: &[Dual]) -> Dual {
        LyapunovNet::directional_dual(self, x, d)
    }
}

/// Analytic candidate `V(x) = Σ wᵢ (xᵢ − cᵢ)²`, a bypass of the network used
/// to exercise the certifier against known answers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCandidate {
    pub center: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadraticCandidate {
    /// `‖x‖²`.
    pub fn norm_squared(dim: usize) -> Self {
        QuadraticCandidate {
            center: vec![0.0; dim],
            weights: vec![1.0; dim],
        }
    }
}

impl Candidate for QuadraticCandidate {
    fn input_dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((x, c), w)| w * (x - c) * (x - c))
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((x, c), w)| 2.0 * w * (x - c))
            .collect()
    }

    fn value_enclosure(&self, b: &[Interval]) -> Interval {
        b.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .fold(Interval::point(0.0), |acc, ((x, c), w)| {
                acc + (*x - Interval::point(*c)).sqr().scale(*w)
            })
    }

    fn gradient_enclosure(&self, b: &[Interval]) -> Vec<Interval> {
        b.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((x, c), w)| (*x - Interval::point(*c)).scale(2.0 * w))
            .collect()
    }

    fn value_dual(&self, x: &[Dual]) -> Dual {
        let n = x.first().map_or(0, |d| d.grad.len());
        x.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .fold(Dual::constant(Interval::point(0.0), n), |acc, ((x, c), w)| {
                acc + x.clone().add_const(-c).sqr().scale(*w)
            })
    }

    fn directional_dual(&self, x: &[Dual], d: &[Dual]) -> Dual {
        let n = x.first().map_or(0, |d| d.grad.len());
        x.iter()
            .zip(d)
            .zip(&self.center)
            .zip(&self.weights)
            .fold(Dual::constant(Interval::point(0.0), n), |acc, (((x, d), c), w)| {
                acc + (x.clone().add_const(-c) * d.clone()).scale(2.0 * w)
            })
    }
}

/// One candidate per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle<C> {
    members: BTreeMap<ModeId, C>,
}

/// The trained object: one network per mode.
pub type MlfBundle = Bundle<LyapunovNet>;

impl<C> Bundle<C> {
    pub fn new(members: BTreeMap<ModeId, C>) -> Self {
        Bundle { members }
    }

    pub fn get(&self, mode: ModeId) -> Option<&C> {
        self.members.get(&mode)
    }

    pub fn get_mut(&mut self, mode: ModeId) -> Option<&mut C> {
        self.members.get_mut(&mode)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModeId, &C)> {
        self.members.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ModeId, &mut C)> {
        self.members.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mode_ids(&self) -> impl Iterator<Item = ModeId> + '_ {
        self.members.keys().copied()
    }
}

impl<C: Clone> Bundle<C> {
    /// The same candidate for every listed mode.
    pub fn uniform(modes: impl IntoIterator<Item = ModeId>, c: C) -> Self {
        Bundle {
            members: modes.into_iter().map(|m| (m, c.clone())).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    widths: Vec<usize>,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDoc {
    modes: BTreeMap<String, NetDoc>,
    equilibrium: Vec<f64>,
}

impl MlfBundle {
    /// One freshly initialised network per mode. Mode `i` uses a seed derived
    /// from `(seed, i)`.
    pub fn init(
        modes: impl IntoIterator<Item = ModeId>,
        equilibrium: &[f64],
        hidden: &[usize],
        seed: u64,
        input_scale: f64,
    ) -> Result<MlfBundle, NetError> {
        let mut members = BTreeMap::new();
        for m in modes {
            let s = derive_seed(seed, m.0 as u64);
            let net = LyapunovNet::init_scaled(
                equilibrium.len(),
                hidden,
                s,
                equilibrium.to_vec(),
                input_scale,
            )?;
            members.insert(m, net);
        }
        Ok(Bundle { members })
    }

    pub fn encode_weights(&self) -> String {
        let equilibrium = self
            .members
            .values()
            .next()
            .map(|n| n.equilibrium.clone())
            .unwrap_or_default();
        let doc = BundleDoc {
            modes: self
                .members
                .iter()
                .map(|(id, net)| {
                    (
                        id.0.to_string(),
                        NetDoc {
                            widths: net.widths(),
                            layers: net
                                .layers
                                .iter()
                                .map(|l| LayerDoc {
                                    w: l.weight_rows(),
                                    b: l.bias.clone(),
                                })
                                .collect(),
                        },
                    )
                })
                .collect(),
            equilibrium,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("weights serialize");
        s.push('\n');
        s
    }

    pub fn decode_weights(text: &str) -> Result<MlfBundle, NetError> {
        let doc: BundleDoc =
            serde_json::from_str(text).map_err(|e| NetError::Malformed(e.to_string()))?;
        if doc.equilibrium.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Malformed("non-finite equilibrium".into()));
        }
        let mut members = BTreeMap::new();
        for (key, nd) in doc.modes {
            let id: u32 = key
                .parse()
                .map_err(|_| NetError::Malformed(format!("mode key `{key}` is not an integer")))?;
            if nd.widths.len() != nd.layers.len() + 1 {
                return Err(NetError::Shape(format!(
                    "mode {key}: {} widths for {} layers",
                    nd.widths.len(),
                    nd.layers.len()
                )));
            }
            let mut layers = Vec::with_capacity(nd.layers.len());
            for (k, ld) in nd.layers.into_iter().enumerate() {
                let l = Layer::new(ld.w, ld.b)
                    .map_err(|e| NetError::Shape(format!("mode {key} layer {k}: {e}")))?;
                if l.cols != nd.widths[k] || l.rows != nd.widths[k + 1] {
                    return Err(NetError::Shape(format!(
                        "mode {key} layer {k}: declared {}x{} but weights are {}x{}",
                        nd.widths[k + 1],
                        nd.widths[k],
                        l.rows,
                        l.cols
                    )));
                }
                layers.push(l);
            }
            LyapunovNet::validate(&layers, &doc.equilibrium)
                .map_err(|e| NetError::Shape(format!("mode {key}: {e}")))?;
            members.insert(ModeId(id), LyapunovNet::from_layers(layers, doc.equilibrium.clone()));
        }
        if members.is_empty() {
            return Err(NetError::Malformed("no modes".into()));
        }
        Ok(Bundle { members })
    }
}

/// SplitMix64 mixing of a base seed with a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Straight-line forward pass written independently of the layer code.
    fn reference_value(net: &LyapunovNet, x: &[f64]) -> f64 {
        let forward = |x: &[f64]| {
            let mut h: Vec<f64> = x.to_vec();
            let n = net.layers().len();
            for (k, l) in net.layers().iter().enumerate() {
                let w = l.weight_rows();
                let mut z = Vec::new();
                for (row, b) in w.iter().zip(l.bias()) {
                    let mut s = *b;
                    for (a, c) in row.iter().zip(&h) {
                        s += a * c;
                    }
                    z.push(if k + 1 < n { s.tanh() } else { s });
                }
                h = z;
            }
            h[0]
        };
        forward(x) - forward(net.equilibrium())
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1e-8 + a.abs().max(b.abs()))
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = LyapunovNet::init(2, &[16, 16], 7).unwrap();
        let b = LyapunovNet::init(2, &[16, 16], 7).unwrap();
        let c = LyapunovNet::init(2, &[16, 16], 8).unwrap();
        let bits = |n: &LyapunovNet| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        assert_eq!(a.value(&[0.0, 0.0]), 0.0);
        assert_eq!(a.widths(), vec![2, 16, 16, 1]);
    }

    #[test]
    fn init_rejects_bad_architecture() {
        assert!(LyapunovNet::init(2, &[], 0).is_err());
        assert!(LyapunovNet::init(2, &[4, 0], 0).is_err());
    }

    #[test]
    fn zero_network_is_identically_zero() {
        let net = LyapunovNet::zeros(2, &[8]);
        assert_eq!(net.value(&[1.3, -0.4]), 0.0);
        assert_eq!(net.gradient(&[1.3, -0.4]), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let net = LyapunovNet::init(2, &[16, 16], 7).unwrap();
        let v = net.value(&[1.0, 0.0]);
        let r = reference_value(&net, &[1.0, 0.0]);
        assert!((v - r).abs() <= 1e-12, "{v} vs {r}");
    }

    #[test]
    fn equilibrium_shift_is_exact() {
        let eq = vec![0.3, -0.2];
        let net = LyapunovNet::init_scaled(2, &[5, 3], 3, eq.clone(), 2.0).unwrap();
        assert_eq!(net.value(&eq), 0.0);
        // the shift does not change the gradient
        let x = [0.7, 0.1];
        let g = net.gradient(&x);
        let raw = central_diff(|y| net.raw_value(y), &x, 1e-5);
        for (a, b) in g.iter().zip(&raw) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..20 {
            let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=12)).collect();
            let dim = rng.gen_range(1..=3);
            let net = LyapunovNet::init(dim, &hidden, k).unwrap();
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = net.gradient(&x);
            let fd = central_diff(|y| net.value(y), &x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!(
                    rel_err(*a, *b) <= 1e-5 || (a - b).abs() < 1e-9,
                    "{a} vs {b} ({hidden:?})"
                );
            }
        }
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let net = LyapunovNet::init(2, &[6, 6], 1).unwrap();
        // loss = V(x*)^2 = 0 identically: upstream 2·V(x*) = 0
        let terms = [PointTerm {
            x: vec![0.0, 0.0],
            value_weight: 2.0 * net.value(&[0.0, 0.0]),
            grad_weight: None,
        }];
        assert!(net.grad_params(&terms).iter().all(|g| *g == 0.0));
    }

    fn param_fd(net: &LyapunovNet, loss: impl Fn(&LyapunovNet) -> f64, h: f64) -> Vec<f64> {
        let p = net.params();
        (0..p.len())
            .map(|i| {
                let mut a = net.clone();
                let mut q = p.clone();
                q[i] += h;
                a.set_params(&q);
                let up = loss(&a);
                q[i] -= 2.0 * h;
                a.set_params(&q);
                let down = loss(&a);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grads_close(g: &[f64], fd: &[f64], tol: f64) {
        for (i, (a, b)) in g.iter().zip(fd).enumerate() {
            assert!(
                rel_err(*a, *b) <= tol || (a - b).abs() < 1e-8,
                "param {i}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn parameter_gradient_of_mean_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = LyapunovNet::init(2, &[7, 5], 3).unwrap();
        let pts: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let terms: Vec<PointTerm> = pts
            .iter()
            .map(|x| PointTerm {
                x: x.clone(),
                value_weight: 1.0 / 8.0,
                grad_weight: None,
            })
            .collect();
        let g = net.grad_params(&terms);
        let fd = param_fd(&net, |n| pts.iter().map(|x| n.value(x)).sum::<f64>() / 8.0, 1e-6);
        assert_grads_close(&g, &fd, 1e-4);
    }

    #[test]
    fn parameter_gradient_of_lie_derivative() {
        let net = LyapunovNet::init(2, &[7, 5], 4).unwrap();
        let x = vec![0.8, -1.1];
        // f(x) for a fixed linear field
        let f = vec![-0.2 * x[0] - 2.0 * x[1], x[0] - 0.2 * x[1]];
        let terms = [PointTerm {
            x: x.clone(),
            value_weight: 0.3,
            grad_weight: Some(f.clone()),
        }];
        let g = net.grad_params(&terms);
        let loss = |n: &LyapunovNet| {
            let gr = n.gradient(&x);
            0.3 * n.value(&x) + gr[0] * f[0] + gr[1] * f[1]
        };
        let fd = param_fd(&net, loss, 1e-6);
        assert_grads_close(&g, &fd, 1e-4);
    }

    #[test]
    fn directional_value_matches_gradient() {
        let net = LyapunovNet::init(3, &[4, 4], 2).unwrap();
        let x = [0.1, 0.5, -0.3];
        let d = [1.0, -2.0, 0.5];
        let mut ws = Workspace::default();
        let (v, vd) = net.value_and_directional(&x, &d, &mut ws);
        assert_eq!(v, net.value(&x));
        let g = net.gradient(&x);
        let expect: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!((vd - expect).abs() < 1e-12);
    }

    fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Interval> {
        (0..dim)
            .map(|_| {
                let lo = rng.gen_range(-3.0..3.0);
                Interval::new(lo, lo + rng.gen_range(0.0..1.0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn point_box_enclosure_is_tight() {
        let net = LyapunovNet::init(2, &[16, 16], 7).unwrap();
        let x = [0.4, -1.2];
        let b: Vec<Interval> = x.iter().map(|v| Interval::point(*v)).collect();
        let (v, g) = net.enclosures(&b);
        assert!(v.width() <= 1e-9 && v.contains(net.value(&x)));
        for (gi, pi) in g.iter().zip(net.gradient(&x)) {
            assert!(gi.width() <= 1e-9 && gi.contains(pi));
        }
    }

    #[test]
    fn enclosures_contain_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..10 {
            let net = LyapunovNet::init(2, &[16, 16], 100 + k).unwrap();
            let b = random_box(&mut rng, 2);
            let (v, g) = net.enclosures(&b);
            for _ in 0..1000 {
                let x: Vec<f64> = b
                    .iter()
                    .map(|i| (i.lo() + rng.gen::<f64>() * i.width()).min(i.hi()))
                    .collect();
                assert!(v.contains(net.value(&x)));
                for (gi, pi) in g.iter().zip(net.gradient(&x)) {
                    assert!(gi.contains(pi));
                }
            }
        }
    }

    #[test]
    fn shrinking_box_nests_enclosure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LyapunovNet::init(2, &[16, 16], 7).unwrap();
        let outer = random_box(&mut rng, 2);
        let inner: Vec<Interval> = outer
            .iter()
            .map(|i| Interval::new(i.lo() + 0.25 * i.width(), i.hi() - 0.25 * i.width()).unwrap())
            .collect();
        let (vo, go) = net.enclosures(&outer);
        let (vi, gi) = net.enclosures(&inner);
        let slack = 1e-12;
        assert!(vi.lo() >= vo.lo() - slack && vi.hi() <= vo.hi() + slack);
        for (a, b) in gi.iter().zip(&go) {
            assert!(a.lo() >= b.lo() - slack && a.hi() <= b.hi() + slack);
        }
    }

    #[test]
    fn weights_round_trip_bit_exactly() {
        let bundle = MlfBundle::init([ModeId(1), ModeId(2)], &[0.0, 0.0], &[16, 16], 3, 3.0).unwrap();
        let text = bundle.encode_weights();
        let back = MlfBundle::decode_weights(&text).unwrap();
        assert_eq!(bundle, back);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            for (id, net) in bundle.iter() {
                let other = back.get(id).unwrap();
                assert_eq!(net.value(&x).to_bits(), other.value(&x).to_bits());
            }
        }
    }

    #[test]
    fn decode_rejects_bad_documents() {
        let bundle = MlfBundle::init([ModeId(1)], &[0.0, 0.0], &[3], 3, 1.0).unwrap();
        let text = bundle.encode_weights();
        assert!(matches!(
            MlfBundle::decode_weights(&text[..text.len() / 2]),
            Err(NetError::Malformed(_))
        ));
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["modes"]["1"]["widths"] = serde_json::json!([2, 4, 1]);
        assert!(matches!(
            MlfBundle::decode_weights(&doc.to_string()),
            Err(NetError::Shape(_))
        ));
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["equilibrium"] = serde_json::json!([0.0, 0.0, 0.0]);
        assert!(matches!(
            MlfBundle::decode_weights(&doc.to_string()),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn quadratic_candidate_enclosures() {
        let q = QuadraticCandidate::norm_squared(2);
        let b = [Interval::new(-1.0, 2.0).unwrap(), Interval::new(0.5, 1.0).unwrap()];
        let v = q.value_enclosure(&b);
        assert!(v.lo() <= 0.25 && v.lo() >= 0.25 - 1e-12);
        assert!(v.hi() >= 5.0);
        assert_eq!(q.gradient(&[1.0, -2.0]), vec![2.0, -4.0]);
    }
}
