//! First-order interval forward mode.
//!
//! A [`Dual`] carries an enclosure of a function's value over a box together
//! with an enclosure of its gradient over the same box. The certifier uses
//! the gradient for the centred form `g(c) + ∇g(B)·(B − c)`, whose excess
//! width shrinks quadratically with the box.

use std::ops::{Add, Mul, Neg, Sub};

use crate::interval::Interval;

#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub value: Interval,
    pub grad: Vec<Interval>,
}

impl Dual {
    pub fn constant(value: Interval, n: usize) -> Dual {
        Dual {
            value,
            grad: vec![Interval::point(0.0); n],
        }
    }

    /// The `k`-th coordinate of an `n`-dimensional box.
    pub fn variable(value: Interval, k: usize, n: usize) -> Dual {
        let mut grad = vec![Interval::point(0.0); n];
        grad[k] = Interval::point(1.0);
        Dual { value, grad }
    }

    /// Seeds every coordinate of a box.
    pub fn seed(bx: &[Interval]) -> Vec<Dual> {
        let n = bx.len();
        bx.iter().enumerate().map(|(k, i)| Dual::variable(*i, k, n)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(Interval::is_finite)
    }

    /// Chain rule with `φ(a)` and `φ'` enclosed over `a`.
    fn chain(self, value: Interval, slope: Interval) -> Dual {
        Dual {
            value,
            grad: self.grad.into_iter().map(|g| g * slope).collect(),
        }
    }

    pub fn scale(self, k: f64) -> Dual {
        Dual {
            value: self.value.scale(k),
            grad: self.grad.into_iter().map(|g| g.scale(k)).collect(),
        }
    }

    pub fn add_const(mut self, c: f64) -> Dual {
        self.value = self.value + c;
        self
    }

    pub fn sqr(self) -> Dual {
        let v = self.value.sqr();
        let s = self.value.scale(2.0);
        self.chain(v, s)
    }

    pub fn tanh(self) -> Dual {
        let t = self.value.tanh();
        let slope = (Interval::point(1.0) - t.sqr())
            .intersection(&Interval::new(0.0, 1.0).expect("unit interval"))
            .unwrap_or(Interval::point(0.0));
        self.chain(t, slope)
    }

    pub fn sin(self) -> Dual {
        let (v, s) = (self.value.sin(), self.value.cos());
        self.chain(v, s)
    }

    pub fn cos(self) -> Dual {
        let (v, s) = (self.value.cos(), -self.value.sin());
        self.chain(v, s)
    }

    pub fn exp(self) -> Dual {
        let v = self.value.exp();
        self.chain(v, v)
    }

    pub fn checked_tan(self) -> Option<Dual> {
        let v = self.value.checked_tan()?;
        let s = Interval::point(1.0) + v.sqr();
        Some(self.chain(v, s))
    }

    /// `|a|`, with the slope set to `[−1, 1]` when the argument straddles
    /// zero (a generalized gradient, still valid for the centred form).
    pub fn abs(self) -> Dual {
        let v = self.value.abs();
        let s = if self.value.lo() >= 0.0 {
            Interval::point(1.0)
        } else if self.value.hi() <= 0.0 {
            Interval::point(-1.0)
        } else {
            Interval::new(-1.0, 1.0).expect("unit interval")
        };
        self.chain(v, s)
    }

    pub fn powi(self, n: u32) -> Dual {
        let n_dim = self.grad.len();
        match n {
            0 => Dual::constant(Interval::point(1.0), n_dim),
            1 => self,
            _ => {
                let v = self.value.powi(n);
                let s = self.value.powi(n - 1).scale(n as f64);
                self.chain(v, s)
            }
        }
    }

    pub fn checked_div(self, rhs: Dual) -> Option<Dual> {
        let value = self.value.checked_div(rhs.value)?;
        let grad = self
            .grad
            .iter()
            .zip(&rhs.grad)
            .map(|(a, b)| (*a - value * *b).checked_div(rhs.value))
            .collect::<Option<Vec<_>>>()?;
        Some(Dual { value, grad })
    }

    /// `Σ aᵢ·xᵢ` for point weights `a`.
    pub fn weighted_sum<'a>(weights: &[f64], xs: impl IntoIterator<Item = &'a Dual>, n: usize) -> Dual {
        let mut acc = Dual::constant(Interval::point(0.0), n);
        for (w, x) in weights.iter().zip(xs) {
            acc.value = acc.value + x.value.scale(*w);
            for (a, g) in acc.grad.iter_mut().zip(&x.grad) {
                *a = *a + g.scale(*w);
            }
        }
        acc
    }

    /// Centred-form enclosure over `bx` given a rigorous enclosure `at_center`
    /// of the value at `center` and this gradient enclosure over `bx`.
    pub fn centred(&self, at_center: Interval, center: &[f64], bx: &[Interval]) -> Interval {
        self.grad
            .iter()
            .zip(bx)
            .zip(center)
            .fold(at_center, |acc, ((g, b), c)| acc + *g * (*b - Interval::point(*c)))
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value + rhs.value,
            grad: self.grad.iter().zip(&rhs.grad).map(|(a, b)| *a + *b).collect(),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value - rhs.value,
            grad: self.grad.iter().zip(&rhs.grad).map(|(a, b)| *a - *b).collect(),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            value: -self.value,
            grad: self.grad.into_iter().map(|g| -g).collect(),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    // product rule
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value * rhs.value,
            grad: self
                .grad
                .iter()
                .zip(&rhs.grad)
                .map(|(a, b)| *a * rhs.value + *b * self.value)
                .collect(),
        }
    }
}
