//! Closed real intervals with outward rounding.
//!
//! Every arithmetic operation rounds its lower bound toward −∞ and its upper
//! bound toward +∞ by one ulp, so the result always encloses the exact real
//! result of the same operation applied to any members of the operands.
//! Library transcendental functions are not correctly rounded; their results
//! are widened by [`LIBM_SLACK_ULPS`] in each direction.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Extra ulps applied to the results of `sin`, `cos`, `tan`, `exp` and `tanh`.
pub const LIBM_SLACK_ULPS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntervalError {
    #[error("interval bounds must be finite, got [{lo}, {hi}]")]
    NonFinite { lo: f64, hi: f64 },
    #[error("interval lower bound {lo} exceeds upper bound {hi}")]
    Inverted { lo: f64, hi: f64 },
}

/// A closed interval `[lo, hi]` of reals.
///
/// Intervals produced from user input are validated to be finite and
/// non-empty. Arithmetic may overflow to infinite bounds; callers that need
/// finite enclosures check [`Interval::is_finite`].
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}, {:?}]", self.lo, self.hi)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = IntervalError;

    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl From<f64> for Interval {
    fn from(x: f64) -> Self {
        Interval::point(x)
    }
}

#[inline]
fn down(x: f64) -> f64 {
    x.next_down()
}

#[inline]
fn up(x: f64) -> f64 {
    x.next_up()
}

#[inline]
fn down_n(mut x: f64, n: u32) -> f64 {
    for _ in 0..n {
        x = x.next_down();
    }
    x
}

#[inline]
fn up_n(mut x: f64, n: u32) -> f64 {
    for _ in 0..n {
        x = x.next_up();
    }
    x
}

impl Interval {
    /// Validated constructor: both bounds finite and `lo <= hi`.
    pub fn new(lo: f64, hi: f64) -> Result<Self, IntervalError> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(IntervalError::NonFinite { lo, hi });
        }
        if lo > hi {
            return Err(IntervalError::Inverted { lo, hi });
        }
        Ok(Interval { lo, hi })
    }

    /// Unchecked constructor for internal arithmetic. Panics in debug builds
    /// if the bounds are inverted or NaN.
    #[inline]
    pub(crate) fn raw(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "inverted interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    #[inline]
    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    #[inline]
    pub fn lo(&self) -> f64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    pub fn mid(&self) -> f64 {
        0.5 * self.lo + 0.5 * self.hi
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    #[inline]
    pub fn contains_zero(&self) -> bool {
        self.lo <= 0.0 && 0.0 <= self.hi
    }

    /// `self ⊆ other`.
    #[inline]
    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    /// Closed-set intersection test (touching endpoints intersect).
    #[inline]
    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn intersection(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    /// Splits at the midpoint.
    pub fn bisect(&self) -> (Interval, Interval) {
        let m = self.mid();
        (Interval { lo: self.lo, hi: m }, Interval { lo: m, hi: self.hi })
    }

    /// Smallest absolute value and largest absolute value of members.
    pub fn mag_range(&self) -> (f64, f64) {
        if self.lo >= 0.0 {
            (self.lo, self.hi)
        } else if self.hi <= 0.0 {
            (-self.hi, -self.lo)
        } else {
            (0.0, (-self.lo).max(self.hi))
        }
    }

    pub fn abs(self) -> Interval {
        let (lo, hi) = self.mag_range();
        Interval { lo, hi }
    }

    /// `x²` with the even-power tightening (result never below zero).
    pub fn sqr(self) -> Interval {
        let (mlo, mhi) = self.mag_range();
        let lo = if mlo == 0.0 { 0.0 } else { down(mlo * mlo).max(0.0) };
        Interval { lo, hi: up(mhi * mhi) }
    }

    /// Non-negative integer power by repeated outward-rounded multiplication.
    pub fn powi(self, n: u32) -> Interval {
        if n == 0 {
            return Interval::point(1.0);
        }
        if n == 1 {
            return self;
        }
        let mag_pow = |m: Interval| {
            let mut acc = m;
            for _ in 1..n {
                acc = mul_nonneg(acc, m);
            }
            acc
        };
        let (mlo, mhi) = self.mag_range();
        let mag = mag_pow(Interval { lo: mlo, hi: mhi });
        if n.is_multiple_of(2) || self.lo >= 0.0 {
            mag
        } else if self.hi <= 0.0 {
            -mag
        } else {
            let neg = mag_pow(Interval { lo: 0.0, hi: -self.lo });
            let pos = mag_pow(Interval { lo: 0.0, hi: self.hi });
            Interval {
                lo: -neg.hi,
                hi: pos.hi,
            }
        }
    }

    /// Division; `None` when the divisor contains zero.
    pub fn checked_div(self, rhs: Interval) -> Option<Interval> {
        if rhs.contains_zero() {
            return None;
        }
        let c = [
            self.lo / rhs.lo,
            self.lo / rhs.hi,
            self.hi / rhs.lo,
            self.hi / rhs.hi,
        ];
        Some(Interval {
            lo: down(min4(c)),
            hi: up(max4(c)),
        })
    }

    /// Multiplication by a point value.
    #[inline]
    pub fn scale(self, k: f64) -> Interval {
        let a = self.lo * k;
        let b = self.hi * k;
        if a <= b {
            Interval { lo: down(a), hi: up(b) }
        } else {
            Interval { lo: down(b), hi: up(a) }
        }
    }

    pub fn exp(self) -> Interval {
        Interval {
            lo: down_n(self.lo.exp(), LIBM_SLACK_ULPS).max(0.0),
            hi: up_n(self.hi.exp(), LIBM_SLACK_ULPS),
        }
    }

    pub fn tanh(self) -> Interval {
        Interval {
            lo: down_n(self.lo.tanh(), LIBM_SLACK_ULPS).max(-1.0),
            hi: up_n(self.hi.tanh(), LIBM_SLACK_ULPS).min(1.0),
        }
    }

    /// Exact range of sine: the extremes are either endpoint values or the
    /// critical values ±1 when `π/2 + kπ` lies inside the interval.
    pub fn sin(self) -> Interval {
        sin_range(self.lo, self.hi)
    }

    pub fn cos(self) -> Interval {
        // cos(x) = sin(x + π/2); shifting the critical-point test keeps the
        // endpoint values exact (evaluated with cos itself).
        if !self.is_finite() || self.width() >= TAU {
            return Interval { lo: -1.0, hi: 1.0 };
        }
        let (a, b) = (self.lo.cos(), self.hi.cos());
        let mut lo = down_n(a.min(b), LIBM_SLACK_ULPS);
        let mut hi = up_n(a.max(b), LIBM_SLACK_ULPS);
        // maxima at 2kπ, minima at π + 2kπ
        if contains_critical(self.lo, self.hi, 0.0) {
            hi = 1.0;
        }
        if contains_critical(self.lo, self.hi, PI) {
            lo = -1.0;
        }
        Interval {
            lo: lo.max(-1.0),
            hi: hi.min(1.0),
        }
    }

    /// Tangent; `None` when the interval reaches a pole `π/2 + kπ`.
    pub fn checked_tan(self) -> Option<Interval> {
        if !self.is_finite() || self.width() >= PI {
            return None;
        }
        if contains_pole(self.lo, self.hi) {
            return None;
        }
        Some(Interval {
            lo: down_n(self.lo.tan(), LIBM_SLACK_ULPS),
            hi: up_n(self.hi.tan(), LIBM_SLACK_ULPS),
        })
    }

    /// Interval dot product `Σ aᵢ·bᵢ`.
    pub fn dot(a: &[Interval], b: &[Interval]) -> Interval {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .fold(Interval::point(0.0), |acc, (x, y)| acc + *x * *y)
    }
}

fn sin_range(lo: f64, hi: f64) -> Interval {
    if !lo.is_finite() || !hi.is_finite() || hi - lo >= TAU {
        return Interval { lo: -1.0, hi: 1.0 };
    }
    let (a, b) = (lo.sin(), hi.sin());
    let mut rlo = down_n(a.min(b), LIBM_SLACK_ULPS);
    let mut rhi = up_n(a.max(b), LIBM_SLACK_ULPS);
    if contains_critical(lo, hi, FRAC_PI_2) {
        rhi = 1.0;
    }
    if contains_critical(lo, hi, -FRAC_PI_2) {
        rlo = -1.0;
    }
    Interval {
        lo: rlo.max(-1.0),
        hi: rhi.min(1.0),
    }
}

/// Whether `[lo, hi]` may contain a point `phase + 2kπ`. Errs on the side of
/// `true` near the boundary, which only widens the enclosure.
fn contains_critical(lo: f64, hi: f64, phase: f64) -> bool {
    let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    let k = ((lo - phase - slack) / TAU).ceil();
    phase + k * TAU <= hi + slack
}

fn contains_pole(lo: f64, hi: f64) -> bool {
    let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    let k = ((lo - FRAC_PI_2 - slack) / PI).ceil();
    FRAC_PI_2 + k * PI <= hi + slack
}

#[inline]
fn min4(c: [f64; 4]) -> f64 {
    c[0].min(c[1]).min(c[2].min(c[3]))
}

#[inline]
fn max4(c: [f64; 4]) -> f64 {
    c[0].max(c[1]).max(c[2].max(c[3]))
}

#[inline]
fn mul_nonneg(a: Interval, b: Interval) -> Interval {
    let lo = a.lo * b.lo;
    Interval {
        lo: if lo == 0.0 { 0.0 } else { down(lo).max(0.0) },
        hi: up(a.hi * b.hi),
    }
}

impl Add for Interval {
    type Output = Interval;

    #[inline]
    fn add(self, rhs: Interval) -> Interval {
        Interval {
            lo: down(self.lo + rhs.lo),
            hi: up(self.hi + rhs.hi),
        }
    }
}

impl Sub for Interval {
    type Output = Interval;

    #[inline]
    fn sub(self, rhs: Interval) -> Interval {
        Interval {
            lo: down(self.lo - rhs.hi),
            hi: up(self.hi - rhs.lo),
        }
    }
}

impl Neg for Interval {
    type Output = Interval;

    #[inline]
    fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Mul for Interval {
    type Output = Interval;

    #[inline]
    fn mul(self, rhs: Interval) -> Interval {
        if self.lo == self.hi {
            return rhs.scale(self.lo);
        }
        if rhs.lo == rhs.hi {
            return self.scale(rhs.lo);
        }
        let c = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        Interval {
            lo: down(min4(c)),
            hi: up(max4(c)),
        }
    }
}

impl Add<f64> for Interval {
    type Output = Interval;

    #[inline]
    fn add(self, rhs: f64) -> Interval {
        self + Interval::point(rhs)
    }
}
