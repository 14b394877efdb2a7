//! Scalar abstraction used by the EP and acquisition code paths.
//!
//! The acquisition function needs exact gradients w.r.t. the batch inputs.
//! All batch-dependent numerics are written generically over [`Scalar`], so
//! the same code runs on plain `f64` (values) and on forward-mode dual
//! numbers (values plus directional derivatives in up to [`LANES`]
//! directions at once).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Number of derivative lanes carried by a [`Dual`].
pub const LANES: usize = 8;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    fn from_f64(x: f64) -> Self;
    /// Value part (drops derivatives). Branch decisions must use this.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    /// log of the standard normal CDF, robust over the whole real line.
    fn norm_logcdf(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

/// log of the standard normal density.
pub fn norm_logpdf<S: Scalar>(x: S) -> S {
    S::from_f64(-HALF_LN_2PI) - S::from_f64(0.5) * x * x
}

/// Hazard ratio phi(x)/Phi(x), computed in log space.
pub fn norm_hazard<S: Scalar>(x: S) -> S {
    (norm_logpdf(x) - x.norm_logcdf()).exp()
}

/// Robust log Phi(x) for plain floats: erfc-based in the bulk, asymptotic
/// expansion below -37 where erfc underflows.
pub fn log_ndtr(x: f64) -> f64 {
    const SQRT_2: f64 = std::f64::consts::SQRT_2;
    if x > 6.0 {
        let q = 0.5 * statrs::function::erf::erfc(x / SQRT_2);
        (-q).ln_1p()
    } else if x >= -37.0 {
        (0.5 * statrs::function::erf::erfc(-x / SQRT_2)).ln()
    } else {
        let inv2 = 1.0 / (x * x);
        let series = inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)));
        -0.5 * x * x - (-x).ln() - HALF_LN_2PI + series.ln_1p()
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn norm_logcdf(self) -> Self {
        log_ndtr(self)
    }
}

/// Forward-mode dual number with [`LANES`] simultaneous derivative lanes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub dx: [f64; LANES],
}

impl Dual {
    pub fn constant(x: f64) -> Self {
        Dual {
            re: x,
            dx: [0.0; LANES],
        }
    }

    /// Variable seeded with derivative 1 in lane `lane`.
    pub fn variable(x: f64, lane: usize) -> Self {
        let mut dx = [0.0; LANES];
        dx[lane] = 1.0;
        Dual { re: x, dx }
    }

    /// Chain rule: maps self through a function with value `v` and
    /// derivative `d` at `self.re`.
    #[inline]
    fn chain(self, v: f64, d: f64) -> Self {
        let mut dx = [0.0; LANES];
        for i in 0..LANES {
            dx[i] = self.dx[i] * d;
        }
        Dual { re: v, dx }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        let mut dx = [0.0; LANES];
        for i in 0..LANES {
            dx[i] = self.dx[i] + o.dx[i];
        }
        Dual {
            re: self.re + o.re,
            dx,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        let mut dx = [0.0; LANES];
        for i in 0..LANES {
            dx[i] = self.dx[i] - o.dx[i];
        }
        Dual {
            re: self.re - o.re,
            dx,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        let mut dx = [0.0; LANES];
        for i in 0..LANES {
            dx[i] = self.dx[i] * o.re + self.re * o.dx[i];
        }
        Dual {
            re: self.re * o.re,
            dx,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        let v = self.re * inv;
        let mut dx = [0.0; LANES];
        for i in 0..LANES {
            dx[i] = (self.dx[i] - v * o.dx[i]) * inv;
        }
        Dual { re: v, dx }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        let mut dx = [0.0; LANES];
        for i in 0..LANES {
            dx[i] = -self.dx[i];
        }
        Dual { re: -self.re, dx }
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        for i in 0..LANES {
            self.dx[i] += o.dx[i];
        }
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        for i in 0..LANES {
            self.dx[i] -= o.dx[i];
        }
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let v = self.re.exp();
        self.chain(v, v)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.re.ln(), 1.0 / self.re)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), 1.0 / (1.0 + self.re))
    }
    #[inline]
    fn sqrt(self) -> Self {
        let v = self.re.sqrt();
        self.chain(v, 0.5 / v)
    }
    #[inline]
    fn norm_logcdf(self) -> Self {
        // d/dx log Phi(x) = phi(x)/Phi(x)
        let v = log_ndtr(self.re);
        let d = ((-HALF_LN_2PI - 0.5 * self.re * self.re) - v).exp();
        self.chain(v, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_ndtr_matches_direct_in_bulk() {
        for &x in &[-5.0, -1.0, 0.0, 0.5, 2.0, 5.0] {
            let direct = (0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)).ln();
            assert_relative_eq!(log_ndtr(x), direct, max_relative = 1e-12);
        }
        assert_relative_eq!(log_ndtr(0.0), -(2.0f64.ln()), max_relative = 1e-14);
    }

    #[test]
    fn log_ndtr_deep_tail_is_finite_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let x = -100.0 + i as f64 * 0.5;
            let v = log_ndtr(x);
            assert!(v.is_finite());
            assert!(v > prev, "not monotone at x={x}");
            prev = v;
        }
        // continuity at the asymptotic switch
        let a = log_ndtr(-37.0 - 1e-9);
        let b = log_ndtr(-37.0 + 1e-9);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn hazard_tail_asymptote() {
        // phi/Phi ~ -x for very negative x
        let x = -50.0;
        let r = norm_hazard(x);
        assert_relative_eq!(r, -x + 1.0 / x, max_relative = 1e-3);
    }

    #[test]
    fn dual_arithmetic_derivatives() {
        let x = Dual::variable(0.7, 0);
        let y = Dual::variable(1.3, 1);
        // f = x*y + exp(x)/y
        let f = x * y + x.exp() / y;
        let fx = |a: f64, b: f64| a * b + a.exp() / b;
        let h = 1e-6;
        let dfdx = (fx(0.7 + h, 1.3) - fx(0.7 - h, 1.3)) / (2.0 * h);
        let dfdy = (fx(0.7, 1.3 + h) - fx(0.7, 1.3 - h)) / (2.0 * h);
        assert_relative_eq!(f.dx[0], dfdx, max_relative = 1e-8);
        assert_relative_eq!(f.dx[1], dfdy, max_relative = 1e-8);
    }

    #[test]
    fn dual_logcdf_derivative() {
        for &v in &[-3.0, -0.5, 0.0, 1.5, 8.0] {
            let x = Dual::variable(v, 0);
            let f = x.norm_logcdf();
            let h = 1e-6;
            let num = (log_ndtr(v + h) - log_ndtr(v - h)) / (2.0 * h);
            assert_relative_eq!(f.dx[0], num, max_relative = 1e-6);
        }
    }
}
