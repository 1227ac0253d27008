//! Truncated second-order Taylor arithmetic over the three event
//! coordinates, keeping only the diagonal of the Hessian.
//!
//! Each coordinate is propagated independently, so `grad[d]` and `hess[d]`
//! are exact first and second partials along coordinate `d`. Mixed partials
//! are never formed.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<S> {
    pub value: S,
    pub grad: [S; 3],
    pub hess: [S; 3],
}

impl<S: Real> Jet<S> {
    pub fn constant(value: S) -> Self {
        Jet {
            value,
            grad: [S::zero(); 3],
            hess: [S::zero(); 3],
        }
    }

    /// Seed for input coordinate `axis`: unit first derivative along it.
    pub fn variable(value: S, axis: usize) -> Self {
        let mut j = Self::constant(value);
        j.grad[axis] = S::one();
        j
    }

    /// Seeds the three event coordinates.
    pub fn seed_point(point: [S; 3]) -> [Self; 3] {
        [
            Self::variable(point[0], 0),
            Self::variable(point[1], 1),
            Self::variable(point[2], 2),
        ]
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at `self.value`.
    #[inline]
    pub fn chain(self, f: S, df: S, d2f: S) -> Self {
        let mut out = Self::constant(f);
        for d in 0..3 {
            let g = self.grad[d];
            out.grad[d] = df * g;
            out.hess[d] = d2f * g * g + df * self.hess[d];
        }
        out
    }

    /// Drops derivative components above `order` (0, 1 or 2).
    pub fn truncate(mut self, order: usize) -> Self {
        if order < 2 {
            self.hess = [S::zero(); 3];
        }
        if order < 1 {
            self.grad = [S::zero(); 3];
        }
        self
    }

    pub fn scale(self, c: S) -> Self {
        Jet {
            value: self.value * c,
            grad: self.grad.map(|g| g * c),
            hess: self.hess.map(|h| h * c),
        }
    }
}

impl<S: Real> Add for Jet<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Jet {
            value: self.value + o.value,
            grad: [
                self.grad[0] + o.grad[0],
                self.grad[1] + o.grad[1],
                self.grad[2] + o.grad[2],
            ],
            hess: [
                self.hess[0] + o.hess[0],
                self.hess[1] + o.hess[1],
                self.hess[2] + o.hess[2],
            ],
        }
    }
}

impl<S: Real> Sub for Jet<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<S: Real> Neg for Jet<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Jet {
            value: -self.value,
            grad: self.grad.map(|g| -g),
            hess: self.hess.map(|h| -h),
        }
    }
}

impl<S: Real> Mul for Jet<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let two = S::from_f64(2.0);
        let mut out = Self::constant(self.value * o.value);
        for d in 0..3 {
            out.grad[d] = self.value * o.grad[d] + self.grad[d] * o.value;
            out.hess[d] =
                self.value * o.hess[d] + two * self.grad[d] * o.grad[d] + self.hess[d] * o.value;
        }
        out
    }
}

impl<S: Real> Div for Jet<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<S: Real> AddAssign for Jet<S> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Real> SubAssign for Jet<S> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<S: Real> MulAssign for Jet<S> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<S: Real> Zero for Jet<S> {
    fn zero() -> Self {
        Self::constant(S::zero())
    }
    fn is_zero(&self) -> bool {
        self.value.is_zero()
            && self.grad.iter().all(|g| g.is_zero())
            && self.hess.iter().all(|h| h.is_zero())
    }
}

impl<S: Real> One for Jet<S> {
    fn one() -> Self {
        Self::constant(S::one())
    }
}

impl<S: Real> Real for Jet<S> {
    fn from_f64(v: f64) -> Self {
        Self::constant(S::from_f64(v))
    }

    fn value(&self) -> f64 {
        self.value.value()
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    fn ln(self) -> Self {
        let inv = self.value.recip();
        self.chain(self.value.ln(), inv, -(inv * inv))
    }

    fn ln_1p(self) -> Self {
        let inv = (S::one() + self.value).recip();
        self.chain(self.value.ln_1p(), inv, -(inv * inv))
    }

    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        let half = S::from_f64(0.5);
        let d1 = half / r;
        let d2 = -(d1 / (S::from_f64(2.0) * self.value));
        self.chain(r, d1, d2)
    }

    fn powf(self, p: f64) -> Self {
        let v = self.value;
        self.chain(
            v.powf(p),
            S::from_f64(p) * v.powf(p - 1.0),
            S::from_f64(p * (p - 1.0)) * v.powf(p - 2.0),
        )
    }

    fn recip(self) -> Self {
        let inv = self.value.recip();
        self.chain(inv, -(inv * inv), S::from_f64(2.0) * inv * inv * inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_on_polynomial() {
        // f(t) = t^2 at t = 3
        let [t, _, _] = Jet::seed_point([3.0, 0.0, 0.0]);
        let f = t * t;
        assert_eq!(f.value, 9.0);
        assert_eq!(f.grad, [6.0, 0.0, 0.0]);
        assert_eq!(f.hess, [2.0, 0.0, 0.0]);
    }

    #[test]
    fn quotient_and_transcendentals() {
        let [t, x, _] = Jet::seed_point([0.7, 1.3, 0.0]);
        let f = (t * x).exp() / x;
        // d/dt = x e^{tx} / x = e^{tx}; d2/dt2 = x e^{tx}
        let e = (0.7_f64 * 1.3).exp();
        assert!((f.grad[0] - e).abs() < 1e-12);
        assert!((f.hess[0] - 1.3 * e).abs() < 1e-12);
        // d/dx (e^{tx}/x) = e^{tx}(t/x - 1/x^2)
        let gx = e * (0.7 / 1.3 - 1.0 / (1.3 * 1.3));
        assert!((f.grad[1] - gx).abs() < 1e-12);
    }

    #[test]
    fn sqrt_and_powf_match_closed_forms() {
        let [t, _, _] = Jet::seed_point([4.0_f64, 0.0, 0.0]);
        let r = t.sqrt();
        assert!((r.grad[0] - 0.25).abs() < 1e-15);
        assert!((r.hess[0] + 1.0 / 32.0).abs() < 1e-15);
        let p = t.powf(-0.5);
        assert!((p.value - 0.5).abs() < 1e-15);
        assert!((p.grad[0] + 0.5 * 4.0_f64.powf(-1.5)).abs() < 1e-15);
        assert!((p.hess[0] - 0.75 * 4.0_f64.powf(-2.5)).abs() < 1e-15);
    }

    #[test]
    fn truncation_zeroes_higher_orders() {
        let [t, _, _] = Jet::seed_point([2.0, 0.0, 0.0]);
        let f = (t * t).truncate(1);
        assert_eq!(f.hess, [0.0; 3]);
        assert_eq!(f.grad[0], 4.0);
        let f0 = (t * t).truncate(0);
        assert_eq!(f0.grad, [0.0; 3]);
    }
}
