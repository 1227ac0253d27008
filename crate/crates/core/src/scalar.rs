//! Scalar abstraction shared by plain floats, input jets and tape variables.
//!
//! Model code that must be differentiated is written once against [`Real`]
//! and instantiated with `f64` for evaluation, `Jet<_>` for input
//! derivatives, and `Var` for reverse-mode parameter gradients.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

pub trait Real:
    Copy
    + Debug
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value, used for branching (rectifier masks, clamps).
    fn value(&self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, p: f64) -> Self;

    fn recip(self) -> Self {
        Self::one() / self
    }

    /// Rectifier with derivative 0 at the kink.
    fn relu(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }

    /// Overflow-safe `ln(1 + e^x)`.
    fn softplus(self) -> Self {
        if self.value() > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    fn sigmoid(self) -> Self {
        if self.value() >= 0.0 {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `sqrt` whose derivatives are defined as zero at the origin.
    fn safe_sqrt(self) -> Self {
        if self.value() == 0.0 {
            Self::zero()
        } else {
            self.sqrt()
        }
    }

    /// Clamp from above; the clamped branch is constant.
    fn min_const(self, cap: f64) -> Self {
        if self.value() > cap {
            Self::from_f64(cap)
        } else {
            self
        }
    }
}

macro_rules! impl_real_float {
    ($($t:ty),*) => {$(
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn value(&self) -> f64 {
                *self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                num_traits::Float::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                num_traits::Float::ln(self)
            }
            #[inline]
            fn ln_1p(self) -> Self {
                num_traits::Float::ln_1p(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                num_traits::Float::sqrt(self)
            }
            #[inline]
            fn powf(self, p: f64) -> Self {
                num_traits::Float::powf(self, p as $t)
            }
        }
    )*};
}

impl_real_float!(f32, f64);

/// Plain-float softplus, `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((Real::softplus(50.0_f64) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn generic_helpers_agree_across_precisions() {
        let x32 = Real::softplus(0.3_f32);
        let x64 = Real::softplus(0.3_f64);
        assert!((x32 as f64 - x64).abs() < 1e-6);
        assert_eq!(Real::relu(-1.0_f64), 0.0);
        assert_eq!(Real::min_const(40.0_f64, 30.0), 30.0);
        assert_eq!(Real::safe_sqrt(0.0_f64), 0.0);
    }
}
