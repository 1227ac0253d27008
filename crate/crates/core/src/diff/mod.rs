//! Differentiation engine.
//!
//! Two composable mechanisms:
//!
//! * [`Jet`] propagates value, gradient and Hessian diagonal with respect to
//!   the three event coordinates (forward mode, exact, per coordinate).
//! * [`Tape`]/[`Var`] records operations for reverse accumulation, giving
//!   parameter gradients. Nesting `Jet<Var>` differentiates losses that
//!   themselves contain input derivatives.
//!
//! The intensity models also carry hand-derived adjoints for speed; this
//! module is the general route those are checked against.

mod jet;
mod params;
mod tape;

pub use jet::Jet;
pub use params::ParamVector;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Derivative order requested from [`eval_jet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value = 0,
    First = 1,
    Second = 2,
}

impl Order {
    pub fn as_usize(self) -> usize {
        self as usize
    }
}

/// A scalar function of an event point and a flat parameter vector,
/// written once for any [`Real`].
pub trait ScalarField {
    fn eval<S: Real>(&self, point: [S; 3], params: &[S]) -> S;
}

const AXIS_NAMES: [&str; 3] = ["t", "x1", "x2"];

/// Value, input gradient and input Hessian diagonal of `field` at `point`.
pub fn eval_jet<F, S>(field: &F, point: [f64; 3], params: &[S], order: Order) -> Result<Jet<S>>
where
    F: ScalarField,
    S: Real,
{
    let seeded = Jet::seed_point(point.map(S::from_f64));
    let lifted: Vec<Jet<S>> = params.iter().map(|&p| Jet::constant(p)).collect();
    let jet = field.eval(seeded, &lifted).truncate(order.as_usize());
    check_jet(&jet)?;
    Ok(jet)
}

fn check_jet<S: Real>(jet: &Jet<S>) -> Result<()> {
    if !jet.value.value().is_finite() {
        return Err(Error::NonFinite("field value".into()));
    }
    for d in 0..3 {
        if !jet.grad[d].value().is_finite() || !jet.hess[d].value().is_finite() {
            return Err(Error::NonFinite(format!(
                "derivative along coordinate {}",
                AXIS_NAMES[d]
            )));
        }
    }
    Ok(())
}

/// Value and exact gradient of `loss` with respect to every entry of
/// `params`. The loss may evaluate jets internally (`Jet<Var>`), which
/// differentiates through input derivatives.
pub fn param_grad<F>(params: &ParamVector, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.values().iter().map(|&v| tape.var(v)).collect();
    let out = loss(&vars)?;
    let adj = tape.gradient(out);
    let mut grad = vec![0.0; params.len()];
    for (g, a) in grad.iter_mut().zip(adj.iter()) {
        *g = *a;
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} ({})",
            params.owner(i).unwrap_or("?")
        )));
    }
    Ok((out.val(), grad))
}

/// Central differences of `f` along the listed coordinates of `x`.
pub fn central_difference<F>(f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut buf = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Second central differences `(f(x+h) - 2 f(x) + f(x-h)) / h^2`.
pub fn second_difference<F>(f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut buf = x.to_vec();
    let f0 = f(&buf);
    coords
        .iter()
        .map(|&i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            (fp - 2.0 * f0 + fm) / (h * h)
        })
        .collect()
}

/// Relative error with an absolute floor so that vanishing derivatives do
/// not divide by zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub const REL_FLOOR: f64 = 1e-6;

/// Maximum relative error between `analytic[k]` and the central difference
/// of `f` along `coords[k]`.
pub fn finite_diff_check<F>(f: F, x: &[f64], coords: &[usize], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(coords.len(), analytic.len());
    central_difference(f, x, coords, h)
        .into_iter()
        .zip(analytic)
        .map(|(fd, &a)| relative_error(a, fd))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl ScalarField for Constant {
        fn eval<S: Real>(&self, _p: [S; 3], params: &[S]) -> S {
            params[0]
        }
    }

    struct Square;
    impl ScalarField for Square {
        fn eval<S: Real>(&self, p: [S; 3], _params: &[S]) -> S {
            p[0] * p[0]
        }
    }

    /// a·t·x1 + b·exp(x2)·t² + sin-free smooth mix used for linearity checks.
    struct Mix;
    impl ScalarField for Mix {
        fn eval<S: Real>(&self, p: [S; 3], w: &[S]) -> S {
            w[0] * p[0] * p[1] + w[1] * p[2].exp() * p[0] * p[0] + (p[1] * p[1] + S::one()).ln()
        }
    }

    struct Affine<F> {
        inner: F,
        scale: [f64; 3],
        shift: [f64; 3],
    }
    impl<F: ScalarField> ScalarField for Affine<F> {
        fn eval<S: Real>(&self, p: [S; 3], w: &[S]) -> S {
            let q = [0, 1, 2].map(|d| p[d] * S::from_f64(self.scale[d]) + S::from_f64(self.shift[d]));
            self.inner.eval(q, w)
        }
    }

    #[test]
    fn constant_field_has_zero_derivatives() {
        let j = eval_jet(&Constant, [1.0, 2.0, 3.0], &[5.0_f64], Order::Second).unwrap();
        assert_eq!(j.value, 5.0);
        assert_eq!(j.grad, [0.0; 3]);
        assert_eq!(j.hess, [0.0; 3]);
    }

    #[test]
    fn square_in_time() {
        let j = eval_jet(&Square, [3.0, 0.0, 0.0], &[] as &[f64], Order::Second).unwrap();
        assert_eq!(j.grad[0], 6.0);
        assert_eq!(j.hess[0], 2.0);
        let j1 = eval_jet(&Square, [3.0, 0.0, 0.0], &[] as &[f64], Order::First).unwrap();
        assert_eq!(j1.hess, [0.0; 3]);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        struct Pole;
        impl ScalarField for Pole {
            fn eval<S: Real>(&self, p: [S; 3], _w: &[S]) -> S {
                p[1].ln()
            }
        }
        let err = eval_jet(&Pole, [1.0, 0.0, 1.0], &[] as &[f64], Order::First).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn chain_rule_under_affine_input_map() {
        let w = [0.3, -0.7];
        let point = [0.4, 0.9, -0.2];
        let scale = [2.0, -0.5, 3.0];
        let shift = [0.1, 0.2, -0.3];
        let composed = Affine {
            inner: Mix,
            scale,
            shift,
        };
        let outer = eval_jet(&composed, point, &w, Order::Second).unwrap();
        let mapped = [0, 1, 2].map(|d| point[d] * scale[d] + shift[d]);
        let inner = eval_jet(&Mix, mapped, &w, Order::Second).unwrap();
        for d in 0..3 {
            assert!((outer.grad[d] - scale[d] * inner.grad[d]).abs() < 1e-12);
            assert!((outer.hess[d] - scale[d] * scale[d] * inner.hess[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn param_grad_of_half_squared_norm_is_identity() {
        let p = ParamVector::new(vec![("w".into(), vec![1.5, -2.0, 0.25])]).unwrap();
        let (v, g) = param_grad(&p, |w| {
            let mut acc = Var::constant(0.0);
            for &x in w {
                acc += x * x;
            }
            Ok(acc * Var::constant(0.5))
        })
        .unwrap();
        assert!((v - 0.5 * (2.25 + 4.0 + 0.0625)).abs() < 1e-15);
        assert_eq!(g, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn param_grad_of_param_free_loss_is_zero() {
        let p = ParamVector::new(vec![("w".into(), vec![1.0, 2.0])]).unwrap();
        let (_, g) = param_grad(&p, |_w| Ok(Var::constant(3.0))).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn nested_derivative_matches_finite_differences() {
        // d/dw of (d Mix / dt) at a fixed point, via Jet<Var> against FD over w.
        let point = [0.4, 0.9, -0.2];
        let p = ParamVector::new(vec![("w".into(), vec![0.3, -0.7])]).unwrap();
        let (_, g) = param_grad(&p, |w| Ok(eval_jet(&Mix, point, w, Order::First)?.grad[0])).unwrap();
        let f = |w: &[f64]| eval_jet(&Mix, point, w, Order::First).unwrap().grad[0];
        let err = finite_diff_check(f, p.values(), &[0, 1], &g, 1e-4);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn finite_difference_accuracy() {
        let e = finite_diff_check(|x| x[0].sin(), &[0.0], &[0], &[1.0], 1e-3);
        assert!(e < 1e-6 && e > 1e-8, "{e}");
        let q = finite_diff_check(|x| 3.0 * x[0] * x[0] + x[0], &[0.7], &[0], &[5.2], 1e-3);
        assert!(q < 1e-12, "{q}");
    }
}
