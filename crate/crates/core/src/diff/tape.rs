//! Minimal reverse-mode tape. Every operation appends a node holding the
//! local partials with respect to at most two parents; a single backward
//! sweep in reverse creation order yields all adjoints.

use std::cell::RefCell;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

use crate::scalar::Real;

const NO_PARENT: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [usize; 2],
    weights: [f64; 2],
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NO_PARENT; 2],
            weights: [0.0; 2],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Adjoints of `output` with respect to every node on the tape.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_none() {
            return adj;
        }
        adj[output.idx] = 1.0;
        for i in (0..=output.idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                if node.parents[k] != NO_PARENT {
                    adj[node.parents[k]] += a * node.weights[k];
                }
            }
        }
        adj
    }
}

/// A scalar recorded on a [`Tape`]. Constants carry no tape.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: usize,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NO_PARENT,
            val,
        }
    }

    pub fn val(&self) -> f64 {
        self.val
    }

    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, NO_PARENT],
                    weights: [d, 0.0],
                }),
                val,
            },
        }
    }

    fn binary(self, o: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, o.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => self.unary_on(t, val, da),
            (None, Some(t)) => o.unary_on(t, val, db),
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, o.idx],
                    weights: [da, db],
                }),
                val,
            },
        }
    }

    fn unary_on(self, t: &'t Tape, val: f64, d: f64) -> Self {
        Var {
            tape: Some(t),
            idx: t.push(Node {
                parents: [self.idx, NO_PARENT],
                weights: [d, 0.0],
            }),
            val,
        }
    }
}

impl PartialEq for Var<'_> {
    fn eq(&self, o: &Self) -> bool {
        self.val == o.val
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.val;
        self.binary(o, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<'t> SubAssign for Var<'t> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<'t> MulAssign for Var<'t> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<'t> Zero for Var<'t> {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.tape.is_none() && self.val == 0.0
    }
}

impl<'t> One for Var<'t> {
    fn one() -> Self {
        Var::constant(1.0)
    }
}

impl<'t> Real for Var<'t> {
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(&self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }

    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }

    fn powf(self, p: f64) -> Self {
        self.unary(self.val.powf(p), p * self.val.powf(p - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_product_and_exp() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(0.5);
        let f = x * y.exp() + x / y;
        let g = tape.gradient(f);
        let e = 0.5_f64.exp();
        assert!((g[0] - (e + 2.0)).abs() < 1e-12);
        assert!((g[1] - (2.0 * e - 2.0 / 0.25)).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let c = Var::constant(3.0) * Var::constant(2.0);
        assert_eq!(c.val(), 6.0);
        assert!(tape.is_empty());
        assert!(tape.gradient(c).is_empty());
    }
}
