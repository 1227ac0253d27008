//! Deep kernel mixture point processes.
//!
//! Spatio-temporal intensities built from a learned kernel mixture over a
//! fixed set of representative points, fitted by maximum likelihood or by
//! (denoising) score matching, plus a thinning simulator and evaluation
//! metrics.
//!
//! Differentiable pieces are written once over [`Real`] and instantiated at
//! `f64` for evaluation, [`Jet`] for input derivatives and [`Var`] for
//! parameter gradients.

pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod intensity;
pub mod kernels;
pub mod metrics;
pub mod scalar;
pub mod simulator;

pub use diff::{Jet, Order, ParamVector, Tape, Var};
pub use domain::{EventSequence, Point, SequenceSet, Window};
pub use error::{Error, Result};
pub use intensity::{AnyModel, HomoPoissonModel, InputJet, IntensityFn, IntensityModel, Link, MixtureModel};
pub use scalar::Real;

/// Input jet at double precision.
pub type Jet64 = Jet<f64>;
/// Reverse-mode variable nested inside an input jet.
pub type JetVar<'t> = Jet<Var<'t>>;
