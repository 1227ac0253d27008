//! Intensity models: the deep-kernel mixture (DKMPP), the plain kernel
//! mixture (DMPP), and the homogeneous Poisson baseline, together with Monte
//! Carlo and closed-form compensators.
//!
//! Every model exposes the jet of `log lambda` at a point and a fused
//! loss/gradient routine: callers supply a per-point loss of that jet and
//! its adjoint, and the model back-propagates into its parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{Jet, Order, ParamVector, ScalarField};
use crate::domain::{Point, RepresentativeSet, SequenceSet, Window};
use crate::error::{Error, Result};
use crate::kernels::{
    lanes_for_order, point_to_lanes, values_to_lanes, BaseKernelKind, MlpSpec, MlpTrace, Profile,
    LANES,
};
use crate::scalar::{sigmoid, softplus, Real};

/// Value, gradient and Hessian diagonal of `log lambda`.
pub type InputJet = Jet<f64>;

/// Per-point loss callback: `(group, index, jet) -> (loss, d loss / d jet)`.
pub type PointLoss<'a> = dyn Fn(usize, usize, &InputJet) -> Result<(f64, InputJet)> + Sync + 'a;

/// Link applied to the kernel-mixture field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Softplus,
    Exponential,
    Rectifier,
    Identity,
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Softplus => "softplus",
            Link::Exponential => "exponential",
            Link::Rectifier => "rectifier",
            Link::Identity => "identity",
        })
    }
}

impl FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softplus" => Ok(Link::Softplus),
            "exponential" | "exp" => Ok(Link::Exponential),
            "rectifier" | "relu" => Ok(Link::Rectifier),
            "identity" => Ok(Link::Identity),
            other => Err(Error::Config(format!("unknown link '{other}'"))),
        }
    }
}

/// Exponential link argument cap.
pub const EXP_LINK_CAP: f64 = 30.0;

impl Link {
    pub fn eval(self, h: f64) -> f64 {
        match self {
            Link::Softplus => softplus(h),
            Link::Exponential => h.min(EXP_LINK_CAP).exp(),
            Link::Rectifier => h.max(0.0),
            Link::Identity => h,
        }
    }

    pub fn eval_generic<S: Real>(self, h: S) -> S {
        match self {
            Link::Softplus => h.softplus(),
            Link::Exponential => h.min_const(EXP_LINK_CAP).exp(),
            Link::Rectifier => h.relu(),
            Link::Identity => h,
        }
    }

    /// `(eta, eta', eta'', eta''')` at `h`.
    pub fn derivatives(self, h: f64) -> [f64; 4] {
        match self {
            Link::Softplus => {
                let s = sigmoid(h);
                let s1 = s * (1.0 - s);
                [softplus(h), s, s1, s1 * (1.0 - 2.0 * s)]
            }
            Link::Exponential => {
                if h > EXP_LINK_CAP {
                    [EXP_LINK_CAP.exp(), 0.0, 0.0, 0.0]
                } else {
                    let e = h.exp();
                    [e, e, e, e]
                }
            }
            Link::Rectifier => {
                if h > 0.0 {
                    [h, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Link::Identity => [h, 1.0, 0.0, 0.0],
        }
    }
}

/// Jet of `log eta(h)` from the jet of `h`, plus the pieces needed to map
/// adjoints back to `h`.
#[derive(Clone, Copy, Debug)]
struct LogLinkJet {
    jet: InputJet,
    rho1: f64,
    sigma1: f64,
    dsigma1: f64,
}

fn log_link_jet(link: Link, h: &[f64; LANES], order: usize) -> Option<LogLinkJet> {
    let [eta, e1, e2, e3] = link.derivatives(h[0]);
    if !(eta > 0.0) || !eta.is_finite() {
        return None;
    }
    let rho1 = e1 / eta;
    let rho2 = e2 / eta;
    let rho3 = e3 / eta;
    let sigma1 = rho2 - rho1 * rho1;
    let sigma2 = rho3 - rho2 * rho1;
    let dsigma1 = sigma2 - 2.0 * rho1 * sigma1;
    let mut jet = Jet::constant(eta.ln());
    if order >= 1 {
        for d in 0..3 {
            jet.grad[d] = rho1 * h[1 + d];
        }
    }
    if order >= 2 {
        for d in 0..3 {
            jet.hess[d] = sigma1 * h[1 + d] * h[1 + d] + rho1 * h[4 + d];
        }
    }
    Some(LogLinkJet {
        jet,
        rho1,
        sigma1,
        dsigma1,
    })
}

impl LogLinkJet {
    /// Adjoint of the latent lanes given the adjoint of the log-intensity jet.
    fn backward(&self, h: &[f64; LANES], adj: &InputJet, order: usize) -> [f64; LANES] {
        let mut hb = [0.0; LANES];
        hb[0] = adj.value * self.rho1;
        if order >= 1 {
            for d in 0..3 {
                hb[0] += adj.grad[d] * self.sigma1 * h[1 + d];
                hb[1 + d] = adj.grad[d] * self.rho1;
            }
        }
        if order >= 2 {
            for d in 0..3 {
                let hd = h[1 + d];
                hb[0] += adj.hess[d] * (self.dsigma1 * hd * hd + self.sigma1 * h[4 + d]);
                hb[1 + d] += adj.hess[d] * 2.0 * self.sigma1 * hd;
                hb[4 + d] = adj.hess[d] * self.rho1;
            }
        }
        hb
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dkmpp,
    Dmpp,
}

/// Output activation of the mixture-weight network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightActivation {
    Identity,
    Softplus,
}

/// Structural configuration of a kernel-mixture model (everything except
/// learned values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureStructure {
    pub family: Family,
    pub kernel: BaseKernelKind,
    pub link: Link,
    pub weight_activation: WeightActivation,
    pub weight_net: MlpSpec,
    pub transform: Option<MlpSpec>,
    pub window: Window,
    pub representative_counts: [usize; 3],
    pub covariate_dim: usize,
}

impl MixtureStructure {
    /// DKMPP: free-sign weights, deep-kernel transform, positive link.
    #[allow(clippy::too_many_arguments)]
    pub fn dkmpp(
        window: Window,
        counts: [usize; 3],
        covariate_dim: usize,
        kernel: BaseKernelKind,
        link: Link,
        hidden: usize,
        layers: usize,
        transform_dim: usize,
    ) -> Result<Self> {
        Ok(MixtureStructure {
            family: Family::Dkmpp,
            kernel,
            link,
            weight_activation: WeightActivation::Identity,
            weight_net: MlpSpec::with_hidden(covariate_dim + 3, hidden, layers, 1)?,
            transform: Some(MlpSpec::with_hidden(3, hidden, layers, transform_dim)?),
            window,
            representative_counts: counts,
            covariate_dim,
        })
    }

    /// DMPP: non-negative weights through softplus, identity transform and link.
    pub fn dmpp(
        window: Window,
        counts: [usize; 3],
        covariate_dim: usize,
        kernel: BaseKernelKind,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        Ok(MixtureStructure {
            family: Family::Dmpp,
            kernel,
            link: Link::Identity,
            weight_activation: WeightActivation::Softplus,
            weight_net: MlpSpec::with_hidden(covariate_dim + 3, hidden, layers, 1)?,
            transform: None,
            window,
            representative_counts: counts,
            covariate_dim,
        })
    }

    fn transform_dim(&self) -> usize {
        self.transform.as_ref().map_or(3, |g| g.output_dim())
    }
}

pub const LOG_PHI: &str = "log_phi";
pub const WEIGHT_PREFIX: &str = "weight_net";
pub const TRANSFORM_PREFIX: &str = "transform";

/// Parameter-dependent quantities that do not depend on the query point:
/// mixture weights `f_j`, transformed representative points `g(u_j)` and
/// `phi`, with traces for back-propagation.
#[derive(Debug)]
pub struct Prepared {
    phi: f64,
    weights: Vec<f64>,
    weight_pre: Vec<f64>,
    weight_traces: Vec<MlpTrace>,
    rep_transformed: Vec<f64>,
    rep_traces: Vec<MlpTrace>,
}

impl Prepared {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

#[derive(Clone, Debug)]
struct GradAccum {
    weights: Vec<f64>,
    rep: Vec<f64>,
    phi: f64,
    transform: Vec<f64>,
    loss: f64,
}

impl GradAccum {
    fn zeros(j: usize, dg: usize, n_transform: usize) -> Self {
        GradAccum {
            weights: vec![0.0; j],
            rep: vec![0.0; j * dg],
            phi: 0.0,
            transform: vec![0.0; n_transform],
            loss: 0.0,
        }
    }

    fn add(&mut self, o: &GradAccum) {
        for (a, b) in self.weights.iter_mut().zip(&o.weights) {
            *a += b;
        }
        for (a, b) in self.rep.iter_mut().zip(&o.rep) {
            *a += b;
        }
        for (a, b) in self.transform.iter_mut().zip(&o.transform) {
            *a += b;
        }
        self.phi += o.phi;
        self.loss += o.loss;
    }
}

#[derive(Default)]
struct PointScratch {
    trace: MlpTrace,
    a: Vec<f64>,
    e: Vec<f64>,
    q: Vec<[f64; 7]>,
    prof: Vec<Profile>,
}

/// Kernel-mixture intensity `lambda(s) = eta(sum_j f_j k(g(s), g(u_j)))`.
#[derive(Debug)]
pub struct MixtureModel {
    structure: MixtureStructure,
    rep: RepresentativeSet,
    /// Weight-net inputs: window-scaled coordinates then min-max scaled covariates.
    rep_inputs: Vec<Vec<f64>>,
    params: ParamVector,
    cache: OnceLock<Arc<Prepared>>,
}

impl Clone for MixtureModel {
    fn clone(&self) -> Self {
        MixtureModel {
            structure: self.structure.clone(),
            rep: self.rep.clone(),
            rep_inputs: self.rep_inputs.clone(),
            params: self.params.clone(),
            cache: OnceLock::new(),
        }
    }
}

fn weight_net_inputs(rep: &RepresentativeSet, window: &Window) -> Vec<Vec<f64>> {
    let k = rep.covariate_dim();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for z in &rep.covariates {
        for c in 0..k {
            lo[c] = lo[c].min(z[c]);
            hi[c] = hi[c].max(z[c]);
        }
    }
    rep.points
        .iter()
        .zip(&rep.covariates)
        .map(|(u, z)| {
            let mut x: Vec<f64> = (0..3)
                .map(|a| (u[a] - window.bounds(a).0) / window.extent(a))
                .collect();
            for c in 0..k {
                let span = hi[c] - lo[c];
                x.push(if span > 0.0 { (z[c] - lo[c]) / span } else { 0.0 });
            }
            x
        })
        .collect()
}

impl MixtureModel {
    /// New model with Glorot-initialized networks and `phi = phi_init`.
    pub fn new(
        structure: MixtureStructure,
        rep: RepresentativeSet,
        phi_init: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(phi_init > 0.0) {
            return Err(Error::InvalidArgument(format!("phi_init must be positive, got {phi_init}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = vec![(LOG_PHI.to_string(), vec![phi_init.ln()])];
        blocks.extend(structure.weight_net.init_blocks(WEIGHT_PREFIX, &mut rng));
        if let Some(g) = &structure.transform {
            blocks.extend(g.init_blocks(TRANSFORM_PREFIX, &mut rng));
        }
        let params = ParamVector::new(blocks)?;
        Self::with_params(structure, rep, params)
    }

    pub fn with_params(
        structure: MixtureStructure,
        rep: RepresentativeSet,
        params: ParamVector,
    ) -> Result<Self> {
        structure.window.validate()?;
        if rep.is_empty() {
            return Err(Error::InvalidArgument("empty representative set".into()));
        }
        if rep.covariate_dim() != structure.covariate_dim {
            return Err(Error::Shape(format!(
                "representative covariates have dimension {}, structure expects {}",
                rep.covariate_dim(),
                structure.covariate_dim
            )));
        }
        if structure.weight_net.input_dim() != structure.covariate_dim + 3 || structure.weight_net.output_dim() != 1 {
            return Err(Error::Shape("weight net must map K+3 inputs to 1 output".into()));
        }
        if let Some(g) = &structure.transform {
            if g.input_dim() != 3 {
                return Err(Error::Shape("transform must take 3 inputs".into()));
            }
        }
        let expected = 1
            + structure.weight_net.n_params()
            + structure.transform.as_ref().map_or(0, |g| g.n_params());
        if params.len() != expected || params.range(LOG_PHI) != Some(0..1) {
            return Err(Error::Shape(format!(
                "parameter vector of length {} does not fit the structure ({expected})",
                params.len()
            )));
        }
        let rep_inputs = weight_net_inputs(&rep, &structure.window);
        Ok(MixtureModel {
            structure,
            rep,
            rep_inputs,
            params,
            cache: OnceLock::new(),
        })
    }

    pub fn structure(&self) -> &MixtureStructure {
        &self.structure
    }

    pub fn representative(&self) -> &RepresentativeSet {
        &self.rep
    }

    pub fn phi(&self) -> f64 {
        self.params.values()[0].exp()
    }

    fn weight_range(&self) -> std::ops::Range<usize> {
        1..1 + self.structure.weight_net.n_params()
    }

    fn transform_range(&self) -> std::ops::Range<usize> {
        let start = 1 + self.structure.weight_net.n_params();
        start..self.params.len()
    }

    /// Cached per-parameter-state quantities.
    pub fn prepared(&self) -> Arc<Prepared> {
        self.cache.get_or_init(|| Arc::new(self.prepare())).clone()
    }

    fn prepare(&self) -> Prepared {
        let v = self.params.values();
        let wp = &v[self.weight_range()];
        let j = self.rep.len();
        let mut weights = Vec::with_capacity(j);
        let mut weight_pre = Vec::with_capacity(j);
        let mut weight_traces = Vec::with_capacity(j);
        for input in &self.rep_inputs {
            let mut tr = MlpTrace::default();
            self.structure
                .weight_net
                .forward_lanes(wp, &values_to_lanes(input), 1, &mut tr);
            let pre = tr.output()[0];
            weight_pre.push(pre);
            weights.push(match self.structure.weight_activation {
                WeightActivation::Identity => pre,
                WeightActivation::Softplus => softplus(pre),
            });
            weight_traces.push(tr);
        }
        let dg = self.structure.transform_dim();
        let mut rep_transformed = Vec::with_capacity(j * dg);
        let mut rep_traces = Vec::new();
        match &self.structure.transform {
            Some(g) => {
                let gp = &v[self.transform_range()];
                for u in &self.rep.points {
                    let mut tr = MlpTrace::default();
                    g.forward_lanes(gp, &values_to_lanes(u), 1, &mut tr);
                    rep_transformed.extend((0..dg).map(|c| tr.output()[c * LANES]));
                    rep_traces.push(tr);
                }
            }
            None => {
                for u in &self.rep.points {
                    rep_transformed.extend_from_slice(u);
                }
            }
        }
        Prepared {
            phi: v[0].exp(),
            weights,
            weight_pre,
            weight_traces,
            rep_transformed,
            rep_traces,
        }
    }

    /// Lanes of the latent field `h` at `s`.
    fn latent_forward(&self, prep: &Prepared, s: &Point, order: usize, sc: &mut PointScratch) -> [f64; LANES] {
        let lanes = lanes_for_order(order);
        let dg = self.structure.transform_dim();
        match &self.structure.transform {
            Some(g) => {
                let gp = &self.params.values()[self.transform_range()];
                g.forward_lanes(gp, &point_to_lanes(s), lanes, &mut sc.trace);
                sc.a.clear();
                sc.a.extend_from_slice(sc.trace.output());
            }
            None => {
                sc.a.clear();
                sc.a.extend_from_slice(&point_to_lanes(s));
            }
        }
        let j_count = self.rep.len();
        sc.e.resize(j_count * dg, 0.0);
        sc.q.resize(j_count, [0.0; 7]);
        sc.prof.resize(j_count, Profile::default());
        let kind = self.structure.kernel;
        let phi = prep.phi;
        let mut h = [0.0; LANES];
        for j in 0..j_count {
            let v = &prep.rep_transformed[j * dg..(j + 1) * dg];
            let mut q = [0.0; 7];
            for c in 0..dg {
                let ac = &sc.a[c * LANES..(c + 1) * LANES];
                let e = ac[0] - v[c];
                sc.e[j * dg + c] = e;
                q[0] += e * e;
                if order >= 1 {
                    for d in 0..3 {
                        q[1 + d] += 2.0 * e * ac[1 + d];
                    }
                }
                if order >= 2 {
                    for d in 0..3 {
                        q[4 + d] += 2.0 * (ac[1 + d] * ac[1 + d] + e * ac[4 + d]);
                    }
                }
            }
            let p = kind.profile(phi, q[0]);
            let w = prep.weights[j];
            h[0] += w * p.k;
            if order >= 1 {
                for d in 0..3 {
                    h[1 + d] += w * p.d1 * q[1 + d];
                }
            }
            if order >= 2 {
                for d in 0..3 {
                    h[4 + d] += w * (p.d2 * q[1 + d] * q[1 + d] + p.d1 * q[4 + d]);
                }
            }
            sc.q[j] = q;
            sc.prof[j] = p;
        }
        h
    }

    /// Back-propagates latent-lane adjoints `hb` for the point last run
    /// through [`Self::latent_forward`] with the same scratch.
    fn latent_backward(
        &self,
        prep: &Prepared,
        hb: &[f64; LANES],
        order: usize,
        sc: &PointScratch,
        acc: &mut GradAccum,
    ) {
        let lanes = lanes_for_order(order);
        let dg = self.structure.transform_dim();
        let mut abar = vec![0.0; dg * LANES];
        for j in 0..self.rep.len() {
            let q = &sc.q[j];
            let p = &sc.prof[j];
            if p.k == 0.0 {
                // flushed profile: every derivative is zero as well
                continue;
            }
            let w = prep.weights[j];
            let mut wbar = hb[0] * p.k;
            let kbar = w * hb[0];
            let mut qbar = kbar * p.d1;
            let mut phibar = kbar * p.k_phi;
            let mut qdbar = [0.0; 3];
            let mut qddbar = [0.0; 3];
            if order >= 1 {
                for d in 0..3 {
                    let qd = q[1 + d];
                    wbar += hb[1 + d] * p.d1 * qd;
                    let kdbar = w * hb[1 + d];
                    qbar += kdbar * p.d2 * qd;
                    qdbar[d] = kdbar * p.d1;
                    phibar += kdbar * p.d1_phi * qd;
                }
            }
            if order >= 2 {
                for d in 0..3 {
                    let (qd, qdd) = (q[1 + d], q[4 + d]);
                    wbar += hb[4 + d] * (p.d2 * qd * qd + p.d1 * qdd);
                    let kddbar = w * hb[4 + d];
                    qbar += kddbar * (p.d3 * qd * qd + p.d2 * qdd);
                    qdbar[d] += kddbar * 2.0 * p.d2 * qd;
                    qddbar[d] = kddbar * p.d1;
                    phibar += kddbar * (p.d2_phi * qd * qd + p.d1_phi * qdd);
                }
            }
            acc.weights[j] += wbar;
            acc.phi += phibar;
            for c in 0..dg {
                let e = sc.e[j * dg + c];
                let ac = &sc.a[c * LANES..(c + 1) * LANES];
                let dst = &mut abar[c * LANES..(c + 1) * LANES];
                let mut ebar = 2.0 * qbar * e;
                if order >= 1 {
                    for d in 0..3 {
                        ebar += 2.0 * qdbar[d] * ac[1 + d];
                        dst[1 + d] += 2.0 * qdbar[d] * e;
                    }
                }
                if order >= 2 {
                    for d in 0..3 {
                        ebar += 2.0 * qddbar[d] * ac[4 + d];
                        dst[1 + d] += 4.0 * qddbar[d] * ac[1 + d];
                        dst[4 + d] += 2.0 * qddbar[d] * e;
                    }
                }
                dst[0] += ebar;
                acc.rep[j * dg + c] -= ebar;
            }
        }
        if let Some(g) = &self.structure.transform {
            let gp = &self.params.values()[self.transform_range()];
            for c in 0..dg {
                for l in lanes..LANES {
                    abar[c * LANES + l] = 0.0;
                }
            }
            g.backward_lanes(gp, &sc.trace, &abar, &mut acc.transform, false);
        }
    }

    /// Maps accumulated adjoints of `f_j`, `g(u_j)` and `phi` to the flat
    /// parameter gradient.
    fn finish(&self, prep: &Prepared, acc: &GradAccum) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        grad[0] = acc.phi * prep.phi;
        let wr = self.weight_range();
        let wp = &self.params.values()[wr.clone()];
        {
            let gw = &mut grad[wr];
            for j in 0..self.rep.len() {
                let d = match self.structure.weight_activation {
                    WeightActivation::Identity => 1.0,
                    WeightActivation::Softplus => sigmoid(prep.weight_pre[j]),
                };
                let adj = acc.weights[j] * d;
                if adj == 0.0 {
                    continue;
                }
                let mut out = [0.0; LANES];
                out[0] = adj;
                self.structure
                    .weight_net
                    .backward_lanes(wp, &prep.weight_traces[j], &out, gw, false);
            }
        }
        if let Some(g) = &self.structure.transform {
            let tr = self.transform_range();
            let gp = &self.params.values()[tr.clone()];
            let dg = g.output_dim();
            let gt = &mut grad[tr];
            for (a, b) in gt.iter_mut().zip(&acc.transform) {
                *a += b;
            }
            for j in 0..self.rep.len() {
                let mut out = vec![0.0; dg * LANES];
                for c in 0..dg {
                    out[c * LANES] = acc.rep[j * dg + c];
                }
                g.backward_lanes(gp, &prep.rep_traces[j], &out, gt, false);
            }
        }
        grad
    }

    /// On/off state of every rectifier used when evaluating at `points`:
    /// the weight net at each representative input, the transform at each
    /// representative point, then the transform at each of `points`. The
    /// model is differentiable wherever this pattern is locally constant.
    pub fn rectifier_pattern(&self, points: &[Point]) -> Vec<bool> {
        let prep = self.prepared();
        let mut out: Vec<bool> = prep.weight_traces.iter().chain(&prep.rep_traces).flat_map(|t| t.masks()).collect();
        if let Some(g) = &self.structure.transform {
            let gp = &self.params.values()[self.transform_range()];
            let mut tr = MlpTrace::default();
            for p in points {
                g.forward_lanes(gp, &values_to_lanes(p), 1, &mut tr);
                out.extend(tr.masks());
            }
        }
        out
    }

    /// Latent field `h(s) = sum_j f_j k(s, u_j)`.
    pub fn latent_field(&self, s: &Point) -> f64 {
        let prep = self.prepared();
        let mut sc = PointScratch::default();
        self.latent_forward(&prep, s, 0, &mut sc)[0]
    }

    /// Sum of `f_j` times the closed-form RBF box integral; only defined
    /// for the DMPP family with an RBF kernel.
    pub fn exact_compensator(&self) -> Option<(f64, Vec<f64>)> {
        if self.structure.transform.is_some() || self.structure.kernel != BaseKernelKind::Rbf {
            return None;
        }
        if self.structure.link != Link::Identity {
            return None;
        }
        let prep = self.prepared();
        let window = &self.structure.window;
        let mut acc = GradAccum::zeros(self.rep.len(), 3, 0);
        let mut total = 0.0;
        for (j, u) in self.rep.points.iter().enumerate() {
            let (b, db) = rbf_box_integral_with_grad(prep.phi, u, window);
            total += prep.weights[j] * b;
            acc.weights[j] = b;
            acc.phi += prep.weights[j] * db;
        }
        Some((total, self.finish(&prep, &acc)))
    }

    fn point_log_jet(&self, prep: &Prepared, s: &Point, order: usize, sc: &mut PointScratch) -> Result<(InputJet, [f64; LANES], LogLinkJet)> {
        let h = self.latent_forward(prep, s, order, sc);
        let ll = log_link_jet(self.structure.link, &h, order).ok_or_else(|| Error::NonPositiveIntensity {
            value: self.structure.link.eval(h[0]),
            event: format!("({}, {}, {})", s[0], s[1], s[2]),
        })?;
        Ok((ll.jet, h, ll))
    }
}

/// Anything that can be evaluated as an intensity.
pub trait IntensityFn: Send + Sync {
    fn intensity(&self, s: &Point) -> f64;
}

impl<F: Fn(&Point) -> f64 + Send + Sync> IntensityFn for F {
    fn intensity(&self, s: &Point) -> f64 {
        self(s)
    }
}

/// Behaviour shared by every trainable intensity model.
pub trait IntensityModel: IntensityFn {

    /// Jet of `log lambda` at `s` up to `order`.
    fn log_intensity_jet(&self, s: &Point, order: Order) -> Result<InputJet>;

    fn params(&self) -> &ParamVector;

    fn set_params(&mut self, values: &[f64]) -> Result<()>;

    /// `sum` of `per_point` losses over all points in all groups and the
    /// gradient of that sum in the parameters. Groups are evaluated
    /// independently and reduced in group order.
    fn loss_and_grad(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<(f64, Vec<f64>)>;

    /// Value-only counterpart of [`IntensityModel::loss_and_grad`].
    fn loss_sum(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<f64> {
        let partial: Vec<Result<f64>> = groups
            .par_iter()
            .enumerate()
            .map(|(gi, pts)| {
                let mut acc = 0.0;
                for (i, s) in pts.iter().enumerate() {
                    acc += per_point(gi, i, &self.log_intensity_jet(s, order)?)?.0;
                }
                Ok(acc)
            })
            .collect();
        partial.into_iter().sum()
    }

    /// Closed-form compensator and its gradient when available.
    fn exact_compensator(&self) -> Option<(f64, Vec<f64>)> {
        None
    }
}

impl IntensityFn for MixtureModel {
    fn intensity(&self, s: &Point) -> f64 {
        self.structure.link.eval(self.latent_field(s))
    }
}

impl IntensityModel for MixtureModel {
    fn log_intensity_jet(&self, s: &Point, order: Order) -> Result<InputJet> {
        let prep = self.prepared();
        let mut sc = PointScratch::default();
        Ok(self.point_log_jet(&prep, s, order.as_usize(), &mut sc)?.0)
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.params.set_values(values)?;
        self.cache = OnceLock::new();
        Ok(())
    }

    fn loss_and_grad(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<(f64, Vec<f64>)> {
        let prep = self.prepared();
        let order = order.as_usize();
        let dg = self.structure.transform_dim();
        let n_t = self.transform_range().len();
        let partials: Vec<Result<GradAccum>> = groups
            .par_iter()
            .enumerate()
            .map(|(gi, pts)| {
                let mut acc = GradAccum::zeros(self.rep.len(), dg, n_t);
                let mut sc = PointScratch::default();
                for (i, s) in pts.iter().enumerate() {
                    let (jet, h, ll) = self.point_log_jet(&prep, s, order, &mut sc)?;
                    let (loss, adj) = per_point(gi, i, &jet)?;
                    acc.loss += loss;
                    let hb = ll.backward(&h, &adj, order);
                    self.latent_backward(&prep, &hb, order, &sc, &mut acc);
                }
                Ok(acc)
            })
            .collect();
        let mut total = GradAccum::zeros(self.rep.len(), dg, n_t);
        for p in partials {
            total.add(&p?);
        }
        Ok((total.loss, self.finish(&prep, &total)))
    }

    fn loss_sum(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<f64> {
        let prep = self.prepared();
        let order = order.as_usize();
        let partial: Vec<Result<f64>> = groups
            .par_iter()
            .enumerate()
            .map(|(gi, pts)| {
                let mut sc = PointScratch::default();
                let mut acc = 0.0;
                for (i, s) in pts.iter().enumerate() {
                    let (jet, _, _) = self.point_log_jet(&prep, s, order, &mut sc)?;
                    acc += per_point(gi, i, &jet)?.0;
                }
                Ok(acc)
            })
            .collect();
        partial.into_iter().sum()
    }

    fn exact_compensator(&self) -> Option<(f64, Vec<f64>)> {
        MixtureModel::exact_compensator(self)
    }
}

/// Generic-scalar route to `log lambda`, independent of the hand-written
/// adjoints above. Parameters are the model's flat vector.
impl ScalarField for MixtureModel {
    fn eval<S: Real>(&self, point: [S; 3], params: &[S]) -> S {
        let st = &self.structure;
        let phi = params[0].exp();
        let wp = &params[self.weight_range()];
        let tp = &params[self.transform_range()];
        let transform = |x: &[S]| -> Vec<S> {
            match &st.transform {
                Some(g) => g.forward(tp, x).expect("transform shape"),
                None => x.to_vec(),
            }
        };
        let gs = transform(&point);
        let mut h = S::zero();
        for (input, u) in self.rep_inputs.iter().zip(&self.rep.points) {
            let x: Vec<S> = input.iter().map(|&v| S::from_f64(v)).collect();
            let pre = st.weight_net.forward(wp, &x).expect("weight net shape")[0];
            let w = match st.weight_activation {
                WeightActivation::Identity => pre,
                WeightActivation::Softplus => pre.softplus(),
            };
            let uu: Vec<S> = u.iter().map(|&v| S::from_f64(v)).collect();
            let gu = transform(&uu);
            let q = crate::kernels::squared_distance(&gs, &gu);
            h += w * st.kernel.eval(phi, q);
        }
        st.link.eval_generic(h).ln()
    }
}

/// Homogeneous Poisson process with constant rate, parameterized by `log rate`.
#[derive(Clone, Debug)]
pub struct HomoPoissonModel {
    params: ParamVector,
}

pub const LOG_RATE: &str = "log_rate";

impl HomoPoissonModel {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("rate must be positive, got {rate}")));
        }
        Ok(HomoPoissonModel {
            params: ParamVector::new(vec![(LOG_RATE.into(), vec![rate.ln()])])?,
        })
    }

    pub fn rate(&self) -> f64 {
        self.params.values()[0].exp()
    }
}

impl IntensityFn for HomoPoissonModel {
    fn intensity(&self, _s: &Point) -> f64 {
        self.rate()
    }
}

impl IntensityModel for HomoPoissonModel {
    fn log_intensity_jet(&self, _s: &Point, _order: Order) -> Result<InputJet> {
        Ok(Jet::constant(self.params.values()[0]))
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.params.set_values(values)
    }

    fn loss_and_grad(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<(f64, Vec<f64>)> {
        let jet = self.log_intensity_jet(&[0.0; 3], order)?;
        let mut loss = 0.0;
        let mut g = 0.0;
        for (gi, pts) in groups.iter().enumerate() {
            for i in 0..pts.len() {
                let (l, adj) = per_point(gi, i, &jet)?;
                loss += l;
                g += adj.value;
            }
        }
        Ok((loss, vec![g]))
    }

    fn exact_compensator(&self) -> Option<(f64, Vec<f64>)> {
        None
    }
}

impl ScalarField for HomoPoissonModel {
    fn eval<S: Real>(&self, _point: [S; 3], params: &[S]) -> S {
        params[0]
    }
}

/// An intensity multiplied by a positive constant after the link. Used to
/// probe scale invariance of the score objectives.
#[derive(Clone, Debug)]
pub struct ScaledIntensity<M> {
    pub inner: M,
    pub factor: f64,
}

impl<M: IntensityModel> IntensityFn for ScaledIntensity<M> {
    fn intensity(&self, s: &Point) -> f64 {
        self.factor * self.inner.intensity(s)
    }
}

impl<M: IntensityModel> IntensityModel for ScaledIntensity<M> {
    fn log_intensity_jet(&self, s: &Point, order: Order) -> Result<InputJet> {
        let mut j = self.inner.log_intensity_jet(s, order)?;
        j.value += self.factor.ln();
        Ok(j)
    }

    fn params(&self) -> &ParamVector {
        self.inner.params()
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.inner.set_params(values)
    }

    fn loss_and_grad(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<(f64, Vec<f64>)> {
        let shift = self.factor.ln();
        self.inner.loss_and_grad(groups, order, &|g, i, jet: &InputJet| {
            let mut j = *jet;
            j.value += shift;
            per_point(g, i, &j)
        })
    }

    fn loss_sum(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<f64> {
        let shift = self.factor.ln();
        self.inner.loss_sum(groups, order, &|g, i, jet: &InputJet| {
            let mut j = *jet;
            j.value += shift;
            per_point(g, i, &j)
        })
    }
}

/// Either model kind, for checkpoints and the command line.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Mixture(MixtureModel),
    HomoPoisson(HomoPoissonModel),
}

impl AnyModel {
    pub fn name(&self) -> &'static str {
        match self {
            AnyModel::Mixture(m) => match m.structure.family {
                Family::Dkmpp => "dkmpp",
                Family::Dmpp => "dmpp",
            },
            AnyModel::HomoPoisson(_) => "homopoisson",
        }
    }
}

impl IntensityFn for AnyModel {
    fn intensity(&self, s: &Point) -> f64 {
        match self {
            AnyModel::Mixture(m) => m.intensity(s),
            AnyModel::HomoPoisson(m) => m.intensity(s),
        }
    }
}

impl IntensityModel for AnyModel {
    fn log_intensity_jet(&self, s: &Point, order: Order) -> Result<InputJet> {
        match self {
            AnyModel::Mixture(m) => m.log_intensity_jet(s, order),
            AnyModel::HomoPoisson(m) => m.log_intensity_jet(s, order),
        }
    }

    fn params(&self) -> &ParamVector {
        match self {
            AnyModel::Mixture(m) => m.params(),
            AnyModel::HomoPoisson(m) => m.params(),
        }
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        match self {
            AnyModel::Mixture(m) => m.set_params(values),
            AnyModel::HomoPoisson(m) => m.set_params(values),
        }
    }

    fn loss_and_grad(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<(f64, Vec<f64>)> {
        match self {
            AnyModel::Mixture(m) => m.loss_and_grad(groups, order, per_point),
            AnyModel::HomoPoisson(m) => m.loss_and_grad(groups, order, per_point),
        }
    }

    fn loss_sum(&self, groups: &[&[Point]], order: Order, per_point: &PointLoss<'_>) -> Result<f64> {
        match self {
            AnyModel::Mixture(m) => m.loss_sum(groups, order, per_point),
            AnyModel::HomoPoisson(m) => m.loss_sum(groups, order, per_point),
        }
    }

    fn exact_compensator(&self) -> Option<(f64, Vec<f64>)> {
        match self {
            AnyModel::Mixture(m) => m.exact_compensator(),
            AnyModel::HomoPoisson(_) => None,
        }
    }
}

/// Uniform sample of `n` points in the window from a seeded stream.
pub fn uniform_points(window: &Window, n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| window.sample_uniform(&mut rng)).collect()
}

/// `volume * mean(lambda(v_l))` over `n_samples` uniform points.
pub fn compensator_mc<M: IntensityFn + ?Sized>(model: &M, window: &Window, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let pts = uniform_points(window, n_samples, seed);
    let sum: f64 = pts.iter().map(|p| model.intensity(p)).sum();
    Ok(window.volume() * sum / n_samples as f64)
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// One-axis factor `sqrt(pi/phi)/2 [erf(sqrt(phi)(hi-u)) - erf(sqrt(phi)(lo-u))]`
/// and its derivative in `phi`.
fn rbf_axis_integral(phi: f64, u: f64, lo: f64, hi: f64) -> (f64, f64) {
    let c = phi.sqrt();
    let a = hi - u;
    let b = lo - u;
    let f = (std::f64::consts::PI / phi).sqrt() / 2.0 * (erf(c * a) - erf(c * b));
    let dfdc = -f / c + (a * (-phi * a * a).exp() - b * (-phi * b * b).exp()) / c;
    (f, dfdc / (2.0 * c))
}

/// Integral of `exp(-phi |s - u|^2)` over the window.
pub fn rbf_box_integral(phi: f64, u: &Point, window: &Window) -> f64 {
    rbf_box_integral_with_grad(phi, u, window).0
}

pub fn rbf_box_integral_with_grad(phi: f64, u: &Point, window: &Window) -> (f64, f64) {
    let f: Vec<(f64, f64)> = (0..3)
        .map(|a| {
            let (lo, hi) = window.bounds(a);
            rbf_axis_integral(phi, u[a], lo, hi)
        })
        .collect();
    let val = f[0].0 * f[1].0 * f[2].0;
    let d = f[0].1 * f[1].0 * f[2].0 + f[0].0 * f[1].1 * f[2].0 + f[0].0 * f[1].0 * f[2].1;
    (val, d)
}

/// Rate floor used when the training data holds no events.
pub const MIN_RATE: f64 = 1e-8;

/// Maximum-likelihood homogeneous rate: events / (sequences * volume).
pub fn fit_homopoisson(train: &SequenceSet, window: &Window) -> Result<HomoPoissonModel> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a rate to zero sequences".into()));
    }
    let rate = train.n_events() as f64 / (train.len() as f64 * window.volume());
    if rate < MIN_RATE {
        log::warn!("no events in training data; flooring rate at {MIN_RATE}");
        return HomoPoissonModel::new(MIN_RATE);
    }
    HomoPoissonModel::new(rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_representative_set, CovariateGrid, EventSequence};

    fn small_rep(window: &Window, counts: [usize; 3]) -> RepresentativeSet {
        let grid = CovariateGrid::from_fn(
            [vec![0.0, 5.0, 10.0], vec![0.0, 0.5, 1.0], vec![0.0, 0.5, 1.0]],
            2,
            |p| vec![p[1] + p[2], p[0] / 10.0],
        )
        .unwrap();
        build_representative_set(window, counts, &grid).unwrap()
    }

    fn dkmpp(link: Link, kernel: BaseKernelKind, seed: u64) -> MixtureModel {
        let w = Window::default();
        let st = MixtureStructure::dkmpp(w, [3, 2, 2], 2, kernel, link, 6, 1, 3).unwrap();
        MixtureModel::new(st, small_rep(&w, [3, 2, 2]), 1.5, seed).unwrap()
    }

    #[test]
    fn link_values() {
        assert!((Link::Softplus.eval(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((Link::Softplus.eval(50.0) - 50.0).abs() < 1e-12);
        assert_eq!(Link::Exponential.eval(100.0), EXP_LINK_CAP.exp());
        assert_eq!(Link::Rectifier.eval(-1.0), 0.0);
    }

    #[test]
    fn softplus_chain_rule_identity() {
        // h = 0, h_d = 1, h_dd = 0
        let mut h = [0.0; LANES];
        h[1] = 1.0;
        let ll = log_link_jet(Link::Softplus, &h, 2).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((ll.jet.grad[0] - 0.5 / ln2).abs() < 1e-12);
        assert!((ll.jet.hess[0] - (0.25 / ln2 - (0.5 / ln2).powi(2))).abs() < 1e-12);
        assert!((ll.jet.grad[0] - 0.721348).abs() < 1e-6);
        assert!((ll.jet.hess[0] + 0.159668).abs() < 1e-6);
    }

    #[test]
    fn rectifier_zero_is_singular() {
        let h = [0.0; LANES];
        assert!(log_link_jet(Link::Rectifier, &h, 1).is_none());
    }

    #[test]
    fn fast_jet_matches_generic_route() {
        for (k, link) in [
            (BaseKernelKind::Rbf, Link::Softplus),
            (BaseKernelKind::Rq, Link::Exponential),
            (BaseKernelKind::Ou, Link::Softplus),
        ] {
            let m = dkmpp(link, k, 11);
            let p = [3.3, 0.27, 0.81];
            let fast = m.log_intensity_jet(&p, Order::Second).unwrap();
            let slow = crate::diff::eval_jet(&m, p, m.params().values(), Order::Second).unwrap();
            assert!((fast.value - slow.value).abs() < 1e-10);
            for d in 0..3 {
                assert!((fast.grad[d] - slow.grad[d]).abs() < 1e-10, "{k} grad {d}");
                assert!((fast.hess[d] - slow.hess[d]).abs() < 1e-10, "{k} hess {d}");
            }
        }
    }

    #[test]
    fn zero_weight_net_gives_zero_latent() {
        let mut m = dkmpp(Link::Softplus, BaseKernelKind::Rbf, 1);
        let mut v = m.params().values().to_vec();
        let r = m.weight_range();
        v[r].iter_mut().for_each(|x| *x = 0.0);
        m.set_params(&v).unwrap();
        assert_eq!(m.latent_field(&[1.0, 0.5, 0.5]), 0.0);
        assert!((m.intensity(&[1.0, 0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn homopoisson_behaviour() {
        let m = HomoPoissonModel::new(2.0).unwrap();
        assert_eq!(m.intensity(&[1.0, 0.1, 0.9]), 2.0);
        let j = m.log_intensity_jet(&[1.0, 0.1, 0.9], Order::Second).unwrap();
        assert_eq!(j.grad, [0.0; 3]);
        assert_eq!(j.hess, [0.0; 3]);
        let w = Window::default();
        assert_eq!(compensator_mc(&m, &w, 17, 3).unwrap(), 20.0);
        let v1 = compensator_mc(&dkmpp(Link::Softplus, BaseKernelKind::Rbf, 2), &w, 1, 5).unwrap();
        let p = uniform_points(&w, 1, 5)[0];
        assert!((v1 - 10.0 * dkmpp(Link::Softplus, BaseKernelKind::Rbf, 2).intensity(&p)).abs() < 1e-12);
        assert!(compensator_mc(&m, &w, 0, 3).is_err());
    }

    #[test]
    fn fit_homopoisson_rates() {
        let w = Window::default();
        let seq = |n: usize, id: &str| {
            EventSequence::new(id, (0..n).map(|i| [i as f64 * 0.1, 0.5, 0.5]).collect(), &w).unwrap()
        };
        let data = SequenceSet::new(vec![seq(10, "a"), seq(20, "b")]);
        assert!((fit_homopoisson(&data, &w).unwrap().rate() - 1.5).abs() < 1e-12);
        let empty = SequenceSet::new(vec![seq(0, "a")]);
        assert!((fit_homopoisson(&empty, &w).unwrap().rate() - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn rbf_box_integral_values() {
        let w = Window::default();
        let (f, _) = rbf_axis_integral(100.0, 0.5, 0.0, 1.0);
        assert!((f - (std::f64::consts::PI / 100.0).sqrt() * libm::erf(5.0)).abs() < 1e-15);
        assert!((f - 0.177245).abs() < 1e-6);
        assert!(rbf_box_integral(100.0, &[50.0, 5.0, 5.0], &w) < 1e-100);
        assert!(rbf_box_integral(1e12, &[5.0, 0.5, 0.5], &w) < 1e-15);
        // derivative in phi
        let u = [3.0, 0.2, 0.9];
        let (_, d) = rbf_box_integral_with_grad(4.0, &u, &w);
        let h = 1e-6;
        let fd = (rbf_box_integral(4.0 + h, &u, &w) - rbf_box_integral(4.0 - h, &u, &w)) / (2.0 * h);
        assert!((d - fd).abs() < 1e-8 * fd.abs().max(1.0));
    }
}
