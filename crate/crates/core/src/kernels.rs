//! Base kernels, the rectifier MLP and the deep-kernel composition
//! `k(g(s), g(u))`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKernelKind {
    Rbf,
    Rq,
    Ou,
}

impl fmt::Display for BaseKernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKernelKind::Rbf => "rbf",
            BaseKernelKind::Rq => "rq",
            BaseKernelKind::Ou => "ou",
        })
    }
}

impl FromStr for BaseKernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(BaseKernelKind::Rbf),
            "rq" => Ok(BaseKernelKind::Rq),
            "ou" => Ok(BaseKernelKind::Ou),
            other => Err(Error::Config(format!("unknown kernel kind '{other}'"))),
        }
    }
}

/// Radial profile `kappa(q)` of a base kernel in the squared distance `q`,
/// with derivatives in `q` and their partials in `phi`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Profile {
    pub k: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub k_phi: f64,
    pub d1_phi: f64,
    pub d2_phi: f64,
}

/// Exponential kernels below `exp(-FLUSH_EXPONENT)` are flushed to zero in
/// [`BaseKernelKind::profile`], keeping arithmetic out of the subnormal range.
pub const FLUSH_EXPONENT: f64 = 690.0;

impl BaseKernelKind {
    /// `kappa(q)` for any scalar type. OU uses a square root whose
    /// derivative is taken as zero at `q = 0`.
    pub fn eval<S: Real>(self, phi: S, q: S) -> S {
        match self {
            BaseKernelKind::Rbf => (-(phi * q)).exp(),
            BaseKernelKind::Rq => (S::one() + phi * q).powf(-0.5),
            BaseKernelKind::Ou => (-(phi * q.safe_sqrt())).exp(),
        }
    }

    pub fn profile(self, phi: f64, q: f64) -> Profile {
        match self {
            BaseKernelKind::Rbf => {
                if phi * q > FLUSH_EXPONENT {
                    return Profile::default();
                }
                let k = (-phi * q).exp();
                Profile {
                    k,
                    d1: -phi * k,
                    d2: phi * phi * k,
                    d3: -phi * phi * phi * k,
                    k_phi: -q * k,
                    d1_phi: (phi * q - 1.0) * k,
                    d2_phi: (2.0 * phi - phi * phi * q) * k,
                }
            }
            BaseKernelKind::Rq => {
                let b = 1.0 + phi * q;
                let k = b.powf(-0.5);
                let b3 = k / b;
                let b5 = b3 / b;
                let b7 = b5 / b;
                Profile {
                    k,
                    d1: -0.5 * phi * b3,
                    d2: 0.75 * phi * phi * b5,
                    d3: -1.875 * phi * phi * phi * b7,
                    k_phi: -0.5 * q * b3,
                    d1_phi: -0.5 * b3 + 0.75 * phi * q * b5,
                    d2_phi: 1.5 * phi * b5 - 1.875 * phi * phi * q * b7,
                }
            }
            BaseKernelKind::Ou => {
                if q <= 0.0 {
                    return Profile {
                        k: 1.0,
                        ..Profile::default()
                    };
                }
                let r = q.sqrt();
                if phi * r > FLUSH_EXPONENT {
                    return Profile::default();
                }
                let k = (-phi * r).exp();
                let (r2, r3) = (q, q * r);
                let (r4, r5) = (q * q, q * q * r);
                Profile {
                    k,
                    d1: -phi * k / (2.0 * r),
                    d2: phi * phi * k / (4.0 * r2) + phi * k / (4.0 * r3),
                    d3: -phi.powi(3) * k / (8.0 * r3) - 3.0 * phi * phi * k / (8.0 * r4) - 3.0 * phi * k / (8.0 * r5),
                    k_phi: -r * k,
                    d1_phi: -k / (2.0 * r) + 0.5 * phi * k,
                    d2_phi: phi * k / (4.0 * r2) - phi * phi * k / (4.0 * r) + k / (4.0 * r3),
                }
            }
        }
    }
}

/// Base kernel family plus `phi`, stored as `log phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseKernelSpec {
    pub kind: BaseKernelKind,
    pub log_phi: f64,
}

impl BaseKernelSpec {
    pub fn new(kind: BaseKernelKind, phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidArgument(format!("kernel phi must be positive, got {phi}")));
        }
        Ok(BaseKernelSpec {
            kind,
            log_phi: phi.ln(),
        })
    }

    pub fn phi(&self) -> f64 {
        self.log_phi.exp()
    }
}

pub fn squared_distance<S: Real>(a: &[S], b: &[S]) -> S {
    let mut q = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        q += d * d;
    }
    q
}

/// `k_phi(a, b)`; RBF `exp(-phi |a-b|^2)`, RQ `(1 + phi |a-b|^2)^(-1/2)`,
/// OU `exp(-phi |a-b|)`.
pub fn base_kernel(spec: &BaseKernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("kernel inputs of length {} and {}", a.len(), b.len())));
    }
    Ok(spec.kind.eval(spec.phi(), squared_distance(a, b)))
}

/// Fully connected rectifier network; the output layer is affine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid MLP widths {widths:?}")));
        }
        Ok(MlpSpec { widths })
    }

    /// `input -> hidden x layers -> output`.
    pub fn with_hidden(input: usize, hidden: usize, layers: usize, output: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, layers));
        widths.push(output);
        Self::new(widths)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of (weight, bias) for layer `l` inside the flat parameter slice.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.widths[..l + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (start, start + self.widths[l] * self.widths[l + 1])
    }

    /// Named blocks `{prefix}.layer{l}.weight|bias` with Glorot-uniform
    /// weights and zero biases.
    pub fn init_blocks<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            out.push((format!("{prefix}.layer{l}.weight"), w));
            out.push((format!("{prefix}.layer{l}.bias"), vec![0.0; fan_out]));
        }
        out
    }

    /// Generic forward pass.
    pub fn forward<S: Real>(&self, params: &[S], input: &[S]) -> Result<Vec<S>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects input width {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "MLP expects {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut x = input.to_vec();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (wo, bo) = self.layer_offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut y = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &params[wo + o * n_in..wo + (o + 1) * n_in];
                let mut acc = params[bo + o];
                for (&w, &xi) in row.iter().zip(&x) {
                    acc += w * xi;
                }
                y.push(if l < last { acc.relu() } else { acc });
            }
            x = y;
        }
        Ok(x)
    }
}

/// Jet lanes: value, three first derivatives, three second derivatives.
pub const LANES: usize = 7;

pub fn lanes_for_order(order: usize) -> usize {
    match order {
        0 => 1,
        1 => 4,
        _ => 7,
    }
}

/// Activations recorded by [`MlpSpec::forward_lanes`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    /// `acts[l]` holds the layer-`l` input, `width * LANES` values.
    acts: Vec<Vec<f64>>,
    /// Rectifier masks for hidden layers.
    masks: Vec<Vec<bool>>,
    lanes: usize,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Which hidden units were active, layer by layer.
    pub fn masks(&self) -> impl Iterator<Item = bool> + '_ {
        self.masks.iter().flatten().copied()
    }
}

impl MlpSpec {
    /// Forward pass carrying `lanes` jet components per unit. A rectifier
    /// network is piecewise affine, so the derivative lanes pass through the
    /// same weights as the value lane, masked by the value lane's sign.
    /// `input` is `input_dim * LANES` values laid out unit-major.
    pub fn forward_lanes(&self, params: &[f64], input: &[f64], lanes: usize, trace: &mut MlpTrace) {
        let n_layers = self.n_layers();
        trace.lanes = lanes;
        trace.acts.resize_with(n_layers + 1, Vec::new);
        trace.masks.resize_with(n_layers, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(&input[..self.widths[0] * LANES]);
        for l in 0..n_layers {
            let (wo, bo) = self.layer_offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.clear();
            y.resize(n_out * LANES, 0.0);
            let mask = &mut trace.masks[l];
            mask.clear();
            for o in 0..n_out {
                let row = &params[wo + o * n_in..wo + (o + 1) * n_in];
                let out = &mut y[o * LANES..(o + 1) * LANES];
                out[0] = params[bo + o];
                for (i, &w) in row.iter().enumerate() {
                    let xi = &x[i * LANES..i * LANES + lanes];
                    for c in 0..lanes {
                        out[c] += w * xi[c];
                    }
                }
                if l + 1 < n_layers {
                    let on = out[0] > 0.0;
                    mask.push(on);
                    if !on {
                        out.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given output adjoints
    /// (`output_dim * LANES`). Returns input adjoints when `want_input`.
    pub fn backward_lanes(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        out_adj: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let lanes = trace.lanes;
        let n_layers = self.n_layers();
        let mut adj = out_adj[..self.output_dim() * LANES].to_vec();
        for l in (0..n_layers).rev() {
            let (wo, bo) = self.layer_offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            if l + 1 < n_layers {
                for (o, &on) in trace.masks[l].iter().enumerate() {
                    if !on {
                        adj[o * LANES..(o + 1) * LANES].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            let x = &trace.acts[l];
            let need_in = l > 0 || want_input;
            let mut in_adj = if need_in { vec![0.0; n_in * LANES] } else { Vec::new() };
            for o in 0..n_out {
                let a = &adj[o * LANES..o * LANES + lanes];
                if a.iter().all(|&v| v == 0.0) {
                    continue;
                }
                grad[bo + o] += a[0];
                for i in 0..n_in {
                    let xi = &x[i * LANES..i * LANES + lanes];
                    let mut g = 0.0;
                    for c in 0..lanes {
                        g += a[c] * xi[c];
                    }
                    grad[wo + o * n_in + i] += g;
                    if need_in {
                        let w = params[wo + o * n_in + i];
                        let dst = &mut in_adj[i * LANES..i * LANES + lanes];
                        for c in 0..lanes {
                            dst[c] += w * a[c];
                        }
                    }
                }
            }
            adj = in_adj;
        }
        if want_input {
            Some(adj)
        } else {
            None
        }
    }
}

/// Packs plain values into the lane layout with zero derivative lanes.
pub fn values_to_lanes(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len() * LANES];
    for (i, &v) in values.iter().enumerate() {
        out[i * LANES] = v;
    }
    out
}

/// Seeds the three event coordinates as lane jets.
pub fn point_to_lanes(p: &[f64; 3]) -> [f64; 3 * LANES] {
    let mut out = [0.0; 3 * LANES];
    for d in 0..3 {
        out[d * LANES] = p[d];
        out[d * LANES + 1 + d] = 1.0;
    }
    out
}

/// `k_phi(g(s), g(u))` for a transform MLP `g` with parameters `g_params`.
pub fn deep_kernel<S: Real>(
    kind: BaseKernelKind,
    phi: S,
    g: &MlpSpec,
    g_params: &[S],
    s: &[S],
    u: &[S],
) -> Result<S> {
    let gs = g.forward(g_params, s)?;
    let gu = g.forward(g_params, u)?;
    Ok(kind.eval(phi, squared_distance(&gs, &gu)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_kernel_values() {
        for kind in [BaseKernelKind::Rbf, BaseKernelKind::Rq, BaseKernelKind::Ou] {
            let spec = BaseKernelSpec::new(kind, 3.0).unwrap();
            assert_eq!(base_kernel(&spec, &[0.2, 0.4], &[0.2, 0.4]).unwrap(), 1.0);
        }
        let rbf = BaseKernelSpec::new(BaseKernelKind::Rbf, 100.0).unwrap();
        let v = base_kernel(&rbf, &[0.0], &[0.1]).unwrap();
        assert!((v - (-1.0_f64).exp()).abs() < 1e-12);
        let rq = BaseKernelSpec::new(BaseKernelKind::Rq, 3.0).unwrap();
        assert!((base_kernel(&rq, &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(base_kernel(&rq, &[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn profile_derivatives_match_finite_differences() {
        let h = 1e-5;
        for kind in [BaseKernelKind::Rbf, BaseKernelKind::Rq, BaseKernelKind::Ou] {
            for &(phi, q) in &[(1.3, 0.4), (7.0, 0.05), (0.2, 2.5)] {
                let p = kind.profile(phi, q);
                let at = |phi: f64, q: f64| kind.profile(phi, q);
                let fd = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
                let checks = [
                    (p.k, kind.eval(phi, q)),
                    (p.d1, fd(&|x| at(phi, x).k, q)),
                    (p.d2, fd(&|x| at(phi, x).d1, q)),
                    (p.d3, fd(&|x| at(phi, x).d2, q)),
                    (p.k_phi, fd(&|x| at(x, q).k, phi)),
                    (p.d1_phi, fd(&|x| at(x, q).d1, phi)),
                    (p.d2_phi, fd(&|x| at(x, q).d2, phi)),
                ];
                for (i, (a, b)) in checks.iter().enumerate() {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                    assert!(rel < 1e-6, "{kind} phi={phi} q={q} entry {i}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn mlp_shapes_and_identities() {
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let mut params = vec![0.0; spec.n_params()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        assert_eq!(spec.forward(&params, &[0.1, -0.2, 0.3]).unwrap(), vec![0.1, -0.2, 0.3]);

        let zero_w = MlpSpec::with_hidden(3, 8, 1, 2).unwrap();
        let mut p = vec![0.0; zero_w.n_params()];
        let n = p.len();
        p[n - 2] = 1.5;
        p[n - 1] = -0.5;
        assert_eq!(zero_w.forward(&p, &[9.0, 1.0, -4.0]).unwrap(), vec![1.5, -0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = MlpSpec::with_hidden(3, 8, 1, 3).unwrap();
        let blocks = g.init_blocks("g", &mut rng);
        let flat: Vec<f64> = blocks.into_iter().flat_map(|(_, v)| v).collect();
        assert_eq!(flat.len(), g.n_params());
        assert_eq!(g.forward(&flat, &[0.1, 0.2, 0.3]).unwrap().len(), 3);
        assert!(g.forward(&flat, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn lane_forward_agrees_with_generic_jets() {
        use crate::diff::Jet;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = MlpSpec::with_hidden(3, 8, 2, 3).unwrap();
        let flat: Vec<f64> = g.init_blocks("g", &mut rng).into_iter().flat_map(|(_, v)| v).collect();
        let p = [0.3, 0.6, 0.1];
        let mut trace = MlpTrace::default();
        g.forward_lanes(&flat, &point_to_lanes(&p), LANES, &mut trace);
        let jets: Vec<Jet<f64>> = flat.iter().map(|&w| Jet::constant(w)).collect();
        let out = g.forward(&jets, &Jet::seed_point(p)).unwrap();
        for (c, j) in out.iter().enumerate() {
            let lanes = &trace.output()[c * LANES..(c + 1) * LANES];
            assert!((lanes[0] - j.value).abs() < 1e-14);
            for d in 0..3 {
                assert!((lanes[1 + d] - j.grad[d]).abs() < 1e-14);
                assert!((lanes[4 + d] - j.hess[d]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn deep_kernel_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = MlpSpec::with_hidden(3, 8, 1, 3).unwrap();
        let flat: Vec<f64> = g.init_blocks("g", &mut rng).into_iter().flat_map(|(_, v)| v).collect();
        let s = [0.2, 0.7, 0.4];
        let u = [1.5, 0.1, 0.9];
        let k1 = deep_kernel(BaseKernelKind::Rbf, 2.0, &g, &flat, &s, &u).unwrap();
        let k2 = deep_kernel(BaseKernelKind::Rbf, 2.0, &g, &flat, &u, &s).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(deep_kernel(BaseKernelKind::Rq, 2.0, &g, &flat, &s, &s).unwrap(), 1.0);

        // shift transform g(s) = s + 0.1 reduces to the plain kernel
        let shift = MlpSpec::new(vec![3, 3]).unwrap();
        let mut sp = vec![0.0; shift.n_params()];
        for i in 0..3 {
            sp[i * 3 + i] = 1.0;
            sp[9 + i] = 0.1;
        }
        let a = deep_kernel(BaseKernelKind::Rbf, 100.0, &shift, &sp, &s, &u).unwrap();
        let b = base_kernel(&BaseKernelSpec::new(BaseKernelKind::Rbf, 100.0).unwrap(), &s, &u).unwrap();
        assert!((a - b).abs() < 1e-15);

        // collapsing transform
        let zero = vec![0.0; shift.n_params()];
        assert_eq!(deep_kernel(BaseKernelKind::Ou, 5.0, &shift, &zero, &s, &u).unwrap(), 1.0);
    }
}
