//! Thinning sampler for history-free intensities and the synthetic ground
//! truth scenario.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{axis_points, write_covariate_grid, write_sequences, CovariateGrid, EventSequence, Point, RepresentativeSet, SequenceSet, Window};
use crate::error::{Error, Result};
use crate::intensity::{IntensityFn, IntensityModel, Link, MixtureModel, MixtureStructure};
use crate::kernels::BaseKernelKind;
use crate::scalar::softplus;

/// Reading of the `0.5` in the scenario's Gaussian covariate bumps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianConvention {
    /// 0.5 is the standard deviation.
    StdDev,
    /// 0.5 is the variance.
    Variance,
}

impl GaussianConvention {
    pub fn std_dev(self, param: f64) -> f64 {
        match self {
            GaussianConvention::StdDev => param,
            GaussianConvention::Variance => param.sqrt(),
        }
    }
}

impl fmt::Display for GaussianConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GaussianConvention::StdDev => "std_dev",
            GaussianConvention::Variance => "variance",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThinningConfig {
    /// Grid resolution for the bound search, ordered (t, x1, x2).
    pub bound_grid: [usize; 3],
    pub safety_factor: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for ThinningConfig {
    fn default() -> Self {
        ThinningConfig {
            bound_grid: [100, 50, 50],
            safety_factor: 1.2,
            max_retries: 5,
            seed: 0,
        }
    }
}

/// The synthetic scenario: Gaussian-bump covariates, weights `20 Z + 0.1`,
/// RBF kernel with `phi = 100` on `g(s) = s + 0.1`, softplus link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScenario {
    pub window: Window,
    pub convention: GaussianConvention,
    pub gaussian_mean: f64,
    pub gaussian_param: f64,
    pub weight_scale: f64,
    pub weight_offset: f64,
    pub phi: f64,
    pub shift: f64,
    pub representative_counts: [usize; 3],
    pub covariate_grid: [usize; 3],
    pub thinning: ThinningConfig,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        SyntheticScenario {
            window: Window::default(),
            convention: GaussianConvention::StdDev,
            gaussian_mean: 0.5,
            gaussian_param: 0.5,
            weight_scale: 20.0,
            weight_offset: 0.1,
            phi: 100.0,
            shift: 0.1,
            representative_counts: [5, 5, 5],
            covariate_grid: [21, 21, 21],
            thinning: ThinningConfig::default(),
        }
    }
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

impl SyntheticScenario {
    pub fn with_convention(convention: GaussianConvention) -> Self {
        SyntheticScenario {
            convention,
            ..Default::default()
        }
    }

    /// Scalar covariate `Z(u) = N(r1; m, sd) + N(r2; m, sd)`.
    pub fn covariate(&self, u: &Point) -> f64 {
        let sd = self.convention.std_dev(self.gaussian_param);
        normal_pdf(u[1], self.gaussian_mean, sd) + normal_pdf(u[2], self.gaussian_mean, sd)
    }

    pub fn covariate_grid(&self) -> Result<CovariateGrid> {
        let knots = [0, 1, 2].map(|a| {
            let (lo, hi) = self.window.bounds(a);
            axis_points(lo, hi, self.covariate_grid[a])
        });
        CovariateGrid::from_fn(knots, 1, |p| vec![self.covariate(p)])
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        self.window.validate()?;
        if !(self.phi > 0.0) {
            return Err(Error::InvalidArgument(format!("phi must be positive, got {}", self.phi)));
        }
        let axes = [0, 1, 2].map(|a| {
            let (lo, hi) = self.window.bounds(a);
            axis_points(lo, hi, self.representative_counts[a])
        });
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for &t in &axes[0] {
            for &x1 in &axes[1] {
                for &x2 in &axes[2] {
                    let u = [t, x1, x2];
                    weights.push(self.weight_scale * self.covariate(&u) + self.weight_offset);
                    points.push(u);
                }
            }
        }
        Ok(GroundTruth {
            points,
            weights,
            phi: self.phi,
            shift: self.shift,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

impl SyntheticScenario {
    /// The ground truth written as a DKMPP with one hidden layer of width
    /// `hidden` (at least 3): identity-plus-shift transform and weights
    /// linear in the covariate. Exact when `rep` carries the scenario's
    /// covariate at each representative point.
    pub fn truth_as_dkmpp(&self, rep: RepresentativeSet, hidden: usize) -> Result<MixtureModel> {
        if hidden < 3 {
            return Err(Error::InvalidArgument("embedding the truth needs a hidden width of at least 3".into()));
        }
        let st = MixtureStructure::dkmpp(self.window, rep.counts, 1, BaseKernelKind::Rbf, Link::Softplus, hidden, 1, 3)?;
        let z: Vec<f64> = rep.covariates.iter().map(|c| c[0]).collect();
        let zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut m = MixtureModel::new(st, rep, self.phi, 0)?;
        let mut v = m.params().values().to_vec();
        let p = m.params().clone();
        let mut fill = |name: &str, f: &dyn Fn(usize) -> f64| {
            let r = p.range(name).expect("block exists");
            for (k, i) in r.enumerate() {
                v[i] = f(k);
            }
        };
        // weight net: hidden unit 0 copies the normalized covariate (input 3)
        fill("weight_net.layer0.weight", &|k| if k == 3 { 1.0 } else { 0.0 });
        fill("weight_net.layer0.bias", &|_| 0.0);
        fill("weight_net.layer1.weight", &|k| if k == 0 { self.weight_scale * (zmax - zmin) } else { 0.0 });
        fill("weight_net.layer1.bias", &|_| self.weight_scale * zmin + self.weight_offset);
        // transform: identity through the first three hidden units, then shift;
        // the window's lower corner keeps inputs non-negative
        let lo = [0, 1, 2].map(|a| self.window.bounds(a).0);
        fill("transform.layer0.weight", &|k| if k / 3 < 3 && k / 3 == k % 3 { 1.0 } else { 0.0 });
        fill("transform.layer0.bias", &|k| if k < 3 { -lo[k] } else { 0.0 });
        fill("transform.layer1.weight", &|k| if k % hidden < 3 && k / hidden == k % hidden { 1.0 } else { 0.0 });
        fill("transform.layer1.bias", &|k| lo[k] + self.shift);
        m.set_params(&v)?;
        Ok(m)
    }
}

/// The scenario's intensity: `softplus(sum_j f_j exp(-phi |g(s) - g(u_j)|^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub phi: f64,
    pub shift: f64,
}

impl GroundTruth {
    pub fn latent(&self, s: &Point) -> f64 {
        let gs = s.map(|v| v + self.shift);
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(u, w)| {
                let q: f64 = (0..3).map(|d| (gs[d] - (u[d] + self.shift)).powi(2)).sum();
                w * (-self.phi * q).exp()
            })
            .sum()
    }
}

impl IntensityFn for GroundTruth {
    fn intensity(&self, s: &Point) -> f64 {
        softplus(self.latent(s))
    }
}

/// `safety_factor * max lambda` over a regular grid with endpoints.
pub fn upper_bound<M: IntensityFn + ?Sized>(model: &M, window: &Window, config: &ThinningConfig) -> Result<f64> {
    if !(config.safety_factor >= 1.0) {
        return Err(Error::InvalidArgument(format!("safety factor must be at least 1, got {}", config.safety_factor)));
    }
    let axes = [0, 1, 2].map(|a| {
        let (lo, hi) = window.bounds(a);
        axis_points(lo, hi, config.bound_grid[a].max(1))
    });
    let maxima: Vec<Result<f64>> = axes[0]
        .par_iter()
        .map(|&t| {
            let mut m = 0.0f64;
            for &x1 in &axes[1] {
                for &x2 in &axes[2] {
                    let v = model.intensity(&[t, x1, x2]);
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("intensity at ({t}, {x1}, {x2})")));
                    }
                    m = m.max(v);
                }
            }
            Ok(m)
        })
        .collect();
    let mut best = 0.0f64;
    for m in maxima {
        best = best.max(m?);
    }
    Ok(best * config.safety_factor)
}

/// Result of one thinning draw with bookkeeping.
#[derive(Clone, Debug)]
pub struct ThinningOutcome {
    pub sequence: EventSequence,
    pub candidates: usize,
    pub lambda_max: f64,
    pub retries: usize,
}

/// Dominated rejection sampling: `N0 ~ Poisson(lambda_max * volume)`
/// uniform candidates, each kept with probability `lambda / lambda_max`.
pub fn thinning_sample<M: IntensityFn + ?Sized>(model: &M, window: &Window, lambda_max: f64, seed: u64) -> Result<EventSequence> {
    Ok(thinning_sample_detailed(model, window, lambda_max, seed, ThinningConfig::default().max_retries, "0")?.sequence)
}

pub fn thinning_sample_detailed<M: IntensityFn + ?Sized>(
    model: &M,
    window: &Window,
    lambda_max: f64,
    seed: u64,
    max_retries: usize,
    seq_id: &str,
) -> Result<ThinningOutcome> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bound = lambda_max;
    let mut retries = 0;
    'attempt: loop {
        let mean = bound * window.volume();
        let n0 = Poisson::new(mean)
            .map_err(|e| Error::InvalidArgument(format!("candidate count: {e}")))?
            .sample(&mut rng) as usize;
        let mut accepted = Vec::new();
        for _ in 0..n0 {
            let p = window.sample_uniform(&mut rng);
            let u: f64 = rng.gen();
            let lam = model.intensity(&p);
            if lam > bound {
                if retries >= max_retries {
                    return Err(Error::BoundViolation {
                        retries,
                        lambda: lam,
                        bound,
                    });
                }
                log::warn!("intensity {lam} exceeds thinning bound {bound}; doubling");
                retries += 1;
                bound *= 2.0;
                continue 'attempt;
            }
            if u * bound < lam {
                accepted.push(p);
            }
        }
        return Ok(ThinningOutcome {
            sequence: EventSequence::new(seq_id, accepted, window)?,
            candidates: n0,
            lambda_max: bound,
            retries,
        });
    }
}

/// Per-sequence seed derived from a dataset seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` independent thinning draws from any intensity.
pub fn sample_sequences<M: IntensityFn + ?Sized>(model: &M, window: &Window, n: usize, seed: u64, config: &ThinningConfig) -> Result<SequenceSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let bound = upper_bound(model, window, config)?;
    let width = (n - 1).to_string().len();
    let seqs: Vec<Result<EventSequence>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("{i:0width$}");
            Ok(thinning_sample_detailed(model, window, bound, derive_seed(seed, i as u64), config.max_retries, &id)?.sequence)
        })
        .collect();
    Ok(SequenceSet::new(seqs.into_iter().collect::<Result<_>>()?))
}

/// Simulates `n` sequences from the scenario. With `out`, writes
/// `events.csv`, `covariates.csv` and `scenario.toml` there.
pub fn generate_dataset(scenario: &SyntheticScenario, n: usize, seed: u64, out: Option<&Path>) -> Result<(SequenceSet, GroundTruth)> {
    let truth = scenario.ground_truth()?;
    let data = sample_sequences(&truth, &scenario.window, n, seed, &scenario.thinning)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_sequences(&data, dir.join(EVENTS_FILE))?;
        write_covariate_grid(&scenario.covariate_grid()?, dir.join(COVARIATES_FILE))?;
        let mut recorded = scenario.clone();
        recorded.thinning.seed = seed;
        let path = dir.join(SCENARIO_FILE);
        let text = format!("# n_sequences = {n}\n{}", recorded.to_toml()?);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok((data, truth))
}

pub const EVENTS_FILE: &str = "events.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const SCENARIO_FILE: &str = "scenario.toml";
