//! Training objectives and the optimization loop.
//!
//! * MLE: Monte Carlo (or closed-form) compensator minus event log-intensities.
//! * SM: `1/2 (d log lambda)^2 + d^2 log lambda` summed over event coordinates.
//! * DSM: squared mismatch between the model score at perturbed events and
//!   the Gaussian conditional score `-(s~ - s) / sigma^2`.
//!
//! All losses are averaged over the sequences of a batch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{Jet, Order};
use crate::domain::{EventSequence, Point, SequenceSet, Window};
use crate::error::{Error, Result};
use crate::intensity::{uniform_points, InputJet, IntensityModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mle,
    Sm,
    Dsm,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Mle => "mle",
            EstimatorKind::Sm => "sm",
            EstimatorKind::Dsm => "dsm",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mle" => Ok(EstimatorKind::Mle),
            "sm" => Ok(EstimatorKind::Sm),
            "dsm" => Ok(EstimatorKind::Dsm),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// How the MLE compensator is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompensatorMode {
    Mc,
    /// Closed form; falls back to Monte Carlo for models without one.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mc_samples: usize,
    pub sigma2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub compensator: CompensatorMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::Dsm,
            mc_samples: 1000,
            sigma2: 0.01,
            batch_size: 100,
            epochs: 50,
            lr: 1e-2,
            seed: 0,
            compensator: CompensatorMode::Mc,
        }
    }
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A sequence together with its Gaussian-perturbed copy.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySequence {
    pub clean: EventSequence,
    pub noisy: Vec<Point>,
    pub sigma2: f64,
}

impl NoisySequence {
    /// Conditional score `-(s~ - s) / sigma^2` of event `i`.
    pub fn target_score(&self, i: usize) -> [f64; 3] {
        let (c, n) = (&self.clean.events[i], &self.noisy[i]);
        [0, 1, 2].map(|d| -(n[d] - c[d]) / self.sigma2)
    }
}

/// Adds i.i.d. `N(0, sigma2)` noise to every coordinate of every event.
/// Perturbed points may leave the window.
pub fn perturb(batch: &[EventSequence], sigma2: f64, seed: u64) -> Result<Vec<NoisySequence>> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let normal = Normal::new(0.0, sigma2.sqrt())
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(batch
        .iter()
        .map(|seq| NoisySequence {
            clean: seq.clone(),
            noisy: seq
                .events
                .iter()
                .map(|e| [0, 1, 2].map(|d| e[d] + normal.sample(&mut rng)))
                .collect(),
            sigma2,
        })
        .collect())
}

fn require_batch(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(n as f64)
}

fn as_singular(e: Error) -> Error {
    match e {
        Error::NonPositiveIntensity { event, .. } => Error::SingularScore(event),
        other => other,
    }
}

fn event_groups(batch: &[EventSequence]) -> Vec<&[Point]> {
    batch.iter().map(|s| s.events.as_slice()).collect()
}

fn value_adjoint(v: f64) -> InputJet {
    Jet::constant(v)
}

fn compensator_part<M: IntensityModel + ?Sized>(
    model: &M,
    window: &Window,
    mc_samples: usize,
    seed: u64,
    mode: CompensatorMode,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if mode == CompensatorMode::Exact {
        if let Some((v, g)) = model.exact_compensator() {
            return Ok((v, want_grad.then_some(g)));
        }
    }
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let pts = uniform_points(window, mc_samples, seed);
    let scale = window.volume() / mc_samples as f64;
    let per = move |_g: usize, _i: usize, jet: &InputJet| {
        let v = jet.value.exp() * scale;
        Ok((v, value_adjoint(v)))
    };
    let groups = [pts.as_slice()];
    if want_grad {
        let (v, g) = model.loss_and_grad(&groups, Order::Value, &per)?;
        Ok((v, Some(g)))
    } else {
        Ok((model.loss_sum(&groups, Order::Value, &per)?, None))
    }
}

fn mle_impl<M: IntensityModel + ?Sized>(
    model: &M,
    batch: &[EventSequence],
    window: &Window,
    mc_samples: usize,
    seed: u64,
    mode: CompensatorMode,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let m = require_batch(batch.len())?;
    let (comp, comp_grad) = compensator_part(model, window, mc_samples, seed, mode, want_grad)?;
    let per = |_g: usize, _i: usize, jet: &InputJet| Ok((-jet.value / m, value_adjoint(-1.0 / m)));
    let groups = event_groups(batch);
    if want_grad {
        let (v, mut g) = model.loss_and_grad(&groups, Order::Value, &per)?;
        for (a, b) in g.iter_mut().zip(comp_grad.unwrap_or_default()) {
            *a += b;
        }
        Ok((comp + v, Some(g)))
    } else {
        Ok((comp + model.loss_sum(&groups, Order::Value, &per)?, None))
    }
}

/// Negative log-likelihood averaged over the batch, with a Monte Carlo
/// compensator drawn from `seed`.
pub fn mle_loss<M: IntensityModel + ?Sized>(model: &M, batch: &[EventSequence], window: &Window, mc_samples: usize, seed: u64) -> Result<f64> {
    Ok(mle_impl(model, batch, window, mc_samples, seed, CompensatorMode::Mc, false)?.0)
}

pub fn mle_loss_grad<M: IntensityModel + ?Sized>(
    model: &M,
    batch: &[EventSequence],
    window: &Window,
    mc_samples: usize,
    seed: u64,
    mode: CompensatorMode,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = mle_impl(model, batch, window, mc_samples, seed, mode, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn sm_per_point(m: f64) -> impl Fn(usize, usize, &InputJet) -> Result<(f64, InputJet)> + Sync {
    move |_g, _i, jet: &InputJet| {
        let mut loss = 0.0;
        let mut adj = Jet::constant(0.0);
        for d in 0..3 {
            loss += 0.5 * jet.grad[d] * jet.grad[d] + jet.hess[d];
            adj.grad[d] = jet.grad[d] / m;
            adj.hess[d] = 1.0 / m;
        }
        Ok((loss / m, adj))
    }
}

/// Score-matching loss averaged over the batch.
pub fn sm_loss<M: IntensityModel + ?Sized>(model: &M, batch: &[EventSequence]) -> Result<f64> {
    let m = require_batch(batch.len())?;
    model
        .loss_sum(&event_groups(batch), Order::Second, &sm_per_point(m))
        .map_err(as_singular)
}

pub fn sm_loss_grad<M: IntensityModel + ?Sized>(model: &M, batch: &[EventSequence]) -> Result<(f64, Vec<f64>)> {
    let m = require_batch(batch.len())?;
    model
        .loss_and_grad(&event_groups(batch), Order::Second, &sm_per_point(m))
        .map_err(as_singular)
}

fn dsm_setup(batch: &[NoisySequence]) -> Result<(f64, Vec<&[Point]>)> {
    let m = require_batch(batch.len())?;
    if let Some(b) = batch.iter().find(|b| !(b.sigma2 > 0.0)) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {}", b.sigma2)));
    }
    Ok((m, batch.iter().map(|b| b.noisy.as_slice()).collect()))
}

fn dsm_per_point(batch: &[NoisySequence], m: f64) -> impl Fn(usize, usize, &InputJet) -> Result<(f64, InputJet)> + Sync + '_ {
    move |g, i, jet: &InputJet| {
        let target = batch[g].target_score(i);
        let mut loss = 0.0;
        let mut adj = Jet::constant(0.0);
        for d in 0..3 {
            let r = target[d] - jet.grad[d];
            loss += 0.5 * r * r;
            adj.grad[d] = -r / m;
        }
        Ok((loss / m, adj))
    }
}

/// Denoising score-matching loss averaged over the batch.
pub fn dsm_loss<M: IntensityModel + ?Sized>(model: &M, batch: &[NoisySequence]) -> Result<f64> {
    let (m, groups) = dsm_setup(batch)?;
    model
        .loss_sum(&groups, Order::First, &dsm_per_point(batch, m))
        .map_err(as_singular)
}

pub fn dsm_loss_grad<M: IntensityModel + ?Sized>(model: &M, batch: &[NoisySequence]) -> Result<(f64, Vec<f64>)> {
    let (m, groups) = dsm_setup(batch)?;
    model
        .loss_and_grad(&groups, Order::First, &dsm_per_point(batch, m))
        .map_err(as_singular)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initial state.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl History {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.seconds).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let wrap = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"]).map_err(wrap)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                crate::domain::format_number(r.train_loss),
                crate::domain::format_number(r.val_loss),
                crate::domain::format_number(r.seconds),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

const VAL_SEED_SALT: u64 = 0x5eed_0f_7a1d;
const NOISE_SEED_SALT: u64 = 0x0d15_ea5e;

fn objective<M: IntensityModel + ?Sized>(
    model: &M,
    batch: &[EventSequence],
    window: &Window,
    cfg: &EstimatorConfig,
    seed: u64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    match cfg.kind {
        EstimatorKind::Mle => mle_impl(model, batch, window, cfg.mc_samples, seed, cfg.compensator, want_grad),
        EstimatorKind::Sm => {
            if want_grad {
                sm_loss_grad(model, batch).map(|(v, g)| (v, Some(g)))
            } else {
                sm_loss(model, batch).map(|v| (v, None))
            }
        }
        EstimatorKind::Dsm => {
            let noisy = perturb(batch, cfg.sigma2, seed ^ NOISE_SEED_SALT)?;
            if want_grad {
                dsm_loss_grad(model, &noisy).map(|(v, g)| (v, Some(g)))
            } else {
                dsm_loss(model, &noisy).map(|v| (v, None))
            }
        }
    }
}

/// Loss of the configured estimator on a whole set, with the fixed
/// validation seed. Used for model selection.
pub fn validation_loss<M: IntensityModel + ?Sized>(model: &M, data: &SequenceSet, window: &Window, cfg: &EstimatorConfig) -> Result<f64> {
    Ok(objective(model, &data.sequences, window, cfg, cfg.seed ^ VAL_SEED_SALT, false)?.0)
}

/// Fits `model` in place and returns the per-epoch history. The parameters
/// left in `model` are those with the lowest validation loss (training loss
/// when the validation set is empty), including the initial state.
pub fn train<M: IntensityModel + ?Sized>(
    model: &mut M,
    train_set: &SequenceSet,
    val_set: &SequenceSet,
    window: &Window,
    cfg: &EstimatorConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let select_on = if val_set.is_empty() { train_set } else { val_set };
    let mut best_val = validation_loss(model, select_on, window, cfg)?;
    let mut best_params = model.params().values().to_vec();
    let mut params = best_params.clone();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EventSequence> = chunk.iter().map(|&i| train_set.sequences[i].clone()).collect();
            let (loss, grad) = objective(model, &batch, window, cfg, cfg.seed ^ step as u64, true)?;
            let grad = grad.expect("gradient requested");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            adam.step(&mut params, &grad);
            model
                .set_params(&params)
                .map_err(|_| Error::NonFiniteLoss { epoch, step })?;
            loss_sum += loss;
            n_batches += 1;
            step += 1;
        }
        let seconds = start.elapsed().as_secs_f64();
        let val_loss = validation_loss(model, select_on, window, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        log::debug!("epoch {epoch}: train {:.6} val {val_loss:.6} ({seconds:.3}s)", loss_sum / n_batches as f64);
        if val_loss < best_val {
            best_val = val_loss;
            best_params.copy_from_slice(&params);
            history.best_epoch = epoch;
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            seconds,
        });
    }
    model.set_params(&best_params)?;
    history.best_val_loss = best_val;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::HomoPoissonModel;

    fn seq(events: Vec<Point>) -> EventSequence {
        EventSequence::new("a", events, &Window::default()).unwrap()
    }

    #[test]
    fn mle_closed_forms() {
        let w = Window::default();
        let m1 = HomoPoissonModel::new(1.0).unwrap();
        assert!((mle_loss(&m1, &[seq(vec![])], &w, 10, 0).unwrap() - 10.0).abs() < 1e-12);
        let m2 = HomoPoissonModel::new(2.0).unwrap();
        let s = seq(vec![[1.0, 0.5, 0.5], [2.0, 0.5, 0.5], [3.0, 0.5, 0.5]]);
        let v = mle_loss(&m2, std::slice::from_ref(&s), &w, 10, 0).unwrap();
        assert!((v - (20.0 - 3.0 * 2f64.ln())).abs() < 1e-12);
        assert!((v - 17.920558).abs() < 1e-6);
        let (_, g) = mle_loss_grad(&m2, &[s], &w, 10, 0, CompensatorMode::Mc).unwrap();
        // d/d log rate: 20 - 3
        assert!((g[0] - 17.0).abs() < 1e-12);
    }

    #[test]
    fn sm_of_constant_is_zero() {
        let m = HomoPoissonModel::new(3.0).unwrap();
        let s = seq(vec![[1.0, 0.5, 0.5], [2.0, 0.1, 0.9]]);
        assert_eq!(sm_loss(&m, &[s, seq(vec![])]).unwrap(), 0.0);
    }

    #[test]
    fn dsm_hand_value() {
        let m = HomoPoissonModel::new(3.0).unwrap();
        let clean = seq(vec![[1.0, 0.5, 0.5]]);
        let noisy = NoisySequence {
            clean: clean.clone(),
            noisy: vec![[1.1, 0.5, 0.5]],
            sigma2: 0.01,
        };
        assert!((dsm_loss(&m, &[noisy]).unwrap() - 50.0).abs() < 1e-9);
        let still = NoisySequence {
            clean: clean.clone(),
            noisy: clean.events.clone(),
            sigma2: 0.01,
        };
        assert_eq!(dsm_loss(&m, &[still]).unwrap(), 0.0);
    }

    #[test]
    fn perturb_is_seeded() {
        let s = seq(vec![[1.0, 0.5, 0.5], [2.0, 0.1, 0.9]]);
        let a = perturb(std::slice::from_ref(&s), 0.01, 9).unwrap();
        let b = perturb(std::slice::from_ref(&s), 0.01, 9).unwrap();
        assert_eq!(a, b);
        let tiny = perturb(std::slice::from_ref(&s), 1e-30, 9).unwrap();
        for (n, c) in tiny[0].noisy.iter().zip(&s.events) {
            for d in 0..3 {
                assert!((n[d] - c[d]).abs() < 1e-14);
            }
        }
        assert!(perturb(&[s], 0.0, 1).is_err());
    }

    #[test]
    fn empty_batch_errors() {
        let m = HomoPoissonModel::new(1.0).unwrap();
        assert!(sm_loss(&m, &[]).is_err());
        assert!(mle_loss(&m, &[], &Window::default(), 10, 0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let mut m = HomoPoissonModel::new(1.0).unwrap();
        let data = SequenceSet::new(vec![seq(vec![[1.0, 0.5, 0.5]])]);
        let cfg = EstimatorConfig {
            epochs: 0,
            ..EstimatorConfig::new(EstimatorKind::Mle)
        };
        let h = train(&mut m, &data, &data, &Window::default(), &cfg).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(m.rate(), 1.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [1.0, -1.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut c = EstimatorConfig::default();
        assert!(c.validate().is_ok());
        c.sigma2 = 0.0;
        assert!(c.validate().is_err());
        c = EstimatorConfig { batch_size: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = EstimatorConfig { mc_samples: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
