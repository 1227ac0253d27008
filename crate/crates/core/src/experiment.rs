//! Simulate, fit and evaluate: single runs, data-fraction and Monte Carlo
//! curves, noise contrasts and hyperparameter sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{cube_root, ModelConfig, ModelFamily, RunConfig, SweepAxis, SweepSpec};
use crate::domain::{
    build_representative_set, format_number, load_covariate_grid, load_sequences, split_by_time, CovariateGrid,
    SequenceSet, Window,
};
use crate::error::{Error, Result};
use crate::estimators::{train, EstimatorConfig, EstimatorKind, History};
use crate::intensity::{fit_homopoisson, AnyModel, IntensityFn, MixtureModel, MixtureStructure};
use crate::metrics::{evaluate, MetricsReport};
use crate::simulator::{generate_dataset, GroundTruth, SyntheticScenario, COVARIATES_FILE, EVENTS_FILE, SCENARIO_FILE};

/// Sequences, their covariates and (for simulated data) the true intensity.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub window: Window,
    pub sequences: SequenceSet,
    pub covariates: CovariateGrid,
    pub truth: Option<GroundTruth>,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SequenceSet,
    pub val: SequenceSet,
    pub test: SequenceSet,
}

impl Dataset {
    pub fn simulate(scenario: &SyntheticScenario, n: usize, seed: u64) -> Result<Self> {
        let (sequences, truth) = generate_dataset(scenario, n, seed, None)?;
        Ok(Dataset {
            window: scenario.window,
            sequences,
            covariates: scenario.covariate_grid()?,
            truth: Some(truth),
        })
    }

    /// Reads `events.csv` and `covariates.csv` from `dir`. A `scenario.toml`
    /// there supplies the window and the true intensity; otherwise
    /// `fallback` is the window.
    pub fn load(dir: impl AsRef<Path>, fallback: &Window) -> Result<Self> {
        let dir = dir.as_ref();
        let scenario_path = dir.join(SCENARIO_FILE);
        let (window, truth) = if scenario_path.exists() {
            let sc = SyntheticScenario::load(&scenario_path)?;
            (sc.window, Some(sc.ground_truth()?))
        } else {
            (*fallback, None)
        };
        Ok(Dataset {
            window,
            sequences: load_sequences(dir.join(EVENTS_FILE), &window)?,
            covariates: load_covariate_grid(dir.join(COVARIATES_FILE))?,
            truth,
        })
    }

    pub fn split(&self, ratios: [f64; 3]) -> Result<Splits> {
        let (train, val, test) = split_by_time(&self.sequences, (ratios[0], ratios[1], ratios[2]))?;
        Ok(Splits { train, val, test })
    }

    pub fn truth_fn(&self) -> Option<&dyn IntensityFn> {
        self.truth.as_ref().map(|t| t as &dyn IntensityFn)
    }
}

/// Untrained model as configured. The homogeneous model is returned at
/// rate 1 and fitted in closed form by [`fit`].
pub fn build_model(cfg: &ModelConfig, kernel: &crate::config::KernelConfig, data: &Dataset) -> Result<AnyModel> {
    let k = data.covariates.dim();
    let structure = match cfg.family {
        ModelFamily::HomoPoisson => return Ok(AnyModel::HomoPoisson(crate::intensity::HomoPoissonModel::new(1.0)?)),
        ModelFamily::Dkmpp => MixtureStructure::dkmpp(
            data.window,
            cfg.representative,
            k,
            kernel.kind,
            cfg.link,
            cfg.hidden,
            cfg.layers,
            cfg.transform_dim,
        )?,
        ModelFamily::Dmpp => {
            MixtureStructure::dmpp(data.window, cfg.representative, k, kernel.kind, cfg.hidden, cfg.layers)?
        }
    };
    let rep = build_representative_set(&data.window, cfg.representative, &data.covariates)?;
    Ok(AnyModel::Mixture(MixtureModel::new(structure, rep, kernel.phi_init, cfg.init_seed)?))
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: AnyModel,
    pub history: History,
    pub metrics: MetricsReport,
    pub train_seconds: f64,
}

/// Builds, trains on `splits.train` (selecting on `splits.val`) and
/// evaluates on `splits.test`.
pub fn fit(cfg: &RunConfig, estimator: &EstimatorConfig, data: &Dataset, splits: &Splits) -> Result<FitOutcome> {
    let mut model = build_model(&cfg.model, &cfg.kernel, data)?;
    let start = Instant::now();
    let history = match &mut model {
        AnyModel::HomoPoisson(m) => {
            *m = fit_homopoisson(&splits.train, &data.window)?;
            History::default()
        }
        AnyModel::Mixture(_) => train(&mut model, &splits.train, &splits.val, &data.window, estimator)?,
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let name = match cfg.model.family {
        ModelFamily::HomoPoisson => "homopoisson".to_string(),
        f => format!("{f}-{}", estimator.kind),
    };
    let mut metrics = evaluate(
        &name,
        &model,
        &splits.test,
        &data.window,
        cfg.evaluation.mc_samples,
        cfg.evaluation.seed,
        data.truth_fn(),
        cfg.evaluation.rmse_grid,
    )?;
    metrics.runtime_seconds.insert("train".into(), train_seconds);
    metrics
        .runtime_seconds
        .insert("mean_epoch".into(), history.mean_epoch_seconds());
    Ok(FitOutcome {
        model,
        history,
        metrics,
        train_seconds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub estimator: EstimatorKind,
    pub x: f64,
    pub rmse: Option<f64>,
    pub tll: f64,
    pub mean_epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: usize,
    pub repeat: usize,
    pub rmse: Option<f64>,
    pub tll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_tll: f64,
    pub std_tll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub runs: Vec<MetricsReport>,
    pub fractions: Vec<CurvePoint>,
    pub mc_curve: Vec<CurvePoint>,
    pub noise_contrast: Vec<CurvePoint>,
    pub sweep_axis: Option<String>,
    pub sweep: Vec<SweepCell>,
    pub sweep_summary: Vec<SweepSummary>,
}

impl ExperimentReport {
    fn write(&self, dir: Option<&Path>) -> Result<()> {
        let Some(dir) = dir else { return Ok(()) };
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(String::new, format_number)
}

fn write_curve(dir: Option<&Path>, file: &str, x_name: &str, points: &[CurvePoint]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let path = dir.join(file);
    let mut out = format!("estimator,{x_name},rmse,tll,mean_epoch_seconds\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.estimator,
            format_number(p.x),
            opt_num(p.rmse),
            format_number(p.tll),
            format_number(p.mean_epoch_seconds)
        ));
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Config for one sweep cell: the axis value applied, seeds offset by the
/// repeat index.
pub fn sweep_config(base: &RunConfig, axis: SweepAxis, value: usize, repeat: usize) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::RepresentativePoints => {
            let n = cube_root(value)?;
            cfg.model.representative = [n, n, n];
        }
        SweepAxis::Layers => cfg.model.layers = value,
        SweepAxis::BatchSize => cfg.estimator.batch_size = value,
    }
    cfg.model.init_seed = base.model.init_seed.wrapping_add(repeat as u64);
    cfg.estimator.seed = base.estimator.seed.wrapping_add(repeat as u64);
    Ok(cfg)
}

/// Runs every sweep cell in parallel. Cells that fail are logged and
/// dropped; the summary covers the remaining repeats.
pub fn run_sweep(base: &RunConfig, spec: &SweepSpec, data: &Dataset, splits: &Splits) -> Result<(Vec<SweepCell>, Vec<SweepSummary>)> {
    spec.validate()?;
    let values = spec.values();
    let jobs: Vec<(usize, usize)> = values
        .iter()
        .flat_map(|&v| (0..spec.repeats).map(move |r| (v, r)))
        .collect();
    let results: Vec<Option<SweepCell>> = jobs
        .par_iter()
        .map(|&(value, repeat)| {
            let run = sweep_config(base, spec.axis, value, repeat).and_then(|cfg| fit(&cfg, &cfg.estimator, data, splits));
            match run {
                Ok(o) => Some(SweepCell {
                    value,
                    repeat,
                    rmse: o.metrics.rmse,
                    tll: o.metrics.tll,
                }),
                Err(e) => {
                    log::warn!("sweep cell {}={value} repeat {repeat} failed: {e}", spec.axis);
                    None
                }
            }
        })
        .collect();
    let cells: Vec<SweepCell> = results.into_iter().flatten().collect();
    let summary = values
        .iter()
        .map(|&v| {
            let of: Vec<&SweepCell> = cells.iter().filter(|c| c.value == v).collect();
            let rmse: Vec<f64> = of.iter().filter_map(|c| c.rmse).collect();
            let tll: Vec<f64> = of.iter().map(|c| c.tll).collect();
            let (mean_rmse, std_rmse) = mean_std(&rmse);
            let (mean_tll, std_tll) = mean_std(&tll);
            SweepSummary {
                value: v,
                mean_rmse,
                std_rmse,
                mean_tll,
                std_tll,
            }
        })
        .collect();
    Ok((cells, summary))
}

fn write_sweep(dir: Option<&Path>, axis: SweepAxis, cells: &[SweepCell], summary: &[SweepSummary]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let path = dir.join("sweep.csv");
    let mut out = format!("{axis},repeat,rmse,tll\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{}\n", c.value, c.repeat, opt_num(c.rmse), format_number(c.tll)));
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("sweep_summary.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = format!("{axis},mean_rmse,std_rmse,mean_tll,std_tll\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.value,
            format_number(s.mean_rmse),
            format_number(s.std_rmse),
            format_number(s.mean_tll),
            format_number(s.std_tll)
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Runs everything the config asks for. With `out`, each stage writes its
/// files as soon as it finishes, so a later failure keeps earlier results.
pub fn run_experiment(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let splits = data.split(cfg.data.split)?;
    let mut report = ExperimentReport {
        name: cfg.name.clone(),
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        ..Default::default()
    };
    let estimators = if cfg.experiment.estimators.is_empty() {
        vec![cfg.estimator.kind]
    } else {
        cfg.experiment.estimators.clone()
    };
    let with_kind = |kind: EstimatorKind| EstimatorConfig {
        kind,
        ..cfg.estimator.clone()
    };

    let result = (|| -> Result<()> {
        for &kind in &estimators {
            let o = fit(cfg, &with_kind(kind), data, &splits)?;
            if let Some(dir) = out {
                o.history.write_csv(dir.join(format!("history_{kind}.csv")))?;
                Checkpoint::from_any(o.model.clone(), data.window).save(dir.join(format!("model_{kind}.ckpt")))?;
            }
            report.runs.push(o.metrics);
            report.write(out)?;
        }

        for &f in &cfg.experiment.fractions {
            let sub = Splits {
                train: splits.train.fraction(f),
                ..splits.clone()
            };
            for &kind in &estimators {
                let o = fit(cfg, &with_kind(kind), data, &sub)?;
                report.fractions.push(point(kind, f, &o));
            }
            write_curve(out, "fractions.csv", "fraction", &report.fractions)?;
        }

        for &m in &cfg.experiment.mc_curve {
            for &kind in &estimators {
                let est = EstimatorConfig {
                    mc_samples: m,
                    ..with_kind(kind)
                };
                let o = fit(cfg, &est, data, &splits)?;
                report.mc_curve.push(point(kind, m as f64, &o));
            }
            write_curve(out, "mc_curve.csv", "mc_samples", &report.mc_curve)?;
        }

        for &s2 in &cfg.experiment.noise_contrast {
            let est = EstimatorConfig {
                sigma2: s2,
                ..with_kind(EstimatorKind::Dsm)
            };
            let o = fit(cfg, &est, data, &splits)?;
            report.noise_contrast.push(point(EstimatorKind::Dsm, s2, &o));
            write_curve(out, "noise_contrast.csv", "sigma2", &report.noise_contrast)?;
        }

        if let Some(spec) = &cfg.sweep {
            let (cells, summary) = run_sweep(cfg, spec, data, &splits)?;
            write_sweep(out, spec.axis, &cells, &summary)?;
            report.sweep_axis = Some(spec.axis.to_string());
            report.sweep = cells;
            report.sweep_summary = summary;
        }
        Ok(())
    })();
    report.write(out)?;
    result.map(|_| report)
}

fn point(kind: EstimatorKind, x: f64, o: &FitOutcome) -> CurvePoint {
    CurvePoint {
        estimator: kind,
        x,
        rmse: o.metrics.rmse,
        tll: o.metrics.tll,
        mean_epoch_seconds: o.history.mean_epoch_seconds(),
    }
}

/// Output directory from the config, else `default`.
pub fn output_dir(cfg: &RunConfig, default: &Path) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| default.to_path_buf())
}
