//! Evaluation metrics: test log-likelihood, count accuracy, intensity RMSE,
//! and grid export.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{format_number, SequenceSet, Window};
use crate::error::{Error, Result};
use crate::intensity::{compensator_mc, IntensityFn};

/// Definitions recorded alongside every report.
pub const TLL_DEFINITION: &str = "mean over test sequences of (sum of log intensity at events minus Monte Carlo compensator)";
pub const ACC_DEFINITION: &str = "max(0, 1 - |predicted - actual| / actual), predicted = number of test sequences times the Monte Carlo compensator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub seq_id: String,
    pub n_events: usize,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub tll: f64,
    pub acc: f64,
    pub rmse: Option<f64>,
    pub predicted_count: f64,
    pub actual_count: f64,
    pub compensator: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub tll_definition: String,
    pub acc_definition: String,
    pub per_sequence: Vec<SequenceScore>,
    pub runtime_seconds: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }
}

fn per_sequence<M: IntensityFn + ?Sized>(model: &M, test: &SequenceSet, compensator: f64) -> Result<Vec<SequenceScore>> {
    test.sequences
        .par_iter()
        .map(|seq| {
            let mut ll = -compensator;
            for (i, e) in seq.events.iter().enumerate() {
                let lam = model.intensity(e);
                if !(lam > 0.0) {
                    return Err(Error::NonPositiveIntensity {
                        value: lam,
                        event: format!("{} of sequence '{}'", i, seq.seq_id),
                    });
                }
                ll += lam.ln();
            }
            Ok(SequenceScore {
                seq_id: seq.seq_id.clone(),
                n_events: seq.len(),
                log_likelihood: ll,
            })
        })
        .collect()
}

fn require_sequences(test: &SequenceSet) -> Result<()> {
    if test.is_empty() {
        return Err(Error::UndefinedMetric("test set has no sequences".into()));
    }
    Ok(())
}

/// Mean per-sequence log-likelihood.
pub fn tll<M: IntensityFn + ?Sized>(model: &M, test: &SequenceSet, window: &Window, mc_samples: usize, seed: u64) -> Result<f64> {
    require_sequences(test)?;
    let comp = compensator_mc(model, window, mc_samples, seed)?;
    let scores = per_sequence(model, test, comp)?;
    Ok(scores.iter().map(|s| s.log_likelihood).sum::<f64>() / test.len() as f64)
}

/// Count accuracy from predicted and actual totals.
pub fn acc_from_counts(predicted: f64, actual: f64) -> Result<f64> {
    if !(actual > 0.0) {
        return Err(Error::UndefinedMetric("actual event count is zero".into()));
    }
    Ok((1.0 - (predicted - actual).abs() / actual).max(0.0))
}

pub fn acc<M: IntensityFn + ?Sized>(model: &M, test: &SequenceSet, window: &Window, mc_samples: usize, seed: u64) -> Result<f64> {
    require_sequences(test)?;
    let actual = test.n_events() as f64;
    if actual == 0.0 {
        return Err(Error::UndefinedMetric("actual event count is zero".into()));
    }
    let predicted = test.len() as f64 * compensator_mc(model, window, mc_samples, seed)?;
    acc_from_counts(predicted, actual)
}

/// Root mean squared difference on the cell centres of an `n` grid.
pub fn intensity_rmse<A, B>(model: &A, truth: &B, window: &Window, grid: [usize; 3]) -> Result<f64>
where
    A: IntensityFn + ?Sized,
    B: IntensityFn + ?Sized,
{
    if grid.contains(&0) {
        return Err(Error::InvalidArgument("RMSE grid must have at least one cell per axis".into()));
    }
    let centers = window.cell_centers(grid);
    let parts: Vec<f64> = centers
        .par_chunks(1024)
        .map(|c| {
            c.iter()
                .map(|p| {
                    let d = model.intensity(p) - truth.intensity(p);
                    d * d
                })
                .sum()
        })
        .collect();
    Ok((parts.iter().sum::<f64>() / centers.len() as f64).sqrt())
}

pub const DEFAULT_RMSE_GRID: [usize; 3] = [20, 20, 20];

/// TLL, ACC and optional RMSE against `truth` with one shared compensator.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<M: IntensityFn + ?Sized>(
    name: &str,
    model: &M,
    test: &SequenceSet,
    window: &Window,
    mc_samples: usize,
    seed: u64,
    truth: Option<&dyn IntensityFn>,
    rmse_grid: [usize; 3],
) -> Result<MetricsReport> {
    require_sequences(test)?;
    let start = std::time::Instant::now();
    let comp = compensator_mc(model, window, mc_samples, seed)?;
    let scores = per_sequence(model, test, comp)?;
    let tll = scores.iter().map(|s| s.log_likelihood).sum::<f64>() / test.len() as f64;
    let actual = test.n_events() as f64;
    let predicted = test.len() as f64 * comp;
    let acc = acc_from_counts(predicted, actual)?;
    let mut runtime = BTreeMap::new();
    runtime.insert("likelihood".to_string(), start.elapsed().as_secs_f64());
    let rmse = match truth {
        Some(t) => {
            let s = std::time::Instant::now();
            let r = intensity_rmse(model, t, window, rmse_grid)?;
            runtime.insert("rmse".to_string(), s.elapsed().as_secs_f64());
            Some(r)
        }
        None => None,
    };
    Ok(MetricsReport {
        model: name.to_string(),
        tll,
        acc,
        rmse,
        predicted_count: predicted,
        actual_count: actual,
        compensator: comp,
        mc_samples,
        seed,
        tll_definition: TLL_DEFINITION.into(),
        acc_definition: ACC_DEFINITION.into(),
        per_sequence: scores,
        runtime_seconds: runtime,
    })
}

/// Writes `x1,x2,lambda` on the spatial cell centres at time `t`.
pub fn export_intensity_grid<M: IntensityFn + ?Sized>(model: &M, window: &Window, t: f64, resolution: (usize, usize), path: impl AsRef<Path>) -> Result<()> {
    let (t0, t1) = window.bounds(0);
    if !(t >= t0 && t <= t1) {
        return Err(Error::InvalidArgument(format!("t = {t} lies outside [{t0}, {t1}]")));
    }
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let wrap = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["x1", "x2", "lambda"]).map_err(wrap)?;
    let (a0, a1) = window.bounds(1);
    let (b0, b1) = window.bounds(2);
    for i in 0..resolution.0 {
        let x1 = a0 + (a1 - a0) * (i as f64 + 0.5) / resolution.0 as f64;
        for j in 0..resolution.1 {
            let x2 = b0 + (b1 - b0) * (j as f64 + 0.5) / resolution.1 as f64;
            let lam = model.intensity(&[t, x1, x2]);
            w.write_record([format_number(x1), format_number(x2), format_number(lam)]).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length samples of size at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EventSequence;
    use crate::intensity::HomoPoissonModel;

    fn data(counts: &[usize]) -> SequenceSet {
        let w = Window::default();
        SequenceSet::new(
            counts
                .iter()
                .enumerate()
                .map(|(k, &n)| EventSequence::new(format!("{k}"), (0..n).map(|i| [i as f64 + 0.5, 0.5, 0.5]).collect(), &w).unwrap())
                .collect(),
        )
    }

    #[test]
    fn tll_closed_forms() {
        let w = Window::default();
        let m1 = HomoPoissonModel::new(1.0).unwrap();
        assert_eq!(tll(&m1, &data(&[0, 0]), &w, 100, 1).unwrap(), -10.0);
        let m2 = HomoPoissonModel::new(2.0).unwrap();
        let v = tll(&m2, &data(&[3]), &w, 100, 1).unwrap();
        assert!((v - (3.0 * 2f64.ln() - 20.0)).abs() < 1e-12);
        assert!((v + 17.920558).abs() < 1e-6);
    }

    #[test]
    fn acc_cases() {
        assert!((acc_from_counts(80.0, 100.0).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(acc_from_counts(100.0, 100.0).unwrap(), 1.0);
        assert_eq!(acc_from_counts(250.0, 100.0).unwrap(), 0.0);
        assert!(matches!(acc_from_counts(1.0, 0.0), Err(Error::UndefinedMetric(_))));
        let w = Window::default();
        let m = HomoPoissonModel::new(1.0).unwrap();
        assert!(acc(&m, &data(&[0]), &w, 10, 0).is_err());
        // predicted 2 * 10 = 20, actual 16
        assert!((acc(&m, &data(&[8, 8]), &w, 10, 0).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rmse_cases() {
        let w = Window::default();
        let f = |p: &crate::domain::Point| p[0] + p[1];
        let g = |p: &crate::domain::Point| p[0] + p[1] + 0.25;
        assert_eq!(intensity_rmse(&f, &f, &w, [4, 4, 4]).unwrap(), 0.0);
        assert!((intensity_rmse(&f, &g, &w, [4, 4, 4]).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn grid_export_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        let m = HomoPoissonModel::new(2.0).unwrap();
        export_intensity_grid(&m, &Window::default(), 3.0, (2, 2), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "x1,x2,lambda");
        assert!(lines[1..].iter().all(|l| l.ends_with(",2")));
        assert!(export_intensity_grid(&m, &Window::default(), 11.0, (2, 2), &p).is_err());
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        // tie handling
        let r = ranks(&[2.0, 1.0, 2.0]);
        assert_eq!(r, vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
