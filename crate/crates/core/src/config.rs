//! TOML run configuration.
//!
//! ```toml
//! name = "synthetic"
//!
//! [data]
//! n_sequences = 2000
//! seed = 1
//! split = [0.5, 0.4, 0.1]
//!
//! [model]
//! family = "dkmpp"
//! hidden = 8
//! layers = 1
//!
//! [kernel]
//! kind = "rbf"
//! phi_init = 1.0
//!
//! [estimator]
//! kind = "dsm"
//! sigma2 = 0.01
//! epochs = 60
//!
//! [sweep]
//! axis = "layers"
//! values = [1, 2, 4]
//! repeats = 3
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind};
use crate::intensity::Link;
use crate::kernels::BaseKernelKind;
use crate::simulator::SyntheticScenario;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Dkmpp,
    Dmpp,
    HomoPoisson,
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Dkmpp => "dkmpp",
            ModelFamily::Dmpp => "dmpp",
            ModelFamily::HomoPoisson => "homopoisson",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_sequences: usize,
    pub seed: u64,
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_sequences: 2000,
            seed: 1,
            split: [0.5, 0.4, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub link: Link,
    pub hidden: usize,
    pub layers: usize,
    pub transform_dim: usize,
    pub representative: [usize; 3],
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: ModelFamily::Dkmpp,
            link: Link::Softplus,
            hidden: 8,
            layers: 1,
            transform_dim: 3,
            representative: [5, 5, 5],
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: BaseKernelKind,
    pub phi_init: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kind: BaseKernelKind::Rbf,
            phi_init: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub rmse_grid: [usize; 3],
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            mc_samples: 1000,
            seed: 2024,
            rmse_grid: crate::metrics::DEFAULT_RMSE_GRID,
        }
    }
}

/// Extra runs on top of the base fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Estimators for the base and curve runs; empty means `estimator.kind`.
    pub estimators: Vec<EstimatorKind>,
    /// Fractions of the training split (first `ceil(f n)` sequences).
    pub fractions: Vec<f64>,
    /// Monte Carlo sample counts for MLE training.
    pub mc_curve: Vec<usize>,
    /// Noise variances for DSM training.
    pub noise_contrast: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RepresentativePoints,
    Layers,
    BatchSize,
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::RepresentativePoints => vec![64, 125, 216],
            SweepAxis::Layers => vec![1, 2, 4],
            SweepAxis::BatchSize => vec![50, 100, 200],
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::RepresentativePoints => "representative_points",
            SweepAxis::Layers => "layers",
            SweepAxis::BatchSize => "batch_size",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representative_points" => Ok(SweepAxis::RepresentativePoints),
            "layers" => Ok(SweepAxis::Layers),
            "batch_size" => Ok(SweepAxis::BatchSize),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<usize>,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, repeats: usize) -> Self {
        SweepSpec {
            axis,
            values: axis.default_values(),
            repeats,
        }
    }

    pub fn values(&self) -> Vec<usize> {
        if self.values.is_empty() {
            self.axis.default_values()
        } else {
            self.values.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("sweep.repeats must be at least 1".into()));
        }
        if self.values().contains(&0) {
            return Err(Error::Config("sweep values must be positive".into()));
        }
        if self.axis == SweepAxis::RepresentativePoints {
            for v in self.values() {
                cube_root(v)?;
            }
        }
        Ok(())
    }
}

/// Per-axis count for a cubic representative grid of `total` points.
pub fn cube_root(total: usize) -> Result<usize> {
    let n = (total as f64).cbrt().round() as usize;
    if n * n * n != total {
        return Err(Error::Config(format!("{total} representative points is not a perfect cube")));
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub output_dir: Option<PathBuf>,
    pub scenario: SyntheticScenario,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub kernel: KernelConfig,
    pub estimator: EstimatorConfig,
    pub evaluation: EvaluationConfig,
    pub experiment: ExperimentPlan,
    pub sweep: Option<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            output_dir: None,
            scenario: SyntheticScenario::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            kernel: KernelConfig::default(),
            estimator: EstimatorConfig::default(),
            evaluation: EvaluationConfig::default(),
            experiment: ExperimentPlan::default(),
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.window.validate()?;
        self.estimator.validate()?;
        let s = self.data.split;
        if s.iter().any(|&r| !(r > 0.0)) || ((s[0] + s[1] + s[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split must be positive and sum to 1, got {s:?}")));
        }
        if self.model.representative.contains(&0) {
            return Err(Error::Config("model.representative counts must be positive".into()));
        }
        if self.model.hidden == 0 || self.model.transform_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.kernel.phi_init > 0.0) {
            return Err(Error::Config("kernel.phi_init must be positive".into()));
        }
        if self.evaluation.mc_samples == 0 {
            return Err(Error::Config("evaluation.mc_samples must be at least 1".into()));
        }
        if self.experiment.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("experiment.fractions must lie in (0, 1]".into()));
        }
        if self.experiment.mc_curve.contains(&0) {
            return Err(Error::Config("experiment.mc_curve entries must be positive".into()));
        }
        if self.experiment.noise_contrast.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("experiment.noise_contrast entries must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let cfg = RunConfig::from_toml(
            r#"
            name = "x"
            [kernel]
            kind = "rq"
            phi_init = 2.0
            [estimator]
            kind = "mle"
            mc_samples = 50
            sigma2 = 0.5
            batch_size = 10
            epochs = 3
            lr = 0.001
            seed = 9
            [sweep]
            axis = "representative_points"
            repeats = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.kernel.kind, BaseKernelKind::Rq);
        assert_eq!(cfg.estimator.kind, EstimatorKind::Mle);
        assert_eq!(cfg.estimator.mc_samples, 50);
        assert_eq!(cfg.sweep.as_ref().unwrap().values(), vec![64, 125, 216]);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[estimator]\nsigma2 = 0.0").is_err());
        assert!(RunConfig::from_toml("[data]\nsplit = [0.5, 0.5, 0.5]").is_err());
        assert!(RunConfig::from_toml("[sweep]\naxis = \"representative_points\"\nvalues = [100]").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert_eq!(cube_root(216).unwrap(), 6);
    }
}
