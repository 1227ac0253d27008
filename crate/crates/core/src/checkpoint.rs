//! Plain-text model checkpoints.
//!
//! ```text
//! dkmpp-checkpoint 1
//! structure {"kind":"mixture",...}
//! param log_phi 1
//! 0
//! param weight_net.layer0.weight 32
//! ...
//! fixed representative.points 375
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so a reload reproduces
//! the model bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::ParamVector;
use crate::domain::{RepresentativeSet, Window};
use crate::error::{Error, Result};
use crate::intensity::{AnyModel, HomoPoissonModel, IntensityModel, MixtureModel, MixtureStructure};

pub const HEADER: &str = "dkmpp-checkpoint 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelStructure {
    Mixture(MixtureStructure),
    HomoPoisson { window: Window },
}

impl ModelStructure {
    pub fn window(&self) -> &Window {
        match self {
            ModelStructure::Mixture(s) => &s.window,
            ModelStructure::HomoPoisson { window } => window,
        }
    }
}

/// A model with the window it was fitted on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub structure: ModelStructure,
    pub model: AnyModel,
}

impl Checkpoint {
    pub fn mixture(model: MixtureModel) -> Self {
        Checkpoint {
            structure: ModelStructure::Mixture(model.structure().clone()),
            model: AnyModel::Mixture(model),
        }
    }

    pub fn homopoisson(model: HomoPoissonModel, window: Window) -> Self {
        Checkpoint {
            structure: ModelStructure::HomoPoisson { window },
            model: AnyModel::HomoPoisson(model),
        }
    }

    pub fn from_any(model: AnyModel, window: Window) -> Self {
        match model {
            AnyModel::Mixture(m) => Self::mixture(m),
            AnyModel::HomoPoisson(m) => Self::homopoisson(m, window),
        }
    }

    pub fn window(&self) -> &Window {
        self.structure.window()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        let json = serde_json::to_string(&self.structure).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push_str(&format!("structure {json}\n"));
        for (name, values) in self.model.params().blocks() {
            push_block(&mut out, "param", name, values);
        }
        if let AnyModel::Mixture(m) = &self.model {
            let rep = m.representative();
            let pts: Vec<f64> = rep.points.iter().flatten().copied().collect();
            let cov: Vec<f64> = rep.covariates.iter().flatten().copied().collect();
            let counts: Vec<f64> = rep.counts.iter().map(|&c| c as f64).collect();
            push_block(&mut out, "fixed", "representative.counts", &counts);
            push_block(&mut out, "fixed", "representative.points", &pts);
            push_block(&mut out, "fixed", "representative.covariates", &cov);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(Error::Checkpoint(format!("missing header '{HEADER}'"))),
        }
        let structure: ModelStructure = match lines.next() {
            Some((_, l)) if l.starts_with("structure ") => {
                serde_json::from_str(&l["structure ".len()..]).map_err(|e| Error::Checkpoint(format!("structure: {e}")))?
            }
            _ => return Err(Error::Checkpoint("missing structure line".into())),
        };
        let mut params = Vec::new();
        let mut fixed = Vec::new();
        while let Some((no, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || !(parts[0] == "param" || parts[0] == "fixed") {
                return Err(Error::Checkpoint(format!("line {}: expected a block header, got '{line}'", no + 1)));
            }
            let len: usize = parts[2]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("line {}: bad block length '{}'", no + 1, parts[2])))?;
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let (vno, v) = lines
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("block '{}' truncated", parts[1])))?;
                values.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Checkpoint(format!("line {}: bad value '{v}'", vno + 1)))?,
                );
            }
            let entry = (parts[1].to_string(), values);
            if parts[0] == "param" {
                params.push(entry);
            } else {
                fixed.push(entry);
            }
        }
        let params = ParamVector::new(params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let model = match &structure {
            ModelStructure::HomoPoisson { .. } => {
                let rate = params
                    .block(crate::intensity::LOG_RATE)
                    .filter(|b| b.len() == 1 && params.len() == 1)
                    .ok_or_else(|| Error::Checkpoint("homogeneous model needs exactly one 'log_rate' value".into()))?[0]
                    .exp();
                AnyModel::HomoPoisson(HomoPoissonModel::new(rate)?)
            }
            ModelStructure::Mixture(st) => {
                let get = |name: &str| {
                    fixed
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, v)| v.as_slice())
                        .ok_or_else(|| Error::Checkpoint(format!("missing block '{name}'")))
                };
                let counts = get("representative.counts")?;
                let points = get("representative.points")?;
                let cov = get("representative.covariates")?;
                if counts.len() != 3 || points.len() % 3 != 0 {
                    return Err(Error::Checkpoint("malformed representative blocks".into()));
                }
                let j = points.len() / 3;
                let k = st.covariate_dim;
                if cov.len() != j * k {
                    return Err(Error::Checkpoint(format!("covariate block has {} values, expected {}", cov.len(), j * k)));
                }
                let rep = RepresentativeSet {
                    points: points.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    covariates: cov.chunks(k.max(1)).map(|c| c.to_vec()).take(j).collect(),
                    counts: [counts[0] as usize, counts[1] as usize, counts[2] as usize],
                };
                verify_layout(st, &rep, &params)?;
                AnyModel::Mixture(MixtureModel::with_params(st.clone(), rep, params).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
        };
        Ok(Checkpoint { structure, model })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Loads and checks that the stored structure equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelStructure) -> Result<Self> {
        let c = Self::load(path)?;
        if &c.structure != expected {
            return Err(Error::Checkpoint("stored structure differs from the expected configuration".into()));
        }
        Ok(c)
    }
}

fn push_block(out: &mut String, tag: &str, name: &str, values: &[f64]) {
    out.push_str(&format!("{tag} {name} {}\n", values.len()));
    for v in values {
        out.push_str(&format!("{v:?}\n"));
    }
}

/// Parameter blocks must carry the names and lengths a fresh model of the
/// same structure would have.
fn verify_layout(st: &MixtureStructure, rep: &RepresentativeSet, params: &ParamVector) -> Result<()> {
    let fresh = MixtureModel::new(st.clone(), rep.clone(), 1.0, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let want: Vec<(&str, usize)> = fresh.params().blocks().map(|(n, v)| (n, v.len())).collect();
    let got: Vec<(&str, usize)> = params.blocks().map(|(n, v)| (n, v.len())).collect();
    if want != got {
        return Err(Error::Checkpoint(format!(
            "parameter blocks {got:?} do not match the structure's {want:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_representative_set, CovariateGrid};
    use crate::intensity::{IntensityFn, Link};
    use crate::kernels::BaseKernelKind;

    fn model() -> MixtureModel {
        let w = Window::default();
        let grid = CovariateGrid::from_fn([vec![0.0, 10.0], vec![0.0, 1.0], vec![0.0, 1.0]], 2, |p| vec![p[1], p[0] * p[2]]).unwrap();
        let rep = build_representative_set(&w, [2, 2, 3], &grid).unwrap();
        let st = MixtureStructure::dkmpp(w, [2, 2, 3], 2, BaseKernelKind::Rq, Link::Softplus, 4, 2, 3).unwrap();
        MixtureModel::new(st, rep, 1.7, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let c = Checkpoint::mixture(m.clone());
        let back = Checkpoint::from_text(&c.to_text().unwrap()).unwrap();
        assert_eq!(back.model.params(), m.params());
        let p = [3.3, 0.2, 0.9];
        assert_eq!(back.model.intensity(&p), m.intensity(&p));
        assert_eq!(back.structure, c.structure);
    }

    #[test]
    fn homopoisson_round_trip() {
        let c = Checkpoint::homopoisson(HomoPoissonModel::new(1.25).unwrap(), Window::default());
        let back = Checkpoint::from_text(&c.to_text().unwrap()).unwrap();
        assert_eq!(back.model.intensity(&[0.0; 3]), 1.25);
    }

    #[test]
    fn rejects_tampering() {
        let text = Checkpoint::mixture(model()).to_text().unwrap();
        assert!(Checkpoint::from_text(&text.replacen("dkmpp-checkpoint 1", "nope", 1)).is_err());
        assert!(Checkpoint::from_text(&text.replacen("param log_phi 1", "param log_theta 1", 1)).is_err());
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
        let other = text.replacen("\"rq\"", "\"rbf\"", 1);
        let loaded = Checkpoint::from_text(&other).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        loaded.save(&path).unwrap();
        let expected = Checkpoint::mixture(model()).structure;
        assert!(matches!(Checkpoint::load_expecting(&path, &expected), Err(Error::Checkpoint(_))));
    }
}
