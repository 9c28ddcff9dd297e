//! Fitted-model artifacts shared by the CLI and the experiments.

use crate::dataset::MultiResDataset;
use crate::dgp::{DgpConfig, DgpTree};
use crate::error::{Error, Result};
use crate::fit::{fit_mr_dgp, fit_mr_gprn, DgpFitConfig, GprnFitConfig};
use crate::gprn::{GprnConfig, GprnModel, WeightMode};
use crate::trainer::History;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MrGprn,
    MrGprnExp,
    MrDgp,
    CenterPoint,
    AggGp,
    Mcmc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::MrGprn, ModelKind::MrGprnExp, ModelKind::MrDgp, ModelKind::CenterPoint, ModelKind::AggGp, ModelKind::Mcmc];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MrGprn => "mr-gprn",
            ModelKind::MrGprnExp => "mr-gprn-exp",
            ModelKind::MrDgp => "mr-dgp",
            ModelKind::CenterPoint => "center-point",
            ModelKind::AggGp => "agg-gp",
            ModelKind::Mcmc => "mcmc",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown model '{s}' (valid: {})", names.join(", ")))
        })
    }
}

/// Everything needed to build and train any model kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub gprn: GprnConfig,
    pub gprn_fit: GprnFitConfig,
    pub dgp: DgpConfig,
    pub dgp_fit: DgpFitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum FittedModel {
    MrGprn { gprn: GprnModel },
    MrGprnExp { gprn: GprnModel },
    MrDgp { tree: DgpTree },
    /// One GP with unit weights on the bag centers of every process.
    CenterPoint { gprn: GprnModel },
    /// One GP with unit weights on the aggregated supports of every process.
    AggGp { gprn: GprnModel },
}

/// Latent predictive moments plus the noise variance of the requested level.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub noise: f64,
}

impl Prediction {
    pub fn total_var(&self) -> Vec<f64> {
        self.var.iter().map(|v| v + self.noise).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: FittedModel,
    pub history: History,
    pub diagnostics: BTreeMap<String, f64>,
}

fn pooled(ds: &MultiResDataset, s: &ModelSettings, seed: u64) -> Result<GprnModel> {
    let cfg = GprnConfig { q: 1, k: 1, weights: WeightMode::Constant { values: vec![1.0; ds.num_tasks()] }, seed, ..s.gprn.clone() };
    GprnModel::init(ds, &cfg)
}

pub fn fit_model(kind: ModelKind, ds: &MultiResDataset, s: &ModelSettings, seed: u64) -> Result<FitOutput> {
    let mut diagnostics = BTreeMap::new();
    let gprn_fit = |ds: &MultiResDataset, m: GprnModel, cfg: &GprnFitConfig, diag: &mut BTreeMap<String, f64>| -> Result<(GprnModel, History)> {
        let fit = fit_mr_gprn(&m, ds, cfg)?;
        diag.insert("phi".into(), fit.phi);
        if let Some(v) = fit.phi_ribatet {
            diag.insert("phi_ribatet".into(), v);
        }
        if let Some(v) = fit.phi_lyddon {
            diag.insert("phi_lyddon".into(), v);
        }
        diag.insert("elbo".into(), fit.model.elbo(ds)?);
        Ok((fit.model, fit.history))
    };
    let (model, history) = match kind {
        ModelKind::MrGprn | ModelKind::MrGprnExp => {
            let mut cfg = GprnConfig { seed, ..s.gprn.clone() };
            if kind == ModelKind::MrGprnExp {
                cfg.weights = WeightMode::ExpGp;
            } else if cfg.weights == WeightMode::ExpGp {
                cfg.weights = WeightMode::Gp;
            }
            let (m, h) = gprn_fit(ds, GprnModel::init(ds, &cfg)?, &s.gprn_fit, &mut diagnostics)?;
            (if kind == ModelKind::MrGprn { FittedModel::MrGprn { gprn: m } } else { FittedModel::MrGprnExp { gprn: m } }, h)
        }
        ModelKind::CenterPoint => {
            let cp = ds.to_center_points();
            let cfg = GprnFitConfig { phi: crate::fit::PhiMode::One, ..s.gprn_fit.clone() };
            let (m, h) = gprn_fit(&cp, pooled(&cp, s, seed)?, &cfg, &mut diagnostics)?;
            (FittedModel::CenterPoint { gprn: m }, h)
        }
        ModelKind::AggGp => {
            let cfg = GprnFitConfig { phi: crate::fit::PhiMode::One, ..s.gprn_fit.clone() };
            let (m, h) = gprn_fit(ds, pooled(ds, s, seed)?, &cfg, &mut diagnostics)?;
            (FittedModel::AggGp { gprn: m }, h)
        }
        ModelKind::MrDgp => {
            let tree = DgpTree::build(ds, &DgpConfig { seed, ..s.dgp.clone() })?;
            let fit = fit_mr_dgp(&tree, ds, &s.dgp_fit)?;
            for (stage, v) in &fit.stage_elbo {
                diagnostics.insert(format!("elbo_{stage}"), *v);
            }
            (FittedModel::MrDgp { tree: fit.tree }, fit.history)
        }
        ModelKind::Mcmc => return Err(Error::invalid("mcmc has no fitted artifact; use the mcmc command")),
    };
    Ok(FitOutput { model, history, diagnostics })
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::MrGprn { .. } => ModelKind::MrGprn,
            FittedModel::MrGprnExp { .. } => ModelKind::MrGprnExp,
            FittedModel::MrDgp { .. } => ModelKind::MrDgp,
            FittedModel::CenterPoint { .. } => ModelKind::CenterPoint,
            FittedModel::AggGp { .. } => ModelKind::AggGp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FittedModel::MrDgp { tree } => tree.input_dim,
            FittedModel::MrGprn { gprn } | FittedModel::MrGprnExp { gprn } | FittedModel::CenterPoint { gprn } | FittedModel::AggGp { gprn } => {
                gprn.f[0].z[0].len()
            }
        }
    }

    /// Predictive moments for process `(a, p)` at the rows of `x`.
    pub fn predict(&self, x: &DMatrix<f64>, process: usize, task: usize) -> Result<Prediction> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.ncols() });
        }
        match self {
            FittedModel::MrDgp { tree } => {
                let p = tree.predict(x, (process, task))?;
                Ok(Prediction { mean: p.mean, var: p.var, noise: tree.level_noise((process, task))? })
            }
            FittedModel::MrGprn { gprn } | FittedModel::MrGprnExp { gprn } | FittedModel::CenterPoint { gprn } | FittedModel::AggGp { gprn } => {
                let (m, v) = gprn.predict_latent(x, task)?;
                let noise = gprn.noise[gprn.noise_index(process, task)?].variance;
                Ok(Prediction { mean: m.as_slice().to_vec(), var: v.as_slice().to_vec(), noise })
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("bad model file: {e}")))
    }
}

/// Predictions CSV: `dim_0,…,level_a,level_p,mean,var,noise_var`, where `var`
/// is the latent variance.
pub fn predictions_csv(x: &DMatrix<f64>, level: (usize, usize), p: &Prediction) -> String {
    let mut s = String::new();
    for d in 0..x.ncols() {
        let _ = write!(s, "dim_{d},");
    }
    s.push_str("level_a,level_p,mean,var,noise_var\n");
    for i in 0..x.nrows() {
        for d in 0..x.ncols() {
            let _ = write!(s, "{:?},", x[(i, d)]);
        }
        let _ = writeln!(s, "{},{},{:?},{:?},{:?}", level.0, level.1, p.mean[i], p.var[i], p.noise);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_csv_layout() {
        let x = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let p = Prediction { mean: vec![0.1, 0.2], var: vec![1.0, 2.0], noise: 0.25 };
        let s = predictions_csv(&x, (1, 1), &p);
        assert_eq!(s, "dim_0,level_a,level_p,mean,var,noise_var\n0.5,1,1,0.1,1.0,0.25\n1.0,1,1,0.2,2.0,0.25\n");
    }

    #[test]
    fn model_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        let e = "gp".parse::<ModelKind>().unwrap_err().to_string();
        assert!(e.contains("mr-dgp") && e.contains("agg-gp"), "{e}");
    }
}
