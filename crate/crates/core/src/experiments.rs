//! The desk-scale synthetic experiments: posterior contraction on the
//! dependent pair, bias propagation on the bias triplet, and inter-task
//! transfer at several aggregation levels.

use crate::composite::{noise_std_posterior, phi_lyddon, phi_ribatet};
use crate::dataset::synth::{gen_bias_triplet, gen_dependent_pair, gen_intertask, BiasTripletConfig, DependentPairConfig, InterTaskConfig};
use crate::dataset::TestSet;
use crate::dgp::Normalization;
use crate::error::{Error, Result};
use crate::fit::{composite_mle, fit_mr_gprn, GprnFitConfig, PhiMode};
use crate::gprn::{GprnConfig, GprnModel, WeightMode};
use crate::kernels::KernelSpec;
use crate::mcmc::{self, McmcConfig, McmcLikelihood};
use crate::metrics::evaluate;
use crate::model::{fit_model, ModelKind, ModelSettings, Prediction};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Contraction,
    Bias,
    IntertaskSynthetic,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 3] = [ExperimentName::Contraction, ExperimentName::Bias, ExperimentName::IntertaskSynthetic];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentName::Contraction => "contraction",
            ExperimentName::Bias => "bias",
            ExperimentName::IntertaskSynthetic => "intertask-synthetic",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = ExperimentName::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown experiment '{s}' (valid: {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSettings {
    pub models: ModelSettings,
    pub mcmc: McmcConfig,
    /// Task-1 window lengths, in hours, for the inter-task experiment.
    pub aggregations: Vec<usize>,
    pub dependent_pair: DependentPairConfig,
    pub bias_triplet: BiasTripletConfig,
    pub intertask: InterTaskConfig,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            models: ModelSettings::default(),
            mcmc: McmcConfig::default(),
            aggregations: vec![2, 5, 10, 24],
            dependent_pair: DependentPairConfig::default(),
            bias_triplet: BiasTripletConfig::default(),
            intertask: InterTaskConfig::default(),
        }
    }
}

/// Baked-in settings per experiment.
pub fn default_settings(name: ExperimentName) -> ExperimentSettings {
    let mut s = ExperimentSettings::default();
    match name {
        ExperimentName::Contraction => {
            s.models.gprn = GprnConfig { weights: WeightMode::Constant { values: vec![1.0] }, ..GprnConfig::default() };
        }
        ExperimentName::Bias => {
            s.models.gprn.f_kernel = KernelSpec::se(1.0, vec![1.0]);
            s.models.gprn.num_inducing = 30;
            s.models.gprn.noise = 0.01;
        }
        ExperimentName::IntertaskSynthetic => {
            // Inputs are in days; the fast component has a 9 hour period.
            s.models.gprn.f_kernel = KernelSpec::se(1.0, vec![0.01]);
            s.models.gprn.w_kernel = KernelSpec::se(1.0, vec![1.0]);
            s.models.gprn.num_inducing = 60;
            s.models.gprn.noise = 0.01;
            s.models.dgp.target = (1, 2);
            s.models.dgp.base_kernel = KernelSpec::se(1.0, vec![0.01]);
            s.models.dgp.num_inducing = 60;
            s.models.dgp.normalization = Normalization::MinMax;
        }
    }
    s
}

/// A labelled numeric table, written with round-trip float formatting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((label.into(), values));
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == col)?;
        self.rows.iter().find(|(l, _)| l == row).map(|(_, v)| v[j])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (l, v) in &self.rows {
            s.push_str(l);
            for x in v {
                s.push_str(&format!(",{x:?}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub name: ExperimentName,
    pub seed: u64,
    pub table: Table,
    /// Extra output files, `(file name, contents)`.
    pub files: Vec<(String, String)>,
    pub notes: BTreeMap<String, String>,
}

impl Report {
    /// Writes `metrics.csv`, `notes.txt` and the extra files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let mut put = |name: &str, body: &str| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            out.push(p);
            Ok(())
        };
        put("metrics.csv", &self.table.to_csv())?;
        let mut notes = format!("experiment={}\nseed={}\n", self.name, self.seed);
        for (k, v) in &self.notes {
            notes.push_str(&format!("{k}={v}\n"));
        }
        put("notes.txt", &notes)?;
        for (n, b) in &self.files {
            put(n, b)?;
        }
        Ok(out)
    }
}

/// `x…,truth,mean,var,lower,upper` with a ±2σ latent band.
pub fn curve_csv(test: &TestSet, mean: &[f64], var: &[f64]) -> String {
    let d = test.x.first().map_or(0, |r| r.len());
    let mut s = String::new();
    for j in 0..d {
        s.push_str(&format!("dim_{j},"));
    }
    s.push_str("truth,mean,var,lower,upper\n");
    for i in 0..test.y.len() {
        for v in &test.x[i] {
            s.push_str(&format!("{v:?},"));
        }
        let sd = var[i].max(0.0).sqrt();
        s.push_str(&format!("{:?},{:?},{:?},{:?},{:?}\n", test.y[i], mean[i], var[i], mean[i] - 2.0 * sd, mean[i] + 2.0 * sd));
    }
    s
}

/// Fraction of targets inside the central 95% latent interval.
pub fn coverage(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let hit = y.iter().zip(mean).zip(var).filter(|((y, m), v)| (*y - *m).abs() <= 1.959964 * v.max(0.0).sqrt()).count();
    hit as f64 / y.len() as f64
}

pub fn run_experiment(name: ExperimentName, seed: u64, s: &ExperimentSettings) -> Result<Report> {
    match name {
        ExperimentName::Contraction => run_contraction(seed, s),
        ExperimentName::Bias => run_bias(seed, s),
        ExperimentName::IntertaskSynthetic => run_intertask(seed, s),
    }
}

/// Product versus corrected composite posterior of the process-1 noise std on
/// the dependent pair, against a correctly specified MCMC posterior.
pub fn run_contraction(seed: u64, s: &ExperimentSettings) -> Result<Report> {
    let syn = gen_dependent_pair(seed, &s.dependent_pair)?;
    let ds = &syn.dataset;
    let test = &syn.test[0];
    let x = test.points();
    let gcfg = GprnConfig { seed, ..s.models.gprn.clone() };
    let model = GprnModel::init(ds, &gcfg)?;
    let fit_cfg = GprnFitConfig { phi: PhiMode::Ribatet, ..s.models.gprn_fit.clone() };
    let (_, est, _) = composite_mle(&model, ds, &fit_cfg)?;
    let phi = phi_ribatet(&est)?;
    let (sigma, sd_product) = noise_std_posterior(&est, "noise[1,1]", 1.0)?;
    let (_, sd_corrected) = noise_std_posterior(&est, "noise[1,1]", phi)?;

    let mut table = Table::new(&["sigma1", "sigma1_std", "coverage", "phi"]);
    let mut files = Vec::new();
    for (label, mode, w, sd) in [("product", PhiMode::One, 1.0, sd_product), ("corrected", PhiMode::Fixed(phi), phi, sd_corrected)] {
        let fit = fit_mr_gprn(&model, ds, &GprnFitConfig { phi: mode, ..s.models.gprn_fit.clone() })?;
        let (m, v) = fit.model.predict_latent(&x, 1)?;
        table.push(label, vec![sigma, sd, coverage(&test.y, m.as_slice(), v.as_slice()), w]);
        files.push((format!("curve_{label}.csv"), curve_csv(test, m.as_slice(), v.as_slice())));
    }
    let mut notes = BTreeMap::new();
    let chains = [
        ("mcmc-oracle", McmcLikelihood::Oracle, vec![]),
        ("mcmc-product", McmcLikelihood::Composite, vec![1.0, 1.0]),
        ("mcmc-tempered", McmcLikelihood::Composite, vec![phi, phi]),
    ];
    for (label, lik, w) in chains {
        let cfg = McmcConfig { likelihood: lik, phi: w.clone(), seed, ..s.mcmc.clone() };
        let chain = mcmc::run_chain(ds, &cfg)?;
        let summ = mcmc::summarize(&chain, cfg.burn_in.min(cfg.iters - 1))?;
        let sd = summ.iter().find(|p| p.name == "noise_std[1,1]").ok_or_else(|| Error::invalid("chain has no process-1 noise"))?;
        let (m, v) = mcmc::predict(&chain, &x)?;
        table.push(label, vec![sd.mean, sd.std, coverage(&test.y, m.as_slice(), v.as_slice()), w.first().copied().unwrap_or(1.0)]);
        files.push((format!("curve_{label}.csv"), curve_csv(test, m.as_slice(), v.as_slice())));
        for (b, a) in &chain.acceptance {
            notes.insert(format!("{label}.acceptance.{b}"), format!("{a:.4}"));
        }
        for w in &chain.warnings {
            notes.insert(format!("{label}.warning"), w.clone());
        }
    }
    notes.insert("phi_ribatet".into(), format!("{phi:?}"));
    notes.insert("phi_lyddon".into(), format!("{:?}", phi_lyddon(&est)?));
    notes.insert("sandwich_params".into(), est.param_names.join(" "));
    if let Some(w) = &est.warning {
        notes.insert("sandwich_warning".into(), w.clone());
    }
    Ok(Report { name: ExperimentName::Contraction, seed, table, files, notes })
}

fn predict_at(model: &crate::model::FittedModel, test: &TestSet) -> Result<Prediction> {
    model.predict(&test.points(), test.process, test.task)
}

fn metric_row(test: &TestSet, p: &Prediction) -> Result<Vec<f64>> {
    let m = evaluate(&test.y, &p.mean, &p.total_var())?;
    Ok(vec![m.rmse, m.mse, m.mape, m.nlpd])
}

const METRIC_COLUMNS: [&str; 4] = ["rmse", "mse", "mape", "nlpd"];

/// Biased, scaled processes at three resolutions; only process 1 is unbiased.
pub fn run_bias(seed: u64, s: &ExperimentSettings) -> Result<Report> {
    let syn = gen_bias_triplet(seed, &s.bias_triplet)?;
    let test = &syn.test[0];
    let mut table = Table::new(&METRIC_COLUMNS);
    let mut files = Vec::new();
    let mut notes = BTreeMap::new();
    for kind in [ModelKind::MrDgp, ModelKind::MrGprn, ModelKind::CenterPoint, ModelKind::AggGp] {
        let fit = fit_model(kind, &syn.dataset, &s.models, seed)?;
        let p = predict_at(&fit.model, test)?;
        table.push(kind.name(), metric_row(test, &p)?);
        files.push((format!("curve_{kind}.csv"), curve_csv(test, &p.mean, &p.var)));
        for (k, v) in &fit.diagnostics {
            notes.insert(format!("{kind}.{k}"), format!("{v:?}"));
        }
    }
    Ok(Report { name: ExperimentName::Bias, seed, table, files, notes })
}

/// Task 1 observed as window means of several lengths, task 2 hourly with a
/// held-out gap that is predicted.
pub fn run_intertask(seed: u64, s: &ExperimentSettings) -> Result<Report> {
    let mut table = Table::new(&METRIC_COLUMNS);
    let mut files = Vec::new();
    let mut notes = BTreeMap::new();
    for &agg in &s.aggregations {
        let cfg = InterTaskConfig { aggregation: agg, ..s.intertask.clone() };
        let syn = gen_intertask(seed, &cfg)?;
        let test = &syn.test[0];
        // Mixture weights normalize over the prediction batch, so predict the
        // whole hourly grid and read off the gap.
        let hours: Vec<f64> = (0..cfg.hours).map(|h| h as f64 / 24.0).collect();
        let grid = DMatrix::from_column_slice(hours.len(), 1, &hours);
        let idx: Vec<usize> = (cfg.gap.0..cfg.gap.1).collect();
        for kind in [ModelKind::MrGprn, ModelKind::MrDgp, ModelKind::CenterPoint, ModelKind::AggGp] {
            let fit = fit_model(kind, &syn.dataset, &s.models, seed)?;
            let full = fit.model.predict(&grid, test.process, test.task)?;
            let p = Prediction { mean: idx.iter().map(|&i| full.mean[i]).collect(), var: idx.iter().map(|&i| full.var[i]).collect(), noise: full.noise };
            let label = format!("{kind}/{agg}h");
            table.push(label.clone(), metric_row(test, &p)?);
            files.push((format!("curve_{kind}_{agg}h.csv"), curve_csv(test, &p.mean, &p.var)));
            for (k, v) in &fit.diagnostics {
                notes.insert(format!("{label}.{k}"), format!("{v:?}"));
            }
        }
    }
    Ok(Report { name: ExperimentName::IntertaskSynthetic, seed, table, files, notes })
}
