//! Training pipelines for the shallow and the deep model.

use crate::autodiff::{Tape, Var};
use crate::composite::{self, SandwichEstimate, TermGradients};
use crate::dataset::MultiResDataset;
use crate::dgp::{DgpData, DgpObjective, DgpTree};
use crate::error::{Error, Result};
use crate::exact::{sequential_terms_ad, LatentAd, ProcessAd};
use crate::gprn::{param_slice, GprnData, GprnModel, GprnObjective, GprnTarget, WeightMode};
use crate::params::{lower_positions, ParamVector};
use crate::trainer::{adam, run_schedule, tape_value_grad, AdamConfig, History, Objective, Stage};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// How the composite weight is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PhiMode {
    /// Plain product likelihood.
    One,
    Fixed(f64),
    Ribatet,
    Lyddon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprnFitConfig {
    pub phi: PhiMode,
    /// Iterations of the pinned-variance ELBO fit used as the MLE surrogate.
    pub mle_iters: usize,
    /// Iterations refining the weight parameters on the likelihood alone.
    pub refine_iters: usize,
    /// Variational and kernel parameters with the noise held fixed.
    pub stage1_iters: usize,
    pub joint_iters: usize,
    pub lr: f64,
    /// Parameters the sandwich matrices are computed over.
    pub subset: Vec<String>,
    /// Standard deviation of `q(u)` during the MLE surrogate.
    pub pinned_std: f64,
    /// Use the closed-form `q(u)` between hyperparameter steps when the model
    /// allows it (one latent function, constant weights).
    pub conjugate: bool,
    /// Adam iterations between closed-form `q(u)` updates.
    pub inner_iters: usize,
}

impl Default for GprnFitConfig {
    fn default() -> Self {
        GprnFitConfig {
            phi: PhiMode::One,
            mle_iters: 600,
            refine_iters: 300,
            stage1_iters: 1000,
            joint_iters: 1000,
            lr: 1e-2,
            subset: vec!["f[*].kernel.*".into(), "noise*".into()],
            pinned_std: 1e-3,
            conjugate: true,
            inner_iters: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GprnFit {
    pub model: GprnModel,
    pub phi: f64,
    pub history: History,
    pub sandwich: Option<SandwichEstimate>,
    pub phi_ribatet: Option<f64>,
    pub phi_lyddon: Option<f64>,
}

/// Per-block likelihood scores over a parameter subset, everything else held
/// at `base`.
struct BlockScores<'a> {
    model: &'a GprnModel,
    params: &'a ParamVector,
    subset: Vec<usize>,
    blocks: Vec<GprnData>,
}

impl TermGradients for BlockScores<'_> {
    fn term_gradients(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut full = self.params.values.clone();
        for (&i, &v) in self.subset.iter().zip(theta) {
            full[i] = v;
        }
        self.blocks
            .iter()
            .map(|b| {
                let (_, g) = tape_value_grad(&full, |t, th| {
                    let ad = self.model.build_ad(t, th, self.params)?;
                    self.model.ell_ad(t, &ad, b)
                })?;
                Ok(self.subset.iter().map(|&i| g[i]).collect())
            })
            .collect()
    }
}

fn pin_covariances(model: &mut GprnModel, std: f64) {
    for b in model.f.iter_mut().chain(model.w.iter_mut()) {
        let packed: Vec<f64> = lower_positions(b.m()).iter().map(|&(i, j)| if i == j { std } else { 0.0 }).collect();
        for c in b.chols.iter_mut() {
            *c = packed.clone();
        }
    }
}

/// Composite MLE followed by the sandwich estimate.
///
/// With constant weights every process has a closed-form marginal likelihood
/// and the composite likelihood is their sum. Otherwise `q(u)` is pinned to a tiny covariance and the φ=1 ELBO is maximized over
/// everything else; the subset is then refined on the expected
/// log-likelihood alone so the estimate is a stationary point of the
/// function whose curvature is measured.
pub fn composite_mle(model: &GprnModel, ds: &MultiResDataset, cfg: &GprnFitConfig) -> Result<(GprnModel, SandwichEstimate, History)> {
    if matches!(model.weights, WeightMode::Constant { .. }) {
        return composite_marginal_mle(model, ds, cfg);
    }
    let mut m = model.clone();
    m.phi = 1.0;
    let data = GprnData::new(ds);
    let base = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut hist = History::default();
    if cfg.conjugate && m.supports_optimal_q() {
        let stage = Stage::new("mle", cfg.mle_iters, cfg.lr).freeze(&["*.z"]);
        hist.extend(optimize(&mut m, ds, &data, &[stage], cfg)?);
    } else {
        pin_covariances(&mut m, cfg.pinned_std);
        let stage = Stage::new("mle", cfg.mle_iters, cfg.lr).freeze(&["*.chol*", "*.z"]);
        hist.extend(optimize(&mut m, ds, &data, &[stage], &GprnFitConfig { conjugate: false, ..cfg.clone() })?);
    }
    let mut params = m.params();
    let subset_mask = params.mask(&cfg.subset)?;
    {
        let obj = GprnObjective { model: &m, data: &data, params: params.clone(), target: GprnTarget::Ell };
        hist.extend(adam(&obj, &mut params.values, &subset_mask, cfg.refine_iters, &base, "mle-refine", 0)?);
    }
    m.set_params(&params)?;
    let subset: Vec<usize> = (0..params.len()).filter(|&i| subset_mask[i]).collect();
    let names = params.names();
    let blocks = composite::independence_blocks(ds)
        .iter()
        .map(|b| composite::block_dataset(ds, b).map(|d| GprnData::new(&d)))
        .collect::<Result<Vec<_>>>()?;
    let scores = BlockScores { model: &m, params: &params, subset: subset.clone(), blocks };
    let theta: Vec<f64> = subset.iter().map(|&i| params.values[i]).collect();
    let est = composite::estimate_sandwich(&scores, &theta, subset.iter().map(|&i| names[i].clone()).collect())?;
    Ok((m, est, hist))
}

/// Estimates φ when asked, then fits the variational posterior in two
/// stages: noise fixed, then everything jointly.
pub fn fit_mr_gprn(model: &GprnModel, ds: &MultiResDataset, cfg: &GprnFitConfig) -> Result<GprnFit> {
    model.validate_for(ds)?;
    let mut history = History::default();
    let mut sandwich = None;
    let (mut phi_r, mut phi_l) = (None, None);
    let phi = match &cfg.phi {
        PhiMode::One => 1.0,
        PhiMode::Fixed(v) if *v > 0.0 => *v,
        PhiMode::Fixed(v) => return Err(Error::invalid(format!("composite weight {v} must be positive"))),
        mode => {
            let (_, est, h) = composite_mle(model, ds, cfg)?;
            history.extend(h);
            phi_r = composite::phi_ribatet(&est).ok();
            phi_l = composite::phi_lyddon(&est).ok();
            let phi = if *mode == PhiMode::Ribatet { composite::phi_ribatet(&est)? } else { composite::phi_lyddon(&est)? };
            sandwich = Some(est);
            phi
        }
    };
    let mut m = model.clone();
    m.phi = phi;
    let data = GprnData::new(ds);
    let stages = [
        Stage::new("fixed-noise", cfg.stage1_iters, cfg.lr).freeze(&["noise*", "*.z"]),
        Stage::new("joint", cfg.joint_iters, cfg.lr).freeze(&["*.z"]),
    ];
    history.extend(optimize(&mut m, ds, &data, &stages, cfg)?);
    Ok(GprnFit { model: m, phi, history, sandwich, phi_ribatet: phi_r, phi_lyddon: phi_l })
}

/// Runs the stages on the tempered ELBO. With the conjugate path, `q(u)` is
/// reset to its closed-form optimum every `inner_iters` steps and Adam only
/// moves the remaining parameters.
fn optimize(m: &mut GprnModel, ds: &MultiResDataset, data: &GprnData, stages: &[Stage], cfg: &GprnFitConfig) -> Result<History> {
    let base = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    if !(cfg.conjugate && m.supports_optimal_q()) {
        let mut params = m.params();
        let obj = GprnObjective { model: m, data, params: params.clone(), target: GprnTarget::Elbo };
        let hist = run_schedule(&obj, &mut params, stages, &base)?;
        m.set_params(&params)?;
        return Ok(hist);
    }
    let mut hist = History::default();
    let inner = cfg.inner_iters.max(1);
    for s in stages {
        let mut done = 0;
        while done < s.iters {
            m.set_optimal_q(ds)?;
            let n = inner.min(s.iters - done);
            let mut params = m.params();
            let mut mask = s.mask(&params)?;
            for (a, q) in mask.iter_mut().zip(params.mask(&["*.mean*".into(), "*.chol*".into()])?) {
                if q {
                    *a = false;
                }
            }
            let obj = GprnObjective::new(m, data, GprnTarget::Elbo);
            let cfg = AdamConfig { lr: s.lr, ..base.clone() };
            let mut h = adam(&obj, &mut params.values, &mask, n, &cfg, &s.name, 0)?;
            for r in h.rows.iter_mut() {
                r.iter += done;
            }
            hist.extend(h);
            m.set_params(&params)?;
            done += n;
        }
        m.set_optimal_q(ds)?;
    }
    Ok(hist)
}

/// Sum of per-process exact marginal likelihoods of a constant-weight model,
/// as a function of a parameter subset.
pub struct CompositeMarginal<'a> {
    model: &'a GprnModel,
    ds: &'a MultiResDataset,
    params: ParamVector,
    subset: Vec<usize>,
    /// Rows of the stacked term column per independence block.
    blocks: Vec<Rc<[usize]>>,
}

impl<'a> CompositeMarginal<'a> {
    pub fn new(model: &'a GprnModel, ds: &'a MultiResDataset, subset: &[String]) -> Result<Self> {
        let params = model.params();
        let mask = params.mask(subset)?;
        if mask.iter().zip(params.mask(&["f[*].kernel.*".into(), "noise*".into()])?).any(|(s, allowed)| *s && !allowed) {
            return Err(Error::invalid("the composite marginal likelihood only depends on kernel and noise parameters"));
        }
        let subset: Vec<usize> = (0..params.len()).filter(|&i| mask[i]).collect();
        let mut offsets = Vec::new();
        let mut off = 0;
        for p in &ds.processes {
            offsets.push(off);
            off += p.len();
        }
        let blocks = composite::independence_blocks(ds)
            .into_iter()
            .map(|b| b.iter().map(|&(a, n)| offsets[a] + n).collect::<Rc<[usize]>>())
            .collect();
        Ok(CompositeMarginal { model, ds, params, subset, blocks })
    }

    /// Current values of the subset.
    pub fn theta(&self) -> Vec<f64> {
        self.subset.iter().map(|&i| self.params.values[i]).collect()
    }

    pub fn subset_names(&self) -> Vec<String> {
        let names = self.params.names();
        self.subset.iter().map(|&i| names[i].clone()).collect()
    }

    fn full(&self, theta: &[f64]) -> Vec<f64> {
        let mut full = self.params.values.clone();
        for (&i, &v) in self.subset.iter().zip(theta) {
            full[i] = v;
        }
        full
    }

    fn terms(&self, t: &mut Tape, th: Var) -> Result<Var> {
        let m = self.model;
        let mut latents = Vec::new();
        for (q, b) in m.f.iter().enumerate() {
            let hyp = b
                .kernel
                .hypers()
                .iter()
                .map(|(name, _)| param_slice(t, th, &self.params, &format!("f[{q}].kernel.{name}")))
                .collect::<Result<Vec<_>>>()?;
            latents.push(LatentAd { kernel: &b.kernel, log_hypers: hyp });
        }
        let mut cols = Vec::new();
        for pr in &self.ds.processes {
            let log_noise = param_slice(t, th, &self.params, &format!("noise[{},{}]", pr.process, pr.task))?;
            let scales = (0..m.q).map(|q| m.constant_weight(pr.task, q)).collect();
            cols.push(sequential_terms_ad(t, &latents, &[ProcessAd { process: pr, scales, log_noise }])?);
        }
        Ok(t.vcat(&cols))
    }
}

impl Objective for CompositeMarginal<'_> {
    fn value_grad(&self, theta: &[f64], _epoch: u64) -> Result<(f64, Vec<f64>)> {
        let (v, g) = tape_value_grad(&self.full(theta), |t, th| {
            let terms = self.terms(t, th)?;
            Ok(t.sum(terms))
        })?;
        Ok((v, self.subset.iter().map(|&i| g[i]).collect()))
    }
}

impl TermGradients for CompositeMarginal<'_> {
    fn term_gradients(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut t = Tape::new();
        let full = self.full(theta);
        let th = t.var(nalgebra::DMatrix::from_column_slice(full.len(), 1, &full));
        let terms = self.terms(&mut t, th)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for rows in &self.blocks {
            let g = t.gather(terms, rows.clone());
            let s = t.sum(g);
            let grad = t.gradient(s).wrt(th);
            out.push(self.subset.iter().map(|&i| grad[i]).collect());
        }
        Ok(out)
    }
}

fn composite_marginal_mle(model: &GprnModel, ds: &MultiResDataset, cfg: &GprnFitConfig) -> Result<(GprnModel, SandwichEstimate, History)> {
    let obj = CompositeMarginal::new(model, ds, &cfg.subset)?;
    let mut theta = obj.theta();
    let all = vec![true; theta.len()];
    let hist = adam(&obj, &mut theta, &all, cfg.mle_iters, &AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, "mle", 0)?;
    let est = composite::estimate_sandwich(&obj, &theta, obj.subset_names())?;
    let mut m = model.clone();
    let mut p = obj.params.clone();
    p.values = obj.full(&theta);
    m.set_params(&p)?;
    Ok((m, est, hist))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpFitConfig {
    pub base_iters: usize,
    pub mapping_iters: usize,
    pub joint_iters: usize,
    pub lr: f64,
    /// Reset `q(u)` of the stage's conjugate nodes to its closed-form
    /// optimum every `inner_iters` steps.
    pub conjugate: bool,
    pub inner_iters: usize,
    /// Parent draws behind each closed-form mapping update.
    pub conjugate_samples: usize,
    pub train_inducing: bool,
    /// Patterns held at their initial values in every stage.
    pub frozen: Vec<String>,
    /// Draws for the ELBO recorded after each stage.
    pub eval_samples: usize,
}

impl Default for DgpFitConfig {
    fn default() -> Self {
        DgpFitConfig {
            base_iters: 300,
            mapping_iters: 300,
            joint_iters: 300,
            lr: 1e-2,
            conjugate: true,
            inner_iters: 50,
            conjugate_samples: 20,
            train_inducing: false,
            // The product variance is carried by factor[0]; a long covariate
            // lengthscale lets the mappings carry over outside the target's span.
            frozen: vec!["*.factor[0].lengthscale*".into(), "*.factor[1].variance".into()],
            eval_samples: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DgpFit {
    pub tree: DgpTree,
    pub history: History,
    /// Full-tree ELBO after each stage, on a fixed evaluation stream.
    pub stage_elbo: Vec<(String, f64)>,
}

/// Epoch reserved for the post-stage ELBO evaluations.
const EVAL_EPOCH: u64 = u64::MAX / 2;

struct DgpStage<'a> {
    name: &'a str,
    iters: usize,
    include: Option<Vec<bool>>,
    trainable: Vec<String>,
    /// Nodes whose `q(u)` gets the closed-form update.
    conjugate: Vec<usize>,
}

/// Layer-wise then joint training: base GPs on their own data, then the
/// mappings with the base GPs frozen, then everything.
pub fn fit_mr_dgp(tree: &DgpTree, ds: &MultiResDataset, cfg: &DgpFitConfig) -> Result<DgpFit> {
    let mut t = tree.clone();
    let data = DgpData::new(&t, ds)?;
    let bases: Vec<usize> = (0..t.nodes.len()).filter(|&i| t.nodes[i].is_base()).collect();
    let maps: Vec<usize> = (0..t.nodes.len()).filter(|&i| t.nodes[i].is_mapping()).collect();
    let n_nodes = t.nodes.len();
    let mask_of = |ids: &[usize]| -> Vec<bool> { (0..n_nodes).map(|i| ids.contains(&i)).collect() };
    let names_of = |t: &DgpTree, ids: &[usize]| -> Vec<String> { ids.iter().map(|&i| format!("{}.*", t.nodes[i].name)).collect() };
    // A tree without mappings has no kernel factors, so patterns aimed at
    // them are dropped there; anywhere else an unmatched pattern is an error.
    let all = t.params();
    let mut frozen = Vec::new();
    for p in &cfg.frozen {
        if maps.is_empty() && all.mask(std::slice::from_ref(p)).is_err() {
            continue;
        }
        all.mask(std::slice::from_ref(p))?;
        frozen.push(p.clone());
    }
    if !cfg.train_inducing {
        frozen.push("*.z".into());
    }
    let mut history = History::default();
    let mut stage_elbo = Vec::new();
    let mut epoch = 0u64;

    let stage = DgpStage {
        name: "base",
        iters: cfg.base_iters,
        include: Some(mask_of(&bases)),
        trainable: names_of(&t, &bases),
        conjugate: bases.clone(),
    };
    history.extend(run_dgp_stage(&mut t, ds, &data, &stage, &frozen, cfg, &mut epoch)?);
    stage_elbo.push(("base".to_string(), t.elbo(ds, EVAL_EPOCH, cfg.eval_samples)?));

    if !maps.is_empty() {
        for &m in &maps {
            t.reinit_mapping(m, ds)?;
        }
        let stage = DgpStage {
            name: "mapping",
            iters: cfg.mapping_iters,
            include: Some(mask_of(&maps)),
            trainable: names_of(&t, &maps),
            conjugate: maps.clone(),
        };
        history.extend(run_dgp_stage(&mut t, ds, &data, &stage, &frozen, cfg, &mut epoch)?);
        stage_elbo.push(("mapping".to_string(), t.elbo(ds, EVAL_EPOCH, cfg.eval_samples)?));
    }

    let stage = DgpStage { name: "joint", iters: cfg.joint_iters, include: None, trainable: vec![], conjugate: maps.clone() };
    history.extend(run_dgp_stage(&mut t, ds, &data, &stage, &frozen, cfg, &mut epoch)?);
    stage_elbo.push(("joint".to_string(), t.elbo(ds, EVAL_EPOCH, cfg.eval_samples)?));
    Ok(DgpFit { tree: t, history, stage_elbo })
}

fn run_dgp_stage(
    t: &mut DgpTree,
    ds: &MultiResDataset,
    data: &DgpData,
    stage: &DgpStage,
    frozen: &[String],
    cfg: &DgpFitConfig,
    epoch: &mut u64,
) -> Result<History> {
    let mut hist = History::default();
    let conj = cfg.conjugate && !stage.conjugate.is_empty();
    let update = |t: &mut DgpTree, epoch: u64| -> Result<()> {
        for &n in &stage.conjugate {
            if t.nodes[n].is_base() {
                t.set_optimal_base_q(n, ds)?;
            } else {
                t.set_optimal_mapping_q(n, ds, epoch, cfg.conjugate_samples)?;
            }
        }
        Ok(())
    };
    let mut skip: Vec<String> = frozen.to_vec();
    if conj {
        for &n in &stage.conjugate {
            skip.push(format!("{}.mean*", t.nodes[n].name));
            skip.push(format!("{}.chol*", t.nodes[n].name));
        }
    }
    let base = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let chunk = if conj { cfg.inner_iters.max(1) } else { stage.iters.max(1) };
    let mut done = 0;
    while done < stage.iters {
        if conj {
            update(t, *epoch)?;
        }
        let n = chunk.min(stage.iters - done);
        let mut params = t.params();
        let mut st = Stage::new(stage.name, n, cfg.lr);
        st.trainable = stage.trainable.clone();
        st.frozen = skip.clone();
        let mask = st.mask(&params)?;
        let obj = DgpObjective { tree: t, data, params: params.clone(), include: stage.include.clone(), samples: t.train_samples };
        let mut h = adam(&obj, &mut params.values, &mask, n, &base, stage.name, *epoch)?;
        for r in h.rows.iter_mut() {
            r.iter += done;
        }
        hist.extend(h);
        *epoch += n as u64 + 1;
        t.set_params(&params)?;
        done += n;
    }
    if conj {
        update(t, *epoch)?;
    }
    Ok(hist)
}
