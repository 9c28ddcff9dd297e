//! Tree-structured multi-resolution deep GPs.
//!
//! Each observation process gets a base GP fitted to its own data. Every
//! other process also feeds a mapping GP whose inputs are the covariates and
//! the parent's value; mappings are fitted to the target process. The
//! experts that predict the target are fused by a hierarchical mixture whose
//! weights come from the normalized log variances of the base GPs.
//!
//! Samples are propagated through the layers with the reparameterization
//! trick. Every draw comes from a stream keyed by node, data index, epoch
//! and sample number, so a stochastic objective is a deterministic function
//! of `(θ, epoch)`.

use crate::autodiff::{Tape, Var};
use crate::dataset::{MultiResDataset, ObservationProcess, SupportRegion};
use crate::error::{Error, Result};
use crate::gprn::{param_slice, GpBlock};
use crate::kernels::{Factor, Kernel, KernelSpec};
use crate::linalg;
use crate::params::{ParamVector, Transform};
use crate::rng;
use crate::svgp::{self, BagLayout, BlockAd, MarginalMoments, LN_2PI};
use crate::trainer::{tape_value, tape_value_grad, Objective};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Hierarchical weights from normalized predictive entropy.
    Entropy,
    /// Simple average of the parents.
    Average,
}

/// How log variances are mapped to the trust score `Î ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Min-max over the prediction batch; the smallest variance scores 1.
    MinMax,
    /// `tanh(½ log(prior / σ²))`, clipped at 0; independent of the batch.
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NodeKind {
    Base { block: GpBlock },
    /// GP on `(x, parent(x))`; the parent value is the last input column.
    Mapping { block: GpBlock, parent: usize },
    Mixture { parents: Vec<usize>, weighting: Weighting },
}

/// Observations a node is fitted to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Likelihood {
    pub process: usize,
    pub task: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpNode {
    pub id: usize,
    pub name: String,
    pub kind: NodeKind,
    pub likelihood: Option<Likelihood>,
    /// `(process, task)` a base node models.
    pub level: Option<(usize, usize)>,
}

impl DgpNode {
    pub fn block(&self) -> Option<&GpBlock> {
        match &self.kind {
            NodeKind::Base { block } | NodeKind::Mapping { block, .. } => Some(block),
            NodeKind::Mixture { .. } => None,
        }
    }

    fn block_mut(&mut self) -> Option<&mut GpBlock> {
        match &mut self.kind {
            NodeKind::Base { block } | NodeKind::Mapping { block, .. } => Some(block),
            NodeKind::Mixture { .. } => None,
        }
    }

    pub fn is_base(&self) -> bool {
        matches!(self.kind, NodeKind::Base { .. })
    }

    pub fn is_mapping(&self) -> bool {
        matches!(self.kind, NodeKind::Mapping { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpTree {
    pub nodes: Vec<DgpNode>,
    pub root: usize,
    /// `(process, task)` of the target observations.
    pub target: (usize, usize),
    pub input_dim: usize,
    pub train_samples: usize,
    pub predict_samples: usize,
    pub normalization: Normalization,
    /// Use the closed-form expected log-likelihood for base nodes instead of
    /// sampling them.
    pub analytic_base: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub target: (usize, usize),
    pub num_inducing: usize,
    pub mapping_inducing: usize,
    pub base_kernel: KernelSpec,
    /// Covariate factor of the mapping kernel; one lengthscale is broadcast.
    pub mapping_x_kernel: KernelSpec,
    /// Parent-value factor of the mapping kernel. Its variance stays fixed in
    /// training since only the product of the two variances is identified.
    pub mapping_f_kernel: KernelSpec,
    pub noise: f64,
    pub train_samples: usize,
    pub predict_samples: usize,
    pub normalization: Normalization,
    pub analytic_base: bool,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            target: (1, 1),
            num_inducing: 30,
            mapping_inducing: 30,
            base_kernel: KernelSpec::se(1.0, vec![1.0]),
            mapping_x_kernel: KernelSpec::se(1.0, vec![1e4]),
            mapping_f_kernel: KernelSpec::se(1.0, vec![4.0]),
            noise: 0.01,
            train_samples: 10,
            predict_samples: 100,
            normalization: Normalization::MinMax,
            analytic_base: true,
            seed: 0,
        }
    }
}

fn broadcast(spec: &KernelSpec, d: usize) -> KernelSpec {
    let mut s = spec.clone();
    if s.lengthscales.len() != d {
        s.lengthscales = vec![s.lengthscales[0]; d];
    }
    s
}

fn mapping_kernel(cfg: &DgpConfig, d: usize) -> Kernel {
    Kernel::product(vec![
        Factor { dims: (0..d).collect(), spec: broadcast(&cfg.mapping_x_kernel, d) },
        Factor { dims: vec![d], spec: broadcast(&cfg.mapping_f_kernel, 1) },
    ])
}

/// Covariates with one extra column appended.
fn augment(x: &DMatrix<f64>, h: &DVector<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { h[i] })
}

/// Hierarchical mixture weights from trust scores: expert `e` receives
/// `Î_e Π_{j<e} (1 − Î_j)` and the last expert takes the remainder, so the
/// weights at each point sum to one in floating point.
pub fn hierarchical_weights(info: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let e = info.len();
    if e == 0 {
        return Err(Error::invalid("mixture needs at least one expert"));
    }
    let n = info[0].len();
    if info.iter().any(|v| v.len() != n) {
        return Err(Error::invalid("experts disagree on the number of points"));
    }
    let mut w = vec![vec![0.0; n]; e];
    for i in 0..n {
        let mut rest = 1.0;
        let mut used = 0.0;
        for k in 0..e - 1 {
            // Capping keeps the running total at most one, so the
            // remainder is non-negative.
            let v = (rest * info[k][i].clamp(0.0, 1.0)).min(1.0 - used);
            w[k][i] = v;
            used += v;
            rest *= 1.0 - info[k][i].clamp(0.0, 1.0);
        }
        w[e - 1][i] = 1.0 - used;
    }
    Ok(w)
}

/// Trust score `Î` of one expert from its predictive variances.
pub fn normalized_information(var: &[f64], prior: f64, norm: Normalization) -> Result<Vec<f64>> {
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("expert variances must be positive"));
    }
    let info: Vec<f64> = var.iter().map(|v| 0.5 * v.ln()).collect();
    Ok(match norm {
        Normalization::MinMax => {
            let lo = info.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = info.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-12 {
                vec![1.0; var.len()]
            } else {
                info.iter().map(|i| (hi - i) / (hi - lo)).collect()
            }
        }
        Normalization::Tanh => info.iter().map(|i| (0.5 * prior.ln() - i).max(0.0).tanh()).collect(),
    })
}

/// Mixture weights from per-expert predictive variances, experts ordered
/// from most to least trusted.
pub fn moe_weights(expert_variances: &[Vec<f64>], priors: &[f64], norm: Normalization) -> Result<Vec<Vec<f64>>> {
    if expert_variances.is_empty() {
        return Err(Error::invalid("mixture needs at least one expert"));
    }
    let info = expert_variances
        .iter()
        .zip(priors)
        .map(|(v, p)| normalized_information(v, *p, norm))
        .collect::<Result<Vec<_>>>()?;
    hierarchical_weights(&info)
}

/// Per-likelihood layouts of a dataset.
#[derive(Clone, Debug)]
pub struct DgpData {
    pub layouts: Vec<Option<BagLayout>>,
}

impl DgpData {
    pub fn new(tree: &DgpTree, ds: &MultiResDataset) -> Result<Self> {
        let layouts = tree
            .nodes
            .iter()
            .map(|n| match &n.likelihood {
                None => Ok(None),
                Some(l) => ds
                    .find(l.process, l.task)
                    .map(|i| Some(BagLayout::new(&ds.processes[i])))
                    .ok_or_else(|| Error::invalid(format!("no process {} in task {} for {}", l.process, l.task, n.name))),
            })
            .collect::<Result<_>>()?;
        Ok(DgpData { layouts })
    }
}

/// Tape nodes of a tree.
pub struct TreeAd {
    pub blocks: Vec<Option<BlockAd>>,
    pub log_noise: Vec<Option<Var>>,
}

/// Empirical predictive distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpPrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// `S × n` function draws.
    pub samples: Vec<Vec<f64>>,
}

/// Inputs, bag sizes and cached base moments for one batch of f64 draws.
struct Batch<'a> {
    x: &'a DMatrix<f64>,
    sizes: &'a [usize],
    joint: bool,
    cache: RefCell<HashMap<usize, Rc<MarginalMoments>>>,
}

impl<'a> Batch<'a> {
    fn new(x: &'a DMatrix<f64>, sizes: &'a [usize]) -> Self {
        Batch { x, sizes, joint: sizes.iter().any(|&s| s > 1), cache: RefCell::new(HashMap::new()) }
    }
}

/// Reparameterized draw `μ + L ε` per bag.
fn draw(mm: &MarginalMoments, sizes: &[usize], eps: &[f64]) -> Result<DVector<f64>> {
    let mut out = mm.mean.clone();
    match &mm.cov {
        None => {
            for i in 0..out.len() {
                out[i] += mm.var[i].max(0.0).sqrt() * eps[i];
            }
        }
        Some(cov) => {
            let mut off = 0;
            for &s in sizes {
                let b = cov.view((off, off), (s, s)).into_owned();
                let scale = b.diagonal().mean().abs().max(1e-300);
                let (l, _) = linalg::cholesky_escalating(&b, scale)?;
                for i in 0..s {
                    out[off + i] += (0..=i).map(|k| l[(i, k)] * eps[off + k]).sum::<f64>();
                }
                off += s;
            }
        }
    }
    Ok(out)
}

impl DgpTree {
    /// Builds the tree for `ds`: one base GP per process, a mapping from each
    /// non-target process of the target task, and for every other task a
    /// mapping from its (averaged) base GPs, all fused at a root mixture.
    pub fn build(ds: &MultiResDataset, cfg: &DgpConfig) -> Result<Self> {
        let (ta, tp) = cfg.target;
        let ti = ds
            .find(ta, tp)
            .ok_or_else(|| Error::invalid(format!("target process {ta} of task {tp} is not in the dataset")))?;
        let d = ds.input_dim();
        let target_pts = ds.processes[ti].stacked_points();
        let mut nodes: Vec<DgpNode> = Vec::new();
        let mut base_of: HashMap<(usize, usize), usize> = HashMap::new();
        for pr in &ds.processes {
            let z = crate::trainer::kmeans(&pr.stacked_points(), cfg.num_inducing, 50)?;
            let block = GpBlock::prior(Kernel::Stationary(broadcast(&cfg.base_kernel, d)), &z, 1, 0.0)?;
            let id = nodes.len();
            base_of.insert((pr.process, pr.task), id);
            nodes.push(DgpNode {
                id,
                name: format!("f[{},{}]", pr.process, pr.task),
                kind: NodeKind::Base { block },
                likelihood: Some(Likelihood { process: pr.process, task: pr.task, noise: cfg.noise }),
                level: Some((pr.process, pr.task)),
            });
        }
        let mapping = |nodes: &mut Vec<DgpNode>, name: String, parent: usize| -> Result<usize> {
            let aug = augment(&target_pts, &DVector::zeros(target_pts.nrows()));
            let z = crate::trainer::kmeans(&aug, cfg.mapping_inducing.min(aug.nrows()), 50)?;
            let block = GpBlock::prior(mapping_kernel(cfg, d), &z, 1, 0.0)?;
            let id = nodes.len();
            nodes.push(DgpNode {
                id,
                name,
                kind: NodeKind::Mapping { block, parent },
                likelihood: Some(Likelihood { process: ta, task: tp, noise: cfg.noise }),
                level: None,
            });
            Ok(id)
        };
        let mut experts = vec![base_of[&(ta, tp)]];
        let mut same_task: Vec<&ObservationProcess> =
            ds.processes.iter().filter(|p| p.task == tp && p.process != ta).collect();
        same_task.sort_by_key(|p| (p.rank, p.process));
        for pr in same_task {
            let parent = base_of[&(pr.process, pr.task)];
            experts.push(mapping(&mut nodes, format!("g[{},{}]", pr.process, pr.task), parent)?);
        }
        for task in 1..=ds.num_tasks() {
            if task == tp {
                continue;
            }
            let mut procs: Vec<&ObservationProcess> = ds.processes.iter().filter(|p| p.task == task).collect();
            if procs.is_empty() {
                continue;
            }
            procs.sort_by_key(|p| (p.rank, p.process));
            let parent = if procs.len() == 1 {
                base_of[&(procs[0].process, task)]
            } else {
                let id = nodes.len();
                nodes.push(DgpNode {
                    id,
                    name: format!("m[{task}]"),
                    kind: NodeKind::Mixture {
                        parents: procs.iter().map(|p| base_of[&(p.process, task)]).collect(),
                        weighting: Weighting::Average,
                    },
                    likelihood: None,
                    level: None,
                });
                id
            };
            experts.push(mapping(&mut nodes, format!("h[{task}]"), parent)?);
        }
        let root = if experts.len() == 1 {
            experts[0]
        } else {
            let id = nodes.len();
            nodes.push(DgpNode {
                id,
                name: format!("m[{tp}]"),
                kind: NodeKind::Mixture { parents: experts, weighting: Weighting::Entropy },
                likelihood: None,
                level: None,
            });
            id
        };
        Ok(DgpTree {
            nodes,
            root,
            target: cfg.target,
            input_dim: d,
            train_samples: cfg.train_samples.max(1),
            predict_samples: cfg.predict_samples.max(1),
            normalization: cfg.normalization,
            analytic_base: cfg.analytic_base,
            seed: cfg.seed,
        })
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn base_node(&self, level: (usize, usize)) -> Option<usize> {
        self.nodes.iter().position(|n| n.level == Some(level))
    }

    /// Node predicting `level`: the root for the target, else its base GP.
    pub fn level_node(&self, level: (usize, usize)) -> Result<usize> {
        if level == self.target {
            return Ok(self.root);
        }
        self.base_node(level)
            .ok_or_else(|| Error::invalid(format!("unknown level: process {} task {}", level.0, level.1)))
    }

    /// Observation noise variance at `level`.
    pub fn level_noise(&self, level: (usize, usize)) -> Result<f64> {
        let id = self
            .base_node(level)
            .ok_or_else(|| Error::invalid(format!("unknown level: process {} task {}", level.0, level.1)))?;
        Ok(self.nodes[id].likelihood.as_ref().map_or(0.0, |l| l.noise))
    }

    pub fn params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        for n in &self.nodes {
            if let Some(b) = n.block() {
                b.push_params(&mut p, &n.name);
            }
            if let Some(l) = &n.likelihood {
                p.push(format!("{}.noise", n.name), &[l.noise], Transform::Log);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        for n in self.nodes.iter_mut() {
            let name = n.name.clone();
            if let Some(b) = n.block_mut() {
                b.read_params(p, &name)?;
            }
            if let Some(l) = n.likelihood.as_mut() {
                l.noise = p.get_scalar(&format!("{name}.noise"))?;
            }
        }
        Ok(())
    }

    pub fn build_ad(&self, t: &mut Tape, theta: Var, p: &ParamVector) -> Result<TreeAd> {
        let mut blocks = Vec::with_capacity(self.nodes.len());
        let mut log_noise = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            blocks.push(match n.block() {
                Some(b) => Some(b.build_ad(t, theta, p, &n.name)?),
                None => None,
            });
            log_noise.push(match &n.likelihood {
                Some(_) => Some(param_slice(t, theta, p, &format!("{}.noise", n.name))?),
                None => None,
            });
        }
        Ok(TreeAd { blocks, log_noise })
    }

    fn eps(&self, node: usize, key: &[u64], n: usize) -> Vec<f64> {
        let mut k = vec![rng::tag("dgp"), node as u64];
        k.extend_from_slice(key);
        rng::normals(&mut rng::stream(self.seed, &k), n)
    }

    /// Joint-within-bag draw of `node` at the layout's points.
    fn sample_ad(&self, t: &mut Tape, ad: &TreeAd, node: usize, x: &[Var], lay: &BagLayout, key: &[u64]) -> Result<Var> {
        match &self.nodes[node].kind {
            NodeKind::Base { .. } | NodeKind::Mapping { .. } => {
                let mut xin = x.to_vec();
                if let NodeKind::Mapping { parent, .. } = self.nodes[node].kind {
                    xin.push(self.sample_ad(t, ad, parent, x, lay, key)?);
                }
                let b = ad.blocks[node].as_ref().expect("GP node has a block");
                let mm = b.moments(t, &xin, &lay.full)[0];
                let eps: Rc<[f64]> = self.eps(node, key, lay.n_points()).into();
                let noise = t.block_chol_sample(mm.pair_cov, lay.sizes.clone(), eps)?;
                Ok(t.add(mm.mean, noise))
            }
            NodeKind::Mixture { parents, weighting } => {
                if *weighting != Weighting::Average {
                    return Err(Error::invalid("entropy-weighted mixtures only enter predictions"));
                }
                let mut acc: Option<Var> = None;
                for &p in parents {
                    let s = self.sample_ad(t, ad, p, x, lay, key)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => t.add(a, s),
                    });
                }
                Ok(t.scale(acc.expect("mixture has parents"), 1.0 / parents.len() as f64))
            }
        }
    }

    /// Gaussian expected log-likelihood of bag means given point moments.
    fn bag_ell(t: &mut Tape, mean: Var, pair_cov: Var, lay: &BagLayout, log_noise: Var) -> Var {
        let n = lay.n_bags() as f64;
        let y = t.col_const(&lay.y);
        let wt = t.mul_const(pair_cov, lay.upper.weight.clone());
        let quad = t.sum(wt);
        let ms = t.mul_const(mean, lay.point_weight.clone());
        let bag_mean = t.segment_sum(ms, lay.offsets.clone());
        let r = t.sub(y, bag_mean);
        let r2 = t.square(r);
        let sq = t.sum(r2);
        let tot = t.add(sq, quad);
        let neg = t.neg(log_noise);
        let inv = t.exp(neg);
        let e0 = t.scalar_mul(tot, inv);
        let e1 = t.scale(e0, -0.5);
        let ln = t.scale(log_noise, -0.5 * n);
        let e2 = t.add(e1, ln);
        t.offset(e2, -0.5 * n * LN_2PI)
    }

    /// Expected log-likelihood of the observations attached to `node`.
    pub fn ell_node_ad(&self, t: &mut Tape, ad: &TreeAd, node: usize, lay: &BagLayout, epoch: u64, samples: usize) -> Result<Var> {
        let log_noise = ad.log_noise[node].ok_or_else(|| Error::invalid("node has no likelihood"))?;
        let x = lay.input_cols(t);
        let b = ad.blocks[node].as_ref().expect("likelihood nodes are GPs");
        match self.nodes[node].kind {
            NodeKind::Base { .. } if self.analytic_base => {
                let mm = b.moments(t, &x, &lay.upper)[0];
                Ok(Self::bag_ell(t, mm.mean, mm.pair_cov, lay, log_noise))
            }
            NodeKind::Base { .. } => {
                let n = lay.n_bags() as f64;
                let y = t.col_const(&lay.y);
                let mut acc = Vec::with_capacity(samples);
                for s in 0..samples {
                    let f = self.sample_ad(t, ad, node, &x, lay, &[node as u64, epoch, s as u64])?;
                    let ms = t.mul_const(f, lay.point_weight.clone());
                    let bag = t.segment_sum(ms, lay.offsets.clone());
                    let r = t.sub(y, bag);
                    let r2 = t.square(r);
                    acc.push(t.sum(r2));
                }
                let all = t.vcat(&acc);
                let tot = t.sum(all);
                let neg = t.neg(log_noise);
                let inv = t.exp(neg);
                let e0 = t.scalar_mul(tot, inv);
                let e1 = t.scale(e0, -0.5 / samples as f64);
                let ln = t.scale(log_noise, -0.5 * n);
                let e2 = t.add(e1, ln);
                Ok(t.offset(e2, -0.5 * n * LN_2PI))
            }
            NodeKind::Mapping { parent, .. } => {
                let mut acc = Vec::with_capacity(samples);
                for s in 0..samples {
                    let h = self.sample_ad(t, ad, parent, &x, lay, &[node as u64, epoch, s as u64])?;
                    let mut xin = x.clone();
                    xin.push(h);
                    let mm = b.moments(t, &xin, &lay.upper)[0];
                    acc.push(Self::bag_ell(t, mm.mean, mm.pair_cov, lay, log_noise));
                }
                let all = t.vcat(&acc);
                let tot = t.sum(all);
                Ok(t.scale(tot, 1.0 / samples as f64))
            }
            NodeKind::Mixture { .. } => unreachable!("mixtures carry no likelihood"),
        }
    }

    /// ELBO restricted to the likelihood and KL terms of the `include`d
    /// nodes; every node when `include` is `None`.
    pub fn elbo_ad(
        &self,
        t: &mut Tape,
        ad: &TreeAd,
        data: &DgpData,
        include: Option<&[bool]>,
        epoch: u64,
        samples: usize,
    ) -> Result<Var> {
        let mut terms = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if include.is_some_and(|m| !m[i]) {
                continue;
            }
            if let Some(lay) = &data.layouts[i] {
                terms.push(self.ell_node_ad(t, ad, i, lay, epoch, samples)?);
            }
            if n.block().is_some() {
                let kl = ad.blocks[i].as_ref().unwrap().kl(t, 0);
                terms.push(t.neg(kl));
            }
        }
        let col = t.vcat(&terms);
        Ok(t.sum(col))
    }

    /// Stochastic ELBO estimate with `samples` draws per term.
    pub fn elbo(&self, ds: &MultiResDataset, epoch: u64, samples: usize) -> Result<f64> {
        let data = DgpData::new(self, ds)?;
        let p = self.params();
        tape_value(&p.values, |t, th| {
            let ad = self.build_ad(t, th, &p)?;
            self.elbo_ad(t, &ad, &data, None, epoch, samples)
        })
    }

    /// Whether the ELBO over `include` involves any random draw.
    pub fn is_stochastic(&self, include: Option<&[bool]>) -> bool {
        self.nodes.iter().enumerate().any(|(i, n)| {
            include.is_none_or(|m| m[i]) && n.likelihood.is_some() && (n.is_mapping() || !self.analytic_base)
        })
    }

    fn block_of(&self, node: usize) -> Result<&GpBlock> {
        self.nodes[node].block().ok_or_else(|| Error::invalid(format!("{} has no inducing block", self.nodes[node].name)))
    }

    fn cond(&self, node: usize, x: &DMatrix<f64>, full: bool) -> Result<MarginalMoments> {
        svgp::conditional_moments(&self.block_of(node)?.inducing(0), x, full)
    }

    fn base_moments(&self, b: &Batch, node: usize) -> Result<Rc<MarginalMoments>> {
        if let Some(m) = b.cache.borrow().get(&node) {
            return Ok(m.clone());
        }
        let m = Rc::new(self.cond(node, b.x, b.joint)?);
        b.cache.borrow_mut().insert(node, m.clone());
        Ok(m)
    }

    /// Node moments given a draw of its ancestors.
    fn node_moments(&self, b: &Batch, node: usize, key: &[u64]) -> Result<Rc<MarginalMoments>> {
        match &self.nodes[node].kind {
            NodeKind::Base { .. } => self.base_moments(b, node),
            NodeKind::Mapping { parent, .. } => {
                let h = self.sample_f64(b, *parent, key)?;
                Ok(Rc::new(self.cond(node, &augment(b.x, &h), b.joint)?))
            }
            NodeKind::Mixture { parents, .. } => {
                if b.joint {
                    return Err(Error::invalid("mixture moments are marginal only"));
                }
                let w = self.mixture_weights(node, b.x)?;
                let n = b.x.nrows();
                let (mut mean, mut var) = (DVector::zeros(n), DVector::zeros(n));
                for (e, &p) in parents.iter().enumerate() {
                    let m = self.node_moments(b, p, key)?;
                    for i in 0..n {
                        mean[i] += w[e][i] * m.mean[i];
                        var[i] += w[e][i] * w[e][i] * m.var[i];
                    }
                }
                Ok(Rc::new(MarginalMoments { mean, var, cov: None }))
            }
        }
    }

    fn sample_f64(&self, b: &Batch, node: usize, key: &[u64]) -> Result<DVector<f64>> {
        match &self.nodes[node].kind {
            NodeKind::Mixture { parents, .. } => {
                let w = self.mixture_weights(node, b.x)?;
                let mut out = DVector::zeros(b.x.nrows());
                for (e, &p) in parents.iter().enumerate() {
                    let s = self.sample_f64(b, p, key)?;
                    for i in 0..out.len() {
                        out[i] += w[e][i] * s[i];
                    }
                }
                Ok(out)
            }
            _ => {
                let mm = self.node_moments(b, node, key)?;
                draw(&mm, b.sizes, &self.eps(node, key, b.x.nrows()))
            }
        }
    }

    /// Predictive variance of the base GPs an expert rests on, and their prior variance.
    fn support_variance(&self, node: usize, x: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
        match &self.nodes[node].kind {
            NodeKind::Base { block } => {
                let m = self.cond(node, x, false)?;
                Ok((m.var.iter().map(|v| v.max(1e-300)).collect(), block.kernel.variance() + block.kernel.jitter()))
            }
            NodeKind::Mapping { parent, .. } => self.support_variance(*parent, x),
            NodeKind::Mixture { parents, .. } => {
                let mut acc = vec![0.0; x.nrows()];
                let mut prior = 0.0;
                for &p in parents {
                    let (v, pv) = self.support_variance(p, x)?;
                    acc.iter_mut().zip(v).for_each(|(a, v)| *a += v / parents.len() as f64);
                    prior += pv / parents.len() as f64;
                }
                Ok((acc, prior))
            }
        }
    }

    /// Per-parent weights of a mixture node at `x` (parents × points).
    pub fn mixture_weights(&self, node: usize, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        match &self.nodes[node].kind {
            NodeKind::Mixture { parents, weighting: Weighting::Average } => {
                Ok(vec![vec![1.0 / parents.len() as f64; x.nrows()]; parents.len()])
            }
            NodeKind::Mixture { parents, weighting: Weighting::Entropy } => {
                let (vars, priors): (Vec<_>, Vec<_>) =
                    parents.iter().map(|&p| self.support_variance(p, x)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
                moe_weights(&vars, &priors, self.normalization)
            }
            _ => Err(Error::invalid(format!("{} is not a mixture", self.nodes[node].name))),
        }
    }

    /// Draws of `q(f)` at `x`, jointly over all rows.
    pub fn marginal_sample(&self, node: usize, x: &DMatrix<f64>, samples: usize) -> Result<Vec<DVector<f64>>> {
        let joint = !matches!(self.nodes[node].kind, NodeKind::Mixture { weighting: Weighting::Entropy, .. });
        let sizes = if joint { vec![x.nrows()] } else { vec![1; x.nrows()] };
        let b = Batch::new(x, &sizes);
        (0..samples).map(|s| self.sample_f64(&b, node, &[rng::tag("marginal"), s as u64])).collect()
    }

    /// Propagated predictive at `x` for any node, from `samples` draws.
    pub fn predict_node(&self, node: usize, x: &DMatrix<f64>, samples: usize) -> Result<DgpPrediction> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: x.ncols() });
        }
        let n = x.nrows();
        let sizes = vec![1; n];
        let b = Batch::new(x, &sizes);
        let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
        let mut draws = Vec::with_capacity(samples);
        for s in 0..samples {
            let mm = self.node_moments(&b, node, &[rng::tag("predict"), s as u64])?;
            let eps = self.eps(node, &[rng::tag("draw"), s as u64], n);
            let mut d = Vec::with_capacity(n);
            for i in 0..n {
                let (mu, v) = (mm.mean[i], mm.var[i].max(0.0));
                m1[i] += mu;
                m2[i] += v + mu * mu;
                d.push(mu + v.sqrt() * eps[i]);
            }
            draws.push(d);
        }
        let k = samples as f64;
        let mean: Vec<f64> = m1.iter().map(|v| v / k).collect();
        let var = m2.iter().zip(&mean).map(|(s, m)| (s / k - m * m).max(0.0)).collect();
        Ok(DgpPrediction { mean, var, samples: draws })
    }

    /// Latent predictive at `level` with the tree's prediction sample count.
    pub fn predict(&self, x: &DMatrix<f64>, level: (usize, usize)) -> Result<DgpPrediction> {
        self.predict_node(self.level_node(level)?, x, self.predict_samples)
    }

    /// Closed-form optimal `q(u)` of a base node under its own likelihood.
    pub fn set_optimal_base_q(&mut self, node: usize, ds: &MultiResDataset) -> Result<()> {
        let pr = self.attached(node, ds)?;
        let noise = self.nodes[node].likelihood.as_ref().unwrap().noise;
        let block = self.block_of(node)?;
        let pts = pr.stacked_points();
        let (btb, bty) = stats(block, &pts, pr, noise, 1.0)?;
        self.store_q(node, &btb, &bty)
    }

    /// Optimal `q(u)` of a mapping node given `samples` joint draws of its
    /// parent at the target points.
    pub fn set_optimal_mapping_q(&mut self, node: usize, ds: &MultiResDataset, epoch: u64, samples: usize) -> Result<()> {
        let parent = match self.nodes[node].kind {
            NodeKind::Mapping { parent, .. } => parent,
            _ => return Err(Error::invalid(format!("{} is not a mapping", self.nodes[node].name))),
        };
        let pr = self.attached(node, ds)?;
        let noise = self.nodes[node].likelihood.as_ref().unwrap().noise;
        let pts = pr.stacked_points();
        let sizes: Vec<usize> = pr.supports.iter().map(|s| s.len()).collect();
        let b = Batch::new(&pts, &sizes);
        let m = self.block_of(node)?.m();
        let (mut btb, mut bty) = (DMatrix::zeros(m, m), DMatrix::zeros(m, 1));
        for s in 0..samples {
            let h = self.sample_f64(&b, parent, &[rng::tag("conjugate"), node as u64, epoch, s as u64])?;
            let (a, c) = stats(self.block_of(node)?, &augment(&pts, &h), pr, noise, 1.0 / samples as f64)?;
            btb += a;
            bty += c;
        }
        self.store_q(node, &btb, &bty)
    }

    fn attached<'d>(&self, node: usize, ds: &'d MultiResDataset) -> Result<&'d ObservationProcess> {
        let l = self.nodes[node].likelihood.as_ref().ok_or_else(|| Error::invalid("node has no likelihood"))?;
        ds.find(l.process, l.task)
            .map(|i| &ds.processes[i])
            .ok_or_else(|| Error::invalid(format!("no process {} in task {}", l.process, l.task)))
    }

    fn store_q(&mut self, node: usize, btb: &DMatrix<f64>, bty: &DMatrix<f64>) -> Result<()> {
        let block = self.nodes[node].block_mut().expect("GP node");
        let kzz = block.kernel.gram_sym(&block.z_matrix())?;
        let (mean, chol) = svgp::optimal_q(&kzz, btb, bty)?;
        block.means[0] = mean;
        block.chols[0] = chol;
        Ok(())
    }

    /// Re-seeds a mapping's inducing inputs by k-means on the target points
    /// augmented with the parent's predictive mean, and resets `q(u)` to the
    /// prior.
    pub fn reinit_mapping(&mut self, node: usize, ds: &MultiResDataset) -> Result<()> {
        let parent = match self.nodes[node].kind {
            NodeKind::Mapping { parent, .. } => parent,
            _ => return Err(Error::invalid(format!("{} is not a mapping", self.nodes[node].name))),
        };
        let pts = self.attached(node, ds)?.stacked_points();
        let sizes = vec![1; pts.nrows()];
        let b = Batch::new(&pts, &sizes);
        let h = self.node_mean(&b, parent)?;
        let aug = augment(&pts, &h);
        let m = self.block_of(node)?.m();
        let z = crate::trainer::kmeans(&aug, m, 50)?;
        let kernel = self.block_of(node)?.kernel.clone();
        if let NodeKind::Mapping { block, .. } = &mut self.nodes[node].kind {
            *block = GpBlock::prior(kernel, &z, 1, 0.0)?;
        }
        Ok(())
    }

    /// Mean of a node whose ancestors are all base GPs or averages of them.
    fn node_mean(&self, b: &Batch, node: usize) -> Result<DVector<f64>> {
        match &self.nodes[node].kind {
            NodeKind::Base { .. } => Ok(self.base_moments(b, node)?.mean.clone()),
            NodeKind::Mapping { parent, .. } => {
                let h = self.node_mean(b, *parent)?;
                Ok(self.cond(node, &augment(b.x, &h), false)?.mean)
            }
            NodeKind::Mixture { parents, .. } => {
                let w = self.mixture_weights(node, b.x)?;
                let mut out = DVector::zeros(b.x.nrows());
                for (e, &p) in parents.iter().enumerate() {
                    let m = self.node_mean(b, p)?;
                    for i in 0..out.len() {
                        out[i] += w[e][i] * m[i];
                    }
                }
                Ok(out)
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

/// `BᵀΛ⁻¹B` and `BᵀΛ⁻¹y` for the bag-averaged rows `B = W K_xz`, scaled by `w`.
fn stats(block: &GpBlock, x: &DMatrix<f64>, pr: &ObservationProcess, noise: f64, w: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let z = block.z_matrix();
    let m = z.nrows();
    let kxz = block.kernel.gram(x, &z)?;
    let (mut btb, mut bty) = (DMatrix::zeros(m, m), DMatrix::zeros(m, 1));
    let mut off = 0;
    for (s, y) in pr.supports.iter().zip(&pr.targets) {
        let mut row = DMatrix::zeros(1, m);
        for i in 0..s.len() {
            row += kxz.row(off + i) * s.weight;
        }
        off += s.len();
        btb += row.transpose() * &row * (w / noise);
        bty += row.transpose() * (y * w / noise);
    }
    Ok((btb, bty))
}

/// ELBO of a tree over the included nodes, as an [`Objective`].
pub struct DgpObjective<'a> {
    pub tree: &'a DgpTree,
    pub data: &'a DgpData,
    pub params: ParamVector,
    pub include: Option<Vec<bool>>,
    pub samples: usize,
}

impl<'a> DgpObjective<'a> {
    pub fn new(tree: &'a DgpTree, data: &'a DgpData, include: Option<Vec<bool>>) -> Self {
        DgpObjective { tree, data, params: tree.params(), include, samples: tree.train_samples }
    }
}

impl Objective for DgpObjective<'_> {
    fn value_grad(&self, theta: &[f64], epoch: u64) -> Result<(f64, Vec<f64>)> {
        tape_value_grad(theta, |t, th| {
            let ad = self.tree.build_ad(t, th, &self.params)?;
            self.tree.elbo_ad(t, &ad, self.data, self.include.as_deref(), epoch, self.samples)
        })
    }

    fn deterministic(&self) -> bool {
        !self.tree.is_stochastic(self.include.as_deref())
    }
}

/// Point process at the rows of `x` (for degenerate-tree checks).
pub fn point_process(process: usize, task: usize, x: &DMatrix<f64>, y: &[f64]) -> Result<ObservationProcess> {
    let supports = x.row_iter().map(|r| SupportRegion::point(r.iter().copied().collect())).collect();
    ObservationProcess::new(process, task, y.to_vec(), supports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{gen_bias_triplet, BiasTripletConfig};
    use crate::dataset::discretize_region;
    use crate::trainer::check_gradient;

    fn small_pair() -> MultiResDataset {
        let x1: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let p1 = ObservationProcess::new(
            1,
            1,
            x1.iter().map(|x| (x * 0.9).sin() * 2.0).collect(),
            x1.iter().map(|&x| SupportRegion::point(vec![x])).collect(),
        )
        .unwrap();
        let mut y2 = Vec::new();
        let mut s2 = Vec::new();
        for c in 0..6 {
            let a = c as f64 - 1.0;
            y2.push(((a + 0.5) * 0.9).sin());
            s2.push(discretize_region(&[(a, a + 1.5)], &[3]).unwrap());
        }
        let p2 = ObservationProcess::new(2, 1, y2, s2).unwrap();
        MultiResDataset::new(vec![p1, p2]).unwrap()
    }

    fn cfg() -> DgpConfig {
        DgpConfig { num_inducing: 5, mapping_inducing: 5, seed: 3, ..Default::default() }
    }

    #[test]
    fn tree_shapes() {
        let ds = small_pair();
        let one = MultiResDataset::new(vec![ds.processes[0].clone()]).unwrap();
        let t1 = DgpTree::build(&one, &cfg()).unwrap();
        assert_eq!(t1.nodes.len(), 1);
        assert!(t1.nodes[t1.root].is_base());
        let t2 = DgpTree::build(&ds, &cfg()).unwrap();
        let kinds: Vec<&str> = t2
            .nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Base { .. } => "base",
                NodeKind::Mapping { .. } => "map",
                NodeKind::Mixture { .. } => "mix",
            })
            .collect();
        assert_eq!(kinds, ["base", "base", "map", "mix"]);
        assert_eq!(t2.block_of(2).unwrap().z_matrix().ncols(), 2);
        let s = gen_bias_triplet(1, &BiasTripletConfig::default()).unwrap();
        let t3 = DgpTree::build(&s.dataset, &DgpConfig::default()).unwrap();
        assert_eq!(t3.nodes.iter().filter(|n| n.is_base()).count(), 3);
        assert_eq!(t3.nodes.iter().filter(|n| n.is_mapping()).count(), 2);
        match &t3.nodes[t3.root].kind {
            NodeKind::Mixture { parents, .. } => assert_eq!(parents.len(), 3),
            _ => panic!("root should be a mixture"),
        }
        let bad = DgpConfig { target: (4, 1), ..cfg() };
        assert!(DgpTree::build(&ds, &bad).is_err());
    }

    #[test]
    fn hierarchical_weight_cases() {
        let w = hierarchical_weights(&[vec![1.0, 0.0, 0.3], vec![0.2, 0.0, 0.9], vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!((w[0][0], w[1][0], w[2][0]), (1.0, 0.0, 0.0));
        assert_eq!((w[0][1], w[1][1], w[2][1]), (0.0, 0.0, 1.0));
        let w = hierarchical_weights(&[vec![0.3], vec![0.0]]).unwrap();
        assert!((w[0][0] - 0.3).abs() < 1e-15 && (w[1][0] - 0.7).abs() < 1e-15);
        assert!(hierarchical_weights(&[]).is_err());
    }

    #[test]
    fn minmax_information_is_monotone() {
        let v = [0.5, 0.1, 2.0, 1.0];
        let i = normalized_information(&v, 1.0, Normalization::MinMax).unwrap();
        assert_eq!(i[1], 1.0);
        assert_eq!(i[2], 0.0);
        assert!(i[0] > i[3] && i[3] > i[2]);
        let t = normalized_information(&[1.0, 0.25, 1e-8], 1.0, Normalization::Tanh).unwrap();
        assert_eq!(t[0], 0.0);
        assert!(t[1] > 0.0 && t[2] > t[1] && t[2] <= 1.0);
    }

    #[test]
    fn degenerate_tree_matches_svgp_elbo() {
        let ds = small_pair();
        let one = MultiResDataset::new(vec![ds.processes[1].clone()]).unwrap();
        let mut tree = DgpTree::build(&one, &DgpConfig { target: (2, 1), ..cfg() }).unwrap();
        tree.set_optimal_base_q(0, &one).unwrap();
        let b = tree.nodes[0].block().unwrap().inducing(0);
        let noise = tree.nodes[0].likelihood.as_ref().unwrap().noise;
        let pr = &one.processes[0];
        let mm = svgp::conditional_moments(&b, &pr.stacked_points(), true).unwrap();
        let cov = mm.cov.unwrap();
        let (mut ell, mut off) = (0.0, 0);
        for (s, y) in pr.supports.iter().zip(&pr.targets) {
            let n = s.len();
            let m: f64 = (0..n).map(|i| mm.mean[off + i]).sum::<f64>() / n as f64;
            let v: f64 = cov.view((off, off), (n, n)).sum() / (n * n) as f64;
            ell += svgp::gaussian_ell(&[*y], &[m], &[v], noise);
            off += n;
        }
        let exact = ell - svgp::gauss_kl(&b).unwrap();
        assert!((tree.elbo(&one, 0, 1).unwrap() - exact).abs() < 1e-8 * exact.abs().max(1.0));
        // The sampled estimator agrees within its Monte Carlo error.
        tree.analytic_base = false;
        let vals: Vec<f64> = (0..40).map(|e| tree.elbo(&one, e, 25).unwrap()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!((m - exact).abs() < 3.0 * sd / (vals.len() as f64).sqrt() + 1e-9, "{m} vs {exact}");
    }

    #[test]
    fn elbo_is_deterministic_per_epoch() {
        let ds = small_pair();
        let mut tree = DgpTree::build(&ds, &cfg()).unwrap();
        tree.set_optimal_mapping_q(2, &ds, 0, 4).unwrap();
        assert_eq!(tree.elbo(&ds, 4, 3).unwrap().to_bits(), tree.elbo(&ds, 4, 3).unwrap().to_bits());
        assert_ne!(tree.elbo(&ds, 4, 3).unwrap(), tree.elbo(&ds, 5, 3).unwrap());
    }

    #[test]
    fn gradient_check_with_frozen_streams() {
        let ds = small_pair();
        let mut tree = DgpTree::build(&ds, &cfg()).unwrap();
        tree.set_optimal_base_q(0, &ds).unwrap();
        tree.set_optimal_base_q(1, &ds).unwrap();
        tree.set_optimal_mapping_q(2, &ds, 0, 4).unwrap();
        for analytic in [true, false] {
            tree.analytic_base = analytic;
            let data = DgpData::new(&tree, &ds).unwrap();
            let obj = DgpObjective::new(&tree, &data, None);
            let th = obj.params.values.clone();
            let r = check_gradient(&obj, &th, 7, None, 1e-5).unwrap();
            assert!(r.passes(1e-4), "analytic={analytic}: {r:?}");
        }
    }

    #[test]
    fn parent_blind_mapping_is_one_layer_gp() {
        let ds = small_pair();
        let mut c = cfg();
        c.mapping_f_kernel = KernelSpec::se(1.0, vec![1e12]);
        let mut tree = DgpTree::build(&ds, &c).unwrap();
        tree.set_optimal_base_q(1, &ds).unwrap();
        tree.set_optimal_mapping_q(2, &ds, 0, 2).unwrap();
        let b = tree.nodes[2].block().unwrap();
        let zx = b.z_matrix().columns(0, 1).into_owned();
        let xk = match &b.kernel {
            Kernel::Product { factors, .. } => factors[0].spec.clone(),
            _ => unreachable!(),
        };
        let one = svgp::InducingBlock {
            z: zx,
            mean: DVector::from_column_slice(&b.means[0]),
            cov: b.inducing(0).cov,
            kernel: Kernel::Stationary(xk),
        };
        let x = DMatrix::from_fn(4, 1, |i, _| 0.7 + i as f64);
        let exact = svgp::conditional_moments(&one, &x, false).unwrap();
        let draws = tree.marginal_sample(2, &x, 4000).unwrap();
        for i in 0..4 {
            let v: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            assert!((m - exact.mean[i]).abs() < 3.0 * sd / (v.len() as f64).sqrt(), "{i}: {m} vs {}", exact.mean[i]);
        }
        let again = tree.marginal_sample(2, &x, 3).unwrap();
        assert_eq!(draws[..3], again[..]);
    }

    #[test]
    fn one_zero_weights_pass_expert_through() {
        let ds = small_pair();
        let mut tree = DgpTree::build(&ds, &cfg()).unwrap();
        tree.set_optimal_base_q(0, &ds).unwrap();
        // Min-max over a single point gives Î = 1 for the first expert.
        let x = DMatrix::from_element(1, 1, 2.0);
        let w = tree.mixture_weights(tree.root, &x).unwrap();
        assert_eq!((w[0][0], w[1][0]), (1.0, 0.0));
        let p = tree.predict_node(tree.root, &x, 5).unwrap();
        let e = tree.predict_node(0, &x, 5).unwrap();
        assert_eq!(p.mean, e.mean);
        assert_eq!(p.var, e.var);
    }

    #[test]
    fn json_round_trip() {
        let ds = small_pair();
        let tree = DgpTree::build(&ds, &cfg()).unwrap();
        let s = tree.to_json().unwrap();
        let back = DgpTree::from_json(&s).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.to_json().unwrap(), s);
    }
}
