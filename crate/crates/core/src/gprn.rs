//! Multi-resolution GP regression network.
//!
//! Task `p` at input `x` is `Σ_q W_pq(x) f_q(x)`. An observation of process
//! `(a, p)` averages that quantity over its support region and adds
//! `N(0, σ²_{a,p})` noise. The variational posterior is a `K`-component
//! mixture over all inducing values; within a component every block is an
//! independent Gaussian. The expected log-likelihood is closed form for
//! Gaussian weights, for exponentiated weights, and for constant weights.

use crate::autodiff::{Tape, Var};
use crate::dataset::MultiResDataset;
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelSpec};
use crate::linalg;
use crate::params::{ParamVector, Transform};
use crate::rng;
use crate::svgp::{self, BagLayout, BlockAd, InducingBlock, LN_2PI};
use crate::trainer::{tape_value, tape_value_grad, Objective};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// How the mixing weights `W_pq` are modelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightMode {
    /// Each `W_pq` is a GP.
    Gp,
    /// `W_pq = exp(g_pq)` with `g_pq` a GP, so weights stay positive.
    ExpGp,
    /// Fixed weights, row-major `P×Q`.
    Constant { values: Vec<f64> },
}

/// A GP with inducing points and `K` Gaussian components over its inducing values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpBlock {
    pub kernel: Kernel,
    /// Inducing locations, one row per point.
    pub z: Vec<Vec<f64>>,
    /// Per-component means.
    pub means: Vec<Vec<f64>>,
    /// Per-component lower factors of `S`, packed row-wise.
    pub chols: Vec<Vec<f64>>,
}

impl GpBlock {
    /// Block with `q(u)` equal to the prior in every component.
    pub fn prior(kernel: Kernel, z: &DMatrix<f64>, k: usize, mean: f64) -> Result<Self> {
        let kzz = kernel.gram_sym(z)?;
        let (l, _) = linalg::cholesky_escalating(&kzz, kernel.variance())?;
        let packed: Vec<f64> = crate::params::lower_positions(z.nrows()).iter().map(|&(i, j)| l[(i, j)]).collect();
        Ok(GpBlock {
            kernel,
            z: z.row_iter().map(|r| r.iter().copied().collect()).collect(),
            means: vec![vec![mean; z.nrows()]; k],
            chols: vec![packed; k],
        })
    }

    pub fn m(&self) -> usize {
        self.z.len()
    }

    pub fn z_matrix(&self) -> DMatrix<f64> {
        let d = self.z.first().map_or(0, |r| r.len());
        DMatrix::from_fn(self.m(), d, |i, j| self.z[i][j])
    }

    pub fn chol_matrix(&self, k: usize) -> DMatrix<f64> {
        let m = self.m();
        let mut l = DMatrix::zeros(m, m);
        for (&(i, j), &v) in crate::params::lower_positions(m).iter().zip(&self.chols[k]) {
            l[(i, j)] = v;
        }
        l
    }

    pub fn inducing(&self, k: usize) -> InducingBlock {
        let l = self.chol_matrix(k);
        InducingBlock {
            z: self.z_matrix(),
            mean: DVector::from_column_slice(&self.means[k]),
            cov: &l * l.transpose(),
            kernel: self.kernel.clone(),
        }
    }

    /// Appends `prefix.kernel.*`, `prefix.z`, `prefix.mean[k]`, `prefix.chol[k]`.
    pub fn push_params(&self, p: &mut ParamVector, prefix: &str) {
        for (name, v) in self.kernel.hypers() {
            p.push(format!("{prefix}.kernel.{name}"), &[v], Transform::Log);
        }
        let zc = self.z_matrix();
        p.push(format!("{prefix}.z"), zc.as_slice(), Transform::Identity);
        for k in 0..self.means.len() {
            p.push(format!("{prefix}.mean[{k}]"), &self.means[k], Transform::Identity);
            p.push(format!("{prefix}.chol[{k}]"), &self.chols[k], Transform::LowerFactor(self.m()));
        }
    }

    pub fn read_params(&mut self, p: &ParamVector, prefix: &str) -> Result<()> {
        let hyp: Vec<f64> = self
            .kernel
            .hypers()
            .iter()
            .map(|(name, _)| p.get_scalar(&format!("{prefix}.kernel.{name}")))
            .collect::<Result<_>>()?;
        self.kernel.set_hypers(&hyp);
        let (m, d) = (self.m(), self.kernel.input_dim());
        let zc = DMatrix::from_column_slice(m, d, p.raw(&format!("{prefix}.z"))?);
        self.z = zc.row_iter().map(|r| r.iter().copied().collect()).collect();
        for k in 0..self.means.len() {
            self.means[k] = p.raw(&format!("{prefix}.mean[{k}]"))?.to_vec();
            self.chols[k] = p.get(&format!("{prefix}.chol[{k}]"))?;
        }
        Ok(())
    }

    /// Tape nodes for this block, read from the parameter column `theta`.
    pub fn build_ad(&self, t: &mut Tape, theta: Var, p: &ParamVector, prefix: &str) -> Result<BlockAd> {
        let hyp: Vec<Var> = self
            .kernel
            .hypers()
            .iter()
            .map(|(name, _)| param_slice(t, theta, p, &format!("{prefix}.kernel.{name}")))
            .collect::<Result<_>>()?;
        let m = self.m();
        let zall = param_slice(t, theta, p, &format!("{prefix}.z"))?;
        let z: Vec<Var> = (0..self.kernel.input_dim())
            .map(|c| {
                let rows: Rc<[usize]> = (c * m..(c + 1) * m).collect();
                t.gather(zall, rows)
            })
            .collect();
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for k in 0..self.means.len() {
            means.push(param_slice(t, theta, p, &format!("{prefix}.mean[{k}]"))?);
            let raw = param_slice(t, theta, p, &format!("{prefix}.chol[{k}]"))?;
            factors.push(svgp::lower_factor_ad(t, raw, m));
        }
        BlockAd::new(t, &self.kernel, hyp, z, means, factors)
    }
}

/// Rows of the parameter column belonging to entry `name`.
pub fn param_slice(t: &mut Tape, theta: Var, p: &ParamVector, name: &str) -> Result<Var> {
    let e = p.entry(name)?;
    let rows: Rc<[usize]> = (e.offset..e.offset + e.len).collect();
    Ok(t.gather(theta, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub process: usize,
    pub task: usize,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GprnModel {
    /// Latent function count `Q`.
    pub q: usize,
    /// Task count `P`.
    pub p: usize,
    /// Mixture component count `K`.
    pub k: usize,
    pub f: Vec<GpBlock>,
    /// Weight GPs, row-major `P×Q`; empty for constant weights.
    pub w: Vec<GpBlock>,
    pub weights: WeightMode,
    pub pi: Vec<f64>,
    pub noise: Vec<NoiseEntry>,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprnConfig {
    pub q: usize,
    pub k: usize,
    pub num_inducing: usize,
    pub weights: WeightMode,
    pub f_kernel: KernelSpec,
    pub w_kernel: KernelSpec,
    pub noise: f64,
    /// Initial mean of Gaussian weight GPs (exp-weights start at 0).
    pub w_mean: f64,
    pub seed: u64,
}

impl Default for GprnConfig {
    fn default() -> Self {
        GprnConfig {
            q: 1,
            k: 1,
            num_inducing: 20,
            weights: WeightMode::Gp,
            f_kernel: KernelSpec::se(1.0, vec![0.1]),
            w_kernel: KernelSpec::se(1.0, vec![1.0]),
            noise: 0.1,
            w_mean: 1.0,
            seed: 0,
        }
    }
}

/// Expands a one-lengthscale template to `d` dimensions.
fn kernel_for(spec: &KernelSpec, d: usize) -> Kernel {
    let mut s = spec.clone();
    if s.lengthscales.len() != d {
        s.lengthscales = vec![s.lengthscales[0]; d];
    }
    Kernel::Stationary(s)
}

/// One process's stacked layout.
#[derive(Clone, Debug)]
pub struct ProcessData {
    pub process: usize,
    pub task: usize,
    pub layout: BagLayout,
}

#[derive(Clone, Debug)]
pub struct GprnData {
    pub items: Vec<ProcessData>,
}

impl GprnData {
    pub fn new(ds: &MultiResDataset) -> Self {
        GprnData {
            items: ds
                .processes
                .iter()
                .map(|p| ProcessData { process: p.process, task: p.task, layout: BagLayout::new(p) })
                .collect(),
        }
    }
}

/// Tape nodes of a whole model.
pub struct GprnAd {
    pub f: Vec<BlockAd>,
    pub w: Vec<BlockAd>,
    /// `π_k` as 1×1 nodes (absent when `K = 1`).
    pub pi: Vec<Var>,
    pub log_noise: Vec<Var>,
}

impl GprnModel {
    pub fn init(ds: &MultiResDataset, cfg: &GprnConfig) -> Result<Self> {
        let d = ds.input_dim();
        let pts = ds.all_points();
        let z = crate::trainer::kmeans(&pts, cfg.num_inducing, 50)?;
        let p = ds.num_tasks();
        let mut model = GprnModel {
            q: cfg.q,
            p,
            k: cfg.k,
            f: Vec::new(),
            w: Vec::new(),
            weights: cfg.weights.clone(),
            pi: vec![1.0 / cfg.k as f64; cfg.k],
            noise: ds
                .processes
                .iter()
                .map(|pr| NoiseEntry { process: pr.process, task: pr.task, variance: cfg.noise })
                .collect(),
            phi: 1.0,
        };
        let mut r = rng::stream(cfg.seed, &[rng::tag("gprn-init")]);
        for _ in 0..cfg.q {
            let mut b = GpBlock::prior(kernel_for(&cfg.f_kernel, d), &z, cfg.k, 0.0)?;
            perturb(&mut b, &mut r);
            model.f.push(b);
        }
        match &cfg.weights {
            WeightMode::Constant { values } => {
                if values.len() != p * cfg.q {
                    return Err(Error::DimensionMismatch { expected: p * cfg.q, found: values.len() });
                }
            }
            mode => {
                let mean = if *mode == WeightMode::Gp { cfg.w_mean } else { 0.0 };
                for _ in 0..p * cfg.q {
                    let mut b = GpBlock::prior(kernel_for(&cfg.w_kernel, d), &z, cfg.k, mean)?;
                    perturb(&mut b, &mut r);
                    model.w.push(b);
                }
            }
        }
        model.validate_for(ds)?;
        Ok(model)
    }

    pub fn validate_for(&self, ds: &MultiResDataset) -> Result<()> {
        if ds.num_tasks() > self.p {
            return Err(Error::DimensionMismatch { expected: self.p, found: ds.num_tasks() });
        }
        if (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.pi.len() != self.k {
            return Err(Error::invalid("mixture weights must sum to one"));
        }
        if !(self.phi > 0.0) {
            return Err(Error::invalid("composite weight must be positive"));
        }
        for pr in &ds.processes {
            self.noise_index(pr.process, pr.task)?;
        }
        Ok(())
    }

    pub fn noise_index(&self, process: usize, task: usize) -> Result<usize> {
        self.noise
            .iter()
            .position(|n| n.process == process && n.task == task)
            .ok_or_else(|| Error::invalid(format!("model has no noise for process {process}, task {task}")))
    }

    fn w_index(&self, task: usize, q: usize) -> usize {
        (task - 1) * self.q + q
    }

    /// Weight of latent `q` in task `task` for constant-weight models.
    pub fn constant_weight(&self, task: usize, q: usize) -> f64 {
        match &self.weights {
            WeightMode::Constant { values } => values[(task - 1) * self.q + q],
            _ => unreachable!(),
        }
    }

    pub fn params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        for (q, b) in self.f.iter().enumerate() {
            b.push_params(&mut p, &format!("f[{q}]"));
        }
        for (i, b) in self.w.iter().enumerate() {
            b.push_params(&mut p, &format!("w[{},{}]", i / self.q, i % self.q));
        }
        if self.k > 1 {
            p.push("pi", &self.pi, Transform::Softmax);
        }
        for n in &self.noise {
            p.push(format!("noise[{},{}]", n.process, n.task), &[n.variance], Transform::Log);
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        for q in 0..self.f.len() {
            self.f[q].read_params(p, &format!("f[{q}]"))?;
        }
        for i in 0..self.w.len() {
            let prefix = format!("w[{},{}]", i / self.q, i % self.q);
            self.w[i].read_params(p, &prefix)?;
        }
        if self.k > 1 {
            self.pi = p.get("pi")?;
        }
        for n in self.noise.iter_mut() {
            n.variance = p.get_scalar(&format!("noise[{},{}]", n.process, n.task))?;
        }
        Ok(())
    }

    pub fn build_ad(&self, t: &mut Tape, theta: Var, p: &ParamVector) -> Result<GprnAd> {
        let mut f = Vec::new();
        for (q, b) in self.f.iter().enumerate() {
            f.push(b.build_ad(t, theta, p, &format!("f[{q}]"))?);
        }
        let mut w = Vec::new();
        for (i, b) in self.w.iter().enumerate() {
            w.push(b.build_ad(t, theta, p, &format!("w[{},{}]", i / self.q, i % self.q))?);
        }
        let pi = if self.k > 1 {
            let logits = param_slice(t, theta, p, "pi")?;
            let mx = t.value(logits).max();
            let sh = t.offset(logits, -mx);
            let e = t.exp(sh);
            let s = t.sum(e);
            let r = t.unary(s, crate::autodiff::Unary::Recip);
            let probs = t.scalar_mul(e, r);
            (0..self.k).map(|k| t.gather(probs, Rc::from(vec![k]))).collect()
        } else {
            Vec::new()
        };
        let log_noise = self
            .noise
            .iter()
            .map(|n| param_slice(t, theta, p, &format!("noise[{},{}]", n.process, n.task)))
            .collect::<Result<_>>()?;
        Ok(GprnAd { f, w, pi, log_noise })
    }

    /// Per-component expected log-likelihood of one process.
    pub fn ell_process_ad(&self, t: &mut Tape, ad: &GprnAd, pd: &ProcessData) -> Result<Vec<Var>> {
        let lay = &pd.layout;
        let x = lay.input_cols(t);
        let pairs = &lay.upper;
        let fm: Vec<Vec<svgp::MomentsAd>> = ad.f.iter().map(|b| b.moments(t, &x, pairs)).collect();
        let wm: Vec<Vec<svgp::MomentsAd>> = match self.weights {
            WeightMode::Constant { .. } => Vec::new(),
            _ => (0..self.q).map(|q| ad.w[self.w_index(pd.task, q)].moments(t, &x, pairs)).collect(),
        };
        let weight = pairs.weight.clone();
        let n = lay.n_bags() as f64;
        let log_noise = ad.log_noise[self.noise_index(pd.process, pd.task)?];
        let y = t.col_const(&lay.y);
        let mut out = Vec::with_capacity(self.k);
        for k in 0..self.k {
            let mut mean_sum: Option<Var> = None;
            let mut quad: Option<Var> = None;
            for q in 0..self.q {
                let f = fm[q][k];
                let (m, term) = match self.weights {
                    WeightMode::Constant { .. } => {
                        let c = self.constant_weight(pd.task, q);
                        (t.scale(f.mean, c), t.scale(f.pair_cov, c * c))
                    }
                    _ => {
                        let w = wm[q][k];
                        let fi = t.gather(f.mean, pairs.i.clone());
                        let fj = t.gather(f.mean, pairs.j.clone());
                        let ff = t.mul(fi, fj);
                        let eff = t.add(f.pair_cov, ff);
                        let (ew, eww) = if self.weights == WeightMode::Gp {
                            let wi = t.gather(w.mean, pairs.i.clone());
                            let wj = t.gather(w.mean, pairs.j.clone());
                            let ww = t.mul(wi, wj);
                            (w.mean, t.add(w.pair_cov, ww))
                        } else {
                            let hv = t.scale(w.var, 0.5);
                            let h = t.add(w.mean, hv);
                            let ew = t.exp(h);
                            let ei = t.gather(ew, pairs.i.clone());
                            let ej = t.gather(ew, pairs.j.clone());
                            let ee = t.mul(ei, ej);
                            let ec = t.exp(w.pair_cov);
                            (ew, t.mul(ee, ec))
                        };
                        let m = t.mul(f.mean, ew);
                        let mi = t.gather(m, pairs.i.clone());
                        let mj = t.gather(m, pairs.j.clone());
                        let mm = t.mul(mi, mj);
                        let second = t.mul(eff, eww);
                        (m, t.sub(second, mm))
                    }
                };
                let wt = t.mul_const(term, weight.clone());
                let qs = t.sum(wt);
                quad = Some(match quad {
                    None => qs,
                    Some(prev) => t.add(prev, qs),
                });
                mean_sum = Some(match mean_sum {
                    None => m,
                    Some(prev) => t.add(prev, m),
                });
            }
            let ms = t.mul_const(mean_sum.unwrap(), lay.point_weight.clone());
            let bag_mean = t.segment_sum(ms, lay.offsets.clone());
            let r = t.sub(y, bag_mean);
            let r2 = t.square(r);
            let sq = t.sum(r2);
            let tot = t.add(sq, quad.unwrap());
            let neg = t.neg(log_noise);
            let inv = t.exp(neg);
            let e0 = t.scalar_mul(tot, inv);
            let e1 = t.scale(e0, -0.5);
            let ln = t.scale(log_noise, -0.5 * n);
            let e2 = t.add(e1, ln);
            out.push(t.offset(e2, -0.5 * n * LN_2PI));
        }
        Ok(out)
    }

    /// `Σ_{a,p} Σ_k π_k ELL_{a,p,k}`.
    pub fn ell_ad(&self, t: &mut Tape, ad: &GprnAd, data: &GprnData) -> Result<Var> {
        let mut total: Option<Var> = None;
        for pd in &data.items {
            let per_k = self.ell_process_ad(t, ad, pd)?;
            let v = self.mix(t, ad, &per_k);
            total = Some(match total {
                None => v,
                Some(prev) => t.add(prev, v),
            });
        }
        total.ok_or(Error::NoObservations)
    }

    fn mix(&self, t: &mut Tape, ad: &GprnAd, per_k: &[Var]) -> Var {
        if self.k == 1 {
            return per_k[0];
        }
        let mut acc: Option<Var> = None;
        for (k, v) in per_k.iter().enumerate() {
            let wv = t.scalar_mul(*v, ad.pi[k]);
            acc = Some(match acc {
                None => wv,
                Some(prev) => t.add(prev, wv),
            });
        }
        acc.unwrap()
    }

    fn all_blocks<'a>(&self, ad: &'a GprnAd) -> Vec<&'a BlockAd> {
        ad.f.iter().chain(ad.w.iter()).collect()
    }

    /// Prior term: `−Σ KL` when `K = 1`, otherwise cross term minus the
    /// mixture entropy bound.
    pub fn prior_term_ad(&self, t: &mut Tape, ad: &GprnAd) -> Result<Var> {
        let blocks = self.all_blocks(ad);
        if self.k == 1 {
            let mut kl: Option<Var> = None;
            for b in &blocks {
                let v = b.kl(t, 0);
                kl = Some(match kl {
                    None => v,
                    Some(p) => t.add(p, v),
                });
            }
            return Ok(t.neg(kl.unwrap()));
        }
        let mut cross: Option<Var> = None;
        for k in 0..self.k {
            for b in &blocks {
                let c = b.cross(t, k);
                let wc = t.scalar_mul(c, ad.pi[k]);
                cross = Some(match cross {
                    None => wc,
                    Some(p) => t.add(p, wc),
                });
            }
        }
        let mut bound: Option<Var> = None;
        for k in 0..self.k {
            let mut terms = Vec::with_capacity(self.k);
            for l in 0..self.k {
                let mut v = t.ln(ad.pi[l]);
                for b in &blocks {
                    let o = b.log_overlap(t, k, l)?;
                    v = t.add(v, o);
                }
                terms.push(v);
            }
            let lse = log_sum_exp_ad(t, &terms);
            let wl = t.scalar_mul(lse, ad.pi[k]);
            bound = Some(match bound {
                None => wl,
                Some(p) => t.add(p, wl),
            });
        }
        Ok(t.sub(cross.unwrap(), bound.unwrap()))
    }

    pub fn elbo_ad(&self, t: &mut Tape, ad: &GprnAd, data: &GprnData) -> Result<Var> {
        let ell = self.ell_ad(t, ad, data)?;
        let scaled = t.scale(ell, self.phi);
        let prior = self.prior_term_ad(t, ad)?;
        Ok(t.add(scaled, prior))
    }

    /// Closed-form expected log-likelihood (not scaled by φ).
    pub fn ell_closed_form(&self, ds: &MultiResDataset) -> Result<f64> {
        self.validate_for(ds)?;
        let data = GprnData::new(ds);
        let p = self.params();
        tape_value(&p.values, |t, th| {
            let ad = self.build_ad(t, th, &p)?;
            self.ell_ad(t, &ad, &data)
        })
    }

    /// The exponentiated-weights expected log-likelihood.
    pub fn ell_exp_weights(&self, ds: &MultiResDataset) -> Result<f64> {
        if self.weights != WeightMode::ExpGp {
            return Err(Error::invalid("model does not use exponentiated weights"));
        }
        self.ell_closed_form(ds)
    }

    pub fn elbo(&self, ds: &MultiResDataset) -> Result<f64> {
        self.validate_for(ds)?;
        let data = GprnData::new(ds);
        let p = self.params();
        tape_value(&p.values, |t, th| {
            let ad = self.build_ad(t, th, &p)?;
            self.elbo_ad(t, &ad, &data)
        })
    }

    /// Predictive mean and latent variance of task `task` at the rows of `x`.
    pub fn predict_latent(&self, x: &DMatrix<f64>, task: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        if task == 0 || task > self.p {
            return Err(Error::invalid(format!("unknown task {task}")));
        }
        let n = x.nrows();
        let mut mean = DVector::<f64>::zeros(n);
        let mut second = DVector::<f64>::zeros(n);
        for k in 0..self.k {
            let mut mk = DVector::<f64>::zeros(n);
            let mut vk = DVector::<f64>::zeros(n);
            for q in 0..self.q {
                let f = svgp::conditional_moments(&self.f[q].inducing(k), x, false)?;
                let (ew, eww): (DVector<f64>, DVector<f64>) = match &self.weights {
                    WeightMode::Constant { .. } => {
                        let c = self.constant_weight(task, q);
                        (DVector::from_element(n, c), DVector::from_element(n, c * c))
                    }
                    WeightMode::Gp => {
                        let w = svgp::conditional_moments(&self.w[self.w_index(task, q)].inducing(k), x, false)?;
                        let eww = w.mean.component_mul(&w.mean) + &w.var;
                        (w.mean, eww)
                    }
                    WeightMode::ExpGp => {
                        let w = svgp::conditional_moments(&self.w[self.w_index(task, q)].inducing(k), x, false)?;
                        let ew = DVector::from_fn(n, |i, _| svgp::exp_gauss_moment(w.mean[i], w.var[i], 1.0));
                        let eww = DVector::from_fn(n, |i, _| svgp::exp_gauss_moment(w.mean[i], w.var[i], 2.0));
                        (ew, eww)
                    }
                };
                for i in 0..n {
                    let ef2 = f.mean[i] * f.mean[i] + f.var[i];
                    mk[i] += ew[i] * f.mean[i];
                    vk[i] += eww[i] * ef2 - ew[i] * ew[i] * f.mean[i] * f.mean[i];
                }
            }
            for i in 0..n {
                mean[i] += self.pi[k] * mk[i];
                second[i] += self.pi[k] * (vk[i] + mk[i] * mk[i]);
            }
        }
        let var = DVector::from_fn(n, |i, _| -> f64 { (second[i] - mean[i] * mean[i]).max(0.0) });
        Ok((mean, var))
    }

    /// Predictive mean and variance of observations of process `(a, p)`,
    /// i.e. the latent variance plus the process noise.
    pub fn predict(&self, x: &DMatrix<f64>, process: usize, task: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let (m, v) = self.predict_latent(x, task)?;
        let noise = self.noise[self.noise_index(process, task)?].variance;
        Ok((m, v.add_scalar(noise)))
    }

    /// Sets `q(u)` to its optimum for constant weights and `Q = 1`. The
    /// optimum of `φ·ELL − KL` is Gaussian: with `B = A K_xz` (rows are
    /// weighted bag averages) and `Λ` the noise, `Σ = K_zz + φ BᵀΛ⁻¹B`,
    /// `S = K_zz Σ⁻¹ K_zz` and `m = φ K_zz Σ⁻¹ BᵀΛ⁻¹ y`.
    pub fn supports_optimal_q(&self) -> bool {
        self.q == 1 && matches!(self.weights, WeightMode::Constant { .. })
    }

    pub fn set_optimal_q(&mut self, ds: &MultiResDataset) -> Result<()> {
        if !self.supports_optimal_q() {
            return Err(Error::invalid("closed-form q(u) needs Q = 1 and constant weights"));
        }
        let block = &self.f[0];
        let z = block.z_matrix();
        let kzz = block.kernel.gram_sym(&z)?;
        let mm = z.nrows();
        let mut bt_l_y = DMatrix::zeros(mm, 1);
        let mut bt_l_b = DMatrix::zeros(mm, mm);
        for pr in &ds.processes {
            let c = self.constant_weight(pr.task, 0);
            let noise = self.noise[self.noise_index(pr.process, pr.task)?].variance;
            let pts = pr.stacked_points();
            let kxz = block.kernel.gram(&pts, &z)?;
            let mut off = 0;
            for (s, y) in pr.supports.iter().zip(&pr.targets) {
                let mut row = DMatrix::zeros(1, mm);
                for i in 0..s.len() {
                    row += kxz.row(off + i) * (c * s.weight);
                }
                off += s.len();
                bt_l_b += row.transpose() * &row / noise;
                bt_l_y += row.transpose() * (*y / noise);
            }
        }
        let (mean, packed) = svgp::optimal_q(&kzz, &(bt_l_b * self.phi), &(bt_l_y * self.phi))?;
        let b = &mut self.f[0];
        for k in 0..self.k {
            b.means[k] = mean.clone();
            b.chols[k] = packed.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("bad model file: {e}")))
    }
}

fn perturb(b: &mut GpBlock, r: &mut rng::Rng) {
    for k in 1..b.means.len() {
        for v in b.means[k].iter_mut() {
            *v += 0.1 * rng::normal(r);
        }
    }
}

/// Numerically shifted `log Σ exp(v_i)` over 1×1 nodes.
pub fn log_sum_exp_ad(t: &mut Tape, terms: &[Var]) -> Var {
    let col = t.vcat(terms);
    let mx = t.value(col).max();
    let sh = t.offset(col, -mx);
    let e = t.exp(sh);
    let s = t.sum(e);
    let l = t.ln(s);
    t.offset(l, mx)
}

/// What a [`GprnObjective`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GprnTarget {
    Elbo,
    /// Expected log-likelihood alone (the composite log-likelihood surrogate).
    Ell,
}

pub struct GprnObjective<'a> {
    pub model: &'a GprnModel,
    pub data: &'a GprnData,
    pub params: ParamVector,
    pub target: GprnTarget,
}

impl<'a> GprnObjective<'a> {
    pub fn new(model: &'a GprnModel, data: &'a GprnData, target: GprnTarget) -> Self {
        GprnObjective { model, data, params: model.params(), target }
    }
}

impl Objective for GprnObjective<'_> {
    fn value_grad(&self, theta: &[f64], _epoch: u64) -> Result<(f64, Vec<f64>)> {
        tape_value_grad(theta, |t, th| {
            let ad = self.model.build_ad(t, th, &self.params)?;
            match self.target {
                GprnTarget::Elbo => self.model.elbo_ad(t, &ad, self.data),
                GprnTarget::Ell => self.model.ell_ad(t, &ad, self.data),
            }
        })
    }
}

/// Monte Carlo estimate of the expected log-likelihood with its standard
/// error, sampling `f` and `W` jointly at each process's support points.
pub fn mc_ell(model: &GprnModel, ds: &MultiResDataset, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut est = 0.0;
    let mut var = 0.0;
    for k in 0..model.k {
        let mut totals = vec![0.0; samples];
        for (pi_, pr) in ds.processes.iter().enumerate() {
            let pts = pr.stacked_points();
            let n = pts.nrows();
            let noise = model.noise[model.noise_index(pr.process, pr.task)?].variance;
            let factor = |b: &GpBlock| -> Result<(DVector<f64>, DMatrix<f64>)> {
                let mm = svgp::conditional_moments(&b.inducing(k), &pts, true)?;
                let c = mm.cov.unwrap();
                let l = linalg::cholesky_escalating(&c, c.diagonal().mean().abs().max(1e-12))?.0;
                Ok((mm.mean, l))
            };
            let fs: Vec<_> = model.f.iter().map(factor).collect::<Result<_>>()?;
            let ws: Vec<_> = match model.weights {
                WeightMode::Constant { .. } => Vec::new(),
                _ => (0..model.q).map(|q| factor(&model.w[model.w_index(pr.task, q)])).collect::<Result<_>>()?,
            };
            let mut r = rng::stream(seed, &[k as u64, pi_ as u64]);
            for tot in totals.iter_mut() {
                let mut val = DVector::zeros(n);
                for q in 0..model.q {
                    let f = &fs[q].0 + &fs[q].1 * DVector::from_vec(rng::normals(&mut r, n));
                    let w: DVector<f64> = match model.weights {
                        WeightMode::Constant { .. } => DVector::from_element(n, model.constant_weight(pr.task, q)),
                        _ => {
                            let g = &ws[q].0 + &ws[q].1 * DVector::from_vec(rng::normals(&mut r, n));
                            if model.weights == WeightMode::ExpGp {
                                g.map(f64::exp)
                            } else {
                                g
                            }
                        }
                    };
                    val += w.component_mul(&f);
                }
                let mut off = 0;
                for (s, y) in pr.supports.iter().zip(&pr.targets) {
                    let mu: f64 = (off..off + s.len()).map(|i| val[i]).sum::<f64>() * s.weight;
                    off += s.len();
                    *tot += -0.5 * (2.0 * std::f64::consts::PI * noise).ln() - (y - mu).powi(2) / (2.0 * noise);
                }
            }
        }
        let (m, v) = mean_var(&totals);
        est += model.pi[k] * m;
        var += model.pi[k].powi(2) * v / samples as f64;
    }
    Ok((est, var.sqrt()))
}

/// Monte Carlo predictive moments at one point (for testing the closed
/// form). Returns `(mean, var, se_mean, se_var)`.
pub fn mc_predict(model: &GprnModel, x: &[f64], process: usize, task: usize, samples: usize, seed: u64) -> Result<(f64, f64, f64, f64)> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let noise = model.noise[model.noise_index(process, task)?].variance;
    let mut comps = Vec::new();
    for k in 0..model.k {
        let f: Vec<(f64, f64)> = model
            .f
            .iter()
            .map(|b| svgp::conditional_moments(&b.inducing(k), &xm, false).map(|m| (m.mean[0], m.var[0])))
            .collect::<Result<_>>()?;
        let w: Vec<(f64, f64)> = match model.weights {
            WeightMode::Constant { .. } => (0..model.q).map(|q| (model.constant_weight(task, q), 0.0)).collect(),
            _ => (0..model.q)
                .map(|q| {
                    svgp::conditional_moments(&model.w[model.w_index(task, q)].inducing(k), &xm, false)
                        .map(|m| (m.mean[0], m.var[0]))
                })
                .collect::<Result<_>>()?,
        };
        comps.push((f, w));
    }
    let cum: Vec<f64> = model.pi.iter().scan(0.0, |s, p| {
        *s += p;
        Some(*s)
    }).collect();
    let mut r = rng::stream(seed, &[rng::tag("mc-predict")]);
    let mut ys = Vec::with_capacity(samples);
    use rand::Rng as _;
    for _ in 0..samples {
        let u: f64 = r.random();
        let k = cum.iter().position(|c| u < *c).unwrap_or(model.k - 1);
        let (f, w) = &comps[k];
        let mut y = noise.sqrt() * rng::normal(&mut r);
        for q in 0..model.q {
            let fv = f[q].0 + f[q].1.sqrt() * rng::normal(&mut r);
            let mut wv = w[q].0 + w[q].1.sqrt() * rng::normal(&mut r);
            if model.weights == WeightMode::ExpGp {
                wv = wv.exp();
            }
            y += wv * fv;
        }
        ys.push(y);
    }
    let (m, v) = mean_var(&ys);
    let n = samples as f64;
    let m4 = ys.iter().map(|y| (y - m).powi(4)).sum::<f64>() / n;
    Ok((m, v, (v / n).sqrt(), ((m4 - v * v) / n).sqrt()))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ObservationProcess, SupportRegion};
    use crate::svgp::reference::SvgpRegression;
    use crate::trainer::check_gradient;

    fn tiny_ds() -> MultiResDataset {
        let p1 = ObservationProcess::new(
            1,
            1,
            vec![0.3, -0.2, 0.9, 0.4],
            (0..4).map(|i| SupportRegion::point(vec![i as f64 * 0.7])).collect(),
        )
        .unwrap();
        let p2 = ObservationProcess::new(
            2,
            1,
            vec![0.5, 0.1],
            vec![
                SupportRegion::new(vec![vec![0.0], vec![0.5], vec![1.0]]).unwrap(),
                SupportRegion::new(vec![vec![1.2], vec![2.0]]).unwrap(),
            ],
        )
        .unwrap();
        MultiResDataset::new(vec![p1, p2]).unwrap()
    }

    fn cfg(weights: WeightMode, k: usize) -> GprnConfig {
        GprnConfig {
            q: 1,
            k,
            num_inducing: 3,
            weights,
            f_kernel: KernelSpec::se(1.0, vec![0.7]),
            w_kernel: KernelSpec::se(0.5, vec![1.5]),
            noise: 0.2,
            w_mean: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn unit_weights_reduce_to_svgp_ell() {
        let p1 = ObservationProcess::new(1, 1, vec![0.3, -0.2, 0.9, 0.4, 0.0], (0..5).map(|i| SupportRegion::point(vec![i as f64 * 0.6])).collect()).unwrap();
        let ds = MultiResDataset::new(vec![p1]).unwrap();
        let mut m = GprnModel::init(&ds, &GprnConfig { num_inducing: 3, ..cfg(WeightMode::Constant { values: vec![1.0] }, 1) }).unwrap();
        m.f[0].means[0] = vec![0.2, -0.1, 0.4];
        let reference = SvgpRegression {
            kernel: m.f[0].kernel.clone(),
            z: m.f[0].z_matrix(),
            mean: DVector::from_vec(m.f[0].means[0].clone()),
            chol: m.f[0].chol_matrix(0),
            noise: m.noise[0].variance,
        };
        let x = ds.processes[0].stacked_points();
        let (mu, var) = reference.predict(&x).unwrap();
        let want = svgp::gaussian_ell(&ds.processes[0].targets, mu.as_slice(), var.as_slice(), reference.noise);
        assert!((m.ell_closed_form(&ds).unwrap() - want).abs() < 1e-10);
        assert!((m.elbo(&ds).unwrap() - reference.elbo(&x, &ds.processes[0].targets).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_components_collapse() {
        let ds = tiny_ds();
        let one = GprnModel::init(&ds, &cfg(WeightMode::Gp, 1)).unwrap();
        let mut two = GprnModel::init(&ds, &cfg(WeightMode::Gp, 2)).unwrap();
        for b in two.f.iter_mut().chain(two.w.iter_mut()) {
            b.means[1] = b.means[0].clone();
        }
        assert!((one.ell_closed_form(&ds).unwrap() - two.ell_closed_form(&ds).unwrap()).abs() < 1e-10);
        let mut skew = two.clone();
        skew.pi = vec![1.0, 0.0];
        assert!((one.ell_closed_form(&ds).unwrap() - skew.ell_closed_form(&ds).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn phi_scales_only_the_likelihood() {
        let ds = tiny_ds();
        let mut m = GprnModel::init(&ds, &cfg(WeightMode::Gp, 1)).unwrap();
        let ell = m.ell_closed_form(&ds).unwrap();
        let e1 = m.elbo(&ds).unwrap();
        m.phi = 2.0;
        let e2 = m.elbo(&ds).unwrap();
        assert!((e2 - e1 - ell).abs() < 1e-9);
    }

    #[test]
    fn k1_elbo_is_ell_minus_kl() {
        let ds = tiny_ds();
        let m = GprnModel::init(&ds, &cfg(WeightMode::Gp, 1)).unwrap();
        let kl: f64 = m.f.iter().chain(&m.w).map(|b| svgp::gauss_kl(&b.inducing(0)).unwrap()).sum();
        assert!((m.elbo(&ds).unwrap() - (m.ell_closed_form(&ds).unwrap() - kl)).abs() < 1e-8);
    }

    #[test]
    fn mixture_prior_term_matches_f64_bound() {
        let ds = tiny_ds();
        let m = GprnModel::init(&ds, &cfg(WeightMode::Gp, 2)).unwrap();
        let blocks: Vec<&GpBlock> = m.f.iter().chain(&m.w).collect();
        let mut cross = 0.0;
        for k in 0..2 {
            for b in &blocks {
                let ib = b.inducing(k);
                cross += m.pi[k] * svgp::cross_term(&ib.mean, &ib.cov, &b.kernel.gram_sym(&ib.z).unwrap()).unwrap();
            }
        }
        let comps: Vec<Vec<(DVector<f64>, DMatrix<f64>)>> =
            (0..2).map(|k| blocks.iter().map(|b| { let ib = b.inducing(k); (ib.mean, ib.cov) }).collect()).collect();
        let bound = svgp::mixture_entropy_bound_blocks(&m.pi, &comps).unwrap();
        let want = m.ell_closed_form(&ds).unwrap() + cross - bound;
        assert!((m.elbo(&ds).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn gradients_pass_the_verifier() {
        let ds = tiny_ds();
        let data = GprnData::new(&ds);
        for (mode, k) in [(WeightMode::Gp, 1), (WeightMode::ExpGp, 2), (WeightMode::Constant { values: vec![0.7] }, 1)] {
            let m = GprnModel::init(&ds, &cfg(mode, k)).unwrap();
            let obj = GprnObjective::new(&m, &data, GprnTarget::Elbo);
            let chk = check_gradient(&obj, &obj.params.values, 0, None, 1e-5).unwrap();
            assert!(chk.passes(1e-4), "{chk:?}");
        }
    }

    #[test]
    fn exp_weights_approach_unit_weights() {
        let ds = tiny_ds();
        let mut e = GprnModel::init(&ds, &cfg(WeightMode::ExpGp, 1)).unwrap();
        let mut c = e.clone();
        c.weights = WeightMode::Constant { values: vec![1.0] };
        c.w.clear();
        // Zero mean and a vanishing covariance for the weight GP.
        let m = e.w[0].m();
        e.w[0].means[0] = vec![0.0; m];
        e.w[0].kernel.set_hypers(&[1e-10, 1.5]);
        if let Kernel::Stationary(s) = &mut e.w[0].kernel {
            s.jitter = 1e-14;
        }
        let kzz = e.w[0].kernel.gram_sym(&e.w[0].z_matrix()).unwrap();
        let l = linalg::cholesky(&kzz).unwrap();
        e.w[0].chols[0] = crate::params::lower_positions(m).iter().map(|&(i, j)| l[(i, j)]).collect();
        let d = (e.ell_exp_weights(&ds).unwrap() - c.ell_closed_form(&ds).unwrap()).abs();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn json_round_trip() {
        let ds = tiny_ds();
        let m = GprnModel::init(&ds, &cfg(WeightMode::ExpGp, 2)).unwrap();
        let s = m.to_json().unwrap();
        let back = GprnModel::from_json(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), s);
    }

    fn jiggle(m: &mut GprnModel) {
        let mut r = rng::stream(11, &[]);
        for b in m.f.iter_mut().chain(m.w.iter_mut()) {
            for k in 0..b.means.len() {
                for v in b.means[k].iter_mut() {
                    *v += 0.3 * rng::normal(&mut r);
                }
                for v in b.chols[k].iter_mut() {
                    *v *= 0.6;
                }
            }
        }
        if m.k == 2 {
            m.pi = vec![0.35, 0.65];
        }
    }

    #[test]
    fn closed_form_ell_matches_monte_carlo() {
        let ds = tiny_ds();
        for mode in [WeightMode::Gp, WeightMode::ExpGp, WeightMode::Constant { values: vec![1.3, -0.4] }] {
            let mut m = GprnModel::init(&ds, &GprnConfig { q: 2, ..cfg(mode.clone(), 2) }).unwrap();
            jiggle(&mut m);
            let exact = m.ell_closed_form(&ds).unwrap();
            let (est, se) = mc_ell(&m, &ds, 40_000, 5).unwrap();
            assert!((exact - est).abs() < 4.0 * se + 1e-9, "{mode:?}: {exact} vs {est} ± {se}");
        }
    }

    #[test]
    fn closed_form_prediction_matches_monte_carlo() {
        let ds = tiny_ds();
        for mode in [WeightMode::Gp, WeightMode::ExpGp] {
            let mut m = GprnModel::init(&ds, &GprnConfig { q: 2, ..cfg(mode.clone(), 2) }).unwrap();
            jiggle(&mut m);
            let x = [0.8];
            let (mu, var) = m.predict(&DMatrix::from_row_slice(1, 1, &x), 2, 1).unwrap();
            let (em, ev, sm, sv) = mc_predict(&m, &x, 2, 1, 200_000, 9).unwrap();
            assert!((mu[0] - em).abs() < 4.0 * sm, "{mode:?} mean {} vs {em}", mu[0]);
            assert!((var[0] - ev).abs() < 4.0 * sv, "{mode:?} var {} vs {ev}", var[0]);
        }
    }

    #[test]
    fn optimal_q_is_stationary() {
        let ds = tiny_ds();
        let mut m = GprnModel::init(&ds, &cfg(WeightMode::Constant { values: vec![0.8] }, 1)).unwrap();
        m.phi = 0.7;
        m.set_optimal_q(&ds).unwrap();
        let data = GprnData::new(&ds);
        let obj = GprnObjective::new(&m, &data, GprnTarget::Elbo);
        let (_, g) = obj.value_grad(&obj.params.values, 0).unwrap();
        let mask = obj.params.mask(&["f[0].mean*".into(), "f[0].chol*".into()]).unwrap();
        let worst = g.iter().zip(&mask).filter(|(_, &on)| on).map(|(v, _)| v.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }
}
