//! Block Metropolis-within-Gibbs sampler for a single latent GP observed
//! through aggregated, noisy processes with tempered likelihoods.
//!
//! The latent function lives on the distinct support points of the dataset.
//! Blocks per iteration: kernel hyperparameters (log-space random walk), the
//! latent values (exact conditional draw or random walk scaled by the prior
//! Cholesky factor), and one log-variance random walk per process.

use crate::dataset::MultiResDataset;
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelSpec};
use crate::linalg::{cholesky, logdet_from_chol, solve_lower, solve_lower_t};
use crate::rng::{self, Rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McmcLikelihood {
    /// `Π_a p(Y_a | f, σ_a²)^{φ_a}`.
    Composite,
    /// Process 1 through `f`; every other process as noisy bag means of the
    /// observed process-1 targets, which is how the dependent pair is generated.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FUpdate {
    /// Draw from the Gaussian full conditional; always accepted.
    Gibbs,
    RandomWalk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iters: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th latent vector for prediction.
    pub thin: usize,
    /// Per-process likelihood weights; empty means all ones.
    pub phi: Vec<f64>,
    pub likelihood: McmcLikelihood,
    pub f_update: FUpdate,
    pub step_theta: f64,
    pub step_f: f64,
    pub step_noise: f64,
    pub init_variance: f64,
    pub init_lengthscale: f64,
    pub init_noise: f64,
    pub update_theta: bool,
    pub update_f: bool,
    pub update_noise: bool,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iters: 20_000,
            burn_in: 5_000,
            thin: 10,
            phi: Vec::new(),
            likelihood: McmcLikelihood::Composite,
            f_update: FUpdate::Gibbs,
            step_theta: 0.1,
            step_f: 0.05,
            step_noise: 0.3,
            init_variance: 1.0,
            init_lengthscale: 1.0,
            init_noise: 0.01,
            update_theta: true,
            update_f: true,
            update_noise: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcState {
    /// `[A, l_1, …, l_d]`.
    pub theta: Vec<f64>,
    pub f: Vec<f64>,
    /// Noise variance per process, in dataset order.
    pub noise: Vec<f64>,
    pub logpost: f64,
    pub iter: usize,
}

/// One block update.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub iter: usize,
    pub block: String,
    pub accepted: bool,
    pub logpost: f64,
    /// `theta` then `noise` after the update.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub points: DMatrix<f64>,
    /// Names of `BlockRecord::params`.
    pub param_names: Vec<String>,
    pub records: Vec<BlockRecord>,
    /// State at the end of every iteration.
    pub theta: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub logpost: Vec<f64>,
    /// Thinned latent vectors with their iteration numbers.
    pub f_samples: Vec<(usize, Vec<f64>)>,
    pub acceptance: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

struct Term {
    /// Sparse weights over latent points.
    rows: Vec<Vec<(usize, f64)>>,
    y: Vec<f64>,
    phi: f64,
}

/// Oracle term for a process without a latent link: `y ~ N(c, σ²)` with
/// fixed centers `c`.
struct FixedTerm {
    centers: Vec<f64>,
    y: Vec<f64>,
}

struct Problem {
    points: DMatrix<f64>,
    terms: Vec<Option<Term>>,
    fixed: Vec<Option<FixedTerm>>,
}

fn point_index(points: &mut Vec<Vec<f64>>, x: &[f64]) -> usize {
    if let Some(i) = points.iter().position(|p| p.as_slice() == x) {
        return i;
    }
    points.push(x.to_vec());
    points.len() - 1
}

impl Problem {
    fn new(ds: &MultiResDataset, cfg: &McmcConfig) -> Result<Self> {
        let phi = if cfg.phi.is_empty() { vec![1.0; ds.processes.len()] } else { cfg.phi.clone() };
        if phi.len() != ds.processes.len() {
            return Err(Error::DimensionMismatch { expected: ds.processes.len(), found: phi.len() });
        }
        if phi.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("likelihood weights must be non-negative"));
        }
        if ds.num_tasks() != 1 || ds.processes.len() > 2 {
            return Err(Error::invalid("the sampler handles one task with at most two processes"));
        }
        let mut pts: Vec<Vec<f64>> = Vec::new();
        let mut terms = Vec::new();
        let mut fixed = Vec::new();
        for (a, pr) in ds.processes.iter().enumerate() {
            if cfg.likelihood == McmcLikelihood::Oracle && a > 0 {
                let first = &ds.processes[0];
                let mut centers = Vec::with_capacity(pr.len());
                for s in &pr.supports {
                    let mut c = 0.0;
                    for x in &s.points {
                        let j = first.supports.iter().position(|r| r.points.len() == 1 && &r.points[0] == x).ok_or_else(|| {
                            Error::invalid(format!("oracle likelihood: support point {x:?} of process {} is not a process-1 observation", pr.process))
                        })?;
                        c += s.weight * first.targets[j];
                    }
                    centers.push(c);
                }
                terms.push(None);
                fixed.push(Some(FixedTerm { centers, y: pr.targets.clone() }));
                continue;
            }
            let rows = pr.supports.iter().map(|s| s.points.iter().map(|x| (point_index(&mut pts, x), s.weight)).collect()).collect();
            terms.push(Some(Term { rows, y: pr.targets.clone(), phi: phi[a] }));
            fixed.push(None);
        }
        let d = ds.input_dim();
        let points = DMatrix::from_row_slice(pts.len(), d, &pts.concat());
        Ok(Problem { points, terms, fixed })
    }

    fn kernel(&self, theta: &[f64]) -> Kernel {
        Kernel::Stationary(KernelSpec::se(theta[0], theta[1..].to_vec()))
    }

    fn prior_chol(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        cholesky(&self.kernel(theta).gram_sym(&self.points)?)
    }

    fn log_prior_f(&self, l: &DMatrix<f64>, f: &[f64]) -> f64 {
        let v = solve_lower(l, &DMatrix::from_column_slice(f.len(), 1, f));
        -0.5 * (v.norm_squared() + logdet_from_chol(l) + f.len() as f64 * (2.0 * PI).ln())
    }

    fn log_lik(&self, f: &[f64], noise: &[f64]) -> f64 {
        let mut s = 0.0;
        for (a, t) in self.terms.iter().enumerate() {
            if let Some(t) = t {
                if t.phi == 0.0 {
                    continue;
                }
                let mut la = 0.0;
                for (row, y) in t.rows.iter().zip(&t.y) {
                    let m: f64 = row.iter().map(|&(i, w)| w * f[i]).sum();
                    la += log_normal(*y, m, noise[a]);
                }
                s += t.phi * la;
            }
        }
        for (a, t) in self.fixed.iter().enumerate() {
            if let Some(t) = t {
                s += t.y.iter().zip(&t.centers).map(|(y, c)| log_normal(*y, *c, noise[a])).sum::<f64>();
            }
        }
        s
    }

    /// Exact draw from `p(f | θ, σ², Y)`, whitened through the prior factor.
    fn gibbs_f(&self, l: &DMatrix<f64>, noise: &[f64], r: &mut Rng) -> Result<Vec<f64>> {
        let n = self.points.nrows();
        let mut g = DMatrix::<f64>::zeros(n, n);
        let mut b = DMatrix::<f64>::zeros(n, 1);
        for (a, t) in self.terms.iter().enumerate() {
            let Some(t) = t else { continue };
            let c = t.phi / noise[a];
            for (row, y) in t.rows.iter().zip(&t.y) {
                for &(i, wi) in row {
                    b[i] += c * wi * y;
                    for &(j, wj) in row {
                        g[(i, j)] += c * wi * wj;
                    }
                }
            }
        }
        let lt = l.transpose();
        let mut prec = &lt * &g * l;
        for i in 0..n {
            prec[(i, i)] += 1.0;
        }
        let rc = cholesky(&prec)?;
        let mean = solve_lower_t(&rc, &solve_lower(&rc, &(&lt * b)));
        let eps = DMatrix::from_column_slice(n, 1, &rng::normals(r, n));
        let v = mean + solve_lower_t(&rc, &eps);
        Ok((l * v).as_slice().to_vec())
    }
}

fn log_normal(y: f64, m: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (y - m).powi(2) / var)
}

/// Log-normal(0, 1) prior on a positive scale `s`, as a density over `ln s`.
fn log_prior_scale(ln_s: f64) -> f64 {
    -0.5 * ln_s * ln_s
}

/// Metropolis acceptance for a symmetric proposal.
pub fn accept(log_current: f64, log_proposed: f64, r: &mut Rng) -> bool {
    if !log_proposed.is_finite() {
        return false;
    }
    log_proposed >= log_current || r.random::<f64>().ln() < log_proposed - log_current
}

fn log_hyper_prior(theta: &[f64], noise: &[f64]) -> f64 {
    // Noise priors are on σ, so ln σ = ½ ln σ²; the Jacobian is constant.
    theta.iter().map(|t| log_prior_scale(t.ln())).sum::<f64>() + noise.iter().map(|v| log_prior_scale(0.5 * v.ln())).sum::<f64>()
}

pub fn run_chain(ds: &MultiResDataset, cfg: &McmcConfig) -> Result<Chain> {
    if cfg.iters == 0 {
        return Err(Error::invalid("chain needs at least one iteration"));
    }
    if !(cfg.init_variance > 0.0 && cfg.init_lengthscale > 0.0 && cfg.init_noise > 0.0) {
        return Err(Error::invalid("initial variance, lengthscale and noise must be positive"));
    }
    let prob = Problem::new(ds, cfg)?;
    let d = ds.input_dim();
    let n_proc = ds.processes.len();
    let mut theta = vec![cfg.init_variance];
    theta.extend(std::iter::repeat_n(cfg.init_lengthscale, d));
    let mut noise = vec![cfg.init_noise; n_proc];
    let mut l = prob.prior_chol(&theta)?;
    let mut r = rng::stream(cfg.seed, &[rng::tag("mcmc")]);
    let mut f = prob.gibbs_f(&l, &noise, &mut r)?;

    let mut param_names = vec!["variance".to_string()];
    param_names.extend((0..d).map(|i| format!("lengthscale[{i}]")));
    param_names.extend(ds.processes.iter().map(|p| format!("noise[{},{}]", p.process, p.task)));

    let mut lp_f = prob.log_prior_f(&l, &f);
    let mut ll = prob.log_lik(&f, &noise);
    let mut lh = log_hyper_prior(&theta, &noise);
    let mut blocks = Vec::new();
    if cfg.update_theta {
        blocks.push("theta".to_string());
    }
    if cfg.update_f {
        blocks.push("f".to_string());
    }
    if cfg.update_noise {
        blocks.extend(ds.processes.iter().map(|p| format!("noise[{},{}]", p.process, p.task)));
    }
    let mut accepted: BTreeMap<String, usize> = blocks.iter().map(|b| (b.clone(), 0)).collect();
    let mut window: BTreeMap<String, usize> = accepted.clone();
    let mut warnings = Vec::new();
    let mut chain = Chain {
        points: prob.points.clone(),
        param_names,
        records: Vec::with_capacity(cfg.iters * blocks.len()),
        theta: Vec::with_capacity(cfg.iters),
        noise: Vec::with_capacity(cfg.iters),
        logpost: Vec::with_capacity(cfg.iters),
        f_samples: Vec::new(),
        acceptance: BTreeMap::new(),
        warnings: Vec::new(),
        metadata: BTreeMap::new(),
    };
    let thin = cfg.thin.max(1);

    for it in 0..cfg.iters {
        for b in &blocks {
            let ok = match b.as_str() {
                "theta" => {
                    let prop: Vec<f64> = theta.iter().map(|t| (t.ln() + cfg.step_theta * rng::normal(&mut r)).exp()).collect();
                    match prob.prior_chol(&prop) {
                        Ok(lp) => {
                            let new_f = prob.log_prior_f(&lp, &f);
                            let new_h = log_hyper_prior(&prop, &noise);
                            let ok = accept(lp_f + lh, new_f + new_h, &mut r);
                            if ok {
                                theta = prop;
                                l = lp;
                                lp_f = new_f;
                                lh = new_h;
                            }
                            ok
                        }
                        Err(Error::NotPositiveDefinite { .. }) => false,
                        Err(e) => return Err(e),
                    }
                }
                "f" => match cfg.f_update {
                    FUpdate::Gibbs => {
                        f = prob.gibbs_f(&l, &noise, &mut r)?;
                        lp_f = prob.log_prior_f(&l, &f);
                        ll = prob.log_lik(&f, &noise);
                        true
                    }
                    FUpdate::RandomWalk => {
                        let eps = DMatrix::from_column_slice(f.len(), 1, &rng::normals(&mut r, f.len()));
                        let step = &l * eps * cfg.step_f;
                        let prop: Vec<f64> = f.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                        let (new_f, new_l) = (prob.log_prior_f(&l, &prop), prob.log_lik(&prop, &noise));
                        let ok = accept(lp_f + ll, new_f + new_l, &mut r);
                        if ok {
                            f = prop;
                            lp_f = new_f;
                            ll = new_l;
                        }
                        ok
                    }
                },
                name => {
                    let a = blocks.iter().filter(|b| b.starts_with("noise")).position(|b| b == name).unwrap();
                    let mut prop = noise.clone();
                    prop[a] = (noise[a].ln() + cfg.step_noise * rng::normal(&mut r)).exp();
                    let (new_l, new_h) = (prob.log_lik(&f, &prop), log_hyper_prior(&theta, &prop));
                    let ok = accept(ll + lh, new_l + new_h, &mut r);
                    if ok {
                        noise = prop;
                        ll = new_l;
                        lh = new_h;
                    }
                    ok
                }
            };
            let lp = lp_f + ll + lh;
            if !lp.is_finite() {
                return Err(Error::NonFinite { iter: it, snapshot: theta.iter().chain(&noise).copied().collect() });
            }
            if ok {
                *accepted.get_mut(b).unwrap() += 1;
                *window.get_mut(b).unwrap() += 1;
            }
            chain.records.push(BlockRecord {
                iter: it,
                block: b.clone(),
                accepted: ok,
                logpost: lp,
                params: theta.iter().chain(&noise).copied().collect(),
            });
        }
        if (it + 1) % 1000 == 0 {
            for (b, c) in window.iter_mut() {
                if *c == 0 {
                    let step = match b.as_str() {
                        "theta" => cfg.step_theta,
                        "f" => cfg.step_f,
                        _ => cfg.step_noise,
                    };
                    warnings.push(format!(
                        "block {b} accepted nothing in iterations {}..{}; try a proposal scale below {step}",
                        it + 1 - 1000,
                        it + 1
                    ));
                }
                *c = 0;
            }
        }
        chain.theta.push(theta.clone());
        chain.noise.push(noise.clone());
        chain.logpost.push(lp_f + ll + lh);
        if it >= cfg.burn_in.min(cfg.iters - 1) && (it - cfg.burn_in.min(cfg.iters - 1)) % thin == 0 {
            chain.f_samples.push((it, f.clone()));
        }
    }
    chain.acceptance = accepted.into_iter().map(|(b, c)| (b, c as f64 / cfg.iters as f64)).collect();
    chain.warnings = warnings;
    chain.metadata.insert("prior".into(), "lognormal(0,1) on variance, lengthscales and noise std".into());
    chain.metadata.insert("likelihood".into(), format!("{:?}", cfg.likelihood).to_lowercase());
    chain.metadata.insert("f_update".into(), format!("{:?}", cfg.f_update).to_lowercase());
    chain.metadata.insert("seed".into(), cfg.seed.to_string());
    Ok(chain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Batch-means standard error of the mean.
    pub mcse: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Standard error of the mean of a correlated series, from √n batches.
pub fn batch_means_se(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor().max(1.0) as usize;
    let k = n / b;
    if k < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..k).map(|j| x[j * b..(j + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let mu = means.iter().sum::<f64>() / k as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}

pub fn summarize_series(name: &str, x: &[f64]) -> ParamSummary {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    ParamSummary {
        name: name.to_string(),
        mean,
        std: var.sqrt(),
        mcse: batch_means_se(x),
        q05: quantile(&s, 0.05),
        q25: quantile(&s, 0.25),
        q50: quantile(&s, 0.5),
        q75: quantile(&s, 0.75),
        q95: quantile(&s, 0.95),
    }
}

/// Summaries of the hyperparameters, the noise variances, the noise standard
/// deviations and the latent values after `burn_in` iterations.
pub fn summarize(chain: &Chain, burn_in: usize) -> Result<Vec<ParamSummary>> {
    let n = chain.theta.len();
    if burn_in >= n {
        return Err(Error::invalid(format!("burn-in {burn_in} leaves no samples of {n}")));
    }
    let mut out = Vec::new();
    let nt = chain.theta[0].len();
    for j in 0..chain.param_names.len() {
        let xs: Vec<f64> =
            (burn_in..n).map(|i| if j < nt { chain.theta[i][j] } else { chain.noise[i][j - nt] }).collect();
        out.push(summarize_series(&chain.param_names[j], &xs));
        if j >= nt {
            let sd: Vec<f64> = xs.iter().map(|v| v.sqrt()).collect();
            out.push(summarize_series(&chain.param_names[j].replacen("noise", "noise_std", 1), &sd));
        }
    }
    let fs: Vec<&Vec<f64>> = chain.f_samples.iter().filter(|(i, _)| *i >= burn_in).map(|(_, f)| f).collect();
    if !fs.is_empty() {
        for k in 0..fs[0].len() {
            let xs: Vec<f64> = fs.iter().map(|f| f[k]).collect();
            out.push(summarize_series(&format!("f[{k}]"), &xs));
        }
    }
    Ok(out)
}

/// `iter,block,accepted,logpost,<params>` with one row per block update.
pub fn chain_csv(chain: &Chain) -> String {
    let mut s = String::from("iter,block,accepted,logpost");
    for n in &chain.param_names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for r in &chain.records {
        s.push_str(&format!("{},{},{},{:?}", r.iter, r.block, r.accepted as u8, r.logpost));
        for v in &r.params {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s
}

/// Posterior predictive of the latent function at `x`: the conditional GP
/// given each retained latent sample, under that iteration's kernel, mixed.
pub fn predict(chain: &Chain, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if chain.f_samples.is_empty() {
        return Err(Error::invalid("chain kept no latent samples"));
    }
    if x.ncols() != chain.points.ncols() {
        return Err(Error::DimensionMismatch { expected: chain.points.ncols(), found: x.ncols() });
    }
    let n = x.nrows();
    let (mut m1, mut m2) = (DVector::<f64>::zeros(n), DVector::<f64>::zeros(n));
    for (it, f) in &chain.f_samples {
        let theta = &chain.theta[*it];
        let k = Kernel::Stationary(KernelSpec::se(theta[0], theta[1..].to_vec()));
        let l = cholesky(&k.gram_sym(&chain.points)?)?;
        let kxs = k.gram(&chain.points, x)?;
        let a = solve_lower(&l, &kxs);
        let v = solve_lower(&l, &DMatrix::from_column_slice(f.len(), 1, f));
        let mean = a.transpose() * v;
        for i in 0..n {
            let var = (theta[0] - a.column(i).norm_squared()).max(0.0);
            m1[i] += mean[i];
            m2[i] += var + mean[i] * mean[i];
        }
    }
    let s = chain.f_samples.len() as f64;
    let mean = m1 / s;
    let var = DVector::from_fn(n, |i, _| -> f64 { (m2[i] / s - mean[i] * mean[i]).max(0.0) });
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ObservationProcess, SupportRegion};

    fn toy() -> MultiResDataset {
        let x = [0.0, 0.7, 1.5, 2.1, 3.0];
        let y = [0.3, 0.9, 1.2, 0.4, -0.5];
        let p = ObservationProcess::new(1, 1, y.to_vec(), x.iter().map(|&v| SupportRegion::point(vec![v])).collect()).unwrap();
        MultiResDataset::new(vec![p]).unwrap()
    }

    #[test]
    fn quantile_median() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 5.0, 9.0], 0.5), 5.0);
    }

    #[test]
    fn constant_series_has_zero_std() {
        let s = summarize_series("c", &[2.0; 50]);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.q50, 2.0);
    }

    #[test]
    fn chains_are_seed_deterministic() {
        let cfg = McmcConfig { iters: 200, burn_in: 50, ..Default::default() };
        let a = run_chain(&toy(), &cfg).unwrap();
        let b = run_chain(&toy(), &cfg).unwrap();
        assert_eq!(chain_csv(&a), chain_csv(&b));
        assert!(a.logpost.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn csv_has_one_row_per_block_update() {
        let cfg = McmcConfig { iters: 10, burn_in: 0, ..Default::default() };
        let c = run_chain(&toy(), &cfg).unwrap();
        let csv = chain_csv(&c);
        assert!(csv.starts_with("iter,block,accepted,logpost,variance,lengthscale[0],noise[1,1]\n"));
        assert_eq!(csv.lines().count(), 1 + 10 * 3);
    }

    #[test]
    fn stuck_block_warns() {
        let cfg = McmcConfig { iters: 1000, burn_in: 0, step_noise: 1e6, update_theta: false, ..Default::default() };
        let c = run_chain(&toy(), &cfg).unwrap();
        assert_eq!(c.acceptance["noise[1,1]"], 0.0);
        assert!(c.warnings.iter().any(|w| w.contains("noise[1,1]") && w.contains("below 1000000")), "{:?}", c.warnings);
    }

    #[test]
    fn oracle_needs_shared_points() {
        let d = toy();
        let p2 = ObservationProcess::new(2, 1, vec![0.5], vec![SupportRegion::new(vec![vec![0.0], vec![9.0]]).unwrap()]).unwrap();
        let ds = MultiResDataset::new(vec![d.processes[0].clone(), p2]).unwrap();
        let cfg = McmcConfig { iters: 5, likelihood: McmcLikelihood::Oracle, ..Default::default() };
        assert!(run_chain(&ds, &cfg).is_err());
    }
}
