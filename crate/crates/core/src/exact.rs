//! Exact GP computations for observations that are linear functionals of
//! the latent functions (constant mixing weights).
//!
//! With `y = A (Σ_q c_q f_q) + ε` every process is jointly Gaussian, so the
//! log marginal likelihood is available in closed form and splits into
//! sequential conditionals `log p(y_n | y_<n)`. Those conditional scores are
//! martingale differences, which is what the sandwich estimate needs.

use crate::autodiff::{Tape, Var};
use crate::dataset::{MultiResDataset, ObservationProcess};
use crate::error::{Error, Result};
use crate::gprn::{param_slice, NoiseEntry};
use crate::kernels::Kernel;
use crate::linalg;
use crate::params::{ParamVector, Transform};
use crate::svgp::LN_2PI;
use crate::trainer::{adam, tape_value_grad, AdamConfig, History, Objective};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Row-normalised aggregation matrix of one process (bags × stacked points).
pub fn aggregation_matrix(p: &ObservationProcess) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(p.len(), p.n_points());
    let mut off = 0;
    for (n, s) in p.supports.iter().enumerate() {
        for i in 0..s.len() {
            a[(n, off + i)] = s.weight;
        }
        off += s.len();
    }
    a
}

/// One latent function with its tape hyperparameters.
pub struct LatentAd<'a> {
    pub kernel: &'a Kernel,
    pub log_hypers: Vec<Var>,
}

/// One process: its data, the weight `c_q` it puts on each latent function
/// and its log noise node.
pub struct ProcessAd<'a> {
    pub process: &'a ObservationProcess,
    pub scales: Vec<f64>,
    pub log_noise: Var,
}

/// Column of `log p(y_n | y_<n)` for the processes modelled jointly.
pub fn sequential_terms_ad(t: &mut Tape, latents: &[LatentAd], procs: &[ProcessAd]) -> Result<Var> {
    let n_obs: usize = procs.iter().map(|p| p.process.len()).sum();
    let n_pts: usize = procs.iter().map(|p| p.process.n_points()).sum();
    let d = procs.first().ok_or(Error::NoObservations)?.process.dim();
    let mut pts = DMatrix::zeros(n_pts, d);
    let mut y = Vec::with_capacity(n_obs);
    {
        let mut off = 0;
        for p in procs {
            let s = p.process.stacked_points();
            pts.rows_mut(off, s.nrows()).copy_from(&s);
            off += s.nrows();
            y.extend_from_slice(&p.process.targets);
        }
    }
    let xs: Vec<Var> = (0..d).map(|c| t.constant(pts.columns(c, 1).into_owned())).collect();
    let mut cov: Option<Var> = None;
    for (q, lat) in latents.iter().enumerate() {
        let mut a = DMatrix::zeros(n_obs, n_pts);
        let (mut ro, mut co) = (0, 0);
        for p in procs {
            let ap = aggregation_matrix(p.process) * p.scales[q];
            a.view_mut((ro, co), ap.shape()).copy_from(&ap);
            ro += ap.nrows();
            co += ap.ncols();
        }
        let k0 = lat.kernel.cross_ad(t, &lat.log_hypers, &xs, &xs);
        let jit = t.constant(DMatrix::identity(n_pts, n_pts) * lat.kernel.jitter());
        let k = t.add(k0, jit);
        let at = t.constant(a.transpose());
        let ac = t.constant(a);
        let ak = t.matmul(ac, k);
        let c = t.matmul(ak, at);
        cov = Some(match cov {
            None => c,
            Some(prev) => t.add(prev, c),
        });
    }
    let cov = cov.ok_or_else(|| Error::invalid("no latent functions"))?;
    let mut parts = Vec::with_capacity(procs.len());
    for p in procs {
        let ones = t.constant(DMatrix::from_element(p.process.len(), 1, 1.0));
        let s = t.exp(p.log_noise);
        parts.push(t.scalar_mul(ones, s));
    }
    let noise = t.vcat(&parts);
    let pos: Rc<[(usize, usize)]> = (0..n_obs).map(|i| (i, i)).collect();
    let nd = t.entries(noise, pos, n_obs, n_obs);
    let c = t.add(cov, nd);
    let l = t.cholesky(c)?;
    let yc = t.col_const(&y);
    let v = t.solve_lower(l, yc);
    let v2 = t.square(v);
    let hv = t.scale(v2, -0.5);
    let dg = t.diag(l);
    let ld = t.ln(dg);
    let s = t.sub(hv, ld);
    Ok(t.offset(s, -0.5 * LN_2PI))
}

/// Exact GP regression on aggregated observations of one task, all
/// processes modelled jointly with independent noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggGp {
    pub kernel: Kernel,
    pub noise: Vec<NoiseEntry>,
    pub data: MultiResDataset,
}

struct AggObjective<'a> {
    model: &'a AggGp,
    params: ParamVector,
}

impl Objective for AggObjective<'_> {
    fn value_grad(&self, theta: &[f64], _epoch: u64) -> Result<(f64, Vec<f64>)> {
        tape_value_grad(theta, |t, th| self.model.log_marginal_ad(t, th, &self.params))
    }
}

impl AggGp {
    pub fn new(kernel: Kernel, noise: f64, data: &MultiResDataset) -> Result<Self> {
        if data.num_tasks() != 1 {
            return Err(Error::invalid("aggregated-kernel GP handles a single task"));
        }
        Ok(AggGp {
            kernel,
            noise: data.processes.iter().map(|p| NoiseEntry { process: p.process, task: p.task, variance: noise }).collect(),
            data: data.clone(),
        })
    }

    pub fn params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        for (name, v) in self.kernel.hypers() {
            p.push(format!("kernel.{name}"), &[v], Transform::Log);
        }
        for n in &self.noise {
            p.push(format!("noise[{},{}]", n.process, n.task), &[n.variance], Transform::Log);
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        let hyp: Vec<f64> =
            self.kernel.hypers().iter().map(|(name, _)| p.get_scalar(&format!("kernel.{name}"))).collect::<Result<_>>()?;
        self.kernel.set_hypers(&hyp);
        for n in self.noise.iter_mut() {
            n.variance = p.get_scalar(&format!("noise[{},{}]", n.process, n.task))?;
        }
        Ok(())
    }

    fn log_marginal_ad(&self, t: &mut Tape, th: Var, p: &ParamVector) -> Result<Var> {
        let hyp: Vec<Var> = self
            .kernel
            .hypers()
            .iter()
            .map(|(name, _)| param_slice(t, th, p, &format!("kernel.{name}")))
            .collect::<Result<_>>()?;
        let procs: Vec<ProcessAd> = self
            .data
            .processes
            .iter()
            .zip(&self.noise)
            .map(|(pr, n)| {
                Ok(ProcessAd { process: pr, scales: vec![1.0], log_noise: param_slice(t, th, p, &format!("noise[{},{}]", n.process, n.task))? })
            })
            .collect::<Result<_>>()?;
        let terms = sequential_terms_ad(t, &[LatentAd { kernel: &self.kernel, log_hypers: hyp }], &procs)?;
        Ok(t.sum(terms))
    }

    /// Log marginal likelihood over [`AggGp::params`].
    pub fn objective(&self) -> impl Objective + '_ {
        AggObjective { model: self, params: self.params() }
    }

    pub fn log_marginal(&self) -> Result<f64> {
        let p = self.params();
        tape_value_grad(&p.values, |t, th| self.log_marginal_ad(t, th, &p)).map(|r| r.0)
    }

    /// Type-II maximum likelihood with Adam.
    pub fn fit(&mut self, iters: usize, lr: f64) -> Result<History> {
        let mut p = self.params();
        let obj = AggObjective { model: self, params: p.clone() };
        let mask = vec![true; p.len()];
        let h = adam(&obj, &mut p.values, &mask, iters, &AdamConfig { lr, ..AdamConfig::default() }, "ml2", 0)?;
        self.set_params(&p)?;
        Ok(h)
    }

    fn joint(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let pts = self.data.all_points();
        let mut a = DMatrix::zeros(self.data.n_observations(), pts.nrows());
        let mut y = Vec::new();
        let mut noise = Vec::new();
        let (mut ro, mut co) = (0, 0);
        for (p, n) in self.data.processes.iter().zip(&self.noise) {
            let ap = aggregation_matrix(p);
            a.view_mut((ro, co), ap.shape()).copy_from(&ap);
            ro += ap.nrows();
            co += ap.ncols();
            y.extend_from_slice(&p.targets);
            noise.extend(std::iter::repeat(n.variance).take(p.len()));
        }
        let k = self.kernel.gram_sym(&pts)?;
        let c = &a * &k * a.transpose() + DMatrix::from_diagonal(&DVector::from_vec(noise));
        Ok((a, linalg::symmetrize(&c), DVector::from_vec(y)))
    }

    /// Latent posterior mean and variance at the rows of `x`.
    pub fn predict_latent(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (a, c, y) = self.joint()?;
        let l = linalg::cholesky(&c)?;
        let kx = self.kernel.gram(x, &self.data.all_points())? * a.transpose();
        let alpha = linalg::solve_lower_t(&l, &linalg::solve_lower(&l, &DMatrix::from_column_slice(y.len(), 1, y.as_slice())));
        let mean = &kx * alpha;
        let v = linalg::solve_lower(&l, &kx.transpose());
        let prior = self.kernel.variance() + self.kernel.jitter();
        let var = DVector::from_fn(x.nrows(), |i, _| (prior - v.column(i).norm_squared()).max(0.0));
        Ok((mean.column(0).into_owned(), var))
    }

    pub fn predict(&self, x: &DMatrix<f64>, process: usize, task: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let (m, v) = self.predict_latent(x)?;
        let n = self
            .noise
            .iter()
            .find(|n| n.process == process && n.task == task)
            .ok_or_else(|| Error::invalid(format!("model has no noise for process {process}, task {task}")))?;
        Ok((m, v.add_scalar(n.variance)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SupportRegion;
    use crate::kernels::KernelSpec;
    use crate::trainer::check_gradient;

    fn ds() -> MultiResDataset {
        let p1 = ObservationProcess::new(1, 1, vec![0.3, -0.2, 0.9, 0.4], (0..4).map(|i| SupportRegion::point(vec![i as f64 * 0.7])).collect()).unwrap();
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

    #[test]
    fn sequential_terms_sum_to_the_joint_density() {
        let m = AggGp::new(Kernel::Stationary(KernelSpec::se(1.3, vec![0.8])), 0.2, &ds()).unwrap();
        let (_, c, y) = m.joint().unwrap();
        let want = linalg::log_mvn(&y, &DVector::zeros(y.len()), &c).unwrap();
        assert!((m.log_marginal().unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn marginal_gradient_passes_the_verifier() {
        let m = AggGp::new(Kernel::Stationary(KernelSpec::matern32(1.3, vec![0.8])), 0.2, &ds()).unwrap();
        let obj = AggObjective { model: &m, params: m.params() };
        let chk = check_gradient(&obj, &obj.params.values, 0, None, 1e-5).unwrap();
        assert!(chk.passes(1e-4), "{chk:?}");
    }

    #[test]
    fn point_data_prediction_is_standard_gp() {
        let p = ObservationProcess::new(1, 1, vec![1.0, -1.0], vec![SupportRegion::point(vec![0.0]), SupportRegion::point(vec![1.0])]).unwrap();
        let d = MultiResDataset::new(vec![p]).unwrap();
        let mut k = KernelSpec::se(1.0, vec![1.0]);
        k.jitter = 0.0;
        let m = AggGp::new(Kernel::Stationary(k), 0.1, &d).unwrap();
        let (mu, var) = m.predict_latent(&DMatrix::from_row_slice(1, 1, &[0.0])).unwrap();
        let e = (-1.0f64).exp();
        let c = DMatrix::from_row_slice(2, 2, &[1.1, e, e, 1.1]);
        let kx = DMatrix::from_row_slice(1, 2, &[1.0, e]);
        let ci = c.try_inverse().unwrap();
        let want_m = (&kx * &ci * DVector::from_vec(vec![1.0, -1.0]))[0];
        let want_v = 1.0 - (&kx * &ci * kx.transpose())[0];
        assert!((mu[0] - want_m).abs() < 1e-12 && (var[0] - want_v).abs() < 1e-12);
    }

    #[test]
    fn fitting_raises_the_marginal_likelihood() {
        let mut m = AggGp::new(Kernel::Stationary(KernelSpec::se(1.0, vec![0.1])), 0.5, &ds()).unwrap();
        let before = m.log_marginal().unwrap();
        let h = m.fit(200, 0.05).unwrap();
        assert_eq!(h.len(), 200);
        assert!(m.log_marginal().unwrap() > before);
    }
}
