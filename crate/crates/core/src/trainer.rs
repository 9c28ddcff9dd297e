//! Objectives, gradient checking and first-order optimization.
//!
//! Objectives are maximized. Every objective maps a flat unconstrained
//! parameter vector (see [`ParamVector`](crate::params::ParamVector)) and an
//! epoch number to a value and its gradient. Deterministic objectives ignore
//! the epoch; stochastic ones use it to key their random streams so the
//! same `(θ, epoch)` always gives the same value.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub trait Objective {
    fn value_grad(&self, theta: &[f64], epoch: u64) -> Result<(f64, Vec<f64>)>;

    fn value(&self, theta: &[f64], epoch: u64) -> Result<f64> {
        Ok(self.value_grad(theta, epoch)?.0)
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Evaluates `build` on a fresh tape with `theta` as a single column leaf and
/// returns the value and gradient of the scalar it produces.
pub fn tape_value_grad(theta: &[f64], build: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new();
    let th = t.var(DMatrix::from_column_slice(theta.len(), 1, theta));
    let out = build(&mut t, th)?;
    let v = t.scalar(out);
    if !v.is_finite() {
        return Err(non_finite(theta, 0));
    }
    let g = t.gradient(out).wrt(th);
    Ok((v, g.as_slice().to_vec()))
}

/// Value only, with `theta` as a constant so no backward work is recorded.
pub fn tape_value(theta: &[f64], build: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::new();
    let th = t.constant(DMatrix::from_column_slice(theta.len(), 1, theta));
    let out = build(&mut t, th)?;
    Ok(t.scalar(out))
}

fn non_finite(theta: &[f64], iter: usize) -> Error {
    Error::NonFinite { iter, snapshot: theta.to_vec() }
}

/// Closure-backed objective.
pub struct FnObjective<F: Fn(&[f64], u64) -> Result<(f64, Vec<f64>)>> {
    pub f: F,
    pub deterministic: bool,
}

impl<F: Fn(&[f64], u64) -> Result<(f64, Vec<f64>)>> Objective for FnObjective<F> {
    fn value_grad(&self, theta: &[f64], epoch: u64) -> Result<(f64, Vec<f64>)> {
        (self.f)(theta, epoch)
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }
}

#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the objective's gradient with central differences,
/// `h = step·(1 + |θ_i|)`. The error for one coordinate is
/// `|a − f| / max(|a|, |f|, 1)`. Only coordinates with `mask[i]` are checked.
pub fn check_gradient(obj: &dyn Objective, theta: &[f64], epoch: u64, mask: Option<&[bool]>, step: f64) -> Result<GradientCheck> {
    let (_, g) = obj.value_grad(theta, epoch)?;
    let mut numeric = vec![0.0; theta.len()];
    let mut worst = (0.0, 0);
    let mut th = theta.to_vec();
    for i in 0..theta.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let h = step * (1.0 + theta[i].abs());
        th[i] = theta[i] + h;
        let fp = obj.value(&th, epoch)?;
        th[i] = theta[i] - h;
        let fm = obj.value(&th, epoch)?;
        th[i] = theta[i];
        let fd = (fp - fm) / (2.0 * h);
        numeric[i] = fd;
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradientCheck { max_rel_error: worst.0, worst_index: worst.1, analytic: g, numeric })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Deterministic objectives reject steps that lower the value by more
    /// than this (relative to `1 + |value|`).
    pub tolerance: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, tolerance: 1e-10 }
    }
}

/// One row of the optimization history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub stage: String,
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last_objective(&self, stage: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.stage == stage).map(|r| r.objective)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,iter,objective,grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:?},{:?}", r.stage, r.iter, r.objective, r.grad_norm);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn extend(&mut self, other: History) {
        self.rows.extend(other.rows);
    }
}

/// One optimization stage: which parameters move, for how long, how fast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// `*`-patterns over parameter names; empty means everything.
    pub trainable: Vec<String>,
    /// Patterns removed from the trainable set.
    #[serde(default)]
    pub frozen: Vec<String>,
    pub iters: usize,
    pub lr: f64,
}

impl Stage {
    pub fn new(name: &str, iters: usize, lr: f64) -> Self {
        Stage { name: name.into(), trainable: vec![], frozen: vec![], iters, lr }
    }

    pub fn train(mut self, patterns: &[&str]) -> Self {
        self.trainable = patterns.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn freeze(mut self, patterns: &[&str]) -> Self {
        self.frozen = patterns.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn mask(&self, params: &ParamVector) -> Result<Vec<bool>> {
        let mut m = if self.trainable.is_empty() { vec![true; params.len()] } else { params.mask(&self.trainable)? };
        if !self.frozen.is_empty() {
            for (a, f) in m.iter_mut().zip(params.mask(&self.frozen)?) {
                if f {
                    *a = false;
                }
            }
        }
        Ok(m)
    }
}

/// Adam ascent on the masked coordinates of `theta`.
///
/// For deterministic objectives a step that lowers the value beyond the
/// tolerance is rejected and the step size halved; accepted steps let it
/// recover towards the configured rate. Stochastic objectives take plain
/// Adam steps with the epoch advancing every iteration; a step that fails
/// numerically is retried at half the rate.
pub fn adam(
    obj: &dyn Objective,
    theta: &mut [f64],
    mask: &[bool],
    iters: usize,
    cfg: &AdamConfig,
    stage: &str,
    epoch0: u64,
) -> Result<History> {
    let n = theta.len();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut hist = History::default();
    let det = obj.deterministic();
    let mut lr = cfg.lr;
    let (mut f, mut g) = obj.value_grad(theta, epoch0)?;
    let mut step_count = 0i32;
    let mut cand = theta.to_vec();
    for it in 0..iters {
        let gnorm = g.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v * v).sum::<f64>().sqrt();
        hist.rows.push(HistoryRow { stage: stage.into(), iter: it, objective: f, grad_norm: gnorm });
        step_count += 1;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g[i];
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        }
        let b1 = 1.0 - cfg.beta1.powi(step_count);
        let b2 = 1.0 - cfg.beta2.powi(step_count);
        loop {
            for i in 0..n {
                cand[i] = if mask[i] { theta[i] + lr * (m1[i] / b1) / ((m2[i] / b2).sqrt() + cfg.eps) } else { theta[i] };
            }
            let epoch = if det { epoch0 } else { epoch0 + it as u64 + 1 };
            let res = obj.value_grad(&cand, epoch);
            let accept = match &res {
                Ok((fc, _)) if det => *fc >= f - cfg.tolerance * (1.0 + f.abs()),
                Ok((fc, _)) => fc.is_finite(),
                Err(e) if e.is_numerical() && det => false,
                Err(_) => false,
            };
            if accept {
                let (fc, gc) = res?;
                theta.copy_from_slice(&cand);
                f = fc;
                g = gc;
                lr = (lr * 1.05).min(cfg.lr);
                break;
            }
            let numerical = match &res {
                Err(e) => e.is_numerical(),
                Ok(_) => true,
            };
            if !det && (!numerical || lr < cfg.lr * 1e-6) {
                return Err(match res {
                    Err(e) => e,
                    Ok(_) => non_finite(&cand, it),
                });
            }
            lr *= 0.5;
            if det && lr < cfg.lr * 1e-6 {
                // Converged to within what the step size can resolve.
                break;
            }
        }
    }
    Ok(hist)
}

/// Runs the stages in order with Adam.
pub fn run_schedule(obj: &dyn Objective, params: &mut ParamVector, stages: &[Stage], base: &AdamConfig) -> Result<History> {
    let mut hist = History::default();
    let mut epoch = 0u64;
    for s in stages {
        let mask = s.mask(params)?;
        let cfg = AdamConfig { lr: s.lr, ..base.clone() };
        let h = adam(obj, &mut params.values, &mask, s.iters, &cfg, &s.name, epoch)?;
        epoch += s.iters as u64 + 1;
        hist.extend(h);
    }
    Ok(hist)
}

/// Lloyd's k-means with deterministic farthest-point seeding. Returns `k`
/// centres as rows.
pub fn kmeans(points: &DMatrix<f64>, k: usize, iters: usize) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    let d = points.ncols();
    if k > n {
        return Err(Error::invalid(format!("more inducing points ({k}) than data points ({n})")));
    }
    if k == 0 {
        return Err(Error::invalid("need at least one inducing point"));
    }
    let dist2 = |a: usize, c: &DMatrix<f64>, j: usize| -> f64 { (0..d).map(|q| (points[(a, q)] - c[(j, q)]).powi(2)).sum() };
    let mut centres = DMatrix::zeros(k, d);
    // Start from the point closest to the mean.
    let mean = points.row_mean();
    let first = (0..n)
        .min_by(|&a, &b| {
            let da: f64 = (0..d).map(|q| (points[(a, q)] - mean[q]).powi(2)).sum();
            let db: f64 = (0..d).map(|q| (points[(b, q)] - mean[q]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .unwrap();
    centres.set_row(0, &points.row(first));
    let mut best = vec![f64::INFINITY; n];
    for j in 1..k {
        for (a, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(a, &centres, j - 1));
        }
        let far = (0..n).max_by(|&a, &b| best[a].total_cmp(&best[b]).then(b.cmp(&a))).unwrap();
        centres.set_row(j, &points.row(far));
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (a, slot) in assign.iter_mut().enumerate() {
            let j = (0..k).min_by(|&x, &y| dist2(a, &centres, x).total_cmp(&dist2(a, &centres, y))).unwrap();
            if *slot != j {
                *slot = j;
                changed = true;
            }
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for a in 0..n {
            counts[assign[a]] += 1;
            for q in 0..d {
                sums[(assign[a], q)] += points[(a, q)];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for q in 0..d {
                    centres[(j, q)] = sums[(j, q)] / counts[j] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centres)
}
