//! Sandwich information estimates and magnitude corrections for composite
//! likelihoods.
//!
//! `H` is the sum of outer products of per-block score vectors and `J` is the
//! observed information `−∇²Σℓ`, so both are positive semi-definite at a
//! maximum. A product likelihood that counts each observation `d` times has
//! `H ∝ d²` and `J ∝ d`; both corrections then scale by `1/d`.

use crate::dataset::{MultiResDataset, ObservationProcess};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use nalgebra::{DMatrix, SymmetricEigen};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct SandwichEstimate {
    /// `Σ_b g_b g_bᵀ` over independent blocks.
    pub h: DMatrix<f64>,
    /// `−∇²Σℓ`, symmetrised.
    pub j: DMatrix<f64>,
    pub theta_hat: Vec<f64>,
    pub param_names: Vec<String>,
    /// Norm of `Σ_b g_b` at `theta_hat`.
    pub grad_norm: f64,
    pub warning: Option<String>,
}

/// Per-block score vectors of a composite log-likelihood.
pub trait TermGradients {
    fn term_gradients(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>>;
}

impl<F> TermGradients for F
where
    F: Fn(&[f64]) -> Result<Vec<Vec<f64>>>,
{
    fn term_gradients(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        self(theta)
    }
}

fn total(grads: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut g = vec![0.0; d];
    for b in grads {
        for (a, v) in g.iter_mut().zip(b) {
            *a += v;
        }
    }
    g
}

/// `H` from block scores at `theta_hat`; `J` from central differences of
/// the total score with step `1e-4·(1+|θ_i|)`.
pub fn estimate_sandwich(terms: &dyn TermGradients, theta_hat: &[f64], param_names: Vec<String>) -> Result<SandwichEstimate> {
    let d = theta_hat.len();
    if param_names.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: param_names.len() });
    }
    let grads = terms.term_gradients(theta_hat)?;
    let mut h = DMatrix::zeros(d, d);
    for g in &grads {
        if g.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: g.len() });
        }
        let v = nalgebra::DVector::from_column_slice(g);
        h += &v * v.transpose();
    }
    let g0 = total(&grads, d);
    let grad_norm = g0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut j = DMatrix::zeros(d, d);
    let mut th = theta_hat.to_vec();
    for i in 0..d {
        let step = 1e-4 * (1.0 + theta_hat[i].abs());
        th[i] = theta_hat[i] + step;
        let gp = total(&terms.term_gradients(&th)?, d);
        th[i] = theta_hat[i] - step;
        let gm = total(&terms.term_gradients(&th)?, d);
        th[i] = theta_hat[i];
        for r in 0..d {
            j[(r, i)] = -(gp[r] - gm[r]) / (2.0 * step);
        }
    }
    let j = (&j + j.transpose()) * 0.5;
    let scale = 1.0 + j.diagonal().abs().max();
    let warning = (grad_norm > 1e-3 * scale)
        .then(|| format!("score norm {grad_norm:.3e} at the estimate is not small; weights may be unreliable"));
    Ok(SandwichEstimate { h, j, theta_hat: theta_hat.to_vec(), param_names, grad_norm, warning })
}

fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let singular = || Error::Singular(format!("{what}; reduce the parameter subset"));
    let lu = a.clone().lu();
    let x = lu.solve(b).ok_or_else(singular)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(singular());
    }
    let cond = {
        let e = SymmetricEigen::new((a + a.transpose()) * 0.5).eigenvalues;
        let (lo, hi) = (e.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())), e.amax());
        if hi == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    };
    if cond > 1e14 {
        return Err(singular());
    }
    Ok(x)
}

/// `|θ| / Tr[J⁻¹H]`.
pub fn phi_ribatet(est: &SandwichEstimate) -> Result<f64> {
    let x = solve_spd(&est.j, &est.h, "J")?;
    let phi = est.theta_hat.len() as f64 / x.trace();
    positive(phi)
}

/// `Tr[J H⁻¹ J] / Tr[J]`.
pub fn phi_lyddon(est: &SandwichEstimate) -> Result<f64> {
    let x = solve_spd(&est.h, &est.j, "H")?;
    let phi = (&est.j * x).trace() / est.j.trace();
    positive(phi)
}

fn positive(phi: f64) -> Result<f64> {
    if phi.is_finite() && phi > 0.0 {
        Ok(phi)
    } else {
        Err(Error::invalid(format!("composite weight {phi} is not positive; H or J is indefinite")))
    }
}

/// Asymptotic posterior standard deviation of a noise standard deviation
/// `σ = exp(½θ_i)` under `N(θ̂, (φJ)⁻¹)`, where `θ_i` is the log variance.
/// Returns `(σ̂, sd)`.
pub fn noise_std_posterior(est: &SandwichEstimate, name: &str, phi: f64) -> Result<(f64, f64)> {
    let i = est
        .param_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::invalid(format!("'{name}' is not in the sandwich subset")))?;
    if !(phi > 0.0) {
        return Err(Error::invalid(format!("composite weight {phi} must be positive")));
    }
    let cov = spd_inverse(&est.j)? / phi;
    let sigma = (0.5 * est.theta_hat[i]).exp();
    Ok((sigma, 0.5 * sigma * cov[(i, i)].sqrt()))
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}

/// Diagnostics table with columns `quantity,index,value`.
pub fn diagnostics_csv(est: &SandwichEstimate) -> String {
    let mut s = String::from("quantity,index,value\n");
    for (i, v) in eigenvalues(&est.h).iter().enumerate() {
        let _ = writeln!(s, "eig_h,{i},{v:?}");
    }
    for (i, v) in eigenvalues(&est.j).iter().enumerate() {
        let _ = writeln!(s, "eig_neg_j,{i},{v:?}");
    }
    for (name, r) in [("phi_ribatet", phi_ribatet(est)), ("phi_lyddon", phi_lyddon(est))] {
        match r {
            Ok(v) => {
                let _ = writeln!(s, "{name},,{v:?}");
            }
            Err(_) => {
                let _ = writeln!(s, "{name},,NaN");
            }
        }
    }
    let _ = writeln!(s, "grad_norm,,{:?}", est.grad_norm);
    for (i, (n, v)) in est.param_names.iter().zip(&est.theta_hat).enumerate() {
        let _ = writeln!(s, "theta[{n}],{i},{v:?}");
    }
    s
}

pub fn save_diagnostics(est: &SandwichEstimate, path: &Path) -> Result<()> {
    std::fs::write(path, diagnostics_csv(est)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Groups observations whose support bounding boxes intersect, across and
/// within processes. Each group lists `(process index, observation index)`.
pub fn independence_blocks(ds: &MultiResDataset) -> Vec<Vec<(usize, usize)>> {
    let mut items = Vec::new();
    let mut boxes = Vec::new();
    for (pi, p) in ds.processes.iter().enumerate() {
        for (n, s) in p.supports.iter().enumerate() {
            let d = s.dim();
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for x in &s.points {
                for c in 0..d {
                    lo[c] = lo[c].min(x[c]);
                    hi[c] = hi[c].max(x[c]);
                }
            }
            items.push((pi, n));
            boxes.push((lo, hi));
        }
    }
    let mut parent: Vec<usize> = (0..items.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    // Sweep along the first coordinate so only candidate pairs are compared.
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| boxes[a].0[0].total_cmp(&boxes[b].0[0]));
    let mut active: Vec<usize> = Vec::new();
    for &i in &order {
        active.retain(|&a| boxes[a].1[0] >= boxes[i].0[0]);
        for &a in &active {
            let hit = (0..boxes[i].0.len()).all(|c| boxes[a].0[c] <= boxes[i].1[c] && boxes[i].0[c] <= boxes[a].1[c]);
            if hit {
                let (ra, ri) = (find(&mut parent, a), find(&mut parent, i));
                if ra != ri {
                    parent[ra.max(ri)] = ra.min(ri);
                }
            }
        }
        active.push(i);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for i in 0..items.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(items[i]);
    }
    groups.into_values().collect()
}

/// The sub-dataset made of one block's observations.
pub fn block_dataset(ds: &MultiResDataset, block: &[(usize, usize)]) -> Result<MultiResDataset> {
    let mut procs = Vec::new();
    for (pi, p) in ds.processes.iter().enumerate() {
        let idx: Vec<usize> = block.iter().filter(|(a, _)| *a == pi).map(|&(_, n)| n).collect();
        if idx.is_empty() {
            continue;
        }
        procs.push(ObservationProcess::new(
            p.process,
            p.task,
            idx.iter().map(|&n| p.targets[n]).collect(),
            idx.iter().map(|&n| p.supports[n].clone()).collect(),
        )?);
    }
    MultiResDataset::new(procs)
}
