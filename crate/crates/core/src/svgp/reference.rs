//! Plain sparse GP regression on point observations.
//!
//! Kept deliberately separate from the multi-resolution code: it computes the
//! standard Gaussian ELBO from marginal variances only, so it can act as an
//! oracle for the reductions of the richer models.

use super::{InducingBlock, LN_2PI};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::Kernel;
use crate::params::{ParamVector, Transform};
use crate::trainer::{tape_value_grad, Objective};
use nalgebra::{DMatrix, DVector};
use std::rc::Rc;

#[derive(Clone, Debug)]
pub struct SvgpRegression {
    pub kernel: Kernel,
    pub z: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Lower factor of `S`.
    pub chol: DMatrix<f64>,
    pub noise: f64,
}

/// Objective wrapper binding a model layout to data.
pub struct SvgpObjective<'a> {
    pub model: &'a SvgpRegression,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
}

impl SvgpRegression {
    pub fn params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        for (name, v) in self.kernel.hypers() {
            p.push(format!("f[0].kernel.{name}"), &[v], Transform::Log);
        }
        p.push("f[0].z", self.z.as_slice(), Transform::Identity);
        p.push("f[0].mean[0]", self.mean.as_slice(), Transform::Identity);
        let packed: Vec<f64> = crate::params::lower_positions(self.z.nrows()).iter().map(|&(i, j)| self.chol[(i, j)]).collect();
        p.push("f[0].chol[0]", &packed, Transform::LowerFactor(self.z.nrows()));
        p.push("noise[1,1]", &[self.noise], Transform::Log);
        p
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        let hyp: Vec<f64> = self
            .kernel
            .hypers()
            .iter()
            .map(|(name, _)| p.get_scalar(&format!("f[0].kernel.{name}")))
            .collect::<Result<_>>()?;
        self.kernel.set_hypers(&hyp);
        let (m, d) = self.z.shape();
        self.z = DMatrix::from_column_slice(m, d, p.raw("f[0].z")?);
        self.mean = DVector::from_column_slice(p.raw("f[0].mean[0]")?);
        self.chol = super::lower_factor(p.raw("f[0].chol[0]")?, m);
        self.noise = p.get_scalar("noise[1,1]")?;
        Ok(())
    }

    pub fn block(&self) -> InducingBlock {
        InducingBlock { z: self.z.clone(), mean: self.mean.clone(), cov: &self.chol * self.chol.transpose(), kernel: self.kernel.clone() }
    }

    /// Latent predictive mean and variance.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let mm = super::conditional_moments(&self.block(), x, false)?;
        Ok((mm.mean, mm.var))
    }

    /// Closed-form ELBO in plain `f64`.
    pub fn elbo(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
        let (mu, var) = self.predict(x)?;
        let ell = super::gaussian_ell(y, mu.as_slice(), var.as_slice(), self.noise);
        Ok(ell - super::gauss_kl(&self.block())?)
    }

    fn build(&self, t: &mut Tape, theta: Var, p: &ParamVector, x: &DMatrix<f64>, y: &[f64]) -> Result<Var> {
        let slice = |t: &mut Tape, name: &str| -> Result<Var> {
            let e = p.entry(name)?;
            let rows: Rc<[usize]> = (e.offset..e.offset + e.len).collect();
            Ok(t.gather(theta, rows))
        };
        let hyp: Vec<Var> = self
            .kernel
            .hypers()
            .iter()
            .map(|(name, _)| slice(t, &format!("f[0].kernel.{name}")))
            .collect::<Result<_>>()?;
        let (m, d) = self.z.shape();
        let zall = slice(t, "f[0].z")?;
        let z: Vec<Var> = (0..d)
            .map(|c| {
                let rows: Rc<[usize]> = (c * m..(c + 1) * m).collect();
                t.gather(zall, rows)
            })
            .collect();
        let mean = slice(t, "f[0].mean[0]")?;
        let raw = slice(t, "f[0].chol[0]")?;
        let ls = super::lower_factor_ad(t, raw, m);
        let log_noise = slice(t, "noise[1,1]")?;

        let kzz0 = self.kernel.cross_ad(t, &hyp, &z, &z);
        let jit = t.constant(DMatrix::identity(m, m) * self.kernel.jitter());
        let kzz = t.add(kzz0, jit);
        let l = t.cholesky(kzz)?;
        let xs: Vec<Var> = (0..x.ncols()).map(|c| t.constant(x.columns(c, 1).into_owned())).collect();
        let kzx = self.kernel.cross_ad(t, &hyp, &z, &xs);
        let a = t.solve_lower(l, kzx);
        let dd = t.solve_lower_t(l, a);
        let mt = t.transpose(mean);
        let mu_row = t.matmul(mt, dd);
        let lst = t.transpose(ls);
        let c = t.matmul(lst, dd);
        let c2 = t.square(c);
        let qs = t.sum_cols(c2);
        let a2 = t.square(a);
        let qa = t.sum_cols(a2);
        let kd0 = self.kernel.variance_ad(t, &hyp);
        let kd = t.offset(kd0, self.kernel.jitter());
        let v0 = t.sub(qs, qa);
        let var_row = t.scalar_add(v0, kd);

        let yrow = t.constant(DMatrix::from_row_slice(1, y.len(), y));
        let r = t.sub(yrow, mu_row);
        let r2 = t.square(r);
        let tot = t.add(r2, var_row);
        let s = t.sum(tot);
        let neg = t.neg(log_noise);
        let inv = t.exp(neg);
        let quad = t.scalar_mul(s, inv);
        let quad = t.scale(quad, -0.5);
        let n = y.len() as f64;
        let ln = t.scale(log_noise, -0.5 * n);
        let e0 = t.add(quad, ln);
        let ell = t.offset(e0, -0.5 * n * LN_2PI);

        // KL(q ‖ p).
        let v = t.solve_lower(l, ls);
        let v2 = t.square(v);
        let tr = t.sum(v2);
        let am = t.solve_lower(l, mean);
        let am2 = t.square(am);
        let maha = t.sum(am2);
        let ldk = super::logdet_chol(t, l);
        let lds = super::logdet_chol(t, ls);
        let k1 = t.add(tr, maha);
        let k2 = t.add(k1, ldk);
        let k3 = t.sub(k2, lds);
        let k4 = t.offset(k3, -(m as f64));
        let kl = t.scale(k4, 0.5);
        Ok(t.sub(ell, kl))
    }
}

impl Objective for SvgpObjective<'_> {
    fn value_grad(&self, theta: &[f64], _epoch: u64) -> Result<(f64, Vec<f64>)> {
        let p = self.model.params();
        tape_value_grad(theta, |t, th| self.model.build(t, th, &p, self.x, self.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::trainer::check_gradient;

    fn toy() -> (SvgpRegression, DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_column_slice(8, 1, &[0.0, 0.4, 0.9, 1.3, 2.0, 2.2, 3.1, 3.5]);
        let y: Vec<f64> = x.iter().map(|v: &f64| v.sin()).collect();
        let model = SvgpRegression {
            kernel: Kernel::Stationary(KernelSpec::se(1.0, vec![0.8])),
            z: DMatrix::from_column_slice(3, 1, &[0.2, 1.7, 3.0]),
            mean: DVector::from_vec(vec![0.1, 0.5, -0.2]),
            chol: DMatrix::from_row_slice(3, 3, &[0.3, 0.0, 0.0, 0.05, 0.2, 0.0, 0.0, -0.1, 0.4]),
            noise: 0.05,
        };
        (model, x, y)
    }

    #[test]
    fn tape_elbo_matches_plain() {
        let (model, x, y) = toy();
        let obj = SvgpObjective { model: &model, x: &x, y: &y };
        let p = model.params();
        let v = obj.value(&p.values, 0).unwrap();
        assert!((v - model.elbo(&x, &y).unwrap()).abs() < 1e-10);
        let chk = check_gradient(&obj, &p.values, 0, None, 1e-5).unwrap();
        assert!(chk.passes(1e-5), "{chk:?}");
    }
}
