//! Stationary covariance functions.
//!
//! The squared exponential uses `k = A·exp(−Σ_d (x_d − x'_d)² / l_d)`: the
//! lengthscale divides the squared distance, with no factor of two. Matérn-3/2
//! uses the usual `A(1 + √3 r) exp(−√3 r)` with `r² = Σ_d (x_d − x'_d)² / l_d²`.

use crate::autodiff::{Tape, Unary, Var};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    SquaredExponential,
    Matern32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec { family, variance, lengthscales, jitter: 1e-6 * variance }
    }

    pub fn se(variance: f64, lengthscales: Vec<f64>) -> Self {
        Self::new(KernelFamily::SquaredExponential, variance, lengthscales)
    }

    pub fn matern32(variance: f64, lengthscales: Vec<f64>) -> Self {
        Self::new(KernelFamily::Matern32, variance, lengthscales)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || self.lengthscales.iter().any(|l| !(*l > 0.0)) || !(self.jitter >= 0.0) {
            return Err(Error::invalid(format!(
                "kernel needs variance > 0, lengthscales > 0, jitter >= 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }

    fn scaled_sq(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let pow = match self.family {
            KernelFamily::SquaredExponential => 1,
            KernelFamily::Matern32 => 2,
        };
        x1.iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| (a - b) * (a - b) / l.powi(pow))
            .sum()
    }

    fn profile(&self, s: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => (-s).exp(),
            KernelFamily::Matern32 => {
                let r = (3.0 * s).sqrt();
                (1.0 + r) * (-r).exp()
            }
        }
    }
}

/// One factor of a product kernel acting on a subset of input dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub dims: Vec<usize>,
    pub spec: KernelSpec,
}

/// A covariance function over `input_dim` dimensions: a single stationary
/// kernel, or a separable product of kernels over disjoint dimension groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Stationary(KernelSpec),
    Product { factors: Vec<Factor>, jitter: f64 },
}

impl From<KernelSpec> for Kernel {
    fn from(s: KernelSpec) -> Self {
        Kernel::Stationary(s)
    }
}

impl Kernel {
    pub fn product(factors: Vec<Factor>) -> Self {
        let var: f64 = factors.iter().map(|f| f.spec.variance).product();
        Kernel::Product { factors, jitter: 1e-6 * var }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Kernel::Stationary(s) => s.lengthscales.len(),
            Kernel::Product { factors, .. } => {
                factors.iter().flat_map(|f| f.dims.iter()).max().map_or(0, |d| d + 1)
            }
        }
    }

    /// k(x, x).
    pub fn variance(&self) -> f64 {
        match self {
            Kernel::Stationary(s) => s.variance,
            Kernel::Product { factors, .. } => factors.iter().map(|f| f.spec.variance).product(),
        }
    }

    pub fn jitter(&self) -> f64 {
        match self {
            Kernel::Stationary(s) => s.jitter,
            Kernel::Product { jitter, .. } => *jitter,
        }
    }

    pub fn set_jitter(&mut self, j: f64) {
        match self {
            Kernel::Stationary(s) => s.jitter = j,
            Kernel::Product { jitter, .. } => *jitter = j,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Stationary(s) => s.validate(),
            Kernel::Product { factors, .. } => {
                if factors.is_empty() {
                    return Err(Error::invalid("product kernel without factors"));
                }
                for f in factors {
                    f.spec.validate()?;
                    if f.dims.len() != f.spec.lengthscales.len() {
                        return Err(Error::DimensionMismatch {
                            expected: f.dims.len(),
                            found: f.spec.lengthscales.len(),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let want = self.input_dim();
        if d != want {
            return Err(Error::DimensionMismatch { expected: want, found: d });
        }
        Ok(())
    }

    /// k(x1, x2).
    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_dim(x1.len())?;
        self.check_dim(x2.len())?;
        Ok(self.eval_unchecked(x1, x2))
    }

    fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        match self {
            Kernel::Stationary(s) => s.variance * s.profile(s.scaled_sq(x1, x2)),
            Kernel::Product { factors, .. } => factors
                .iter()
                .map(|f| {
                    let a: Vec<f64> = f.dims.iter().map(|&d| x1[d]).collect();
                    let b: Vec<f64> = f.dims.iter().map(|&d| x2[d]).collect();
                    f.spec.variance * f.spec.profile(f.spec.scaled_sq(&a, &b))
                })
                .product(),
        }
    }

    /// Cross-covariance between the rows of `x1` and `x2`. When the two point
    /// sets are identical the jitter is added to the diagonal.
    pub fn gram(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x1.ncols())?;
        self.check_dim(x2.ncols())?;
        let rows1: Vec<Vec<f64>> = x1.row_iter().map(|r| r.iter().copied().collect()).collect();
        let rows2: Vec<Vec<f64>> = x2.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut k = DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| self.eval_unchecked(&rows1[i], &rows2[j]));
        if x1 == x2 {
            for i in 0..k.nrows() {
                k[(i, i)] += self.jitter();
            }
        }
        Ok(k)
    }

    /// Gram matrix of `x` with itself, jitter included.
    pub fn gram_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.gram(x, x)
    }

    /// Positive hyperparameters in packing order, with their names.
    pub fn hypers(&self) -> Vec<(String, f64)> {
        let one = |prefix: &str, s: &KernelSpec| {
            let mut v = vec![(format!("{prefix}variance"), s.variance)];
            for (d, l) in s.lengthscales.iter().enumerate() {
                v.push((format!("{prefix}lengthscale[{d}]"), *l));
            }
            v
        };
        match self {
            Kernel::Stationary(s) => one("", s),
            Kernel::Product { factors, .. } => factors
                .iter()
                .enumerate()
                .flat_map(|(i, f)| one(&format!("factor[{i}]."), &f.spec))
                .collect(),
        }
    }

    /// Inverse of [`Kernel::hypers`].
    pub fn set_hypers(&mut self, values: &[f64]) {
        let mut it = values.iter();
        let mut set = |s: &mut KernelSpec| {
            s.variance = *it.next().expect("hyper count");
            for l in s.lengthscales.iter_mut() {
                *l = *it.next().expect("hyper count");
            }
        };
        match self {
            Kernel::Stationary(s) => set(s),
            Kernel::Product { factors, .. } => factors.iter_mut().for_each(|f| set(&mut f.spec)),
        }
    }

    pub fn n_hypers(&self) -> usize {
        self.hypers().len()
    }

    /// Differentiable version: `log_hypers` holds one 1×1 node per entry of
    /// [`Kernel::hypers`] (log scale). `x` and `z` hold one column node per
    /// input dimension.
    pub fn cross_ad(&self, t: &mut Tape, log_hypers: &[Var], x: &[Var], z: &[Var]) -> Var {
        self.build_ad(t, log_hypers, x, z, |t, a, b| t.sqdist(a, b))
    }

    /// Differentiable kernel values `k(x_i, y_i)` for paired rows; returns a column.
    pub fn paired_ad(&self, t: &mut Tape, log_hypers: &[Var], x: &[Var], y: &[Var]) -> Var {
        self.build_ad(t, log_hypers, x, y, |t, a, b| {
            let d = t.sub(a, b);
            t.square(d)
        })
    }

    fn build_ad(
        &self,
        t: &mut Tape,
        log_hypers: &[Var],
        x: &[Var],
        z: &[Var],
        sq: impl Fn(&mut Tape, Var, Var) -> Var,
    ) -> Var {
        let factor = |t: &mut Tape, spec: &KernelSpec, hyp: &[Var], dims: &[usize]| -> Var {
            let pow = match spec.family {
                KernelFamily::SquaredExponential => -1.0,
                KernelFamily::Matern32 => -2.0,
            };
            let mut s: Option<Var> = None;
            for (k, &d) in dims.iter().enumerate() {
                let d2 = sq(t, x[d], z[d]);
                let sc = t.scale(hyp[1 + k], pow);
                let inv = t.exp(sc);
                let term = t.scalar_mul(d2, inv);
                s = Some(match s {
                    None => term,
                    Some(prev) => t.add(prev, term),
                });
            }
            let s = s.expect("kernel needs at least one dimension");
            let prof = match spec.family {
                KernelFamily::SquaredExponential => {
                    let n = t.neg(s);
                    t.exp(n)
                }
                KernelFamily::Matern32 => t.unary(s, Unary::Matern32Sq),
            };
            let a = t.exp(hyp[0]);
            t.scalar_mul(prof, a)
        };
        match self {
            Kernel::Stationary(spec) => {
                let dims: Vec<usize> = (0..spec.lengthscales.len()).collect();
                factor(t, spec, log_hypers, &dims)
            }
            Kernel::Product { factors, .. } => {
                let mut off = 0;
                let mut out: Option<Var> = None;
                for f in factors {
                    let n = 1 + f.dims.len();
                    let k = factor(t, &f.spec, &log_hypers[off..off + n], &f.dims);
                    off += n;
                    out = Some(match out {
                        None => k,
                        Some(p) => t.mul(p, k),
                    });
                }
                out.expect("product kernel without factors")
            }
        }
    }

    /// Differentiable `k(x, x)` as a 1×1 node.
    pub fn variance_ad(&self, t: &mut Tape, log_hypers: &[Var]) -> Var {
        match self {
            Kernel::Stationary(_) => t.exp(log_hypers[0]),
            Kernel::Product { factors, .. } => {
                let mut off = 0;
                let mut sum: Option<Var> = None;
                for f in factors {
                    let v = log_hypers[off];
                    off += 1 + f.dims.len();
                    sum = Some(match sum {
                        None => v,
                        Some(p) => t.add(p, v),
                    });
                }
                t.exp(sum.expect("factors"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn se_values() {
        let k = Kernel::from(KernelSpec::se(1.0, vec![1.0]));
        assert_eq!(k.eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert!(k.eval(&[0.0], &[40.0]).unwrap() < 1e-300);
        let k2 = Kernel::from(KernelSpec::se(2.0, vec![2.0]));
        assert!((k2.eval(&[0.0], &[1.0]).unwrap() - 1.2130613194252668).abs() < 1e-15);
    }

    #[test]
    fn matern_values() {
        let k = Kernel::from(KernelSpec::matern32(1.5, vec![0.5]));
        let r = 3f64.sqrt() * 0.4 / 0.5;
        let want = 1.5 * (1.0 + r) * (-r).exp();
        assert!((k.eval(&[0.1], &[0.5]).unwrap() - want).abs() < 1e-15);
        assert_eq!(k.eval(&[2.0], &[2.0]).unwrap(), 1.5);
    }

    #[test]
    fn gram_jitter_and_transpose() {
        let mut k = Kernel::from(KernelSpec::se(1.0, vec![1.0]));
        k.set_jitter(1e-6);
        assert_eq!(k.gram_sym(&pts(&[0.0])).unwrap()[(0, 0)], 1.000001);
        let g = k.gram(&pts(&[0.0, 1.0]), &pts(&[0.0])).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(1, 0)] - (-1f64).exp()).abs() < 1e-16);
        let a = pts(&[0.1, 0.7, 2.0]);
        let b = pts(&[-1.0, 0.4]);
        assert_eq!(k.gram(&a, &b).unwrap(), k.gram(&b, &a).unwrap().transpose());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let k = Kernel::from(KernelSpec::se(1.0, vec![1.0, 1.0]));
        assert_eq!(k.eval(&[0.0], &[0.0]).unwrap_err(), Error::DimensionMismatch { expected: 2, found: 1 });
    }

    #[test]
    fn product_of_se_equals_ard_se() {
        let ard = Kernel::from(KernelSpec::se(2.0, vec![0.5, 3.0]));
        let prod = Kernel::product(vec![
            Factor { dims: vec![0], spec: KernelSpec::se(2.0, vec![0.5]) },
            Factor { dims: vec![1], spec: KernelSpec::se(1.0, vec![3.0]) },
        ]);
        let (a, b) = ([0.2, -1.0], [1.1, 0.5]);
        assert!((ard.eval(&a, &b).unwrap() - prod.eval(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn differentiable_gram_matches_values() {
        for kern in [
            Kernel::from(KernelSpec::se(1.7, vec![0.4, 2.0])),
            Kernel::from(KernelSpec::matern32(0.8, vec![0.9, 0.3])),
            Kernel::product(vec![
                Factor { dims: vec![1], spec: KernelSpec::matern32(1.2, vec![0.7]) },
                Factor { dims: vec![0], spec: KernelSpec::se(0.5, vec![1.5]) },
            ]),
        ] {
            let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.5, -0.2, 2.0, 0.3]);
            let z = DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 1.0, 1.0]);
            let mut t = Tape::new();
            let hyp: Vec<Var> = kern.hypers().iter().map(|(_, v)| t.scalar_var(v.ln())).collect();
            let xc: Vec<Var> = (0..2).map(|d| t.constant(x.columns(d, 1).into_owned())).collect();
            let zc: Vec<Var> = (0..2).map(|d| t.constant(z.columns(d, 1).into_owned())).collect();
            let k = kern.cross_ad(&mut t, &hyp, &xc, &zc);
            let want = kern.gram(&x, &z).unwrap();
            assert!((t.value(k) - want).norm() < 1e-14);
            let p = kern.paired_ad(&mut t, &hyp, &xc, &xc);
            assert!(t.value(p).iter().all(|v| (v - kern.variance()).abs() < 1e-14));
            let v = kern.variance_ad(&mut t, &hyp);
            assert!((t.scalar(v) - kern.variance()).abs() < 1e-14);
        }
    }

    #[test]
    fn hyper_round_trip() {
        let mut k = Kernel::from(KernelSpec::matern32(1.0, vec![0.2, 0.3]));
        k.set_hypers(&[2.0, 4.0, 5.0]);
        assert_eq!(k.hypers().iter().map(|h| h.1).collect::<Vec<_>>(), vec![2.0, 4.0, 5.0]);
        assert_eq!(k.hypers()[2].0, "lengthscale[1]");
    }
}
