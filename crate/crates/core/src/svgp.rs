//! Sparse variational GP primitives.
//!
//! Two layers live here. The `f64` functions ([`conditional_moments`],
//! [`gauss_kl`], [`mixture_entropy_bound`], ...) work on concrete
//! [`InducingBlock`]s and serve prediction and the oracle tests. The tape
//! helpers ([`BlockAd`], [`BagLayout`]) build the same quantities on an
//! [`autodiff::Tape`](crate::autodiff::Tape) so objectives can be
//! differentiated.
//!
//! The parameterization is unwhitened: `q(u) = N(m, S)` with prior
//! `p(u) = N(0, K(Z,Z))`. Covariances of `q(u)` are stored through a lower
//! factor `S = L_S L_Sᵀ`.

use crate::autodiff::{Tape, Var};
use crate::dataset::ObservationProcess;
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::linalg;
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::rc::Rc;

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug)]
pub struct InducingBlock {
    /// `M×D` inducing locations, one row per point.
    pub z: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub kernel: Kernel,
}

#[derive(Clone, Debug)]
pub struct MarginalMoments {
    pub mean: DVector<f64>,
    /// Marginal variances (the diagonal of `cov` when it is present).
    pub var: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

impl InducingBlock {
    pub fn validate(&self) -> Result<()> {
        let m = self.z.nrows();
        if self.mean.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: self.mean.len() });
        }
        if self.cov.shape() != (m, m) {
            return Err(Error::DimensionMismatch { expected: m, found: self.cov.nrows() });
        }
        if self.z.ncols() != self.kernel.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.kernel.input_dim(), found: self.z.ncols() });
        }
        self.kernel.validate()
    }

    fn kzz_chol(&self) -> Result<DMatrix<f64>> {
        let kzz = self.kernel.gram_sym(&self.z)?;
        Ok(linalg::cholesky_escalating(&kzz, self.kernel.variance())?.0)
    }
}

/// Moments of `q(f(X)) = ∫ p(f(X) | u) q(u) du`.
///
/// `μ = K_xz K_zz⁻¹ m` and `Σ = K_xx − K_xz K_zz⁻¹ (K_zz − S) K_zz⁻¹ K_zx`.
pub fn conditional_moments(block: &InducingBlock, x: &DMatrix<f64>, full_cov: bool) -> Result<MarginalMoments> {
    block.validate()?;
    let l = block.kzz_chol()?;
    let kzx = block.kernel.gram(&block.z, x)?;
    let a = linalg::solve_lower(&l, &kzx);
    let d = linalg::solve_lower_t(&l, &a);
    let mean = d.tr_mul(&block.mean).column(0).into_owned();
    let sd = &block.cov * &d;
    if full_cov {
        let kxx = block.kernel.gram_sym(x)?;
        let cov = linalg::symmetrize(&(kxx - a.tr_mul(&a) + d.tr_mul(&sd)));
        let var = cov.diagonal();
        Ok(MarginalMoments { mean, var, cov: Some(cov) })
    } else {
        let prior = block.kernel.variance() + block.kernel.jitter();
        let var = DVector::from_fn(x.nrows(), |i, _| {
            let qa: f64 = a.column(i).norm_squared();
            let qs: f64 = d.column(i).dot(&sd.column(i));
            prior - qa + qs
        });
        Ok(MarginalMoments { mean, var, cov: None })
    }
}

/// `KL(N(m, S) ‖ N(0, K(Z,Z)))`.
pub fn gauss_kl(block: &InducingBlock) -> Result<f64> {
    block.validate()?;
    let l = block.kzz_chol()?;
    let ls = factor_psd(&block.cov)?;
    let m = block.z.nrows() as f64;
    let trace = linalg::solve_lower(&l, &ls).norm_squared();
    let maha = linalg::solve_lower(&l, &linalg::col(block.mean.as_slice())).norm_squared();
    let kl = 0.5 * (trace + maha - m + linalg::logdet_from_chol(&l) - linalg::logdet_from_chol(&ls));
    Ok(kl)
}

/// Cholesky factor of a covariance that may be singular up to rounding.
fn factor_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = s.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    match linalg::cholesky(s) {
        Ok(l) => Ok(l),
        Err(_) => {
            let mut b = s.clone();
            for i in 0..b.nrows() {
                b[(i, i)] += 1e-10 * scale;
            }
            linalg::cholesky(&b)
        }
    }
}

/// `E_{N(m,S)}[log N(u | 0, K)]`.
pub fn cross_term(mean: &DVector<f64>, cov: &DMatrix<f64>, prior: &DMatrix<f64>) -> Result<f64> {
    let l = linalg::cholesky(prior)?;
    let m = mean.len() as f64;
    let trace = linalg::solve_lower(&l, &factor_psd(cov)?).norm_squared();
    let maha = linalg::solve_lower(&l, &linalg::col(mean.as_slice())).norm_squared();
    Ok(-0.5 * m * LN_2PI - 0.5 * linalg::logdet_from_chol(&l) - 0.5 * maha - 0.5 * trace)
}

/// Differential entropy of `N(·, S)`.
pub fn gauss_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    let l = linalg::cholesky(cov)?;
    let m = cov.nrows() as f64;
    Ok(0.5 * m * (1.0 + LN_2PI) + 0.5 * linalg::logdet_from_chol(&l))
}

/// `Σ_k π_k log Σ_l π_l N(m_k | m_l, S_k + S_l)` for a Gaussian mixture.
///
/// By Jensen this upper-bounds `E_q[log q]`, so subtracting it from an ELBO
/// keeps a lower bound.
pub fn mixture_entropy_bound(components: &[(f64, DVector<f64>, DMatrix<f64>)]) -> Result<f64> {
    let blocks: Vec<Vec<(DVector<f64>, DMatrix<f64>)>> =
        components.iter().map(|(_, m, s)| vec![(m.clone(), s.clone())]).collect();
    let pi: Vec<f64> = components.iter().map(|c| c.0).collect();
    mixture_entropy_bound_blocks(&pi, &blocks)
}

/// Same bound for mixtures whose components factor into independent blocks.
pub fn mixture_entropy_bound_blocks(pi: &[f64], comps: &[Vec<(DVector<f64>, DMatrix<f64>)>]) -> Result<f64> {
    if pi.is_empty() || pi.len() != comps.len() {
        return Err(Error::invalid("mixture needs one weight per component"));
    }
    if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 || pi.iter().any(|p| *p < 0.0) {
        return Err(Error::invalid("mixture weights must lie on the simplex"));
    }
    let kk = pi.len();
    let mut total = 0.0;
    for k in 0..kk {
        let mut terms = Vec::with_capacity(kk);
        for l in 0..kk {
            let mut log_n = pi[l].ln();
            for (bk, bl) in comps[k].iter().zip(&comps[l]) {
                log_n += linalg::log_mvn(&bk.0, &bl.0, &(&bk.1 + &bl.1))?;
            }
            terms.push(log_n);
        }
        total += pi[k] * log_sum_exp(&terms);
    }
    Ok(total)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// `E[exp(tW)]` for `W ~ N(mu, var)`.
pub fn exp_gauss_moment(mu: f64, var: f64, t: f64) -> f64 {
    (t * mu + 0.5 * t * t * var).exp()
}

/// Index pairs inside bags, with the weights that turn a pair sum into the
/// variance of a bag mean.
#[derive(Clone, Debug)]
pub struct PairList {
    pub i: Rc<[usize]>,
    pub j: Rc<[usize]>,
    /// Column of per-pair weights.
    pub weight: Rc<DMatrix<f64>>,
    /// Column holding 1 on pairs with `i == j`.
    pub is_diag: Rc<DMatrix<f64>>,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    fn from_pairs(pairs: Vec<(usize, usize, f64)>) -> Self {
        let n = pairs.len();
        PairList {
            i: pairs.iter().map(|p| p.0).collect(),
            j: pairs.iter().map(|p| p.1).collect(),
            weight: Rc::new(DMatrix::from_fn(n, 1, |k, _| pairs[k].2)),
            is_diag: Rc::new(DMatrix::from_fn(n, 1, |k, _| if pairs[k].0 == pairs[k].1 { 1.0 } else { 0.0 })),
        }
    }
}

/// Stacked support points of one observation process and the index
/// structures the tape objectives need.
#[derive(Clone, Debug)]
pub struct BagLayout {
    /// `n×D` support points, bag after bag.
    pub points: DMatrix<f64>,
    pub offsets: Rc<[usize]>,
    pub sizes: Rc<[usize]>,
    /// Column of `1/|S|` per point.
    pub point_weight: Rc<DMatrix<f64>>,
    pub y: Vec<f64>,
    /// Pairs `i ≤ j` within each bag, weighted `(2 − δ_ij)/|S|²`.
    pub upper: PairList,
    /// All pairs within each bag, each bag's block in column-major order.
    pub full: PairList,
}

impl BagLayout {
    pub fn new(p: &ObservationProcess) -> Self {
        let points = p.stacked_points();
        let mut offsets = vec![0];
        let mut sizes = Vec::with_capacity(p.len());
        let mut w = Vec::with_capacity(points.nrows());
        let mut upper = Vec::new();
        let mut full = Vec::new();
        for s in &p.supports {
            let o = *offsets.last().unwrap();
            let n = s.len();
            let inv2 = 1.0 / (n * n) as f64;
            for a in 0..n {
                for b in a..n {
                    upper.push((o + a, o + b, if a == b { inv2 } else { 2.0 * inv2 }));
                }
            }
            for b in 0..n {
                for a in 0..n {
                    full.push((o + a, o + b, inv2));
                }
            }
            w.extend(std::iter::repeat(s.weight).take(n));
            sizes.push(n);
            offsets.push(o + n);
        }
        let n = points.nrows();
        BagLayout {
            points,
            offsets: offsets.into(),
            sizes: sizes.into(),
            point_weight: Rc::new(DMatrix::from_column_slice(n, 1, &w)),
            y: p.targets.clone(),
            upper: PairList::from_pairs(upper),
            full: PairList::from_pairs(full),
        }
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn n_bags(&self) -> usize {
        self.y.len()
    }

    /// Constant column nodes, one per input dimension.
    pub fn input_cols(&self, t: &mut Tape) -> Vec<Var> {
        (0..self.points.ncols())
            .map(|d| t.constant(self.points.columns(d, 1).into_owned()))
            .collect()
    }
}

/// Per-component moments of one GP block on a point set.
#[derive(Clone, Copy, Debug)]
pub struct MomentsAd {
    /// `n×1` marginal means.
    pub mean: Var,
    /// `n×1` marginal variances.
    pub var: Var,
    /// Covariances for the requested pair list.
    pub pair_cov: Var,
}

/// Tape nodes for a GP block with `K` variational components sharing one
/// set of inducing locations.
#[derive(Clone, Debug)]
pub struct BlockAd {
    pub kernel: Kernel,
    pub log_hypers: Vec<Var>,
    pub z: Vec<Var>,
    pub chol_kzz: Var,
    pub means: Vec<Var>,
    pub factors: Vec<Var>,
    pub m: usize,
}

impl BlockAd {
    /// `z` holds one `M×1` column per input dimension; `factors` are the lower
    /// factors of each component's `S`.
    pub fn new(
        t: &mut Tape,
        kernel: &Kernel,
        log_hypers: Vec<Var>,
        z: Vec<Var>,
        means: Vec<Var>,
        factors: Vec<Var>,
    ) -> Result<Self> {
        let m = t.shape(z[0]).0;
        let k = kernel.cross_ad(t, &log_hypers, &z, &z);
        let jit = t.constant(DMatrix::identity(m, m) * kernel.jitter());
        let kzz = t.add(k, jit);
        let chol_kzz = t.cholesky(kzz)?;
        Ok(BlockAd { kernel: kernel.clone(), log_hypers, z, chol_kzz, means, factors, m })
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    /// Moments of every component at the points `x` (one column node per
    /// input dimension), with covariances for `pairs`.
    pub fn moments(&self, t: &mut Tape, x: &[Var], pairs: &PairList) -> Vec<MomentsAd> {
        let kzx = self.kernel.cross_ad(t, &self.log_hypers, &self.z, x);
        let a = t.solve_lower(self.chol_kzz, kzx);
        let d = t.solve_lower_t(self.chol_kzz, a);
        let dt = t.transpose(d);
        let at = t.transpose(a);

        let a2 = t.square(at);
        let qa_diag = t.sum_rows(a2);
        let ai = t.gather(at, pairs.i.clone());
        let aj = t.gather(at, pairs.j.clone());
        let aa = t.mul(ai, aj);
        let qa_pair = t.sum_rows(aa);

        let xi: Vec<Var> = x.iter().map(|c| t.gather(*c, pairs.i.clone())).collect();
        let xj: Vec<Var> = x.iter().map(|c| t.gather(*c, pairs.j.clone())).collect();
        let kp = self.kernel.paired_ad(t, &self.log_hypers, &xi, &xj);
        let jit = t.constant(&*pairs.is_diag * self.kernel.jitter());
        let kp = t.add(kp, jit);
        let kdiag0 = self.kernel.variance_ad(t, &self.log_hypers);
        let kdiag = t.offset(kdiag0, self.kernel.jitter());

        let mut out = Vec::with_capacity(self.means.len());
        for (mk, lk) in self.means.iter().zip(&self.factors) {
            let mean = t.matmul(dt, *mk);
            let ct = t.matmul(dt, *lk);
            let c2 = t.square(ct);
            let qs_diag = t.sum_rows(c2);
            let var0 = t.sub(qs_diag, qa_diag);
            let var = t.scalar_add(var0, kdiag);
            let ci = t.gather(ct, pairs.i.clone());
            let cj = t.gather(ct, pairs.j.clone());
            let cc = t.mul(ci, cj);
            let qs_pair = t.sum_rows(cc);
            let p0 = t.sub(kp, qa_pair);
            let pair_cov = t.add(p0, qs_pair);
            out.push(MomentsAd { mean, var, pair_cov });
        }
        out
    }

    /// Marginal moments only (no pairs).
    pub fn point_moments(&self, t: &mut Tape, x: &[Var]) -> Vec<(Var, Var)> {
        let kzx = self.kernel.cross_ad(t, &self.log_hypers, &self.z, x);
        let a = t.solve_lower(self.chol_kzz, kzx);
        let d = t.solve_lower_t(self.chol_kzz, a);
        let dt = t.transpose(d);
        let at = t.transpose(a);
        let a2 = t.square(at);
        let qa = t.sum_rows(a2);
        let kdiag0 = self.kernel.variance_ad(t, &self.log_hypers);
        let kdiag = t.offset(kdiag0, self.kernel.jitter());
        self.means
            .iter()
            .zip(&self.factors)
            .map(|(mk, lk)| {
                let mean = t.matmul(dt, *mk);
                let ct = t.matmul(dt, *lk);
                let c2 = t.square(ct);
                let qs = t.sum_rows(c2);
                let v0 = t.sub(qs, qa);
                (mean, t.scalar_add(v0, kdiag))
            })
            .collect()
    }

    fn logdet_kzz(&self, t: &mut Tape) -> Var {
        logdet_chol(t, self.chol_kzz)
    }

    /// `KL(q_k(u) ‖ p(u))`.
    pub fn kl(&self, t: &mut Tape, k: usize) -> Var {
        let v = t.solve_lower(self.chol_kzz, self.factors[k]);
        let v2 = t.square(v);
        let trace = t.sum(v2);
        let a = t.solve_lower(self.chol_kzz, self.means[k]);
        let a2 = t.square(a);
        let maha = t.sum(a2);
        let ldk = self.logdet_kzz(t);
        let lds = logdet_chol(t, self.factors[k]);
        let s1 = t.add(trace, maha);
        let s2 = t.add(s1, ldk);
        let s3 = t.sub(s2, lds);
        let s4 = t.offset(s3, -(self.m as f64));
        t.scale(s4, 0.5)
    }

    /// `E_{q_k}[log p(u)]`.
    pub fn cross(&self, t: &mut Tape, k: usize) -> Var {
        let v = t.solve_lower(self.chol_kzz, self.factors[k]);
        let v2 = t.square(v);
        let trace = t.sum(v2);
        let a = t.solve_lower(self.chol_kzz, self.means[k]);
        let a2 = t.square(a);
        let maha = t.sum(a2);
        let ldk = self.logdet_kzz(t);
        let s1 = t.add(trace, maha);
        let s2 = t.add(s1, ldk);
        let s3 = t.scale(s2, -0.5);
        t.offset(s3, -0.5 * self.m as f64 * LN_2PI)
    }

    /// `log N(m_k | m_l, S_k + S_l)`.
    pub fn log_overlap(&self, t: &mut Tape, k: usize, l: usize) -> Result<Var> {
        let sk = outer(t, self.factors[k]);
        let sl = outer(t, self.factors[l]);
        let s = t.add(sk, sl);
        let c = t.cholesky(s)?;
        let dm = t.sub(self.means[k], self.means[l]);
        let a = t.solve_lower(c, dm);
        let a2 = t.square(a);
        let maha = t.sum(a2);
        let ld = logdet_chol(t, c);
        let s1 = t.add(maha, ld);
        let s2 = t.scale(s1, -0.5);
        Ok(t.offset(s2, -0.5 * self.m as f64 * LN_2PI))
    }
}

fn outer(t: &mut Tape, l: Var) -> Var {
    let lt = t.transpose(l);
    t.matmul(l, lt)
}

/// `log|A|` of `A = L Lᵀ` from its factor.
pub fn logdet_chol(t: &mut Tape, l: Var) -> Var {
    let d = t.diag(l);
    let ld = t.ln(d);
    let s = t.sum(ld);
    t.scale(s, 2.0)
}

/// Storage positions `(row, col)` and split into diagonal / off-diagonal
/// entries of a row-wise packed lower triangle.
pub fn lower_split(m: usize) -> (Vec<usize>, Vec<usize>) {
    let pos = crate::params::lower_positions(m);
    let diag = pos.iter().enumerate().filter(|(_, p)| p.0 == p.1).map(|(k, _)| k).collect();
    let off = pos.iter().enumerate().filter(|(_, p)| p.0 != p.1).map(|(k, _)| k).collect();
    (diag, off)
}

/// Builds the lower factor from a packed column whose diagonal entries are
/// on log scale.
pub fn lower_factor_ad(t: &mut Tape, raw: Var, m: usize) -> Var {
    let pos = crate::params::lower_positions(m);
    let (diag, off) = lower_split(m);
    let dpos: Rc<[(usize, usize)]> = diag.iter().map(|&k| pos[k]).collect();
    let dv = t.gather(raw, diag.into());
    let de = t.exp(dv);
    let dm = t.entries(de, dpos, m, m);
    if off.is_empty() {
        return dm;
    }
    let opos: Rc<[(usize, usize)]> = off.iter().map(|&k| pos[k]).collect();
    let ov = t.gather(raw, off.into());
    let om = t.entries(ov, opos, m, m);
    t.add(dm, om)
}

/// Dense lower factor from the packed representation (diagonal on log scale).
pub fn lower_factor(raw: &[f64], m: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    for (&(i, j), &v) in crate::params::lower_positions(m).iter().zip(raw) {
        l[(i, j)] = if i == j { v.exp() } else { v };
    }
    l
}

/// Packed representation of a lower factor (inverse of [`lower_factor`]).
pub fn pack_lower(l: &DMatrix<f64>) -> Vec<f64> {
    crate::params::lower_positions(l.nrows())
        .iter()
        .map(|&(i, j)| if i == j { l[(i, j)].ln() } else { l[(i, j)] })
        .collect()
}

/// Gaussian expected log-likelihood `Σ_n log N(y_n | μ_n, σ²) − v_n / (2σ²)`.
pub fn gaussian_ell(y: &[f64], mean: &[f64], var: &[f64], noise: f64) -> f64 {
    y.iter()
        .zip(mean)
        .zip(var)
        .map(|((y, m), v)| -0.5 * (2.0 * PI * noise).ln() - ((y - m).powi(2) + v) / (2.0 * noise))
        .sum()
}

/// Optimal Gaussian `q(u)` for a likelihood that is quadratic in `u`.
///
/// With `E[log p(y|u)] = −½ uᵀ K⁻¹ P K⁻¹ u + uᵀ K⁻¹ b + const`, where `P`
/// and `b` are the accumulated `BᵀΛ⁻¹B` and `BᵀΛ⁻¹y` of the rows
/// `B = K_xz`, the optimum is `S = K Σ⁻¹ K`, `m = K Σ⁻¹ b` with
/// `Σ = K + P`. Returns the mean and the packed lower factor of `S`.
pub fn optimal_q(kzz: &DMatrix<f64>, btb: &DMatrix<f64>, bty: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let sigma = kzz + btb;
    let ls = linalg::cholesky(&linalg::symmetrize(&sigma))?;
    let solve = |b: &DMatrix<f64>| linalg::solve_lower_t(&ls, &linalg::solve_lower(&ls, b));
    let s = linalg::symmetrize(&(kzz * solve(kzz)));
    let m = kzz * solve(bty);
    let l = linalg::cholesky_escalating(&s, s.diagonal().mean())?.0;
    let packed = crate::params::lower_positions(kzz.nrows()).iter().map(|&(i, j)| l[(i, j)]).collect();
    Ok((m.column(0).iter().copied().collect(), packed))
}

pub mod reference;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;

    fn se(a: f64, l: f64) -> Kernel {
        Kernel::Stationary(KernelSpec::se(a, vec![l]))
    }

    fn pts(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn prior_matching_fixed_point() {
        let k = se(1.0, 1.0);
        let z = pts(&[0.0, 1.5, 3.0]);
        let kzz = k.gram_sym(&z).unwrap();
        let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let b = InducingBlock { z: z.clone(), mean: mean.clone(), cov: kzz.clone(), kernel: k };
        let mm = conditional_moments(&b, &z, true).unwrap();
        for i in 0..3 {
            assert!((mm.mean[i] - mean[i]).abs() < 1e-5);
        }
        assert!((mm.cov.unwrap() - kzz).abs().max() < 1e-5);
    }

    #[test]
    fn prior_recovery() {
        let k = se(1.3, 0.7);
        let z = pts(&[-1.0, 0.0, 0.5, 2.0]);
        let x = pts(&[-0.3, 0.2, 1.1]);
        let b = InducingBlock { z: z.clone(), mean: DVector::zeros(4), cov: k.gram_sym(&z).unwrap(), kernel: k.clone() };
        let mm = conditional_moments(&b, &x, true).unwrap();
        assert!(mm.mean.amax() < 1e-12);
        let kxx = k.gram_sym(&x).unwrap();
        assert!((mm.cov.unwrap() - kxx).abs().max() < 1e-10);
        let diag = conditional_moments(&b, &x, false).unwrap();
        for i in 0..3 {
            assert!((diag.var[i] - (1.3 + k.jitter())).abs() < 1e-10);
        }
    }

    #[test]
    fn single_point_interpolates() {
        let k = se(1.0, 1.0);
        let z = pts(&[0.4]);
        let b = InducingBlock { z: z.clone(), mean: DVector::from_vec(vec![2.0]), cov: DMatrix::zeros(1, 1), kernel: k };
        let mm = conditional_moments(&b, &pts(&[0.4]), true).unwrap();
        assert!((mm.mean[0] - 2.0).abs() < 1e-5);
        assert!(mm.var[0].abs() < 1e-5);
    }

    #[test]
    fn kl_closed_forms() {
        // K(Z,Z) = I when the inducing points are far apart and jitter is off.
        let mut spec = KernelSpec::se(1.0, vec![1.0]);
        spec.jitter = 0.0;
        let k = Kernel::Stationary(spec);
        let z = pts(&[0.0, 100.0]);
        let b = InducingBlock { z: z.clone(), mean: DVector::from_vec(vec![1.0, 1.0]), cov: DMatrix::identity(2, 2), kernel: k.clone() };
        assert!((gauss_kl(&b).unwrap() - 1.0).abs() < 1e-12);
        let b0 = InducingBlock { z: z.clone(), mean: DVector::zeros(2), cov: DMatrix::identity(2, 2), kernel: k };
        assert!(gauss_kl(&b0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_is_cross_minus_entropy() {
        let k = se(1.5, 0.8);
        let z = pts(&[0.0, 0.6, 1.7]);
        let kzz = k.gram_sym(&z).unwrap();
        let l = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.4, 0.0, -0.2, 0.05, 0.3]);
        let s = &l * l.transpose();
        let mean = DVector::from_vec(vec![0.2, -0.4, 1.1]);
        let b = InducingBlock { z, mean: mean.clone(), cov: s.clone(), kernel: k };
        let kl = gauss_kl(&b).unwrap();
        let alt = -cross_term(&mean, &s, &kzz).unwrap() - gauss_entropy(&s).unwrap();
        assert!((kl - alt).abs() < 1e-10);
        assert!(kl > 0.0);
    }

    #[test]
    fn kl_grows_with_mean_norm() {
        let k = se(1.0, 1.0);
        let z = pts(&[0.0, 1.0]);
        let s = DMatrix::identity(2, 2) * 0.5;
        let mut last = f64::NEG_INFINITY;
        for c in [0.0, 0.5, 1.0, 2.0] {
            let b = InducingBlock { z: z.clone(), mean: DVector::from_vec(vec![c, c]), cov: s.clone(), kernel: k.clone() };
            let kl = gauss_kl(&b).unwrap();
            assert!(kl > last);
            last = kl;
        }
    }

    #[test]
    fn mixture_bound_single_and_duplicate() {
        let m = DVector::from_vec(vec![0.1, 0.2]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let one = mixture_entropy_bound(&[(1.0, m.clone(), s.clone())]).unwrap();
        let s2: DMatrix<f64> = &s * 2.0;
        let want = -LN_2PI - 0.5 * s2.determinant().ln();
        assert!((one - want).abs() < 1e-12);
        let two = mixture_entropy_bound(&[(0.5, m.clone(), s.clone()), (0.5, m, s)]).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn exp_moments() {
        assert_eq!(exp_gauss_moment(0.0, 0.0, 1.0), 1.0);
        assert!((exp_gauss_moment(0.0, 1.0, 1.0) - 1.6487212707001282).abs() < 1e-15);
        assert_eq!(exp_gauss_moment(1.0, 4.0, 2.0), 10f64.exp());
    }

    #[test]
    fn packed_lower_round_trip() {
        let l = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.4, 0.0, -0.2, 0.05, 0.3]);
        let back = lower_factor(&pack_lower(&l), 3);
        assert!((back - l).abs().max() < 1e-15);
    }

    #[test]
    fn tape_moments_match_f64() {
        use crate::dataset::{ObservationProcess, SupportRegion};
        let k = se(1.2, 0.9);
        let z = pts(&[-0.5, 0.3, 1.0, 2.2]);
        let l = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.3 + 0.1 * i as f64 } else if i > j { 0.05 * (i + j) as f64 } else { 0.0 });
        let mean = DVector::from_vec(vec![0.4, -0.1, 0.8, 0.2]);
        let block = InducingBlock { z: z.clone(), mean: mean.clone(), cov: &l * l.transpose(), kernel: k.clone() };
        let p = ObservationProcess::new(
            1,
            1,
            vec![0.0, 1.0],
            vec![
                SupportRegion::new(vec![vec![0.1], vec![0.5], vec![0.7]]).unwrap(),
                SupportRegion::new(vec![vec![1.9], vec![2.1]]).unwrap(),
            ],
        )
        .unwrap();
        let lay = BagLayout::new(&p);
        let mm = conditional_moments(&block, &lay.points, true).unwrap();
        let cov = mm.cov.unwrap();

        let mut t = Tape::new();
        let hyp: Vec<Var> = k.hypers().iter().map(|(_, v)| t.scalar_const(v.ln())).collect();
        let zc = vec![t.constant(z.clone())];
        let mv = t.col_const(mean.as_slice());
        let lv = t.constant(l.clone());
        let b = BlockAd::new(&mut t, &k, hyp, zc, vec![mv], vec![lv]).unwrap();
        let x = lay.input_cols(&mut t);
        let m = b.moments(&mut t, &x, &lay.full)[0];
        for i in 0..lay.n_points() {
            assert!((t.value(m.mean)[(i, 0)] - mm.mean[i]).abs() < 1e-12);
            assert!((t.value(m.var)[(i, 0)] - cov[(i, i)]).abs() < 1e-10);
        }
        for k in 0..lay.full.len() {
            let (i, j) = (lay.full.i[k], lay.full.j[k]);
            assert!((t.value(m.pair_cov)[(k, 0)] - cov[(i, j)]).abs() < 1e-10);
        }
        let kl = b.kl(&mut t, 0);
        assert!((t.scalar(kl) - gauss_kl(&block).unwrap()).abs() < 1e-10);
    }
}
