//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::gradient`] on a 1×1 output walks the tape backwards once and
//! returns adjoints for every recorded node. Nodes created with
//! [`Tape::constant`] never receive gradients, which lets the backward pass
//! skip work on data matrices.

use crate::error::Result;
use crate::linalg;
use nalgebra::DMatrix;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Exp,
    Ln,
    Square,
    Sqrt,
    Recip,
    /// `(1+√(3s))·exp(−√(3s))` as a function of the squared scaled distance `s`.
    Matern32Sq,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulConst(usize, Rc<DMatrix<f64>>),
    ScalarMul(usize, usize),
    ScalarAdd(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Unary(usize, Unary),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    Diag(usize),
    Gather(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    Col(usize, usize),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    SqDist(usize, usize),
    Entries(usize, Rc<[(usize, usize)]>),
    BlockCholSample {
        cov: usize,
        sizes: Rc<[usize]>,
        eps: Rc<[f64]>,
        factors: Vec<DMatrix<f64>>,
    },
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    requires: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar output.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => DMatrix::zeros(self.shapes[v.0].0, self.shapes[v.0].1),
        }
    }
}

/// Lower triangle with the diagonal halved.
fn phi(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => a[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * a[(i, j)],
        std::cmp::Ordering::Less => 0.0,
    })
}

fn tril(a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| if i >= j { a[(i, j)] } else { 0.0 })
}

/// Adjoint of `A` given `L = chol(A)` and the adjoint of `L`.
pub(crate) fn cholesky_backward(l: &DMatrix<f64>, lbar: &DMatrix<f64>) -> DMatrix<f64> {
    let p = phi(&(l.transpose() * tril(lbar)));
    let g = linalg::solve_lower_t(l, &linalg::solve_lower_t(l, &p).transpose());
    linalg::symmetrize(&g)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires
    }

    fn val(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn var(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_var(&mut self, v: f64) -> Var {
        self.var(DMatrix::from_element(1, 1, v))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(DMatrix::from_element(1, 1, v))
    }

    pub fn col_const(&mut self, v: &[f64]) -> Var {
        self.constant(linalg::col(v))
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        self.val(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v)[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.val(v).shape()
    }

    fn binary(&mut self, a: Var, b: Var, value: DMatrix<f64>, op: Op) -> Var {
        let r = self.req(a.0) || self.req(b.0);
        self.push(value, op, r)
    }

    fn unary_op(&mut self, a: Var, value: DMatrix<f64>, op: Op) -> Var {
        let r = self.req(a.0);
        self.push(value, op, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.binary(a, b, v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.binary(a, b, v, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).component_mul(self.val(b));
        self.binary(a, b, v, Op::Mul(a.0, b.0))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).component_div(self.val(b));
        self.binary(a, b, v, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.unary_op(a, v, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).add_scalar(c);
        self.unary_op(a, v, Op::Offset(a.0))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Rc<DMatrix<f64>>) -> Var {
        let v = self.val(a).component_mul(&c);
        self.unary_op(a, v, Op::MulConst(a.0, c))
    }

    /// Matrix times a 1×1 node.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        let v = self.val(a) * self.scalar(s);
        self.binary(a, s, v, Op::ScalarMul(a.0, s.0))
    }

    /// Matrix plus a 1×1 node, broadcast.
    pub fn scalar_add(&mut self, a: Var, s: Var) -> Var {
        let v = self.val(a).add_scalar(self.scalar(s));
        self.binary(a, s, v, Op::ScalarAdd(a.0, s.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) * self.val(b);
        self.binary(a, b, v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a).transpose();
        self.unary_op(a, v, Op::Transpose(a.0))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.val(a);
        let v = match f {
            Unary::Exp => x.map(f64::exp),
            Unary::Ln => x.map(f64::ln),
            Unary::Square => x.map(|t| t * t),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Recip => x.map(|t| 1.0 / t),
            Unary::Matern32Sq => x.map(|s| {
                let r = (3.0 * s.max(0.0)).sqrt();
                (1.0 + r) * (-r).exp()
            }),
        };
        self.unary_op(a, v, Op::Unary(a.0, f))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.val(a).sum());
        self.unary_op(a, v, Op::Sum(a.0))
    }

    /// n×m → n×1 row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let v = DMatrix::from_fn(x.nrows(), 1, |i, _| x.row(i).sum());
        self.unary_op(a, v, Op::SumRows(a.0))
    }

    /// n×m → 1×m column sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let v = DMatrix::from_fn(1, x.ncols(), |_, j| x.column(j).sum());
        self.unary_op(a, v, Op::SumCols(a.0))
    }

    /// Lower Cholesky factor, escalating jitter relative to the mean diagonal
    /// when the plain factorization fails.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let scale = x.diagonal().mean();
        let (l, _) = linalg::cholesky_escalating(x, scale)?;
        Ok(self.unary_op(a, l, Op::Cholesky(a.0)))
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let v = linalg::solve_lower(self.val(l), self.val(b));
        self.binary(l, b, v, Op::SolveLower(l.0, b.0))
    }

    /// `L⁻ᵀ B` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let v = linalg::solve_lower_t(self.val(l), self.val(b));
        self.binary(l, b, v, Op::SolveLowerT(l.0, b.0))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let v = DMatrix::from_fn(x.nrows(), 1, |i, _| x[(i, i)]);
        self.unary_op(a, v, Op::Diag(a.0))
    }

    /// Rows of `a` selected (with repetition) by `rows`.
    pub fn gather(&mut self, a: Var, rows: Rc<[usize]>) -> Var {
        let x = self.val(a);
        let v = DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
        self.unary_op(a, v, Op::Gather(a.0, rows))
    }

    /// Row sums over consecutive segments `offsets[s]..offsets[s+1]`.
    pub fn segment_sum(&mut self, a: Var, offsets: Rc<[usize]>) -> Var {
        let x = self.val(a);
        let nseg = offsets.len() - 1;
        let mut v = DMatrix::zeros(nseg, x.ncols());
        for s in 0..nseg {
            for i in offsets[s]..offsets[s + 1] {
                for j in 0..x.ncols() {
                    v[(s, j)] += x[(i, j)];
                }
            }
        }
        self.unary_op(a, v, Op::SegmentSum(a.0, offsets))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let v = self.val(a).columns(j, 1).into_owned();
        self.unary_op(a, v, Op::Col(a.0, j))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.val(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.val(*p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut c = 0;
        for p in parts {
            let x = self.val(*p);
            v.columns_mut(c, x.ncols()).copy_from(x);
            c += x.ncols();
        }
        let r = parts.iter().any(|p| self.req(p.0));
        self.push(v, Op::HCat(parts.iter().map(|p| p.0).collect()), r)
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let cols = self.val(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.val(*p).nrows()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut r0 = 0;
        for p in parts {
            let x = self.val(*p);
            v.rows_mut(r0, x.nrows()).copy_from(x);
            r0 += x.nrows();
        }
        let r = parts.iter().any(|p| self.req(p.0));
        self.push(v, Op::VCat(parts.iter().map(|p| p.0).collect()), r)
    }

    /// `(x_i − z_j)²` for columns `x` (n×1) and `z` (m×1).
    pub fn sqdist(&mut self, x: Var, z: Var) -> Var {
        let (xv, zv) = (self.val(x), self.val(z));
        let v = DMatrix::from_fn(xv.nrows(), zv.nrows(), |i, j| {
            let d = xv[(i, 0)] - zv[(j, 0)];
            d * d
        });
        self.binary(x, z, v, Op::SqDist(x.0, z.0))
    }

    /// Scatters the entries of column `v` into a zero `rows×cols` matrix.
    pub fn entries(&mut self, v: Var, pos: Rc<[(usize, usize)]>, rows: usize, cols: usize) -> Var {
        let x = self.val(v);
        let mut m = DMatrix::zeros(rows, cols);
        for (k, &(i, j)) in pos.iter().enumerate() {
            m[(i, j)] = x[(k, 0)];
        }
        self.unary_op(v, m, Op::Entries(v.0, pos))
    }

    /// Reparameterized draw `L_b ε_b` for a sequence of covariance blocks.
    ///
    /// `cov` is a column holding each block's full entries in column-major
    /// order; `sizes` gives the block dimensions and `eps` the standard
    /// normal draws (one per row of the output).
    pub fn block_chol_sample(&mut self, cov: Var, sizes: Rc<[usize]>, eps: Rc<[f64]>) -> Result<Var> {
        let c = self.val(cov);
        let total: usize = sizes.iter().sum();
        assert_eq!(eps.len(), total);
        let mut out = DMatrix::zeros(total, 1);
        let mut factors = Vec::with_capacity(sizes.len());
        let (mut off_c, mut off_o) = (0, 0);
        for &s in sizes.iter() {
            let block = DMatrix::from_column_slice(s, s, &c.as_slice()[off_c..off_c + s * s]);
            let scale = block.diagonal().mean().abs().max(1e-300);
            let (l, _) = linalg::cholesky_escalating(&linalg::symmetrize(&block), scale)?;
            for i in 0..s {
                let mut acc = 0.0;
                for k in 0..=i {
                    acc += l[(i, k)] * eps[off_o + k];
                }
                out[(off_o + i, 0)] = acc;
            }
            factors.push(l);
            off_c += s * s;
            off_o += s;
        }
        let r = self.req(cov.0);
        Ok(self.push(out, Op::BlockCholSample { cov: cov.0, sizes, eps, factors }, r))
    }

    /// Adjoints of all nodes with respect to the 1×1 node `out`.
    pub fn gradient(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<DMatrix<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<DMatrix<f64>>], i: usize, g: DMatrix<f64>) {
            match &mut grads[i] {
                Some(x) => *x += g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.requires {
                grads[idx] = Some(g);
                continue;
            }
            let v = |i: usize| &self.nodes[i].value;
            let rq = |i: usize| self.nodes[i].requires;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rq(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rq(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if rq(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rq(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if rq(*a) {
                        acc(&mut grads, *a, g.component_mul(v(*b)));
                    }
                    if rq(*b) {
                        acc(&mut grads, *b, g.component_mul(v(*a)));
                    }
                }
                Op::Div(a, b) => {
                    if rq(*a) {
                        acc(&mut grads, *a, g.component_div(v(*b)));
                    }
                    if rq(*b) {
                        let gb = -g.component_mul(&node.value).component_div(v(*b));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::MulConst(a, c) => acc(&mut grads, *a, g.component_mul(c)),
                Op::ScalarMul(a, s) => {
                    if rq(*a) {
                        acc(&mut grads, *a, &g * v(*s)[(0, 0)]);
                    }
                    if rq(*s) {
                        let gs = g.dot(v(*a));
                        acc(&mut grads, *s, DMatrix::from_element(1, 1, gs));
                    }
                }
                Op::ScalarAdd(a, s) => {
                    if rq(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rq(*s) {
                        acc(&mut grads, *s, DMatrix::from_element(1, 1, g.sum()));
                    }
                }
                Op::MatMul(a, b) => {
                    if rq(*a) {
                        acc(&mut grads, *a, &g * v(*b).transpose());
                    }
                    if rq(*b) {
                        acc(&mut grads, *b, v(*a).tr_mul(&g));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Unary(a, f) => {
                    let x = v(*a);
                    let y = &node.value;
                    let d = match f {
                        Unary::Exp => g.component_mul(y),
                        Unary::Ln => g.component_div(x),
                        Unary::Square => g.component_mul(x) * 2.0,
                        Unary::Sqrt => g.component_div(&(y * 2.0)),
                        Unary::Recip => -g.component_mul(&y.component_mul(y)),
                        Unary::Matern32Sq => g.zip_map(x, |gi, s| {
                            gi * (-1.5) * (-(3.0 * s.max(0.0)).sqrt()).exp()
                        }),
                    };
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = v(*a).shape();
                    acc(&mut grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::SumRows(a) => {
                    let (r, c) = v(*a).shape();
                    acc(&mut grads, *a, DMatrix::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::SumCols(a) => {
                    let (r, c) = v(*a).shape();
                    acc(&mut grads, *a, DMatrix::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::Cholesky(a) => {
                    acc(&mut grads, *a, cholesky_backward(&node.value, &g));
                }
                Op::SolveLower(l, b) => {
                    let bbar = linalg::solve_lower_t(v(*l), &g);
                    if rq(*l) {
                        let lbar = -tril(&(&bbar * node.value.transpose()));
                        acc(&mut grads, *l, lbar);
                    }
                    if rq(*b) {
                        acc(&mut grads, *b, bbar);
                    }
                }
                Op::SolveLowerT(l, b) => {
                    let bbar = linalg::solve_lower(v(*l), &g);
                    if rq(*l) {
                        let lbar = -tril(&(&node.value * bbar.transpose()));
                        acc(&mut grads, *l, lbar);
                    }
                    if rq(*b) {
                        acc(&mut grads, *b, bbar);
                    }
                }
                Op::Diag(a) => {
                    let n = v(*a).nrows();
                    let mut d = DMatrix::zeros(n, n);
                    for i in 0..n {
                        d[(i, i)] = g[(i, 0)];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Gather(a, rows) => {
                    let (r, c) = v(*a).shape();
                    let mut d = DMatrix::zeros(r, c);
                    for (k, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[(row, j)] += g[(k, j)];
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SegmentSum(a, offsets) => {
                    let (r, c) = v(*a).shape();
                    let mut d = DMatrix::zeros(r, c);
                    for s in 0..offsets.len() - 1 {
                        for i in offsets[s]..offsets[s + 1] {
                            for j in 0..c {
                                d[(i, j)] = g[(s, j)];
                            }
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Col(a, j) => {
                    let (r, c) = v(*a).shape();
                    let mut d = DMatrix::zeros(r, c);
                    d.columns_mut(*j, 1).copy_from(&g);
                    acc(&mut grads, *a, d);
                }
                Op::HCat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = v(p).ncols();
                        if rq(p) {
                            acc(&mut grads, p, g.columns(c0, w).into_owned());
                        }
                        c0 += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = v(p).nrows();
                        if rq(p) {
                            acc(&mut grads, p, g.rows(r0, h).into_owned());
                        }
                        r0 += h;
                    }
                }
                Op::SqDist(x, z) => {
                    let (xv, zv) = (v(*x), v(*z));
                    let (n, m) = (xv.nrows(), zv.nrows());
                    let mut gx = DMatrix::zeros(n, 1);
                    let mut gz = DMatrix::zeros(m, 1);
                    for j in 0..m {
                        for i in 0..n {
                            let t = 2.0 * g[(i, j)] * (xv[(i, 0)] - zv[(j, 0)]);
                            gx[(i, 0)] += t;
                            gz[(j, 0)] -= t;
                        }
                    }
                    if rq(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    if rq(*z) {
                        acc(&mut grads, *z, gz);
                    }
                }
                Op::Entries(a, pos) => {
                    let d = DMatrix::from_fn(pos.len(), 1, |k, _| g[pos[k]]);
                    acc(&mut grads, *a, d);
                }
                Op::BlockCholSample { cov, sizes, eps, factors } => {
                    let mut d = DMatrix::zeros(v(*cov).nrows(), 1);
                    let (mut off_c, mut off_o) = (0, 0);
                    for (b, &s) in sizes.iter().enumerate() {
                        let lbar = DMatrix::from_fn(s, s, |i, k| {
                            if i >= k {
                                g[(off_o + i, 0)] * eps[off_o + k]
                            } else {
                                0.0
                            }
                        });
                        let cbar = cholesky_backward(&factors[b], &lbar);
                        d.as_mut_slice()[off_c..off_c + s * s].copy_from_slice(cbar.as_slice());
                        off_c += s * s;
                        off_o += s;
                    }
                    acc(&mut grads, *cov, d);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central-difference check of `build` with respect to its single input.
    fn check(input: DMatrix<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.var(input.clone());
        let out = build(&mut t, x);
        let g = t.gradient(out).wrt(x);
        for k in 0..input.len() {
            let h = 1e-6 * (1.0 + input[k].abs());
            let eval = |delta: f64| {
                let mut p = input.clone();
                p[k] += delta;
                let mut t = Tape::new();
                let x = t.var(p);
                let o = build(&mut t, x);
                t.scalar(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1.0);
            assert!(err < 1e-6, "entry {k}: fd {fd} vs ad {}", g[k]);
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::stream(seed, &[]);
        DMatrix::from_vec(r, c, rng::normals(&mut g, r * c))
    }

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let a = rand_mat(n, n, seed);
        &a * a.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn elementwise_and_products() {
        let b = rand_mat(3, 2, 2);
        check(rand_mat(3, 2, 1), |t, x| {
            let c = t.constant(b.clone());
            let p = t.mul(x, c);
            let e = t.exp(p);
            let s = t.square(x);
            let q = t.add(e, s);
            let xt = t.transpose(x);
            let r = t.matmul(q, xt);
            t.sum(r)
        });
    }

    #[test]
    fn cholesky_logdet_and_solves() {
        let b = rand_mat(4, 2, 5);
        check(spd(4, 3), |t, x| {
            let xt = t.transpose(x);
            let xs = t.add(x, xt);
            let xs = t.scale(xs, 0.5);
            let l = t.cholesky(xs).unwrap();
            let d = t.diag(l);
            let ld = t.ln(d);
            let logdet = t.sum(ld);
            let bc = t.constant(b.clone());
            let a = t.solve_lower(l, bc);
            let a2 = t.solve_lower_t(l, a);
            let q = t.mul(a2, bc);
            let qs = t.sum(q);
            t.add(logdet, qs)
        });
    }

    #[test]
    fn solves_wrt_factor_and_rhs() {
        let l0 = {
            let mut m = rand_mat(3, 3, 8);
            for i in 0..3 {
                m[(i, i)] = 2.0 + m[(i, i)].abs();
                for j in (i + 1)..3 {
                    m[(i, j)] = 0.0;
                }
            }
            m
        };
        let b = rand_mat(3, 2, 9);
        check(b.clone(), |t, x| {
            let l = t.constant(l0.clone());
            let s = t.solve_lower_t(l, x);
            let s2 = t.square(s);
            t.sum(s2)
        });
        check(l0.clone(), |t, x| {
            let bc = t.constant(b.clone());
            let s = t.solve_lower(x, bc);
            let s2 = t.solve_lower_t(x, s);
            let sq = t.square(s2);
            t.sum(sq)
        });
    }

    #[test]
    fn structural_ops() {
        let rows: Rc<[usize]> = vec![0, 2, 2, 1].into();
        let offs: Rc<[usize]> = vec![0, 1, 4].into();
        check(rand_mat(3, 2, 11), |t, x| {
            let g = t.gather(x, rows.clone());
            let s = t.segment_sum(g, offs.clone());
            let c0 = t.col(x, 0);
            let c1 = t.col(x, 1);
            let d = t.sqdist(c0, c1);
            let h = t.hcat(&[c1, c0]);
            let v = t.vcat(&[h, s]);
            let r = t.sum_rows(v);
            let c = t.sum_cols(d);
            let e = t.unary(d, Unary::Matern32Sq);
            let a = t.sum(r);
            let b = t.sum(c);
            let ee = t.sum(e);
            let ab = t.mul(a, b);
            t.add(ab, ee)
        });
    }

    #[test]
    fn scalar_broadcast_and_entries() {
        let pos: Rc<[(usize, usize)]> = vec![(0, 0), (1, 0), (1, 1)].into();
        check(rand_mat(3, 1, 12), |t, x| {
            let l = t.entries(x, pos.clone(), 2, 2);
            let s = t.gather(x, vec![2].into());
            let a = t.scalar_mul(l, s);
            let b = t.scalar_add(a, s);
            let lt = t.transpose(l);
            let m = t.matmul(b, lt);
            let r = t.unary(m, Unary::Square);
            let den = t_offset(t, m);
            let q = t.div(r, den);
            t.sum(q)
        });
    }

    fn t_offset(t: &mut Tape, m: Var) -> Var {
        let sq = t.square(m);
        t.offset(sq, 1.0)
    }

    #[test]
    fn block_cholesky_sampling() {
        let a = spd(2, 13);
        let b = spd(3, 14);
        let mut v: Vec<f64> = a.as_slice().to_vec();
        v.extend_from_slice(b.as_slice());
        let eps: Rc<[f64]> = vec![0.3, -1.2, 0.7, 0.1, 2.0].into();
        check(linalg::col(&v), |t, x| {
            let s = t.block_chol_sample(x, vec![2, 3].into(), eps.clone()).unwrap();
            let w = t.col_const(&[1.0, 2.0, -1.0, 0.5, 0.25]);
            let p = t.mul(s, w);
            let q = t.square(p);
            t.sum(q)
        });
    }

    #[test]
    fn constants_get_no_gradient_work() {
        let mut t = Tape::new();
        let c = t.constant(DMatrix::identity(2, 2));
        let x = t.var(DMatrix::identity(2, 2));
        let p = t.matmul(c, x);
        let s = t.sum(p);
        let g = t.gradient(s);
        assert_eq!(g.wrt(x), DMatrix::from_element(2, 2, 1.0));
    }
}
