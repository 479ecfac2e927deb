use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::{Gradients, ParamId, ParamStore, TensorError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    LnClamped(Var, T, T),
    Recip(Var),
    Transpose(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Norm2(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Standardize(Var, Option<T>),
    BasisMix(Var, Var),
    SmoothL1(Var, Array2<T>),
}

#[derive(Debug)]
struct Node<T> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Array2<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward evaluation for reverse accumulation.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch { op, left, right }
}

/// Population standard deviation below which standardization yields zeros.
pub(crate) const STD_FLOOR: f64 = 1e-8;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        match &self.nodes[v.0].value {
            Some(a) => a.view(),
            None => match self.nodes[v.0].op {
                Op::Param(id) => self.params.get(id).data.view(),
                _ => unreachable!("only parameter nodes borrow their value"),
            },
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// First entry of a node, for `1 x 1` results.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, value: T) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let out = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let out = &self.value(a) + &self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("sub", sa, sb));
        }
        let out = &self.value(a) - &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("hadamard", sa, sb));
        }
        let out = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc.1 != 1 || sc.0 != sa.0 {
            return Err(shape_err("mul_col", sa, sc));
        }
        let out = &self.value(a) * &self.value(col);
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(shape_err("mul_scalar", self.shape(a), ss));
        }
        let k = self.scalar(s);
        let out = self.value(a).mapv(|v| v * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// `ln(clamp(a, lo, hi))`; entries outside `[lo, hi]` receive no gradient.
    pub fn ln_clamped(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).mapv(|v| v.max(lo).min(hi).ln());
        let rg = self.rg(a);
        self.push(out, Op::LnClamped(a, lo, hi), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::recip);
        let rg = self.rg(a);
        self.push(out, Op::Recip(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Mean over rows: `n x m -> 1 x m`.
    ///
    /// Each column is summed in ascending value order, so the result does not
    /// depend on row order down to the last bit.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, m) = self.shape(a);
        if n == 0 {
            return Err(TensorError::Empty("mean_rows"));
        }
        let av = self.value(a);
        let nn = T::from_count(n);
        let mut col = Vec::with_capacity(n);
        let out = Array2::from_shape_fn((1, m), |(_, j)| {
            col.clear();
            col.extend(av.column(j).iter().copied());
            col.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
            col.iter().copied().sum::<T>() / nn
        });
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Max over rows: `n x m -> 1 x m`. Ties resolve to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, m) = self.shape(a);
        if n == 0 {
            return Err(TensorError::Empty("max_rows"));
        }
        let av = self.value(a);
        let mut out = Array2::zeros((1, m));
        let mut arg = vec![0usize; m];
        for j in 0..m {
            let mut best = 0;
            for i in 1..n {
                if av[[i, j]] > av[[best, j]] {
                    best = i;
                }
            }
            arg[j] = best;
            out[[0, j]] = av[[best, j]];
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaxRows(a, arg), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let out = Array2::from_elem((1, 1), self.value(a).sum() / T::from_count(n));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Euclidean (Frobenius) norm as a `1 x 1` node.
    pub fn norm2(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|&v| v * v).sum::<T>().sqrt();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), n), Op::Norm2(a), rg)
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.0 != rows {
                return Err(shape_err("concat_cols", self.shape(first), sp));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let n = self.shape(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let out = self.value(a).select(Axis(0), idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `(a - mean(a)) / std(a)` over all entries, population convention.
    /// A standard deviation below `1e-8` yields an all-zero result.
    pub fn standardize(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let n = av.len();
        if n == 0 {
            return Err(TensorError::Empty("standardize"));
        }
        let nn = T::from_count(n);
        let mean = av.sum() / nn;
        let var = av.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
        let std = var.sqrt();
        let (out, kept) = if std < T::lit(STD_FLOOR) {
            (Array2::zeros(av.raw_dim()), None)
        } else {
            (av.mapv(|v| (v - mean) / std), Some(std))
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Standardize(a, kept), rg))
    }

    /// Mixes a stack of per-basis node projections with per-node weights.
    ///
    /// `proj` is `n x (k*d)` holding `k` blocks of width `d`; `weights` is `n x k`.
    /// Output row `i` is `sum_u weights[i,u] * proj[i, u*d..(u+1)*d]`.
    pub fn basis_mix(&mut self, proj: Var, weights: Var) -> Result<Var, TensorError> {
        let (sp, sw) = (self.shape(proj), self.shape(weights));
        if sp.0 != sw.0 || sw.1 == 0 || sp.1 % sw.1 != 0 {
            return Err(shape_err("basis_mix", sp, sw));
        }
        let (n, k) = sw;
        let d = sp.1 / k;
        let pv = self.value(proj);
        let wv = self.value(weights);
        let mut out = Array2::<T>::zeros((n, d));
        for i in 0..n {
            let mut row = out.row_mut(i);
            for u in 0..k {
                let w = wv[[i, u]];
                if w == T::zero() {
                    continue;
                }
                let block = pv.slice(s![i, u * d..(u + 1) * d]);
                row.scaled_add(w, &block);
            }
        }
        let rg = self.rg(proj) || self.rg(weights);
        Ok(self.push(out, Op::BasisMix(proj, weights), rg))
    }

    /// Elementwise smooth-L1 against a fixed target of the same shape.
    pub fn smooth_l1(&mut self, pred: Var, target: Array2<T>) -> Result<Var, TensorError> {
        let sp = self.shape(pred);
        if sp != target.dim() {
            return Err(shape_err("smooth_l1", sp, target.dim()));
        }
        let half = T::lit(0.5);
        let mut out = self.value(pred).to_owned();
        Zip::from(&mut out).and(&target).for_each(|o, &t| {
            let d = (*o - t).abs();
            *o = if d < T::one() { half * d * d } else { d - half };
        });
        let rg = self.rg(pred);
        Ok(self.push(out, Op::SmoothL1(pred, target), rg))
    }

    /// Gradients of the `1 x 1` node `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let mut grads = Gradients::new(self.params.len());
        self.backward_into(output, T::one(), &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `scale * d(output)/d(param)` into `grads`.
    pub fn backward_into(
        &self,
        output: Var,
        scale: T,
        grads: &mut Gradients<T>,
    ) -> Result<(), TensorError> {
        let so = self.shape(output);
        if so != (1, 1) {
            return Err(TensorError::NonScalarOutput(so));
        }
        if grads.slots.len() < self.params.len() {
            grads.slots.resize(self.params.len(), None);
        }
        let mut adj: Vec<Option<Array2<T>>> = Vec::with_capacity(output.0 + 1);
        adj.resize_with(output.0 + 1, || None);
        adj[output.0] = Some(Array2::from_elem((1, 1), scale));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.add_owned(*id, g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b));
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.t().dot(&self.value(*a));
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut adj, *b, g.clone());
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut adj, *row, gr);
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut adj, *b, g.mapv(|v| -v));
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = &g * &self.value(*b);
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = &g * &self.value(*a);
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::MulCol(a, col) => {
                    if self.rg(*col) {
                        let gc = (&g * &self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut adj, *col, gc);
                    }
                    if self.rg(*a) {
                        let ga = &g * &self.value(*col);
                        self.acc(&mut adj, *a, ga);
                    }
                }
                Op::MulScalar(a, s) => {
                    if self.rg(*s) {
                        let gs = Zip::from(&g)
                            .and(&self.value(*a))
                            .fold(T::zero(), |acc, &x, &y| acc + x * y);
                        self.acc(&mut adj, *s, Array2::from_elem((1, 1), gs));
                    }
                    if self.rg(*a) {
                        let k = self.scalar(*s);
                        self.acc(&mut adj, *a, g.mapv(|v| v * k));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(&mut adj, *a, g.mapv(|v| v * c));
                }
                Op::AddConst(a) => self.acc(&mut adj, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.value(Var(idx)))
                        .for_each(|x, &y| {
                            if y <= T::zero() {
                                *x = T::zero();
                            }
                        });
                    self.acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.value(Var(idx)))
                        .for_each(|x, &y| *x = *x * y * (T::one() - y));
                    self.acc(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.value(Var(idx)))
                        .for_each(|x, &y| *x = *x * (T::one() - y * y));
                    self.acc(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&self.value(*a)).for_each(|x, &v| {
                        *x = if v > T::zero() {
                            *x
                        } else if v < T::zero() {
                            -*x
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(&mut adj, *a, ga);
                }
                Op::LnClamped(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mut ga = g;
                    Zip::from(&mut ga).and(&self.value(*a)).for_each(|x, &v| {
                        *x = if v >= lo && v <= hi { *x / v } else { T::zero() };
                    });
                    self.acc(&mut adj, *a, ga);
                }
                Op::Recip(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.value(Var(idx)))
                        .for_each(|x, &y| *x = -*x * y * y);
                    self.acc(&mut adj, *a, ga);
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    self.acc(&mut adj, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.shape(*a);
                    let inv = T::one() / T::from_count(n);
                    let row = g.mapv(|v| v * inv);
                    let ga = row
                        .broadcast((n, m))
                        .expect("row broadcast")
                        .to_owned();
                    self.acc(&mut adj, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (j, &i) in arg.iter().enumerate() {
                        ga[[i, j]] = g[[0, j]];
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    self.acc(&mut adj, *a, ga);
                }
                Op::Mean(a) => {
                    let sa = self.shape(*a);
                    let v = g[[0, 0]] / T::from_count(sa.0 * sa.1);
                    self.acc(&mut adj, *a, Array2::from_elem(sa, v));
                }
                Op::Norm2(a) => {
                    let norm = self.scalar(Var(idx));
                    let ga = if norm > T::zero() {
                        let k = g[[0, 0]] / norm;
                        self.value(*a).mapv(|v| v * k)
                    } else {
                        Array2::zeros(self.shape(*a))
                    };
                    self.acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            let gp = g.slice(s![.., offset..offset + w]).to_owned();
                            self.acc(&mut adj, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::Standardize(a, std) => {
                    if let Some(std) = *std {
                        let y = self.value(Var(idx));
                        let nn = T::from_count(y.len());
                        let gm = g.sum() / nn;
                        let gy = Zip::from(&g).and(&y).fold(T::zero(), |acc, &x, &v| acc + x * v)
                            / nn;
                        let mut ga = g;
                        Zip::from(&mut ga)
                            .and(&y)
                            .for_each(|x, &v| *x = (*x - gm - v * gy) / std);
                        self.acc(&mut adj, *a, ga);
                    }
                }
                Op::BasisMix(proj, weights) => {
                    let (n, k) = self.shape(*weights);
                    let d = self.shape(*proj).1 / k;
                    if self.rg(*weights) {
                        let pv = self.value(*proj);
                        let mut gw = Array2::zeros((n, k));
                        for i in 0..n {
                            let gi = g.row(i);
                            for u in 0..k {
                                gw[[i, u]] = gi.dot(&pv.slice(s![i, u * d..(u + 1) * d]));
                            }
                        }
                        self.acc(&mut adj, *weights, gw);
                    }
                    if self.rg(*proj) {
                        let wv = self.value(*weights);
                        let mut gp = Array2::zeros((n, k * d));
                        for i in 0..n {
                            let gi = g.row(i);
                            for u in 0..k {
                                let w = wv[[i, u]];
                                if w != T::zero() {
                                    gp.slice_mut(s![i, u * d..(u + 1) * d]).scaled_add(w, &gi);
                                }
                            }
                        }
                        self.acc(&mut adj, *proj, gp);
                    }
                }
                Op::SmoothL1(a, target) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.value(*a))
                        .and(target)
                        .for_each(|x, &p, &t| {
                            let d = p - t;
                            let dd = if d.abs() < T::one() { d } else { d.signum() };
                            *x = *x * dd;
                        });
                    self.acc(&mut adj, *a, ga);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Array2<T>>], target: Var, g: Array2<T>) {
        if !self.rg(target) {
            return;
        }
        match &mut adj[target.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
