//! The recording tape and its primitive operations.
//!
//! Every builder method evaluates its result eagerly, pushes one node and
//! returns a [`Var`] handle. [`Tape::backward`] replays the nodes in reverse
//! and accumulates adjoints into the leaves that asked for gradients.
//!
//! Index lists (neighbour graphs, top-L selections, nearest-neighbour
//! assignments) enter as constants. No gradient flows through the choice of
//! an index, only through the values that are gathered.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in row-list form: output `r` is
/// `sum(w * input[c] for (c, w) in rows[r])` over the flattened input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, w)| w * input[c]).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    OuterAdd(Var, Var),
    OuterMul(Var, Var),
    AddScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Arc<[f64]>),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    GatherRows(Var, Arc<[usize]>),
    PairSum {
        a: Var,
        a_rows: Arc<[usize]>,
        b: Var,
        b_rows: Arc<[usize]>,
    },
    GatherPerRow(Var, Arc<[usize]>),
    WeightedRowSum(Var, Var),
    SegmentMax(Var, Vec<usize>),
    SumAll(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    LseRowsOffset(Var, Var),
    LseColsOffset(Var, Var),
    LseAll(Var),
    SoftmaxRows(Var),
    Sparse(Var, Arc<SparseRows>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded reverse-mode tape. Build one per sample.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg.into())
}

#[inline]
fn lrelu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; all zeros before any backward pass.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(value, op, &[a])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, what)?;
        let da = self.data(a);
        let db = self.data(b);
        let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    // ----- linear algebra ------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul_t: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            1,
            k as isize,
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulT(a, b),
            &[a, b],
        ))
    }

    // ----- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims(a);
        if self.nodes[b.0].value.numel() != n {
            return Err(shape_err(format!(
                "add_row: {n} columns vs bias of {}",
                self.nodes[b.0].value.numel()
            )));
        }
        let bias = self.data(b);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Row `i` of `a[m,n]` scaled by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims(a);
        if self.nodes[c.0].value.numel() != m {
            return Err(shape_err(format!(
                "mul_col: {m} rows vs {}",
                self.nodes[c.0].value.numel()
            )));
        }
        let col = self.data(c);
        let mut out = self.data(a).to_vec();
        for (i, row) in out.chunks_exact_mut(n.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= col[i]);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulCol(a, c), &[a, c]))
    }

    /// `out[i,j] = u[i] + v[j]`.
    pub fn outer_add(&mut self, u: Var, v: Var) -> Var {
        let du = self.data(u);
        let dv = self.data(v);
        let (m, n) = (du.len(), dv.len());
        let mut out = Vec::with_capacity(m * n);
        for &x in du {
            out.extend(dv.iter().map(|&y| x + y));
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::OuterAdd(u, v),
            &[u, v],
        )
    }

    /// `out[i,j] = u[i] * v[j]`.
    pub fn outer_mul(&mut self, u: Var, v: Var) -> Var {
        let du = self.data(u);
        let dv = self.data(v);
        let (m, n) = (du.len(), dv.len());
        let mut out = Vec::with_capacity(m * n);
        for &x in du {
            out.extend(dv.iter().map(|&y| x * y));
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::OuterMul(u, v),
            &[u, v],
        )
    }

    /// `a + s` where `s` is a one-element node.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(shape_err(
                "add_scalar_var: second operand must have one element",
            ));
        }
        let sv = self.item(s);
        let src = &self.nodes[a.0].value;
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|&x| x + sv).collect(),
        );
        Ok(self.push(value, Op::AddScalarVar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    /// Elementwise product with a constant array (dropout masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Arc<[f64]>) -> Result<Var, AutodiffError> {
        if c.len() != self.nodes[a.0].value.numel() {
            return Err(shape_err("mul_const: length mismatch"));
        }
        let src = &self.nodes[a.0].value;
        let data = src
            .data()
            .iter()
            .zip(c.iter())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        Ok(self.push(value, Op::MulConst(a, c), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `|x|`; subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| lrelu(x, slope))
    }

    /// `max(x, lo)`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| if x > lo { x } else { lo })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    // ----- indexing ------------------------------------------------------

    /// `out[r] = a[rows[r]]` (row gather).
    pub fn gather_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var, AutodiffError> {
        let (m, d) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: m });
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let shape = if self.shape(a).len() == 1 {
            vec![rows.len()]
        } else {
            vec![rows.len(), d]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows(a, rows),
            &[a],
        ))
    }

    /// `out[r] = a[a_rows[r]] + b[b_rows[r]]`; the building block of edge
    /// features on a neighbour graph.
    pub fn pair_sum(
        &mut self,
        a: Var,
        a_rows: Arc<[usize]>,
        b: Var,
        b_rows: Arc<[usize]>,
    ) -> Result<Var, AutodiffError> {
        let (ma, d) = self.dims(a);
        let (mb, d2) = self.dims(b);
        if d != d2 || a_rows.len() != b_rows.len() {
            return Err(shape_err("pair_sum: width or index length mismatch"));
        }
        for (rows, m) in [(&a_rows, ma), (&b_rows, mb)] {
            if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
                return Err(AutodiffError::IndexOutOfRange { index: bad, len: m });
            }
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(a_rows.len() * d);
        for (&i, &j) in a_rows.iter().zip(b_rows.iter()) {
            let ra = &da[i * d..(i + 1) * d];
            let rb = &db[j * d..(j + 1) * d];
            out.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
        }
        let value = Tensor::from_parts(vec![a_rows.len(), d], out);
        Ok(self.push(
            value,
            Op::PairSum {
                a,
                a_rows,
                b,
                b_rows,
            },
            &[a, b],
        ))
    }

    /// `out[i,l] = a[i, idx[i*L + l]]` for `a[m,n]` and `L = idx.len() / m`.
    pub fn gather_per_row(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims(a);
        if m == 0 || !idx.len().is_multiple_of(m) {
            return Err(shape_err(
                "gather_per_row: index count not a multiple of rows",
            ));
        }
        let l = idx.len() / m;
        if let Some(&bad) = idx.iter().find(|&&c| c >= n) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: n });
        }
        let src = self.data(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| src[(r / l) * n + c])
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![m, l], out),
            Op::GatherPerRow(a, idx),
            &[a],
        ))
    }

    /// `out[i] = sum_l w[i,l] * vals[i*L + l]` for `w[m,L]`, `vals[m*L, d]`.
    pub fn weighted_row_sum(&mut self, w: Var, vals: Var) -> Result<Var, AutodiffError> {
        let (m, l) = self.dims(w);
        let (rows, d) = self.dims(vals);
        if rows != m * l {
            return Err(shape_err("weighted_row_sum: values must have m*L rows"));
        }
        let (dw, dv) = (self.data(w), self.data(vals));
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for t in 0..l {
                let wt = dw[i * l + t];
                let r = (i * l + t) * d;
                for c in 0..d {
                    out[i * d + c] += wt * dv[r + c];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::WeightedRowSum(w, vals),
            &[w, vals],
        ))
    }

    /// Channelwise max over consecutive groups of `group` rows:
    /// `a[n*group, d] -> [n, d]`. Ties go to the lowest row in the group.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Result<Var, AutodiffError> {
        let (rows, d) = self.dims(a);
        if group == 0 || rows % group != 0 {
            return Err(shape_err(format!(
                "segment_max: {rows} rows not divisible by {group}"
            )));
        }
        let n = rows / group;
        let src = self.data(a);
        let mut out = vec![f64::NEG_INFINITY; n * d];
        let mut arg = vec![0usize; n * d];
        for i in 0..n {
            for t in 0..group {
                let r = i * group + t;
                for c in 0..d {
                    let v = src[r * d + c];
                    if t == 0 || v > out[i * d + c] {
                        out[i * d + c] = v;
                        arg[i * d + c] = r;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::SegmentMax(a, arg),
            &[a],
        ))
    }

    /// Constant sparse linear map applied to the flattened input.
    pub fn sparse(&mut self, a: Var, map: Arc<SparseRows>) -> Result<Var, AutodiffError> {
        let numel = self.nodes[a.0].value.numel();
        if let Some(bad) = map
            .rows
            .iter()
            .flat_map(|r| r.iter().map(|&(c, _)| c))
            .find(|&c| c >= numel)
        {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                len: numel,
            });
        }
        let out = map.apply(self.data(a));
        let len = out.len();
        Ok(self.push(Tensor::from_parts(vec![len], out), Op::Sparse(a, map), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let m = self.dims(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum over columns: `[m,n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self
            .data(a)
            .chunks_exact(n.max(1))
            .map(|r| r.iter().sum())
            .collect::<Vec<f64>>();
        debug_assert_eq!(out.len(), m);
        self.push(Tensor::from_parts(vec![m], out), Op::SumRows(a), &[a])
    }

    /// Sum over rows: `[m,n] -> [n]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for r in self.data(a).chunks_exact(n.max(1)) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        self.push(Tensor::from_parts(vec![n], out), Op::SumCols(a), &[a])
    }

    /// `out[i] = log sum_j exp(m[i,j] + off[j])`.
    pub fn lse_rows_offset(&mut self, m: Var, off: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(m);
        if self.nodes[off.0].value.numel() != c {
            return Err(shape_err(
                "lse_rows_offset: offset length must equal columns",
            ));
        }
        let (dm, doff) = (self.data(m), self.data(off));
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &dm[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(doff)
                .map(|(a, b)| a + b)
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().zip(doff).map(|(a, b)| (a + b - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        Ok(self.push(
            Tensor::from_parts(vec![r], out),
            Op::LseRowsOffset(m, off),
            &[m, off],
        ))
    }

    /// `out[j] = log sum_i exp(m[i,j] + off[i])`.
    pub fn lse_cols_offset(&mut self, m: Var, off: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(m);
        if self.nodes[off.0].value.numel() != r {
            return Err(shape_err("lse_cols_offset: offset length must equal rows"));
        }
        let (dm, doff) = (self.data(m), self.data(off));
        let mut mx = vec![f64::NEG_INFINITY; c];
        for i in 0..r {
            for j in 0..c {
                mx[j] = mx[j].max(dm[i * c + j] + doff[i]);
            }
        }
        let mut s = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                s[j] += (dm[i * c + j] + doff[i] - mx[j]).exp();
            }
        }
        let out = mx.iter().zip(&s).map(|(m, s)| m + s.ln()).collect();
        Ok(self.push(
            Tensor::from_parts(vec![c], out),
            Op::LseColsOffset(m, off),
            &[m, off],
        ))
    }

    /// `log sum exp` over all elements.
    pub fn lse_all(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let mx = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = d.iter().map(|x| (x - mx).exp()).sum();
        self.push(Tensor::scalar(mx + s.ln()), Op::LseAll(a), &[a])
    }

    /// Softmax along each row of `a[m,n]`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::SoftmaxRows(a),
            &[a],
        )
    }

    // ----- backward ------------------------------------------------------

    /// Accumulates `d output / d leaf` into every gradient-requiring leaf.
    /// Gradients add up across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        let numel = self.nodes[output.0].value.numel();
        if numel != 1 {
            return Err(AutodiffError::NonScalarOutput(
                self.nodes[output.0].value.shape().to_vec(),
            ));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            propagate(&self.nodes, i, &g, &mut adj);
        }
        Ok(())
    }

    /// Hash of every branch decision recorded on the tape: signs at `abs`,
    /// leaky-ReLU and clamp inputs, max-pool winners, and all constant index
    /// lists. Two evaluations with equal signatures followed the same
    /// piecewise-smooth branch.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Abs(a) | Op::LeakyRelu(a, _) => {
                    for &x in self.nodes[a.0].value.data() {
                        (x > 0.0).hash(&mut h);
                        (x < 0.0).hash(&mut h);
                    }
                }
                Op::ClampMin(a, lo) => {
                    for &x in self.nodes[a.0].value.data() {
                        (x > *lo).hash(&mut h);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for &x in self.nodes[a.0].value.data() {
                        (x > *lo).hash(&mut h);
                        (x < *hi).hash(&mut h);
                    }
                }
                Op::SegmentMax(_, arg) => arg.hash(&mut h),
                Op::GatherRows(_, idx) | Op::GatherPerRow(_, idx) => idx.hash(&mut h),
                Op::PairSum { a_rows, b_rows, .. } => {
                    a_rows.hash(&mut h);
                    b_rows.hash(&mut h);
                }
                Op::Sparse(_, map) => {
                    for row in &map.rows {
                        row.len().hash(&mut h);
                        for &(c, _) in row {
                            c.hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: &Var| nodes[v.0].value.data();
    let dims = |v: &Var| nodes[v.0].value.dims2();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims(a);
            let (_, n) = dims(b);
            if let Some(ga) = slot(nodes, adj, *a) {
                // ga[m,k] += g[m,n] · bᵀ
                gemm(m, n, k, g, n as isize, 1, val(b), 1, n as isize, ga, 1.0);
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                // gb[k,n] += aᵀ · g
                gemm(k, m, n, val(a), 1, k as isize, g, n as isize, 1, gb, 1.0);
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = dims(a);
            let (n, _) = dims(b);
            if let Some(ga) = slot(nodes, adj, *a) {
                // ga[m,k] += g[m,n] · b[n,k]
                gemm(m, n, k, g, n as isize, 1, val(b), k as isize, 1, ga, 1.0);
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                // gb[n,k] += gᵀ · a
                gemm(n, m, k, g, 1, n as isize, val(a), k as isize, 1, gb, 1.0);
            }
        }
        Op::Add(a, b) => {
            for (v, s) in [(a, 1.0), (b, 1.0)] {
                if let Some(gv) = slot(nodes, adj, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, s) in [(a, 1.0), (b, -1.0)] {
                if let Some(gv) = slot(nodes, adj, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(a).to_vec(), val(b).to_vec());
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += g[t] * db[t];
                }
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for t in 0..g.len() {
                    gb[t] += g[t] * da[t];
                }
            }
        }
        Op::Div(a, b) => {
            let db = val(b).to_vec();
            let o = out.data();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += g[t] / db[t];
                }
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for t in 0..g.len() {
                    gb[t] -= g[t] * o[t] / db[t];
                }
            }
        }
        Op::AddRow(a, b) => {
            let (_, n) = dims(a);
            if let Some(ga) = slot(nodes, adj, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for row in g.chunks_exact(n.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MulCol(a, c) => {
            let (_, n) = dims(a);
            let (da, dc) = (val(a).to_vec(), val(c).to_vec());
            if let Some(ga) = slot(nodes, adj, *a) {
                for (t, x) in ga.iter_mut().enumerate() {
                    *x += g[t] * dc[t / n];
                }
            }
            if let Some(gc) = slot(nodes, adj, *c) {
                for t in 0..g.len() {
                    gc[t / n] += g[t] * da[t];
                }
            }
        }
        Op::OuterAdd(u, v) => {
            let n = nodes[v.0].value.numel();
            if let Some(gu) = slot(nodes, adj, *u) {
                for (i, row) in g.chunks_exact(n.max(1)).enumerate() {
                    gu[i] += row.iter().sum::<f64>();
                }
            }
            if let Some(gv) = slot(nodes, adj, *v) {
                for row in g.chunks_exact(n.max(1)) {
                    gv.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::OuterMul(u, v) => {
            let n = nodes[v.0].value.numel();
            let (du, dv) = (val(u).to_vec(), val(v).to_vec());
            if let Some(gu) = slot(nodes, adj, *u) {
                for (i, row) in g.chunks_exact(n.max(1)).enumerate() {
                    gu[i] += row.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(gv) = slot(nodes, adj, *v) {
                for (i, row) in g.chunks_exact(n.max(1)).enumerate() {
                    for (j, y) in row.iter().enumerate() {
                        gv[j] += y * du[i];
                    }
                }
            }
        }
        Op::AddScalarVar(a, s) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gs) = slot(nodes, adj, *s) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += g[t] * c[t];
                }
            }
        }
        Op::Exp(a) => {
            let o = out.data();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += g[t] * o[t];
                }
            }
        }
        Op::Log(a) => {
            let da = val(a).to_vec();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += g[t] / da[t];
                }
            }
        }
        Op::Sqrt(a) => {
            let o = out.data();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += 0.5 * g[t] / o[t];
                }
            }
        }
        Op::Abs(a) => {
            let da = val(a).to_vec();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    let s = if da[t] > 0.0 {
                        1.0
                    } else if da[t] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[t] += g[t] * s;
                }
            }
        }
        Op::Square(a) => {
            let da = val(a).to_vec();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += 2.0 * g[t] * da[t];
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let da = val(a).to_vec();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    ga[t] += if da[t] > 0.0 { g[t] } else { slope * g[t] };
                }
            }
        }
        Op::ClampMin(a, lo) => {
            let da = val(a).to_vec();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    if da[t] > *lo {
                        ga[t] += g[t];
                    }
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let da = val(a).to_vec();
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..g.len() {
                    if da[t] > *lo && da[t] < *hi {
                        ga[t] += g[t];
                    }
                }
            }
        }
        Op::GatherRows(a, rows) => {
            let (_, d) = dims(a);
            if let Some(ga) = slot(nodes, adj, *a) {
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..d {
                        ga[src * d + c] += g[r * d + c];
                    }
                }
            }
        }
        Op::PairSum {
            a,
            a_rows,
            b,
            b_rows,
        } => {
            let (_, d) = dims(a);
            for (v, rows) in [(a, a_rows), (b, b_rows)] {
                if let Some(gv) = slot(nodes, adj, *v) {
                    for (r, &src) in rows.iter().enumerate() {
                        for c in 0..d {
                            gv[src * d + c] += g[r * d + c];
                        }
                    }
                }
            }
        }
        Op::GatherPerRow(a, idx) => {
            let (m, n) = dims(a);
            let l = idx.len() / m;
            if let Some(ga) = slot(nodes, adj, *a) {
                for (r, &c) in idx.iter().enumerate() {
                    ga[(r / l) * n + c] += g[r];
                }
            }
        }
        Op::WeightedRowSum(w, vals) => {
            let (m, l) = dims(w);
            let (_, d) = dims(vals);
            let (dw, dv) = (val(w).to_vec(), val(vals).to_vec());
            if let Some(gw) = slot(nodes, adj, *w) {
                for i in 0..m {
                    for t in 0..l {
                        let r = (i * l + t) * d;
                        let mut s = 0.0;
                        for c in 0..d {
                            s += g[i * d + c] * dv[r + c];
                        }
                        gw[i * l + t] += s;
                    }
                }
            }
            if let Some(gv) = slot(nodes, adj, *vals) {
                for i in 0..m {
                    for t in 0..l {
                        let wt = dw[i * l + t];
                        let r = (i * l + t) * d;
                        for c in 0..d {
                            gv[r + c] += wt * g[i * d + c];
                        }
                    }
                }
            }
        }
        Op::SegmentMax(a, arg) => {
            let (_, d) = dims(a);
            if let Some(ga) = slot(nodes, adj, *a) {
                for (t, &r) in arg.iter().enumerate() {
                    ga[r * d + t % d] += g[t];
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                let s = g[0] / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumRows(a) => {
            let (_, n) = dims(a);
            if let Some(ga) = slot(nodes, adj, *a) {
                for (t, x) in ga.iter_mut().enumerate() {
                    *x += g[t / n];
                }
            }
        }
        Op::SumCols(a) => {
            let (_, n) = dims(a);
            if let Some(ga) = slot(nodes, adj, *a) {
                for (t, x) in ga.iter_mut().enumerate() {
                    *x += g[t % n];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let m = out.dims2().0;
            let total = out.dims2().1;
            let mut offset = 0;
            for p in parts {
                let (_, w) = dims(p);
                if let Some(gp) = slot(nodes, adj, *p) {
                    for i in 0..m {
                        for c in 0..w {
                            gp[i * w + c] += g[i * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::LseRowsOffset(mat, off) => {
            let (r, c) = dims(mat);
            let (dm, doff) = (val(mat), val(off));
            let o = out.data();
            // softmax weights recomputed rather than stored
            let mut wts = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    wts[i * c + j] = g[i] * (dm[i * c + j] + doff[j] - o[i]).exp();
                }
            }
            if let Some(goff) = slot(nodes, adj, *off) {
                for i in 0..r {
                    for j in 0..c {
                        goff[j] += wts[i * c + j];
                    }
                }
            }
            if let Some(gm) = slot(nodes, adj, *mat) {
                gm.iter_mut().zip(&wts).for_each(|(x, y)| *x += y);
            }
        }
        Op::LseColsOffset(mat, off) => {
            let (r, c) = dims(mat);
            let (dm, doff) = (val(mat), val(off));
            let o = out.data();
            let mut wts = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    wts[i * c + j] = g[j] * (dm[i * c + j] + doff[i] - o[j]).exp();
                }
            }
            if let Some(goff) = slot(nodes, adj, *off) {
                for i in 0..r {
                    goff[i] += wts[i * c..(i + 1) * c].iter().sum::<f64>();
                }
            }
            if let Some(gm) = slot(nodes, adj, *mat) {
                gm.iter_mut().zip(&wts).for_each(|(x, y)| *x += y);
            }
        }
        Op::LseAll(a) => {
            let da = val(a).to_vec();
            let o = out.data()[0];
            if let Some(ga) = slot(nodes, adj, *a) {
                for t in 0..ga.len() {
                    ga[t] += g[0] * (da[t] - o).exp();
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let (_, n) = dims(a);
            let o = out.data();
            if let Some(ga) = slot(nodes, adj, *a) {
                for (r, (orow, grow)) in o.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                    let dot: f64 = orow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        ga[r * n + j] += orow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::Sparse(a, map) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                for (r, row) in map.rows.iter().enumerate() {
                    for &(c, w) in row {
                        ga[c] += w * g[r];
                    }
                }
            }
        }
    }
}
