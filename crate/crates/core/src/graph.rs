//! A small expression graph over 2-D tensors.
//!
//! Every node carries its primal value and, when any of its inputs does, a
//! tangent buffer propagated eagerly during construction (forward mode).
//! Reverse-mode gradients are computed on the primal graph only; tangents
//! never receive gradients, which is all the mean-flow objective needs since
//! its JVP-derived target is detached before the loss.
//!
//! All values are stored as `[rows, cols]`; scalars are `[1, 1]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    MatMul(Var, Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Silu(Var),
    Recip(Var),
    Square(Var),
    Clamp(Var, f32, f32),
    LayerNorm(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocked: Arc<[bool]>,
        seq: usize,
        heads: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    PoolRows(Var, usize),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Dispersive(Var, f32),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    tangent: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
    // Saved forward quantities (softmax probabilities, inverse std, kernel sums).
    aux: Vec<f32>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        0 => (1, 1),
        1 => (1, t.numel()),
        _ => (t.rows(), t.cols()),
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, tangent: Option<Vec<f32>>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            tangent,
            needs_grad,
            op,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_impl(&mut self, t: &Tensor, tangent: Option<&Tensor>, needs_grad: bool) -> Result<Var> {
        let (rows, cols) = as_matrix(t);
        let tangent = match tangent {
            Some(tan) => {
                if tan.numel() != t.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "input tangent",
                        lhs: t.shape().to_vec(),
                        rhs: tan.shape().to_vec(),
                    });
                }
                Some(tan.data().to_vec())
            }
            None => None,
        };
        Ok(self.push(rows, cols, t.data().to_vec(), tangent, needs_grad, Op::Leaf))
    }

    /// A value that neither carries a tangent nor receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_impl(t, None, false).expect("constant without tangent")
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf_impl(t, None, true).expect("param without tangent")
    }

    /// An input carrying a forward-mode tangent direction.
    pub fn input_with_tangent(&mut self, t: &Tensor, tangent: &Tensor) -> Result<Var> {
        self.leaf_impl(t, Some(tangent), false)
    }

    /// Copy of `v`'s value cut off from both tangents and gradients.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (rows, cols, value) = (n.rows, n.cols, n.value.clone());
        self.push(rows, cols, value, None, false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn tangent(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].tangent.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    /// Tangent as a tensor; zeros when no tangent reached this node.
    pub fn tangent_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = n.tangent.clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
        Tensor::matrix(n.rows, n.cols, data).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn has_tangent(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tangent.is_some())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![na.rows, na.cols],
                rhs: vec![nb.rows, nb.cols],
            });
        }
        Ok((na.rows, na.cols))
    }

    // Elementwise binary ops share a shape check and a tangent rule expressed
    // as (da, db) -> dc given primal values.
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        df: impl Fn(f32, f32, f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (rows, cols) = self.same_shape(op_name, a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value: Vec<f32> = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let tangent = if self.has_tangent(&[a, b]) {
            let zeros = vec![0.0; rows * cols];
            let ta = na.tangent.as_deref().unwrap_or(&zeros);
            let tb = nb.tangent.as_deref().unwrap_or(&zeros);
            Some(
                (0..rows * cols)
                    .map(|i| df(na.value[i], nb.value[i], ta[i], tb[i]))
                    .collect(),
            )
        } else {
            None
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(rows, cols, value, tangent, ng, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, dx, dy| dx + dy, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, dx, dy| dx - dy, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, dx, dy| dx * y + x * dy, Op::Mul(a, b))
    }

    // Broadcast helpers: `b` is [1, cols] (row) or [rows, 1] (col).
    fn broadcast(&mut self, op_name: &'static str, a: Var, b: Var, by_row: bool, mul: bool) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (rows, cols) = (na.rows, na.cols);
        let ok = if by_row {
            nb.rows == 1 && nb.cols == cols
        } else {
            nb.rows == rows && nb.cols == 1
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: vec![rows, cols],
                rhs: vec![nb.rows, nb.cols],
            });
        }
        let bidx = |i: usize| if by_row { i % cols } else { i / cols };
        let value: Vec<f32> = (0..rows * cols)
            .map(|i| {
                if mul {
                    na.value[i] * nb.value[bidx(i)]
                } else {
                    na.value[i] + nb.value[bidx(i)]
                }
            })
            .collect();
        let tangent = if self.has_tangent(&[a, b]) {
            Some(
                (0..rows * cols)
                    .map(|i| {
                        let ta = na.tangent.as_ref().map_or(0.0, |t| t[i]);
                        let tb = nb.tangent.as_ref().map_or(0.0, |t| t[bidx(i)]);
                        if mul {
                            ta * nb.value[bidx(i)] + na.value[i] * tb
                        } else {
                            ta + tb
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };
        let ng = self.needs(&[a, b]);
        let op = match (by_row, mul) {
            (true, false) => Op::AddRow(a, b),
            (true, true) => Op::MulRow(a, b),
            (false, true) => Op::MulCol(a, b),
            (false, false) => unreachable!("column add is not used"),
        };
        Ok(self.push(rows, cols, value, tangent, ng, op))
    }

    /// `a[n,m] + b[1,m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("add_row", a, b, true, false)
    }

    /// `a[n,m] * b[1,m]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("mul_row", a, b, true, true)
    }

    /// `a[n,m] * b[n,1]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("mul_col", a, b, false, true)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let na = &self.nodes[a.0];
        let (rows, cols) = (na.rows, na.cols);
        let value: Vec<f32> = na.value.iter().map(|&x| f(x)).collect();
        let tangent = na
            .tangent
            .as_ref()
            .map(|t| na.value.iter().zip(t).map(|(&x, &dx)| df(x, dx)).collect());
        let ng = na.needs_grad;
        self.push(rows, cols, value, tangent, ng, op)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |x| x * s, |_, dx| dx * s, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, |_, dx| dx, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, |x, dx| dx * x.exp(), Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f32::sin, |x, dx| dx * x.cos(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f32::cos, |x, dx| -dx * x.sin(), Op::Cos(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, dx| {
                let s = sigmoid(x);
                dx * s * (1.0 + x * (1.0 - s))
            },
            Op::Silu(a),
        )
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, |x, dx| -dx / (x * x), Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, dx| 2.0 * x * dx, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the derivative is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(
            a,
            |x| x.clamp(lo, hi),
            |x, dx| if x < lo || x > hi { 0.0 } else { dx },
            Op::Clamp(a, lo, hi),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.cols != nb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![na.rows, na.cols],
                rhs: vec![nb.rows, nb.cols],
            });
        }
        let (m, k, n) = (na.rows, na.cols, nb.cols);
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, &na.value, false, &nb.value, false, 0.0, &mut value);
        let tangent = if self.has_tangent(&[a, b]) {
            let mut t = vec![0.0; m * n];
            if let Some(ta) = &na.tangent {
                gemm(m, k, n, ta, false, &nb.value, false, 1.0, &mut t);
            }
            if let Some(tb) = &nb.tangent {
                gemm(m, k, n, &na.value, false, tb, false, 1.0, &mut t);
            }
            Some(t)
        } else {
            None
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, value, tangent, ng, Op::MatMul(a, b)))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let (rows, cols) = (na.rows, na.cols);
        let mut value = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &na.value[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f32>() / cols as f32;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                value[r * cols + c] = (x[c] - mean) * s;
            }
        }
        let tangent = na.tangent.as_ref().map(|t| ln_project(&value, t, &rstd, rows, cols));
        let ng = na.needs_grad;
        let v = self.push(rows, cols, value, tangent, ng, Op::LayerNorm(a));
        self.nodes[v.0].aux = rstd;
        v
    }

    /// Multi-head scaled dot-product attention over a batch of sequences
    /// stacked along rows (`[batch * seq, width]`), all sharing one mask.
    ///
    /// `blocked` is `seq × seq`, row-major, `true` where attention is not
    /// allowed. Blocked keys are skipped outright, so their values cannot
    /// influence the output in any bit. A row with every key blocked yields
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, blocked: Arc<[bool]>, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        let (rows, width) = self.same_shape("attention", q, v)?;
        if seq == 0 || rows % seq != 0 || heads == 0 || width % heads != 0 || blocked.len() != seq * seq {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: vec![rows, width],
                reason: format!("seq {seq}, heads {heads}, mask len {}", blocked.len()),
            });
        }
        let batch = rows / seq;
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (nq, nk, nv) = (&self.nodes[q.0], &self.nodes[k.0], &self.nodes[v.0]);
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut out = vec![0.0f32; rows * width];
        let want_tangent = self.has_tangent(&[q, k, v]);
        let mut tout = if want_tangent { vec![0.0f32; rows * width] } else { Vec::new() };
        let mut ds = vec![0.0f32; seq];
        let mut dp = vec![0.0f32; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = (b * seq + i) * width + off;
                    let prow = &mut probs[p_base + i * seq..p_base + (i + 1) * seq];
                    let mut maxs = f32::NEG_INFINITY;
                    for j in 0..seq {
                        if blocked[i * seq + j] {
                            continue;
                        }
                        let kj = (b * seq + j) * width + off;
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += nq.value[qi + d] * nk.value[kj + d];
                        }
                        s *= scale;
                        prow[j] = s;
                        maxs = maxs.max(s);
                    }
                    if maxs == f32::NEG_INFINITY {
                        continue;
                    }
                    let mut denom = 0.0;
                    for j in 0..seq {
                        if blocked[i * seq + j] {
                            continue;
                        }
                        let e = (prow[j] - maxs).exp();
                        prow[j] = e;
                        denom += e;
                    }
                    for j in 0..seq {
                        if !blocked[i * seq + j] {
                            prow[j] /= denom;
                        }
                    }
                    let oi = (b * seq + i) * width + off;
                    for j in 0..seq {
                        if blocked[i * seq + j] {
                            continue;
                        }
                        let vj = (b * seq + j) * width + off;
                        let p = prow[j];
                        for d in 0..dh {
                            out[oi + d] += p * nv.value[vj + d];
                        }
                    }
                    if want_tangent {
                        // d scores, then softmax Jacobian, then d out.
                        let mut mean_ds = 0.0;
                        for j in 0..seq {
                            if blocked[i * seq + j] {
                                continue;
                            }
                            let kj = (b * seq + j) * width + off;
                            let mut s = 0.0;
                            if let Some(tq) = &nq.tangent {
                                for d in 0..dh {
                                    s += tq[qi + d] * nk.value[kj + d];
                                }
                            }
                            if let Some(tk) = &nk.tangent {
                                for d in 0..dh {
                                    s += nq.value[qi + d] * tk[kj + d];
                                }
                            }
                            ds[j] = s * scale;
                            mean_ds += prow[j] * ds[j];
                        }
                        for j in 0..seq {
                            if blocked[i * seq + j] {
                                continue;
                            }
                            dp[j] = prow[j] * (ds[j] - mean_ds);
                            let vj = (b * seq + j) * width + off;
                            for d in 0..dh {
                                let mut acc = dp[j] * nv.value[vj + d];
                                if let Some(tv) = &nv.tangent {
                                    acc += prow[j] * tv[vj + d];
                                }
                                tout[oi + d] += acc;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[q, k, v]);
        let var = self.push(
            rows,
            width,
            out,
            want_tangent.then_some(tout),
            ng,
            Op::Attention {
                q,
                k,
                v,
                blocked,
                seq,
                heads,
            },
        );
        self.nodes[var.0].aux = probs;
        Ok(var)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.nodes[p.0].cols,
            None => return Err(Error::invalid("concat_rows of nothing")),
        };
        let mut rows = 0;
        let mut value = Vec::new();
        for p in parts {
            let n = &self.nodes[p.0];
            if n.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![n.rows, n.cols],
                });
            }
            rows += n.rows;
            value.extend_from_slice(&n.value);
        }
        let tangent = self.has_tangent(parts).then(|| {
            let mut t = Vec::with_capacity(value.len());
            for p in parts {
                let n = &self.nodes[p.0];
                match &n.tangent {
                    Some(tp) => t.extend_from_slice(tp),
                    None => t.extend(std::iter::repeat_n(0.0, n.value.len())),
                }
            }
            t
        });
        let ng = self.needs(parts);
        Ok(self.push(rows, cols, value, tangent, ng, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.nodes[p.0].rows,
            None => return Err(Error::invalid("concat_cols of nothing")),
        };
        for p in parts {
            let n = &self.nodes[p.0];
            if n.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![n.rows, n.cols],
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].cols).sum();
        let gather = |pick: &dyn Fn(&Node) -> Option<&Vec<f32>>| {
            let mut out = vec![0.0; rows * cols];
            let mut off = 0;
            for p in parts {
                let n = &self.nodes[p.0];
                if let Some(src) = pick(n) {
                    for r in 0..rows {
                        out[r * cols + off..r * cols + off + n.cols].copy_from_slice(&src[r * n.cols..(r + 1) * n.cols]);
                    }
                }
                off += n.cols;
            }
            out
        };
        let value = gather(&|n| Some(&n.value));
        let tangent = self.has_tangent(parts).then(|| gather(&|n| n.tangent.as_ref()));
        let ng = self.needs(parts);
        Ok(self.push(rows, cols, value, tangent, ng, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let na = &self.nodes[a.0];
        if start > end || end > na.cols {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: vec![na.rows, na.cols],
                reason: format!("range {start}..{end}"),
            });
        }
        let (rows, cols, w) = (na.rows, na.cols, end - start);
        let take = |src: &[f32]| {
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                out.extend_from_slice(&src[r * cols + start..r * cols + end]);
            }
            out
        };
        let value = take(&na.value);
        let tangent = na.tangent.as_deref().map(take);
        let ng = na.needs_grad;
        Ok(self.push(rows, w, value, tangent, ng, Op::SliceCols(a, start)))
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let na = &self.nodes[a.0];
        if let Some(&bad) = index.iter().find(|&&i| i >= na.rows) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: vec![na.rows, na.cols],
                reason: format!("row index {bad} out of range"),
            });
        }
        let cols = na.cols;
        let take = |src: &[f32]| {
            let mut out = Vec::with_capacity(index.len() * cols);
            for &i in index.iter() {
                out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
            }
            out
        };
        let value = take(&na.value);
        let tangent = na.tangent.as_deref().map(take);
        let ng = na.needs_grad;
        let rows = index.len();
        Ok(self.push(rows, cols, value, tangent, ng, Op::GatherRows(a, index)))
    }

    /// Mean over consecutive groups of `group` rows: `[n*group, m] -> [n, m]`.
    pub fn pool_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let na = &self.nodes[a.0];
        if group == 0 || na.rows % group != 0 {
            return Err(Error::InvalidShape {
                op: "pool_rows",
                shape: vec![na.rows, na.cols],
                reason: format!("group size {group}"),
            });
        }
        let (n, cols) = (na.rows / group, na.cols);
        let pool = |src: &[f32]| {
            let mut out = vec![0.0; n * cols];
            for r in 0..na.rows {
                let o = (r / group) * cols;
                for c in 0..cols {
                    out[o + c] += src[r * cols + c];
                }
            }
            let inv = 1.0 / group as f32;
            out.iter_mut().for_each(|v| *v *= inv);
            out
        };
        let value = pool(&na.value);
        let tangent = na.tangent.as_deref().map(pool);
        let ng = na.needs_grad;
        Ok(self.push(n, cols, value, tangent, ng, Op::PoolRows(a, group)))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let (rows, cols) = (na.rows, na.cols);
        let red = |src: &[f32]| (0..rows).map(|r| src[r * cols..(r + 1) * cols].iter().sum()).collect::<Vec<f32>>();
        let value = red(&na.value);
        let tangent = na.tangent.as_deref().map(red);
        let ng = na.needs_grad;
        self.push(rows, 1, value, tangent, ng, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let value = vec![na.value.iter().sum()];
        let tangent = na.tangent.as_ref().map(|t| vec![t.iter().sum()]);
        let ng = na.needs_grad;
        self.push(1, 1, value, tangent, ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let n = na.value.len().max(1) as f32;
        let value = vec![na.value.iter().sum::<f32>() / n];
        let tangent = na.tangent.as_ref().map(|t| vec![t.iter().sum::<f32>() / n]);
        let ng = na.needs_grad;
        self.push(1, 1, value, tangent, ng, Op::Mean(a))
    }

    /// `log( (1/B²) Σ_{i,j} exp(-‖x_i - x_j‖² / tau) )` over the rows of `a`,
    /// diagonal pairs included.
    pub fn dispersive(&mut self, a: Var, tau: f32) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("dispersive temperature must be positive, got {tau}")));
        }
        let na = &self.nodes[a.0];
        let (b, w) = (na.rows, na.cols);
        if b == 0 {
            return Err(Error::invalid("dispersive loss on an empty batch"));
        }
        let x = &na.value;
        let mut kernel = vec![0.0f32; b * b];
        let mut total = 0.0f32;
        for i in 0..b {
            for j in 0..b {
                let d: f32 = (0..w).map(|c| (x[i * w + c] - x[j * w + c]).powi(2)).sum();
                let kv = (-d / tau).exp();
                kernel[i * b + j] = kv;
                total += kv;
            }
        }
        let value = vec![(total / (b * b) as f32).ln()];
        let tangent = na.tangent.as_ref().map(|t| {
            let mut acc = 0.0f32;
            for i in 0..b {
                for j in 0..b {
                    let dd: f32 = (0..w)
                        .map(|c| 2.0 * (x[i * w + c] - x[j * w + c]) * (t[i * w + c] - t[j * w + c]))
                        .sum();
                    acc += kernel[i * b + j] * (-dd / tau);
                }
            }
            vec![acc / total]
        });
        let ng = na.needs_grad;
        let v = self.push(1, 1, value, tangent, ng, Op::Dispersive(a, tau));
        kernel.push(total);
        self.nodes[v.0].aux = kernel;
        Ok(v)
    }

    /// Reverse-mode gradients of a scalar `loss` for every node on a path to a
    /// trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::NonScalarLoss(vec![ln.rows, ln.cols]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (rows, cols) = (node.rows, node.cols);
        // Accumulate `f(i)` into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] += g[i] * vb[i]));
                acc(*b, &mut |gb| (0..gb.len()).for_each(|i| gb[i] += g[i] * va[i]));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| (0..rows * cols).for_each(|i| gb[i % cols] += g[i]));
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| (0..rows * cols).for_each(|i| ga[i] += g[i] * vb[i % cols]));
                acc(*b, &mut |gb| (0..rows * cols).for_each(|i| gb[i % cols] += g[i] * va[i]));
            }
            Op::MulCol(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| (0..rows * cols).for_each(|i| ga[i] += g[i] * vb[i / cols]));
                acc(*b, &mut |gb| (0..rows * cols).for_each(|i| gb[i / cols] += g[i] * va[i]));
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s)),
            Op::AddConst(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |ga| gemm(m, n, k, g, false, &nb.value, true, 1.0, ga));
                acc(*b, &mut |gb| gemm(k, m, n, &na.value, true, g, false, 1.0, gb));
            }
            Op::Exp(a) => acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] += g[i] * node.value[i])),
            Op::Sin(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] += g[i] * x[i].cos()));
            }
            Op::Cos(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] -= g[i] * x[i].sin()));
            }
            Op::Silu(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let s = sigmoid(x[i]);
                        ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                });
            }
            Op::Recip(a) => acc(*a, &mut |ga| {
                (0..ga.len()).for_each(|i| ga[i] -= g[i] * node.value[i] * node.value[i])
            }),
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] += 2.0 * g[i] * x[i]));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let dx = ln_project(&node.value, g, &node.aux, rows, cols);
                acc(*a, &mut |ga| ga.iter_mut().zip(&dx).for_each(|(x, y)| *x += y));
            }
            Op::Attention {
                q,
                k,
                v,
                blocked,
                seq,
                heads,
            } => self.attention_backward(node, g, *q, *k, *v, blocked, *seq, *heads, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(*p, &mut |gp| gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].cols;
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * cols + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * src_cols + start + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::GatherRows(a, index) => acc(*a, &mut |ga| {
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        ga[i * cols + c] += g[r * cols + c];
                    }
                }
            }),
            Op::PoolRows(a, group) => {
                let src_rows = self.nodes[a.0].rows;
                let inv = 1.0 / *group as f32;
                acc(*a, &mut |ga| {
                    for r in 0..src_rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[(r / group) * cols + c] * inv;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                let src_cols = self.nodes[a.0].cols;
                acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] += g[i / src_cols]));
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f32;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Dispersive(a, tau) => {
                let na = &self.nodes[a.0];
                let (b, w) = (na.rows, na.cols);
                let total = node.aux[b * b];
                let coef = -4.0 * g[0] / (tau * total);
                acc(*a, &mut |ga| {
                    for i in 0..b {
                        for j in 0..b {
                            let kv = node.aux[i * b + j];
                            for c in 0..w {
                                ga[i * w + c] += coef * kv * (na.value[i * w + c] - na.value[j * w + c]);
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f32],
        q: Var,
        k: Var,
        v: Var,
        blocked: &[bool],
        seq: usize,
        heads: usize,
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (rows, width) = (node.rows, node.cols);
        let batch = rows / seq;
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (nq, nk, nv) = (&self.nodes[q.0], &self.nodes[k.0], &self.nodes[v.0]);
        let mut gq = vec![0.0f32; if nq.needs_grad { rows * width } else { 0 }];
        let mut gk = vec![0.0f32; if nk.needs_grad { rows * width } else { 0 }];
        let mut gv = vec![0.0f32; if nv.needs_grad { rows * width } else { 0 }];
        let mut gp = vec![0.0f32; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let prow = &node.aux[p_base + i * seq..p_base + (i + 1) * seq];
                    let oi = (b * seq + i) * width + off;
                    let mut dot = 0.0;
                    for j in 0..seq {
                        if blocked[i * seq + j] {
                            continue;
                        }
                        let vj = (b * seq + j) * width + off;
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += g[oi + d] * nv.value[vj + d];
                        }
                        gp[j] = s;
                        dot += prow[j] * s;
                        if !gv.is_empty() {
                            for d in 0..dh {
                                gv[vj + d] += prow[j] * g[oi + d];
                            }
                        }
                    }
                    for j in 0..seq {
                        if blocked[i * seq + j] {
                            continue;
                        }
                        let gs = prow[j] * (gp[j] - dot) * scale;
                        let kj = (b * seq + j) * width + off;
                        if !gq.is_empty() {
                            for d in 0..dh {
                                gq[oi + d] += gs * nk.value[kj + d];
                            }
                        }
                        if !gk.is_empty() {
                            for d in 0..dh {
                                gk[kj + d] += gs * nq.value[oi + d];
                            }
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if buf.is_empty() {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.iter_mut().zip(&buf).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

// Jacobian of row-wise normalisation applied to `d` (it is symmetric, so the
// same map serves tangents and cotangents).
fn ln_project(y: &[f32], d: &[f32], rstd: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    let n = cols as f32;
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dr = &d[r * cols..(r + 1) * cols];
        let mean_d = dr.iter().sum::<f32>() / n;
        let mean_yd = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f32>() / n;
        for c in 0..cols {
            out[r * cols + c] = rstd[r] * (dr[c] - mean_d - yr[c] * mean_yd);
        }
    }
    out
}

/// Evaluate `f` at `primals`, pushing `tangents` through it.
///
/// Returns the primal output and its directional derivative.
pub fn jvp<F>(f: F, primals: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    if primals.len() != tangents.len() {
        return Err(Error::invalid(format!(
            "{} primal inputs but {} tangents",
            primals.len(),
            tangents.len()
        )));
    }
    let mut g = Graph::new();
    let inputs = primals
        .iter()
        .zip(tangents)
        .map(|(p, t)| g.input_with_tangent(p, t))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &inputs)?;
    Ok((g.tensor(out), g.tangent_tensor(out)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn square_at_three() {
        let (p, d) = jvp(|g, x| g.mul(x[0], x[0]), &[Tensor::scalar(3.0)], &[Tensor::scalar(1.0)]).unwrap();
        assert_eq!(p.item(), 9.0);
        assert_eq!(d.item(), 6.0);
    }

    #[test]
    fn identity_passes_tangent() {
        let v = t(1, 3, &[0.5, -2.0, 7.0]);
        let (p, d) = jvp(|_, x| Ok(x[0]), &[t(1, 3, &[1.0, 2.0, 3.0])], &[v.clone()]).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(d, v);
    }

    #[test]
    fn grad_of_weighted_sum() {
        let mut g = Graph::new();
        let w = g.constant(&t(1, 3, &[2.0, -1.0, 0.5]));
        let x = g.param(&t(1, 3, &[4.0, 5.0, 6.0]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, -1.0, 0.5]);
    }

    #[test]
    fn detached_target_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(1, 2, &[1.5, -0.25]));
        let u = g.silu(x);
        let target = g.detach(u);
        let diff = g.sub(u, target).unwrap();
        let sq = g.square(diff);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(target).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(&t(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn fully_blocked_row_attends_nothing() {
        let mut g = Graph::new();
        let x = g.constant(&t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let blocked: Arc<[bool]> = Arc::from(vec![true, true, false, false]);
        let out = g.attention(x, x, x, blocked, 2, 1).unwrap();
        assert_eq!(&g.value(out)[..2], &[0.0, 0.0]);
    }

    #[test]
    fn dispersive_of_identical_rows_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(&t(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let d = g.dispersive(x, 0.7).unwrap();
        assert_eq!(g.scalar(d), 0.0);
        assert!(g.dispersive(x, 0.0).is_err());
    }
}
