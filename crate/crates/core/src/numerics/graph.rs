//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node to the [`Graph`]; node indices are
//! therefore a topological order and [`Graph::backward`] simply walks them in
//! reverse. A graph is built per sample and discarded after the gradients
//! have been extracted, so nodes never need to be freed individually.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GELU formulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    #[default]
    Erf,
    Tanh,
}

/// Allowed key indices per query row, in compressed sparse row layout.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeySets {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl KeySets {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for list in lists {
            keys.extend_from_slice(list);
            offsets.push(keys.len());
        }
        Self { offsets, keys }
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn keys_of(&self, query: usize) -> &[usize] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    /// Total number of allowed (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Sin(Var),
    Gelu(Var, GeluKind),
    SignedLog(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    ReplaceRows(Var, Var, Vec<bool>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Mse(Var, Arc<Tensor>),
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SparseAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: Arc<KeySets>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Forward-pass operation counters, used by the scaling diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub attention: u64,
    pub matmul: u64,
}

/// Recording of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    gelu: GeluKind,
    flops: FlopCounter,
}

impl Graph {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Graph in training mode; dropout masks are drawn from a generator
    /// seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gelu: GeluKind::Erf,
            flops: FlopCounter::default(),
        }
    }

    pub fn set_gelu(&mut self, kind: GeluKind) {
        self.gelu = kind;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Arc::new(t), Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Arc::new(t), Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_raw(store.shared(id), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter leaf that is detached from the gradient computation.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_raw(store.shared(id), Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(Arc::new(value), op, requires_grad))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map_unary(
        &mut self,
        x: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&a| f(a)).collect(),
        )?;
        self.push(name, out, op, &[x])
    }

    // ----------------------------------------------------------------------
    // Linear algebra and elementwise ops.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.flops.matmul += (2 * m * k * n) as u64;
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or(NumericsError::Empty { op: "add_all" })?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// `x[m×n] + b` with `b` holding `n` values, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_bias")?;
        if self.value(b).numel() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(
            "add_bias",
            Tensor::new(vec![m, n], data)?,
            Op::AddBias(x, b),
            &[x, b],
        )
    }

    /// `x[m×n] ⊙ c` with `c` of shape `[m, 1]`, broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "mul_col")?;
        if self.shape(c) != [m, 1] {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_col",
                lhs: vec![m, n],
                rhs: self.shape(c).to_vec(),
            });
        }
        let cv = self.value(c).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(cv) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        self.push(
            "mul_col",
            Tensor::new(vec![m, n], data)?,
            Op::MulCol(x, c),
            &[x, c],
        )
    }

    /// `x · s` where `s` is a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|a| a * sv).collect(),
        )?;
        self.push("mul_scalar", out, Op::MulScalar(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map_unary(x, "scale", Op::Scale(x, factor), |a| a * factor)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, "sigmoid", Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, "tanh", Op::Tanh(x), f64::tanh)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, "sin", Op::Sin(x), f64::sin)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let kind = self.gelu;
        self.map_unary(x, "gelu", Op::Gelu(x, kind), move |a| gelu(a, kind))
    }

    /// `sign(x)·ln(1 + |x| + eps)`.
    pub fn signed_log(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.map_unary(x, "signed_log", Op::SignedLog(x, eps), move |a| {
            signed_log(a, eps)
        })
    }

    // ----------------------------------------------------------------------
    // Shape manipulation.

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Empty { op: "concat_cols" });
        }
        let (m, _) = self.mat(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Empty { op: "concat_rows" });
        }
        let (_, n) = self.mat(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat(p, "concat_rows")?;
            if c != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: n,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![m, w], data)?,
            Op::SliceCols(x, start),
            &[x],
        )
    }

    /// Gathers rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x, "select_rows")?;
        if rows.is_empty() {
            return Err(NumericsError::Empty { op: "select_rows" });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NumericsError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push(
            "select_rows",
            Tensor::new(vec![rows.len(), n], data)?,
            Op::SelectRows(x, rows.to_vec()),
            &[x],
        )
    }

    /// Row lookup into an embedding table `[vocab × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat(table, "embedding")?;
        if ids.is_empty() {
            return Err(NumericsError::Empty { op: "embedding" });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    len: vocab,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding(table, ids.to_vec()),
            &[table],
        )
    }

    /// Multiplies each row by a constant factor (e.g. 0/1 presence masks).
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.mat(x, "scale_rows")?;
        if factors.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: vec![factors.len()],
            });
        }
        let mut data = self.value(x).data().to_vec();
        for (row, &f) in data.chunks_mut(n).zip(factors) {
            row.iter_mut().for_each(|o| *o *= f);
        }
        self.push(
            "scale_rows",
            Tensor::new(vec![m, n], data)?,
            Op::ScaleRows(x, factors.to_vec()),
            &[x],
        )
    }

    /// Zeroes the rows whose flag is `false`.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let factors: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        self.scale_rows(x, &factors)
    }

    /// Rows flagged `true` are replaced by the single row `replacement`.
    pub fn replace_rows(&mut self, x: Var, replacement: Var, flags: &[bool]) -> Result<Var> {
        let (m, n) = self.mat(x, "replace_rows")?;
        if flags.len() != m || self.value(replacement).numel() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "replace_rows",
                lhs: vec![m, n],
                rhs: self.shape(replacement).to_vec(),
            });
        }
        let rep = self.value(replacement).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &f) in data.chunks_mut(n).zip(flags) {
            if f {
                row.copy_from_slice(rep);
            }
        }
        self.push(
            "replace_rows",
            Tensor::new(vec![m, n], data)?,
            Op::ReplaceRows(x, replacement, flags.to_vec()),
            &[x, replacement],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            "transpose",
            Tensor::new(vec![n, m], data)?,
            Op::Transpose(x),
            &[x],
        )
    }

    // ----------------------------------------------------------------------
    // Reductions, normalization, regularization.

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Axis {
                axis,
                shape: shape.clone(),
            });
        }
        let len = shape[axis];
        if len == 0 {
            return Err(NumericsError::Empty { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[idx(j)] /= z;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::new(shape, data)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or(NumericsError::Empty { op: "layer_norm" })?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in evaluation
    /// mode this is the identity.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NumericsError::InvalidArgument(format!(
                "dropout probability must be < 1, got {p}"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let (m, n) = self.mat(x, "dropout")?;
        let mask: Vec<f64> = (0..m * n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, k)| a * k)
            .collect();
        let mask_var = self.constant(Tensor::new(vec![m, n], mask)?);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("dropout", out, Op::Mul(x, mask_var), &[x])
    }

    // ----------------------------------------------------------------------
    // Losses. All return one-element tensors.

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let p = self.value(pred).data();
        let s = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        self.push(
            "mse",
            Tensor::scalar(s),
            Op::Mse(pred, Arc::new(target.clone())),
            &[pred],
        )
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        let weights = vec![1.0 / n; targets.len()];
        self.bce_with_logits_weighted(logits, targets, &weights)
    }

    /// `Σ wᵢ · bce(zᵢ, yᵢ)`; a zero weight removes an element entirely.
    pub fn bce_with_logits_weighted(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() || z.len() != weights.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let s = z
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&zi, &yi), &w)| w * bce_logit(zi, yi))
            .sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(s),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean categorical cross-entropy of `logits[n×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        let weights = vec![1.0 / n; targets.len()];
        self.cross_entropy_weighted(logits, targets, &weights)
    }

    /// `Σ wᵢ · (−log softmax(logitsᵢ)[targetᵢ])`.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, c) = self.mat(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let t = targets[r];
            if t >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (lse - row[t]);
            }
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ----------------------------------------------------------------------
    // Attention.

    /// Multi-head scaled dot-product attention restricted to the allowed key
    /// sets. `q`, `k`, `v` are `[T × D]` with `D` divisible by `heads`. A
    /// query with an empty key set produces a zero row. Work is proportional
    /// to the number of allowed pairs, not `T²`.
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: Arc<KeySets>,
    ) -> Result<Var> {
        let (t, d) = self.mat(q, "sparse_attention")?;
        for other in [k, v] {
            if self.shape(other) != [t, d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "sparse_attention",
                    lhs: vec![t, d],
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if keys.n_queries() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "sparse_attention",
                lhs: vec![t, d],
                rhs: vec![keys.n_queries()],
            });
        }
        if let Some(&bad) = keys.keys.iter().find(|&&j| j >= t) {
            return Err(NumericsError::IndexOutOfRange {
                op: "sparse_attention",
                index: bad,
                len: t,
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let nnz = keys.nnz();
        let mut probs = vec![0.0; heads * nnz];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let ks = keys.keys_of(i);
                if ks.is_empty() {
                    continue;
                }
                let base = h * nnz + keys.offsets[i];
                let p = &mut probs[base..base + ks.len()];
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (pj, &j) in p.iter_mut().zip(ks) {
                    *pj = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    max = max.max(*pj);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (pj, &j) in p.iter_mut().zip(ks) {
                    *pj /= z;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += *pj * vv;
                    }
                }
            }
        }
        self.flops.attention += (4 * dh * nnz * heads) as u64;
        self.push(
            "sparse_attention",
            Tensor::new(vec![t, d], out)?,
            Op::SparseAttention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            },
            &[q, k, v],
        )
    }

    // ----------------------------------------------------------------------
    // Backward.

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| gemm_nt_acc(g, bd, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn_acc(ad, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x)
                });
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulCol(x, c) => {
                let (_, n) = self.value(*x).dims2();
                let xd = self.value(*x).data();
                let cd = self.value(*c).data();
                self.accumulate(grads, *x, |gx| {
                    for ((orow, grow), &s) in gx.chunks_mut(n).zip(g.chunks(n)).zip(cd) {
                        orow.iter_mut().zip(grow).for_each(|(o, &gi)| *o += gi * s);
                    }
                });
                self.accumulate(grads, *c, |gc| {
                    for ((o, grow), xrow) in gc.iter_mut().zip(g.chunks(n)).zip(xd.chunks(n)) {
                        *o += dot(grow, xrow);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * sv)
                });
                self.accumulate(grads, *s, |gs| gs[0] += dot(g, xd));
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * f)
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Sin(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &a) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * a.cos();
                    }
                });
            }
            Op::Gelu(x, kind) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &a) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * gelu_grad(a, *kind);
                    }
                });
            }
            Op::SignedLog(x, eps) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &a) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi / (1.0 + a.abs() + eps);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.value(parts[0]).dims2().0;
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).dims2().1).collect();
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.accumulate(grads, p, |gp| {
                        for r in 0..m {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + start..r * total + start + w],
                            );
                        }
                    });
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[start..start + len]));
                    start += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2();
                let w = node.value.dims2().1;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..m {
                        add_into(
                            &mut gx[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::SelectRows(x, rows) | Op::Embedding(x, rows) => {
                let n = self.value(*x).dims2().1;
                self.accumulate(grads, *x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::ScaleRows(x, factors) => {
                let n = self.value(*x).dims2().1;
                self.accumulate(grads, *x, |gx| {
                    for ((orow, grow), &f) in gx.chunks_mut(n).zip(g.chunks(n)).zip(factors) {
                        if f != 0.0 {
                            orow.iter_mut().zip(grow).for_each(|(o, &gi)| *o += gi * f);
                        }
                    }
                });
            }
            Op::ReplaceRows(x, rep, flags) => {
                let n = self.value(*x).dims2().1;
                self.accumulate(grads, *x, |gx| {
                    for ((orow, grow), &f) in gx.chunks_mut(n).zip(g.chunks(n)).zip(flags) {
                        if !f {
                            add_into(orow, grow);
                        }
                    }
                });
                self.accumulate(grads, *rep, |gr| {
                    for (grow, &f) in g.chunks(n).zip(flags) {
                        if f {
                            add_into(gr, grow);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.value(*gain).data();
                let n = gd.len();
                self.accumulate(grads, *x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            mean_dh += dh;
                            mean_dhh += dh * hrow[j];
                        }
                        mean_dh /= n as f64;
                        mean_dhh /= n as f64;
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            gx[r * n + j] += rs * (dh - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                self.accumulate(grads, *pred, |gp| {
                    for ((o, &a), &b) in gp.iter_mut().zip(p).zip(target.data()) {
                        *o += g[0] * 2.0 * (a - b) / n;
                    }
                });
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits).data();
                self.accumulate(grads, *logits, |gz| {
                    for (((o, &zi), &yi), &w) in gz.iter_mut().zip(z).zip(targets).zip(weights) {
                        if w != 0.0 {
                            *o += g[0] * w * (sigmoid(zi) - yi);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).dims2().1;
                self.accumulate(grads, *logits, |gz| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gz[r * c + j] += g[0] * w * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
            Op::SparseAttention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, keys, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: &KeySets,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = self.value(q).dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let nnz = keys.nnz();
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut dp = Vec::new();
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let ks = keys.keys_of(i);
                if ks.is_empty() {
                    continue;
                }
                let base = h * nnz + keys.offsets[i];
                let p = &probs[base..base + ks.len()];
                let gi = &g[i * d + off..i * d + off + dh];
                dp.clear();
                let mut s = 0.0;
                for (&pj, &j) in p.iter().zip(ks) {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    let dpj = dot(gi, vj);
                    s += pj * dpj;
                    dp.push(dpj);
                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                    gvj.iter_mut().zip(gi).for_each(|(o, &x)| *o += pj * x);
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(ks) {
                    let ds = pj * (dpj - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let gqi = &mut gq[i * d + off..i * d + off + dh];
                    gqi.iter_mut().zip(kj).for_each(|(o, &x)| *o += ds * x);
                    let gkj = &mut gk[j * d + off..j * d + off + dh];
                    gkj.iter_mut().zip(qi).for_each(|(o, &x)| *o += ds * x);
                }
            }
        }
        self.accumulate(grads, q, |o| add_into(o, &gq));
        self.accumulate(grads, k, |o| add_into(o, &gk));
        self.accumulate(grads, v, |o| add_into(o, &gv));
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// participate or is detached.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter leaf bound through [`Graph::param`].
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, &x)| *o += x);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        GeluKind::Tanh => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh()),
    }
}

fn gelu_grad(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let th = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        }
    }
}

pub fn signed_log(x: f64, eps: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * (1.0 + x.abs() + eps).ln()
    }
}

fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
