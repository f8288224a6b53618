//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table; parameter gradients are then added into the owning
//! [`ParamStore`] with [`ParamStore::accumulate`]. Accumulation never resets,
//! the caller zeroes gradients between steps.
//!
//! Most operators treat a tensor as a matrix of `rows × cols` where `cols`
//! is the last dimension. Packed batches of variable-length sequences are
//! described by [`Segments`], a list of `(start_row, len)` pairs.

use std::rc::Rc;

use super::real::{gemm, View, ViewMut};
use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row ranges of independent sequences packed into one matrix.
pub type Segments = Rc<[(usize, usize)]>;

pub(crate) const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Attention { qkv: Var, heads: usize, segs: Segments, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    L1(Var, Var),
    Mse(Var, Var),
    Sum(Var),
    MeanRows { a: Var, segs: Segments },
    NormalizeRows { a: Var, norms: Vec<T> },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, rows: Vec<usize> },
    TimeUnfold { a: Var, width: usize, segs: Segments },
    StraightThrough { z: Var },
}

struct Node<T> {
    value: Value<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Parameter nodes read their values from the borrowed
/// store, so a graph lives for a single forward/backward pass.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, rest)) => (rest.iter().product(), c),
    }
}

pub(crate) fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

impl<'s, T: Real> Default for Graph<'s, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph without parameters (inputs and constants only).
    pub fn new() -> Self {
        Graph { store: None, nodes: Vec::new(), param_nodes: Vec::new() }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), param_nodes: vec![None; store.len()] }
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(data) => data,
            Value::Param(id) => &self.store.expect("param node without store").get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value: Value::Owned(value), shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (gradients are reported for it).
    pub fn input(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    fn leaf(&mut self, value: Vec<T>, shape: &[usize], needs_grad: bool) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("leaf", format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, needs_grad))
    }

    /// Node reading a parameter of the attached store. Repeated calls return
    /// the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let shape = self.store.expect("graph has no parameter store").get(id).shape.clone();
        self.nodes.push(Node { value: Value::Param(id), shape, op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("operands must be 2-D, got a={sa:?} b={sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims differ: a={sa:?} b={sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = View::rows(self.value(a), sa[1]);
            let bv = View::rows(self.value(b), sb[1]);
            let av = if ta { av.t() } else { av };
            let bv = if tb { bv.t() } else { bv };
            gemm(m, ka, n, T::one(), av, bv, T::zero(), ViewMut::rows(&mut out, n));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims(a);
        if self.value(row).len() != cols {
            return Err(Error::shape("add_row", format!("row {:?} vs matrix {:?}", self.shape(row), self.shape(a))));
        }
        let r = self.value(row).to_vec();
        let out: Vec<T> = self.value(a).chunks(cols).flat_map(|x| x.iter().zip(&r).map(|(&x, &b)| x + b)).collect();
        let ng = self.ng(a) || self.ng(row);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddRow { a, row }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_fwd, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm", format!("gamma/beta must have {cols} elements")));
        }
        let eps = T::lit(LN_EPS);
        let n = T::from_usize(cols).unwrap();
        let mut out = vec![T::zero(); rows * cols];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        {
            let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for (r, row) in xv.chunks(cols).enumerate() {
                let mu = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                let rs = T::one() / (var + eps).sqrt();
                for (c, &v) in row.iter().enumerate() {
                    out[r * cols + c] = (v - mu) * rs * g[c] + b[c];
                }
                mean.push(mu);
                rstd.push(rs);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Softmax(a), ng)
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, limit: vocab });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let ng = self.ng(table);
        Ok(self.push(out, vec![ids.len(), dim], Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Multi-head causal attention core. `qkv` is `[rows, 3·dim]` holding the
    /// query, key and value projections side by side; output is `[rows, dim]`.
    /// Each segment attends only within itself and only to non-future rows.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segs: &Segments) -> Result<Var> {
        let (rows, c3) = self.dims(qkv);
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape("causal_attention", format!("qkv width {c3} not divisible into 3×{heads} heads")));
        }
        check_segments("causal_attention", segs, rows)?;
        let d = c3 / 3;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let total: usize = segs.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); rows * d];
        let qv = self.value(qkv);
        let mut p_off = 0;
        for &(start, len) in segs.iter() {
            for h in 0..heads {
                let p = &mut probs[p_off..p_off + len * len];
                let q = View::at(qv, start * c3 + h * dh, c3, 1);
                let k = View::at(qv, start * c3 + d + h * dh, c3, 1);
                gemm(len, dh, len, scale, q, k.t(), T::zero(), ViewMut::rows(p, len));
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                let v = View::at(qv, start * c3 + 2 * d + h * dh, c3, 1);
                gemm(len, len, dh, T::one(), View::rows(p, len), v, T::zero(), ViewMut::at(&mut out, start * d + h * dh, d, 1));
                p_off += len * len;
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(out, vec![rows, d], Op::Attention { qkv, heads, segs: segs.clone(), probs }, ng))
    }

    /// Mean token-level cross entropy over rows with non-zero `mask`.
    /// Returns a scalar; zero when the mask selects nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len())));
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= cols).map(|(t, _)| t) {
            return Err(Error::TokenOutOfRange { id: bad, limit: cols });
        }
        let count = mask.iter().filter(|&&m| m).count();
        let w = if count == 0 { T::zero() } else { T::one() / T::from_usize(count).unwrap() };
        let weights: Vec<T> = mask.iter().map(|&m| if m { w } else { T::zero() }).collect();
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            if mask[r] {
                loss += weights[r] * nll_row(row, targets[r]);
            }
            softmax_in_place(row);
        }
        let ng = self.ng(logits);
        Ok(self.push(vec![loss], vec![1], Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs }, ng))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s: T = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| (x - y).abs()).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![s / n], vec![1], Op::L1(a, b), ng))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s: T = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![s / n], vec![1], Op::Mse(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    /// Mean over the rows of each segment: `[rows, cols]` → `[segments, cols]`.
    pub fn mean_rows(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        check_segments("mean_rows", segs, rows)?;
        let av = self.value(a);
        let mut out = vec![T::zero(); segs.len() * cols];
        for (s, &(start, len)) in segs.iter().enumerate() {
            if len == 0 {
                return Err(Error::shape("mean_rows", "empty segment"));
            }
            let inv = T::one() / T::from_usize(len).unwrap();
            let o = &mut out[s * cols..(s + 1) * cols];
            for r in start..start + len {
                for (c, x) in o.iter_mut().enumerate() {
                    *x += av[r * cols + c];
                }
            }
            o.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.ng(a);
        Ok(self.push(out, vec![segs.len(), cols], Op::MeanRows { a, segs: segs.clone() }, ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (_, cols) = self.dims(a);
        let eps = T::lit(NORM_EPS);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x = *x / n);
            norms.push(n);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::NormalizeRows { a, norms }, ng)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("range {start}..{end} of {cols} columns")));
        }
        let out: Vec<T> = self.value(a).chunks(cols).flat_map(|r| r[start..end].iter().copied()).collect();
        let ng = self.ng(a);
        Ok(self.push(out, vec![rows, end - start], Op::SliceCols { a, start }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&av[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, vec![rows.len(), cols], Op::GatherRows { a, rows: rows.to_vec() }, ng))
    }

    /// Sliding-window unfold along time with zero "same" padding inside each
    /// segment: row `t` of the output concatenates rows `t-r ..= t+r`
    /// (`r = width / 2`). Followed by a matmul this is a 1-D convolution.
    pub fn time_unfold(&mut self, a: Var, width: usize, segs: &Segments) -> Result<Var> {
        if width % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel width {width} must be odd")));
        }
        let (rows, cols) = self.dims(a);
        check_segments("time_unfold", segs, rows)?;
        let r = width / 2;
        let av = self.value(a);
        let mut out = vec![T::zero(); rows * width * cols];
        for &(start, len) in segs.iter() {
            for t in 0..len {
                for j in 0..width {
                    let src = t as isize + j as isize - r as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let s = (start + src as usize) * cols;
                    let d = (start + t) * width * cols + j * cols;
                    out[d..d + cols].copy_from_slice(&av[s..s + cols]);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, vec![rows, width * cols], Op::TimeUnfold { a, width, segs: segs.clone() }, ng))
    }

    /// Forward value is `quantized`; the backward pass treats the node as the
    /// identity of `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Vec<T>) -> Result<Var> {
        if quantized.len() != self.value(z).len() {
            return Err(Error::shape("straight_through", "quantized values must match z"));
        }
        let ng = self.ng(z);
        let shape = self.shape(z).to_vec();
        Ok(self.push(quantized, shape, Op::StraightThrough { z }, ng))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let gv = View::rows(g, n);
                if let Some(ga) = self.acc(grads, *a) {
                    // dA(logical m×k) = G·Bᵀ ; stored transposed when ta.
                    let bv = View::rows(self.value(*b), sb[1]);
                    let bv = if *tb { bv.t() } else { bv };
                    let out = if *ta { ViewMut::at(ga, 0, 1, m) } else { ViewMut::rows(ga, k) };
                    gemm(m, n, k, T::one(), gv, bv.t(), T::one(), out);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB(logical k×n) = Aᵀ·G ; stored transposed when tb.
                    let av = View::rows(self.value(*a), sa[1]);
                    let av = if *ta { av.t() } else { av };
                    let out = if *tb { ViewMut::at(gb, 0, 1, k) } else { ViewMut::rows(gb, n) };
                    gemm(k, m, n, T::one(), av.t(), gv, T::one(), out);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let cols = gr.len();
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(&bv)).for_each(|(x, (&y, &w))| *x += y * w);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g.iter().zip(&av)).for_each(|(x, (&y, &w))| *x += y * w);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(out)).for_each(|(x, (&y, &o))| {
                        if o > T::zero() {
                            *x += y
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&y, &i))| *x += y * gelu_grad(i));
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(out)).for_each(|(x, (&y, &o))| *x += y * (T::one() - o * o));
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (_, cols) = self.dims(*x);
                let n = T::from_usize(cols).unwrap();
                let xv = self.value(*x);
                let gam = self.value(*gamma);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for (r, (xr, gr)) in xv.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            let xhat = (xr[c] - mean[r]) * rstd[r];
                            dg[c] += gr[c] * xhat;
                            db[c] += gr[c];
                        }
                    }
                    if let Some(acc) = self.acc(grads, *gamma) {
                        acc.iter_mut().zip(&dg).for_each(|(a, &b)| *a += b);
                    }
                    if let Some(acc) = self.acc(grads, *beta) {
                        acc.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![T::zero(); cols];
                    let mut xhat = vec![T::zero(); cols];
                    for (r, (xr, gr)) in xv.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            xhat[c] = (xr[c] - mean[r]) * rstd[r];
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xhat[c];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let (_, cols) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((dst, y), gy) in ga.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            dst[c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut gt[i * dim..(i + 1) * dim];
                        dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Attention { qkv, heads, segs, probs } => {
                let (_, c3) = self.dims(*qkv);
                let d = c3 / 3;
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let qv = self.value(*qkv);
                if let Some(gq) = self.acc(grads, *qkv) {
                    let mut p_off = 0;
                    let maxlen = segs.iter().map(|&(_, l)| l).max().unwrap_or(0);
                    let mut dp = vec![T::zero(); maxlen * maxlen];
                    for &(start, len) in segs.iter() {
                        for h in 0..*heads {
                            let p = &probs[p_off..p_off + len * len];
                            let go = View::at(g, start * d + h * dh, d, 1);
                            let v = View::at(qv, start * c3 + 2 * d + h * dh, c3, 1);
                            let q = View::at(qv, start * c3 + h * dh, c3, 1);
                            let k = View::at(qv, start * c3 + d + h * dh, c3, 1);
                            // dV += Pᵀ·dO
                            gemm(len, len, dh, T::one(), View::rows(p, len).t(), go, T::one(), ViewMut::at(gq, start * c3 + 2 * d + h * dh, c3, 1));
                            // dP = dO·Vᵀ
                            let dp = &mut dp[..len * len];
                            gemm(len, dh, len, T::one(), go, v.t(), T::zero(), ViewMut::rows(dp, len));
                            for i in 0..len {
                                let pr = &p[i * len..(i + 1) * len];
                                let dr = &mut dp[i * len..(i + 1) * len];
                                let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                                for j in 0..len {
                                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
                                }
                            }
                            // dQ += dS·K ; dK += dSᵀ·Q
                            gemm(len, len, dh, T::one(), View::rows(dp, len), k, T::one(), ViewMut::at(gq, start * c3 + h * dh, c3, 1));
                            gemm(len, len, dh, T::one(), View::rows(dp, len).t(), q, T::one(), ViewMut::at(gq, start * c3 + d + h * dh, c3, 1));
                            p_off += len * len;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (_, cols) = self.dims(*logits);
                let g0 = g[0];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, (dst, p)) in gl.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        let w = weights[r] * g0;
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..cols {
                            dst[c] += w * p[c];
                        }
                        dst[targets[r]] -= w;
                    }
                }
            }
            Op::L1(a, b) => {
                let n = T::from_usize(self.value(*a).len().max(1)).unwrap();
                let s = g[0] / n;
                let sign: Vec<T> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            s
                        } else if d < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&sign).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&sign).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mse(a, b) => {
                let n = T::from_usize(self.value(*a).len().max(1)).unwrap();
                let s = T::lit(2.0) * g[0] / n;
                let diff: Vec<T> = self.value(*a).iter().zip(self.value(*b)).map(|(&x, &y)| (x - y) * s).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&diff).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&diff).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanRows { a, segs } => {
                let (_, cols) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (s, &(start, len)) in segs.iter().enumerate() {
                        let inv = T::one() / T::from_usize(len).unwrap();
                        let src = &g[s * cols..(s + 1) * cols];
                        for r in start..start + len {
                            ga[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(x, &y)| *x += y * inv);
                        }
                    }
                }
            }
            Op::NormalizeRows { a, norms } => {
                let (_, cols) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, ((dst, y), gy)) in ga.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)).enumerate() {
                        let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            dst[c] += (gy[c] - y[c] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (_, cols) = self.dims(*a);
                let w = node.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (dst, src) in ga.chunks_mut(cols).zip(g.chunks(w)) {
                        dst[*start..*start + w].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let (_, cols) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        ga[r * cols..(r + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::TimeUnfold { a, width, segs } => {
                let (_, cols) = self.dims(*a);
                let r = width / 2;
                if let Some(ga) = self.acc(grads, *a) {
                    for &(start, len) in segs.iter() {
                        for t in 0..len {
                            for j in 0..*width {
                                let src = t as isize + j as isize - r as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let s = (start + src as usize) * cols;
                                let d = (start + t) * width * cols + j * cols;
                                ga[s..s + cols].iter_mut().zip(&g[d..d + cols]).for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
            }
            Op::StraightThrough { z } => {
                if let Some(gz) = self.acc(grads, *z) {
                    gz.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Ok(())
    }
}

fn check_segments(op: &'static str, segs: &[(usize, usize)], rows: usize) -> Result<()> {
    let mut next = 0;
    for &(start, len) in segs {
        if start < next || start + len > rows {
            return Err(Error::shape(op, format!("segment ({start}, {len}) invalid for {rows} rows")));
        }
        next = start + len;
    }
    Ok(())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `-log softmax(row)[target]`, evaluated as `(max - x_t) + ln(1 + Σ_{j≠argmax} e^{x_j - max})`
/// so that confident rows keep full relative precision.
pub(crate) fn nll_row<T: Real>(row: &[T], target: usize) -> T {
    let (arg, m) = row.iter().copied().enumerate().fold((0, T::neg_infinity()), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    let rest: T = row.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, &x)| (x - m).exp()).sum();
    (m - row[target]) + rest.ln_1p()
}

/// Gradients produced by [`Graph::backward`], indexed by node. They outlive
/// the graph, so the parameter store can be borrowed mutably afterwards.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a parameter, if it took part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }
}

impl<T: Real> ParamStore<T> {
    /// Adds the parameter gradients of one backward pass into the stored
    /// accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for &(pid, var) in &grads.params {
            if let Some(g) = grads.wrt(var) {
                let p = self.get_mut(pid);
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }
}
