use std::collections::HashMap;

use super::kernels::gemm;
use super::{numel, ParamId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise op maps onto the left one.
///
/// `Mid` views the left operand as `[outer, n, inner]` and the right one as
/// `[outer, inner]`, repeating it along the middle axis. A rank-1 right
/// operand is the `outer = 1` case (a trailing-axis vector).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Mid { outer: usize, n: usize, inner: usize },
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        if b.len() == 1 && a.last() == Some(&b[0]) {
            let inner = b[0];
            return Ok(Bcast::Mid {
                outer: 1,
                n: numel(a).checked_div(inner).unwrap_or(0),
                inner,
            });
        }
        if a.len() == 3 && b.len() == 2 && a[0] == b[0] && a[2] == b[1] {
            return Ok(Bcast::Mid {
                outer: a[0],
                n: a[1],
                inner: a[2],
            });
        }
        Err(Error::dim(op, a, b))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var },
    Add { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Scale { x: Var, factor: T },
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: Var, width: usize },
    Concat { a: Var, b: Var, p: usize, q: usize },
    Slice { x: Var, start: usize, len: usize, width: usize },
    Rows { x: Var, offset: usize },
    Reshape(Var),
    Gather { table: Var, idx: Vec<usize> },
    Stack { parts: Vec<Var>, outer: usize, inner: usize },
    Blend { a: Var, b: Var, take_a: Vec<bool> },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep, indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. Recorded values are never mutated.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(id)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data).expect("op output shape");
        self.push(value, op, needs)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Binds a trainable parameter. Binding the same parameter twice returns
    /// the same handle.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut value = params.get(id).tensor.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        Ok(self.param(params, params.id(name)?))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`, i.e. applying an `[out×in]` weight to rows.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, false);
        Ok(self.push_op(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push_op(vec![batch, m, n], out, Op::BatchMatMul { a, b }, &[a, b]))
    }

    /// Affine map of the trailing axis: `x[..., in] · wᵀ + b` with `w: [out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let inp = sw[1];
        let rows = numel(&sx[..sx.len() - 1]);
        let flat = if sx.len() == 2 {
            x
        } else {
            self.reshape(x, [rows, inp])?
        };
        let mut y = self.matmul_nt(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        if sx.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[0];
        self.reshape(y, out_shape)
    }

    /// Elementwise sum; `b` may broadcast (see [`Tape::mul`]).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Bcast::resolve("add", self.shape(a), self.shape(b))?;
        let out = self.broadcast_map(a, b, bc, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Add { a, b, bc }, &[a, b]))
    }

    /// Elementwise (Hadamard) product. `b` must have the same shape as `a`,
    /// or be a vector matching `a`'s trailing axis, or, for rank-3 `a` of
    /// shape `[B, n, d]`, have shape `[B, d]` and repeat along the middle axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Bcast::resolve("hadamard", self.shape(a), self.shape(b))?;
        let out = self.broadcast_map(a, b, bc, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Mul { a, b, bc }, &[a, b]))
    }

    fn broadcast_map(&self, a: Var, b: Var, bc: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (da, db) = (self.data(a), self.data(b));
        match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Mid { outer, n, inner } => {
                let mut out = Vec::with_capacity(da.len());
                for o in 0..outer {
                    let row = &db[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        out.extend(da[base..base + inner].iter().zip(row).map(|(&x, &y)| f(x, y)));
                    }
                }
                out
            }
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64_lossy(factor);
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Sigmoid(x), &[x])
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v.exp_m1() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Elu(x), &[x])
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let data = self.data(x);
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("softmax"));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.push_op(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Softmax over the trailing axis where row `r` only sees its first
    /// `lengths[r]` entries; the rest get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::contract("masked_softmax on a scalar"))?;
        let rows = numel(&shape[..shape.len() - 1]);
        if lengths.len() != rows {
            return Err(Error::dim("masked_softmax", &shape, &[lengths.len()]));
        }
        let data = self.data(x);
        let mut out = vec![T::zero(); data.len()];
        for (r, &valid) in lengths.iter().enumerate() {
            if valid == 0 || valid > width {
                return Err(Error::contract(format!(
                    "masked_softmax row {r} has {valid} valid entries of {width}"
                )));
            }
            let row = &data[r * width..r * width + valid];
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("masked_softmax"));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * width..r * width + valid];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total = total + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        Ok(self.push_op(shape, out, Op::MaskedSoftmax { x, width }, &[x]))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = numel(&sa[..sa.len() - 1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = p + q;
        Ok(self.push_op(shape, out, Op::Concat { a, b, p, q }, &[a, b]))
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::contract("slice of scalar"))?;
        if start + len > width {
            return Err(Error::dim("slice_last", &shape, &[start, len]));
        }
        let rows = numel(&shape[..shape.len() - 1]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * width + start..r * width + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push_op(out_shape, out, Op::Slice { x, start, len, width }, &[x]))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::dim("slice_rows", &shape, &[start, len]));
        }
        let width = numel(&shape[1..]);
        let out = self.data(x)[start * width..(start + len) * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push_op(out_shape, out, Op::Rows { x, offset: start * width }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push_op(shape, out, Op::Reshape(x), &[x]))
    }

    /// Row lookup: `table[V×e]`, indices → `[n×e]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("gather_rows", &shape, &[idx.len()]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for table of {rows} rows"
            )));
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        Ok(self.push_op(
            vec![idx.len(), width],
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks equally shaped values along a new axis inserted at `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(Error::contract(format!("stack axis {axis} for rank {}", shape.len())));
        }
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("stack", &shape, self.shape(p)));
            }
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let mut out = Vec::with_capacity(outer * inner * parts.len());
        for o in 0..outer {
            for &p in parts {
                out.extend_from_slice(&self.data(p)[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, parts.len());
        Ok(self.push_op(
            out_shape,
            out,
            Op::Stack {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            parts,
        ))
    }

    /// Row-wise select: row `r` comes from `a` when `take_a[r]`, else from `b`.
    pub fn blend_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.is_empty() || shape[0] != take_a.len() {
            return Err(Error::dim("blend_rows", &shape, self.shape(b)));
        }
        let width = numel(&shape[1..]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        for (r, &use_a) in take_a.iter().enumerate() {
            let src = if use_a { da } else { db };
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        Ok(self.push_op(
            shape,
            out,
            Op::Blend {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push_op(Vec::new(), vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[batch×classes]`, computed through log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::dim("cross_entropy_logits", &shape, &[labels.len()]));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let d = self.data(logits);
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("cross_entropy_logits"));
        }
        let mut probs = vec![T::zero(); d.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &d[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total = total + (lse - row[label]);
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::from_usize(batch).unwrap();
        Ok(self.push_op(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the result into every bound
    /// parameter's gradient accumulator.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &var) in &self.bound {
            if let Some(g) = grads.wrt(var) {
                params.get_mut(id).tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // ga = g · bᵀ (b stored [k×n]) or g · b (b stored [n×k]).
                    gemm(m, n, k, g, false, self.data(*b), !trans_b, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        gemm(n, m, k, g, true, self.data(*a), false, gb, true);
                    } else {
                        gemm(k, m, n, self.data(*a), true, g, false, gb, true);
                    }
                }
            }
            Op::BatchMatMul { a, b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                if let Some(ga) = self.slot(grads, *a) {
                    let db = self.data(*b);
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let da = self.data(*a);
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &da[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Add { a, b, bc } => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    match *bc {
                        Bcast::Same => add_into(gb, g),
                        Bcast::Mid { outer, n, inner } => {
                            for o in 0..outer {
                                let dst = &mut gb[o * inner..(o + 1) * inner];
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    add_into(dst, &g[base..base + inner]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let (da, db) = (self.data(*a), self.data(*b));
                match *bc {
                    Bcast::Same => {
                        if let Some(ga) = self.slot(grads, *a) {
                            for ((acc, &gi), &bi) in ga.iter_mut().zip(g).zip(db) {
                                *acc = *acc + gi * bi;
                            }
                        }
                        if let Some(gb) = self.slot(grads, *b) {
                            for ((acc, &gi), &ai) in gb.iter_mut().zip(g).zip(da) {
                                *acc = *acc + gi * ai;
                            }
                        }
                    }
                    Bcast::Mid { outer, n, inner } => {
                        if let Some(ga) = self.slot(grads, *a) {
                            for o in 0..outer {
                                let row = &db[o * inner..(o + 1) * inner];
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    for t in 0..inner {
                                        ga[base + t] = ga[base + t] + g[base + t] * row[t];
                                    }
                                }
                            }
                        }
                        if let Some(gb) = self.slot(grads, *b) {
                            for o in 0..outer {
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    for t in 0..inner {
                                        let acc = &mut gb[o * inner + t];
                                        *acc = *acc + g[base + t] * da[base + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (acc, &gi) in gx.iter_mut().zip(g) {
                        *acc = *acc + gi * *factor;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((acc, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *acc = *acc + gi * (T::one() - yi * yi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((acc, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *acc = *acc + gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Elu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((acc, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        let d = if yi > T::zero() { T::one() } else { yi + T::one() };
                        *acc = *acc + gi * d;
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                let k = at(j);
                                gx[k] = gx[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, width } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gr, yr), dst) in g
                        .chunks(*width)
                        .zip(y.chunks(*width))
                        .zip(gx.chunks_mut(*width))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Concat { a, b, p, q } => {
                let w = p + q;
                if let Some(ga) = self.slot(grads, *a) {
                    for (dst, src) in ga.chunks_mut((*p).max(1)).zip(g.chunks(w.max(1))) {
                        add_into(dst, &src[..*p]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (dst, src) in gb.chunks_mut((*q).max(1)).zip(g.chunks(w.max(1))) {
                        add_into(dst, &src[*p..]);
                    }
                }
            }
            Op::Slice {
                x,
                start,
                len,
                width,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, src) in gx.chunks_mut(*width).zip(g.chunks((*len).max(1))) {
                        add_into(&mut dst[*start..*start + *len], src);
                    }
                }
            }
            Op::Rows { x, offset } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(&mut gx[*offset..*offset + g.len()], g);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Gather { table, idx } => {
                let width = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Stack {
                parts,
                outer,
                inner,
            } => {
                let n = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let base = (o * n + j) * inner;
                            add_into(&mut gp[o * inner..(o + 1) * inner], &g[base..base + inner]);
                        }
                    }
                }
            }
            Op::Blend { a, b, take_a } => {
                let width = if take_a.is_empty() { 0 } else { g.len() / take_a.len() };
                for (r, &use_a) in take_a.iter().enumerate() {
                    let target = if use_a { *a } else { *b };
                    if let Some(gt) = self.slot(grads, target) {
                        add_into(&mut gt[r * width..(r + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|acc| *acc = *acc + g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let k = r * classes + c;
                            let target = if c == label { T::one() } else { T::zero() };
                            gl[k] = gl[k] + (probs[k] - target) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
