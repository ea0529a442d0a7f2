//! Compute graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever forward
//! context its backward rule needs. Nodes are created in topological order by
//! construction, so [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Broadcast};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_shape, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var, Broadcast, Broadcast),
    Sub(Var, Var, Broadcast, Broadcast),
    Mul(Var, Var, Broadcast, Broadcast),
    Broadcast(Var, Broadcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Gather {
        input: Var,
        indices: Rc<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    L1(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        input: Var,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Recorded computation. Create leaves, apply ops, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Adds an input tensor. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable parameter leaf. The same id always maps to the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Gradient for every parameter used in this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        ensure_finite(name, &value)?;
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary_plan(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, Broadcast, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let pa = kernels::broadcast_plan(sa, &out);
        let pb = kernels::broadcast_plan(sb, &out);
        Ok((out, pa, pb))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var, Broadcast, Broadcast) -> Op,
    ) -> Result<Var> {
        let (out, pa, pb) = self.binary_plan(name, a, b)?;
        let n: usize = out.iter().product();
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<f64> = match (&pa, &pb) {
            (Broadcast::Same, Broadcast::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (Broadcast::Same, Broadcast::Tile) => va
                .iter()
                .zip(vb.iter().cycle())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            _ => {
                let ea = kernels::expand(va, n, &pa);
                let eb = kernels::expand(vb, n, &pb);
                ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
            }
        };
        let rg = self.rg(&[a, b]);
        self.push_checked(name, Tensor::from_parts(out, data), make(a, b, pa, pb), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push_checked("scale", value, Op::Scale(a, c), rg)
    }

    /// Explicit broadcast of `a` to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match kernels::broadcast_shape(&sa, shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let plan = kernels::broadcast_plan(&sa, shape);
        let n = shape.iter().product();
        let data = kernels::expand(self.value(a).data(), n, &plan);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(a, plan), rg))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(a).data().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg))
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        check_shape("gather", shape)?;
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: shape.to_vec(),
                reason: format!("{} indices", indices.len()),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n);
        for &i in indices.iter() {
            let v = *src.get(i).ok_or(TensorError::IndexOutOfRange {
                op: "gather",
                index: i,
                len: src.len(),
            })?;
            data.push(v);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { input: a, indices }, rg))
    }

    /// Selected rows of a 2-D tensor (embedding lookup).
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "index_rows",
                shape: s,
                reason: "expected rank 2".into(),
            });
        }
        let cols = s[1];
        let mut idx = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= s[0] {
                return Err(TensorError::IndexOutOfRange {
                    op: "index_rows",
                    index: r,
                    len: s[0],
                });
            }
            idx.extend(r * cols..(r + 1) * cols);
        }
        self.gather(a, Rc::new(idx), &[rows.len(), cols])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push_checked("sum", Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = t.sum() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push_checked("mean", Tensor::scalar(v), Op::Mean(a), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push_checked(name, value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Sum of absolute values, as a scalar.
    pub fn l1(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().map(|x| x.abs()).sum();
        let rg = self.rg(&[a]);
        self.push_checked("l1", Tensor::scalar(v), Op::L1(a), rg)
    }

    /// Softmax over the last axis of `logits + mask`.
    ///
    /// `mask` is an additive constant of the same shape whose entries are `0`
    /// or `-inf`. Masked entries come out as exact zeros; a row with every
    /// entry masked comes out as all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: m.shape().to_vec(),
                });
            }
            if m.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(TensorError::NonFinite { op: "masked_softmax" });
            }
        }
        let n = *shape.last().unwrap_or(&1);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for (r, orow) in out.chunks_mut(n).enumerate() {
            let xrow = &x[r * n..(r + 1) * n];
            let mrow = mask.map(|m| &m.data()[r * n..(r + 1) * n]);
            let open = |j: usize| mrow.is_none_or(|m| m[j] != f64::NEG_INFINITY);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if open(j) {
                    max = max.max(xrow[j] + mrow.map_or(0.0, |m| m[j]));
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..n {
                if open(j) {
                    let e = (xrow[j] + mrow.map_or(0.0, |m| m[j]) - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[a]);
        self.push_checked("masked_softmax", Tensor::from_parts(shape, out), Op::MaskedSoftmax(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let x = t.data();
        let rows = x.len() / n;
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let mu = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(xr) {
                *o = (v - mu) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(&[a]);
        self.push_checked(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { input: a, rstd },
            rg,
        )
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch * lq, d]`, `k` and `v` are `[batch * lk, d]`; rows of
    /// item `b` are contiguous. Heads split `d` into equal column blocks.
    /// Each item may carry an additive `[lq, lk]` mask with the semantics of
    /// [`Graph::masked_softmax`]. Output is `[batch * lq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (batch, heads) = (spec.batch, spec.heads);
        let bad = |reason: String| TensorError::InvalidShape {
            op: "attention",
            shape: sq.clone(),
            reason,
        };
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let d = sq[1];
        if batch == 0 || heads == 0 || d % heads != 0 || sq[0] % batch != 0 || sk[0] % batch != 0 {
            return Err(bad(format!("batch {batch} heads {heads} do not divide the inputs")));
        }
        let (lq, lk, dh) = (sq[0] / batch, sk[0] / batch, d / heads);
        if let Some(masks) = &spec.masks {
            if masks.len() != batch {
                return Err(bad(format!("{} masks for batch {batch}", masks.len())));
            }
            for m in masks.iter() {
                if m.shape() != [lq, lk] {
                    return Err(TensorError::ShapeMismatch {
                        op: "attention",
                        lhs: vec![lq, lk],
                        rhs: m.shape().to_vec(),
                    });
                }
                if m.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                    return Err(TensorError::NonFinite { op: "attention" });
                }
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; batch * lq * d];
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut qh = vec![0.0; lq * dh];
        let mut kh = vec![0.0; lk * dh];
        let mut vh = vec![0.0; lk * dh];
        let mut oh = vec![0.0; lq * dh];
        for b in 0..batch {
            let mask = spec.masks.as_ref().map(|m| m[b].data());
            for h in 0..heads {
                head_block(qd, b * lq, lq, d, h * dh, dh, &mut qh);
                head_block(kd, b * lk, lk, d, h * dh, dh, &mut kh);
                head_block(vd, b * lk, lk, d, h * dh, dh, &mut vh);
                let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                kernels::gemm_nt(lq, dh, lk, &qh, &kh, p);
                for (r, row) in p.chunks_mut(lk).enumerate() {
                    softmax_row(row, scale, mask.map(|m| &m[r * lk..(r + 1) * lk]));
                }
                oh.iter_mut().for_each(|x| *x = 0.0);
                kernels::gemm_nn(lq, lk, dh, p, &vh, &mut oh);
                for r in 0..lq {
                    let dst = (b * lq + r) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push_checked(
            "attention",
            Tensor::from_parts(vec![batch * lq, d], out),
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Post-softmax weights of an attention node, laid out as
    /// `[batch, heads, lq, lk]`, or `None` for other nodes.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(ls.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), delta));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, pa, pb) => {
                let na = self.value(*a).numel();
                let nb = self.value(*b).numel();
                self.accumulate(grads, *a, kernels::reduce_broadcast(gd, na, pa));
                self.accumulate(grads, *b, kernels::reduce_broadcast(gd, nb, pb));
            }
            Op::Sub(a, b, pa, pb) => {
                let na = self.value(*a).numel();
                let nb = self.value(*b).numel();
                self.accumulate(grads, *a, kernels::reduce_broadcast(gd, na, pa));
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, kernels::reduce_broadcast(&neg, nb, pb));
            }
            Op::Mul(a, b, pa, pb) => {
                let n = gd.len();
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let eb = kernels::expand(vb.data(), n, pb);
                    let ga: Vec<f64> = gd.iter().zip(&eb).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, kernels::reduce_broadcast(&ga, va.numel(), pa));
                }
                if self.requires_grad(*b) {
                    let ea = kernels::expand(va.data(), n, pa);
                    let gb: Vec<f64> = gd.iter().zip(&ea).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, kernels::reduce_broadcast(&gb, vb.numel(), pb));
                }
            }
            Op::Broadcast(a, plan) => {
                let na = self.value(*a).numel();
                self.accumulate(grads, *a, kernels::reduce_broadcast(gd, na, plan));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|v| v * c).collect());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, gd, vb.data(), &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(m, k, n, va.data(), gd, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            part.extend_from_slice(&gd[base..base + len]);
                        }
                        self.accumulate(grads, v, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut full = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *input, full);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Gather { input, indices } => {
                let mut out = vec![0.0; self.value(*input).numel()];
                for (gv, &i) in gd.iter().zip(indices.iter()) {
                    out[i] += gv;
                }
                self.accumulate(grads, *input, out);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::L1(a) => {
                let x = self.value(*a).data();
                let d = x.iter().map(|x| gd[0] * sign(*x)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::MaskedSoftmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(y.chunks(n)) {
                    let inner = kernels::dot(grow, yrow);
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, rstd } => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let nf = n as f64;
                let mut d = vec![0.0; gd.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let grow = &gd[r * n..(r + 1) * n];
                    let yrow = &y[r * n..(r + 1) * n];
                    let mean_g = grow.iter().sum::<f64>() / nf;
                    let mean_gy = kernels::dot(grow, yrow) / nf;
                    for j in 0..n {
                        d[r * n + j] = rs * (grow[j] - mean_g - yrow[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (batch, heads) = (*batch, *heads);
                let d = node.value.shape()[1];
                let (lq, lk, dh) = (
                    self.shape(*q)[0] / batch,
                    self.shape(*k)[0] / batch,
                    d / heads,
                );
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut qh = vec![0.0; lq * dh];
                let mut kh = vec![0.0; lk * dh];
                let mut vh = vec![0.0; lk * dh];
                let mut goh = vec![0.0; lq * dh];
                let mut ds = vec![0.0; lq * lk];
                let mut tmp_q = vec![0.0; lq * dh];
                let mut tmp_k = vec![0.0; lk * dh];
                for b in 0..batch {
                    for h in 0..heads {
                        head_block(qd, b * lq, lq, d, h * dh, dh, &mut qh);
                        head_block(kd, b * lk, lk, d, h * dh, dh, &mut kh);
                        head_block(vd, b * lk, lk, d, h * dh, dh, &mut vh);
                        head_block(gd, b * lq, lq, d, h * dh, dh, &mut goh);
                        let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                        // dV = P^T dO
                        tmp_k.iter_mut().for_each(|x| *x = 0.0);
                        kernels::gemm_tn(lq, lk, dh, p, &goh, &mut tmp_k);
                        add_head_block(&mut gv, b * lk, lk, d, h * dh, dh, &tmp_k);
                        // dS = P * (dP - rowdot(dP, P)), dP = dO V^T
                        ds.iter_mut().for_each(|x| *x = 0.0);
                        kernels::gemm_nt(lq, dh, lk, &goh, &vh, &mut ds);
                        for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                            let inner = kernels::dot(drow, prow);
                            for (dv, pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - inner) * scale;
                            }
                        }
                        tmp_q.iter_mut().for_each(|x| *x = 0.0);
                        kernels::gemm_nn(lq, lk, dh, &ds, &kh, &mut tmp_q);
                        add_head_block(&mut gq, b * lq, lq, d, h * dh, dh, &tmp_q);
                        tmp_k.iter_mut().for_each(|x| *x = 0.0);
                        kernels::gemm_tn(lq, lk, dh, &ds, &qh, &mut tmp_k);
                        add_head_block(&mut gk, b * lk, lk, d, h * dh, dh, &tmp_k);
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
    }
}

/// Options for [`Graph::attention`].
#[derive(Debug, Clone, Default)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    /// One additive `[lq, lk]` mask per batch item.
    pub masks: Option<Rc<Vec<Tensor>>>,
}

impl AttentionSpec {
    pub fn new(batch: usize, heads: usize) -> Self {
        Self {
            batch,
            heads,
            masks: None,
        }
    }

    pub fn with_masks(mut self, masks: Rc<Vec<Tensor>>) -> Self {
        self.masks = Some(masks);
        self
    }
}

/// Copies the `[rows, width]` block starting at (`row0`, `col0`) of a
/// row-major matrix with `stride` columns into `dst`.
fn head_block(src: &[f64], row0: usize, rows: usize, stride: usize, col0: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        let s = (row0 + r) * stride + col0;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[s..s + width]);
    }
}

fn add_head_block(dst: &mut [f64], row0: usize, rows: usize, stride: usize, col0: usize, width: usize, src: &[f64]) {
    for r in 0..rows {
        let o = (row0 + r) * stride + col0;
        for (a, b) in dst[o..o + width].iter_mut().zip(&src[r * width..(r + 1) * width]) {
            *a += b;
        }
    }
}

/// In-place softmax of `scale * row + mask`; masked entries become exact
/// zeros and a fully masked row becomes all zeros.
fn softmax_row(row: &mut [f64], scale: f64, mask: Option<&[f64]>) {
    let mut max = f64::NEG_INFINITY;
    for (j, x) in row.iter_mut().enumerate() {
        *x = *x * scale + mask.map_or(0.0, |m| m[j]);
        max = max.max(*x);
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.constant(Tensor::eye(2)).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let mask = t(&[1, 2], &[0.0, f64::NEG_INFINITY]);
        let s = g.masked_softmax(a, Some(&mask)).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[0.3, -0.2, 1.0, 2.0])).unwrap();
        let ninf = f64::NEG_INFINITY;
        let mask = t(&[2, 2], &[ninf, ninf, 0.0, 0.0]);
        let s = g.masked_softmax(a, Some(&mask)).unwrap();
        let v = g.value(s).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::ones(&[2, 2])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.value(c).row(1), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        assert!(g.constant(Tensor::scalar(f64::NAN)).is_err());
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        assert_eq!(g.log(z).unwrap_err(), TensorError::NonFinite { op: "log" });
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.5, -1.0, 2.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[2.0, -1.0]), true).unwrap();
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[2.0, -1.0]), true).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn broadcast_gradient_sums_over_broadcast_axes() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true).unwrap();
        let b = g.leaf(t(&[3], &[0.1, 0.2, 0.3]), true).unwrap();
        let c = g.leaf(t(&[2, 1], &[1.0, -1.0]), true).unwrap();
        let y = g.add(x, b).unwrap();
        let y = g.mul(y, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        // d/db = sum over rows of c
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0, 0.0]);
        // d/dc = row sums of (x + b)
        let gc = grads.get(c).unwrap().data();
        assert!((gc[0] - 6.6).abs() < 1e-12 && (gc[1] - 15.6).abs() < 1e-12);
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones(&[2])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let s = g.sum(s).unwrap();
        let grads = g.backward(s).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[2.0, 2.0]);
    }
}
