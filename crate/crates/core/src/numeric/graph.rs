//! Reverse-mode differentiation over a per-forward-pass trace.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Parameters enter the trace through [`Graph::param`], which copies the
//! current value out of a [`ParamStore`]; after the sweep the gradients are
//! pushed back with [`ParamStore::accumulate`].

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Broadcast, Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Bce {
        probs: Var,
        labels: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities inside [`Graph::bce_loss`].
pub const PROB_EPS: f64 = 1e-7;

/// A single forward trace.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: Vec<Option<Var>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    // Innermost output axis is walked as a contiguous run of reads.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..run {
            out.push(data[base + j * run_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient but is not a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter into the trace. Repeated calls for the same
    /// parameter return the same node, so uses accumulate additively.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let ix = id.index();
        if let Some(Some(v)) = self.param_lookup.get(ix) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        if self.param_lookup.len() <= ix {
            self.param_lookup.resize(ix + 1, None);
        }
        self.param_lookup[ix] = Some(v);
        self.params.push((id, v));
        v
    }

    /// Parameters that entered this trace, in first-use order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    // ----- elementwise -------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if op == UnaryOp::Log {
            if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Neg => |v| -v,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
            UnaryOp::Gelu => gelu_fwd,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Log => f64::ln,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Square => |v| v * v,
        };
        let out = xv.map(f);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(op, x), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = if sa == sb {
            Broadcast::Same
        } else if numel(sa) == 1 {
            Broadcast::LeftScalar
        } else if numel(sb) == 1 {
            Broadcast::RightScalar
        } else {
            return Err(Error::dim(format!(
                "cannot broadcast {sa:?} with {sb:?} for {op:?}"
            )));
        };
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let (av, bv) = (self.value(a), self.value(b));
        let out = match bc {
            Broadcast::Same => {
                let data = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(sa.to_vec(), data)?
            }
            Broadcast::LeftScalar => {
                let s = av.data()[0];
                bv.map(|y| f(s, y))
            }
            Broadcast::RightScalar => {
                let s = bv.data()[0];
                av.map(|x| f(x, s))
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, bc, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds `bias[n]` to every trailing row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx
            .last()
            .ok_or_else(|| Error::dim("add_bias on scalar"))?;
        if sb != [n] {
            return Err(Error::dim(format!("bias {sb:?} does not match {sx:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    // ----- linear algebra ----------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm operands {sa:?} and {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::dim(format!("bmm inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Batched `a[b×m×k] · b[b×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[b×m×k] · b[b×n×k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    // ----- normalisation and losses ------------------------------------

    /// Softmax along `axis`, max-subtracted. `-inf` entries get weight 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(d[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..n {
                    let e = (d[base + j * inner] - mx).exp();
                    d[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    d[base + j * inner] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layernorm on scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layernorm gain {:?} / bias {:?} for input {shape:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = numel(&shape) / d.max(1);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(Error::dim(format!(
                "cross entropy logits {shape:?} with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let (n, v) = (shape[0], shape[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross entropy with empty mask"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::dim(format!("target {t} outside vocabulary of {v}")));
            }
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|z| (z - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[t];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        loss /= count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[1e-7, 1-1e-7]`.
    pub fn bce_loss(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != labels.len() {
            return Err(Error::dim(format!(
                "bce with {} predictions and {} labels",
                p.len(),
                labels.len()
            )));
        }
        if p.is_empty() {
            return Err(Error::invalid("bce on empty batch"));
        }
        let loss = bce_value(p.data(), labels);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ----- indexing and shape ------------------------------------------

    /// Row gather `table[indices]` from a 2-D table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("gather table must be 2-D, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::dim(format!("index {ix} out of range for {rows} rows")));
            }
            out.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(format!("bad permutation {axes:?} for {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let mut shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("concat axis {axis} for {shape:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != shape.len()
                || s.iter()
                    .zip(&shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat shapes {:?} and {s:?} along axis {axis}",
                    self.shape(*first)
                )));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let chunk = ext * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean of empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every leaf that requires a
    /// gradient and is reachable from `loss` receives one; contributions
    /// from several consumers add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(dx) = self.buf(grads, *x) {
                    for i in 0..dx.len() {
                        let d = match op {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Tanh => 1.0 - yv[i] * yv[i],
                            UnaryOp::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Gelu => gelu_grad(xv[i]),
                            UnaryOp::Sigmoid => yv[i] * (1.0 - yv[i]),
                            UnaryOp::Log => 1.0 / xv[i],
                            UnaryOp::Exp => yv[i],
                            UnaryOp::Square => 2.0 * xv[i],
                        };
                        dx[i] += gd[i] * d;
                    }
                }
            }
            Op::Binary(op, bc, a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let a_at = |i: usize| if *bc == Broadcast::LeftScalar { av[0] } else { av[i] };
                let b_at = |i: usize| if *bc == Broadcast::RightScalar { bv[0] } else { bv[i] };
                let part_a: Vec<f64> = match op {
                    BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                    BinaryOp::Mul => (0..gd.len()).map(|i| gd[i] * b_at(i)).collect(),
                };
                let part_b: Vec<f64> = match op {
                    BinaryOp::Add => gd.to_vec(),
                    BinaryOp::Sub => gd.iter().map(|x| -x).collect(),
                    BinaryOp::Mul => (0..gd.len()).map(|i| gd[i] * a_at(i)).collect(),
                };
                if let Some(da) = self.buf(grads, *a) {
                    if *bc == Broadcast::LeftScalar {
                        da[0] += part_a.iter().sum::<f64>();
                    } else {
                        da.iter_mut().zip(&part_a).for_each(|(d, p)| *d += p);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    if *bc == Broadcast::RightScalar {
                        db[0] += part_b.iter().sum::<f64>();
                    } else {
                        db.iter_mut().zip(&part_b).for_each(|(d, p)| *d += p);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (d, gg) in dx.iter_mut().zip(gd) {
                        *d += gg;
                    }
                }
                let n = self.shape(*bias)[0];
                if let Some(db) = self.buf(grads, *bias) {
                    for row in gd.chunks(n) {
                        for (d, gg) in db.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (d, gg) in dx.iter_mut().zip(gd) {
                        *d += s * gg;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.buf(grads, *a) {
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    gemm(m, n, k, gd, false, bv, !*trans_b, 1.0, da);
                }
                if let Some(db) = self.buf(grads, *b) {
                    if *trans_b {
                        gemm(n, m, k, gd, true, av, false, 1.0, db);
                    } else {
                        gemm(k, m, n, av, true, gd, false, 1.0, db);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.buf(grads, *a) {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            1.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, 1.0, dbi);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, 1.0, dbi);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(dx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                let p = base + j * inner;
                                dot += gd[p] * y[p];
                            }
                            for j in 0..n {
                                let p = base + j * inner;
                                dx[p] += y[p] * (gd[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = rstd.len();
                let gv = self.value(*gain).data().to_vec();
                if let Some(dg) = self.buf(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gd[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gv[j];
                            dx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = gd[0] / *count as f64;
                if let Some(dl) = self.buf(grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] += scale * probs[r * v + j];
                        }
                        dl[r * v + t] -= scale;
                    }
                }
            }
            Op::Bce { probs, labels } => {
                let pv = self.value(*probs).data();
                let n = labels.len() as f64;
                if let Some(dp) = self.buf(grads, *probs) {
                    for i in 0..dp.len() {
                        let p = pv[i];
                        if p < PROB_EPS || p > 1.0 - PROB_EPS {
                            continue;
                        }
                        let y = labels[i];
                        dp[i] += -gd[0] / n * (y / p - (1.0 - y) / (1.0 - p));
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.buf(grads, *table) {
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (d, gg) in dx.iter_mut().zip(gd) {
                        *d += gg;
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (back, _) = permute_data(gd, node.value.shape(), &inv);
                if let Some(dx) = self.buf(grads, *x) {
                    for (d, gg) in dx.iter_mut().zip(&back) {
                        *d += gg;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(dv) = self.buf(grads, v) {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            for (d, gg) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += gg;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, ext, inner) = split_axis(&xs, *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (d, gg) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0] / n);
                }
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&xs, *axis);
                if let Some(dx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                dx[base + i] += gd[o * inner + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Clamped mean binary cross-entropy, the value computed by [`Graph::bce_loss`].
pub fn bce_value(probs: &[f64], labels: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        s += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    -s / probs.len() as f64
}
