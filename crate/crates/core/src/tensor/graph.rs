//! Reverse-mode autodiff over a Wengert tape of tensor operations.
//!
//! A step builds a fresh [`Graph`], records forward ops, then calls
//! [`Graph::backward`] on a scalar loss. Creation order is already a
//! topological order, so the backward pass is one reverse sweep that
//! visits each node exactly once and accumulates (adds) gradients where
//! paths rejoin. Gradients are returned to the caller; nothing is zeroed
//! implicitly across steps because each step owns its own graph.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Which axis a broadcast bias vector indexes.
#[derive(Debug, Clone, Copy)]
enum Bias {
    /// `[R, C] + [C]`: bias indexed by column, broadcast over rows.
    Col,
    /// `[B, C, T] + [C]`: bias indexed by channel, broadcast over batch and time.
    Channel,
}

enum Op<F: Scalar> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId, F),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvT1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Tanh(NodeId),
    Elu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Pow10(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Square(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
    },
    SoftmaxRows(NodeId),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        axis: usize,
        inputs: Vec<NodeId>,
    },
    Sum(NodeId),
    Mean(NodeId),
    AddBias {
        x: NodeId,
        b: NodeId,
        kind: Bias,
    },
    Frames {
        x: NodeId,
        win: usize,
        hop: usize,
    },
    GatherRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    Reshape(NodeId),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient accumulated at a leaf, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Computation graph for one forward/backward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient during backward.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input; backward never propagates into it.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Copy of a node's value as a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// The single value of a scalar-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> Result<F> {
        self.value(id).item()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), op_name, f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let value = self.value(x).scale(s);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, s), needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: F) -> NodeId {
        let value = self.value(x).map(|v| v + s);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x, s), needs)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(F) -> F + Sync, op: Op<F>) -> NodeId {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { v.exp() - F::one() },
            Op::Elu(x),
        )
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    /// Elementwise 10^x.
    pub fn pow10(&mut self, x: NodeId) -> NodeId {
        let ln10 = F::from_f64(std::f64::consts::LN_10);
        self.unary(x, |v| (v * ln10).exp(), Op::Pow10(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(s / F::from_f64(n as f64)),
            Op::Mean(x),
            needs,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}: inner dimensions {} and {} differ",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    ka,
                    kb
                ),
            ));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let value = Tensor::from_vec(&[c, r], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    /// 1-D convolution: `[B, Ci, T] * [Co, Ci, K] -> [B, Co, To]`,
    /// `To = (T + 2·pad − K)/stride + 1`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (bs, ci, t) = self.value(x).dims3()?;
        let (co, ciw, k) = self.value(w).dims3()?;
        if ci != ciw {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?} has {} channels, kernel {:?} expects {}",
                    self.value(x).shape(),
                    ci,
                    self.value(w).shape(),
                    ciw
                ),
            ));
        }
        if t + 2 * pad < k {
            return Err(Error::shape(
                "conv1d",
                format!("input length {t} + 2*{pad} shorter than kernel {k}"),
            ));
        }
        if let Some(bias) = b {
            if self.value(bias).shape() != [co] {
                return Err(Error::shape(
                    "conv1d",
                    format!(
                        "bias {:?} does not match {} output channels",
                        self.value(bias).shape(),
                        co
                    ),
                ));
            }
        }
        let to = (t + 2 * pad - k) / stride + 1;
        let mut out = vec![F::zero(); bs * co * to];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bias = b.map(|id| self.value(id).data().to_vec());
            par::for_each_chunk_mut(&mut out, to, |plane, yrow| {
                let bi = plane / co;
                let coi = plane % co;
                if let Some(bias) = &bias {
                    yrow.iter_mut().for_each(|v| *v = bias[coi]);
                }
                for cii in 0..ci {
                    let xrow = &xd[(bi * ci + cii) * t..(bi * ci + cii + 1) * t];
                    let wrow = &wd[(coi * ci + cii) * k..(coi * ci + cii + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let (lo, hi) = conv_out_range(kk, pad, stride, t, to);
                        for toi in lo..hi {
                            yrow[toi] += wv * xrow[toi * stride + kk - pad];
                        }
                    }
                }
            });
        }
        let value = Tensor::from_vec(&[bs, co, to], out)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|id| self.needs(id)).unwrap_or(false);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Transposed 1-D convolution: `[B, Ci, T] * [Ci, Co, K] -> [B, Co, Ty]`,
    /// `Ty = (T − 1)·stride + K − 2·pad`.
    pub fn conv1d_transposed(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (bs, ci, t) = self.value(x).dims3()?;
        let (ciw, co, k) = self.value(w).dims3()?;
        if ci != ciw {
            return Err(Error::shape(
                "conv1d_transposed",
                format!(
                    "input {:?} has {} channels, kernel {:?} expects {}",
                    self.value(x).shape(),
                    ci,
                    self.value(w).shape(),
                    ciw
                ),
            ));
        }
        let full = (t - 1) * stride + k;
        if full < 2 * pad {
            return Err(Error::shape(
                "conv1d_transposed",
                format!("padding {pad} exceeds output extent {full}"),
            ));
        }
        let ty = full - 2 * pad;
        if let Some(bias) = b {
            if self.value(bias).shape() != [co] {
                return Err(Error::shape(
                    "conv1d_transposed",
                    format!(
                        "bias {:?} does not match {} output channels",
                        self.value(bias).shape(),
                        co
                    ),
                ));
            }
        }
        let mut out = vec![F::zero(); bs * co * ty];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bias = b.map(|id| self.value(id).data().to_vec());
            par::for_each_chunk_mut(&mut out, ty, |plane, yrow| {
                let bi = plane / co;
                let coi = plane % co;
                if let Some(bias) = &bias {
                    yrow.iter_mut().for_each(|v| *v = bias[coi]);
                }
                for cii in 0..ci {
                    let xrow = &xd[(bi * ci + cii) * t..(bi * ci + cii + 1) * t];
                    let wrow = &wd[(cii * co + coi) * k..(cii * co + coi + 1) * k];
                    for (ti, &xv) in xrow.iter().enumerate() {
                        let base = ti * stride;
                        // y index = base + kk - pad must land in [0, ty)
                        let klo = pad.saturating_sub(base);
                        let khi = k.min(ty + pad - base);
                        for kk in klo..khi {
                            yrow[base + kk - pad] += xv * wrow[kk];
                        }
                    }
                }
            });
        }
        let value = Tensor::from_vec(&[bs, co, ty], out)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|id| self.needs(id)).unwrap_or(false);
        Ok(self.push(
            value,
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis of `[R, D]`, then affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match feature dim {}",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    d
                ),
            ));
        }
        let epsf = F::from_f64(eps);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let df = F::from_f64(d as f64);
        let mut out = vec![F::zero(); r * d];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mu = row.iter().fold(F::zero(), |a, &v| a + v) / df;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu)) / df;
            let inv = (var + epsf).sqrt().recip();
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = gd[j] * (row[j] - mu) * inv + bd[j];
            }
        }
        let value = Tensor::from_vec(&[r, d], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps: epsf,
            },
            needs,
        ))
    }

    /// Row-wise softmax of `[R, D]`.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); r * d];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let m = row.iter().fold(row[0], |a, &v| if v > a { v } else { a });
            let orow = &mut out[i * d..(i + 1) * d];
            let mut s = F::zero();
            for j in 0..d {
                let e = (row[j] - m).exp();
                orow[j] = e;
                s += e;
            }
            let inv = s.recip();
            orow.iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::from_vec(&[r, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), needs))
    }

    /// Copying slice `start..end` along `axis`.
    pub fn slice_axis(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let width = end - start;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); outer * width * inner];
        for o in 0..outer {
            let src = &xd[(o * alen + start) * inner..(o * alen + end) * inner];
            out[o * width * inner..(o + 1) * width * inner].copy_from_slice(src);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let value = Tensor::from_vec(&new_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            needs,
        ))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat_axis(&mut self, axis: usize, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("concat_axis of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat_axis",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0usize;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat_axis",
                    format!("{:?} vs {:?} on axis {axis}", s, first),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = vec![F::zero(); outer * total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for &id in inputs {
                let alen = self.value(id).shape()[axis];
                let src = &self.value(id).data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * total + off) * inner;
                out[dst_start..dst_start + alen * inner].copy_from_slice(src);
                off += alen;
            }
        }
        let mut new_shape = first;
        new_shape[axis] = total;
        let value = Tensor::from_vec(&new_shape, out)?;
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            value,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// `[R, C] + [C]`, bias broadcast over rows.
    pub fn add_col_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(
                "add_col_bias",
                format!("bias {:?} vs {} columns", self.value(b).shape(), c),
            ));
        }
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let value = Tensor::from_vec(&[r, c], out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            value,
            Op::AddBias {
                x,
                b,
                kind: Bias::Col,
            },
            needs,
        ))
    }

    /// `[B, C, T] + [C]`, bias broadcast over batch and time.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, c, t) = self.value(x).dims3()?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs {} channels", self.value(b).shape(), c),
            ));
        }
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = vec![F::zero(); bs * c * t];
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ti in 0..t {
                    out[base + ti] = xd[base + ti] + bd[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[bs, c, t], out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            value,
            Op::AddBias {
                x,
                b,
                kind: Bias::Channel,
            },
            needs,
        ))
    }

    /// Extract overlapping frames from a rank-1 signal:
    /// `[N] -> [F, win]` with `F = (N − win)/hop + 1`.
    pub fn frames(&mut self, x: NodeId, win: usize, hop: usize) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if shape.len() != 1 {
            return Err(Error::shape(
                "frames",
                format!("expected rank-1 signal, got {:?}", shape),
            ));
        }
        let n = shape[0];
        if win == 0 || hop == 0 || n < win {
            return Err(Error::shape(
                "frames",
                format!("signal length {n} with win {win} hop {hop}"),
            ));
        }
        let f = (n - win) / hop + 1;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); f * win];
        for fi in 0..f {
            out[fi * win..(fi + 1) * win].copy_from_slice(&xd[fi * hop..fi * hop + win]);
        }
        let value = Tensor::from_vec(&[f, win], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Frames { x, win, hop }, needs))
    }

    /// Row lookup: `[R, C]` gathered at `indices` -> `[len, C]`.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {r} rows"),
            ));
        }
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); indices.len() * c];
        for (i, &ri) in indices.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&xd[ri * c..(ri + 1) * c]);
        }
        let value = Tensor::from_vec(&[indices.len(), c], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for leaves only.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let keep = matches!(node.op, Op::Leaf);
            self.backprop_one(i, &gout, &mut grads)?;
            if keep {
                grads[i] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_one(
        &self,
        i: usize,
        gout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc_into(grads, *a, |g| add_assign(g, gout.data(), F::one()));
                self.acc_into(grads, *b, |g| add_assign(g, gout.data(), F::one()));
            }
            Op::Sub(a, b) => {
                self.acc_into(grads, *a, |g| add_assign(g, gout.data(), F::one()));
                self.acc_into(grads, *b, |g| add_assign(g, gout.data(), -F::one()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_into(grads, *a, |g| {
                    for ((gi, &go), &b) in g.iter_mut().zip(gout.data()).zip(bv) {
                        *gi += go * b;
                    }
                });
                self.acc_into(grads, *b, |g| {
                    for ((gi, &go), &a) in g.iter_mut().zip(gout.data()).zip(av) {
                        *gi += go * a;
                    }
                });
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_into(grads, *a, |g| {
                    for ((gi, &go), &b) in g.iter_mut().zip(gout.data()).zip(bv) {
                        *gi += go / b;
                    }
                });
                self.acc_into(grads, *b, |g| {
                    for (((gi, &go), &a), &b) in g.iter_mut().zip(gout.data()).zip(av).zip(bv) {
                        *gi -= go * a / (b * b);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc_into(grads, *x, |g| add_assign(g, gout.data(), *s));
            }
            Op::AddScalar(x, _) => {
                self.acc_into(grads, *x, |g| add_assign(g, gout.data(), F::one()));
            }
            Op::Matmul(a, b) => self.backprop_matmul(*a, *b, gout, grads),
            Op::Transpose(x) => {
                let (c, r) = self.value(NodeId(i)).dims2()?;
                let go = gout.data();
                self.acc_into(grads, *x, |g| {
                    for jj in 0..c {
                        for ii in 0..r {
                            g[ii * c + jj] += go[jj * r + ii];
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv1d(*x, *w, *b, *stride, *pad, gout, grads)?,
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_convt1d(*x, *w, *b, *stride, *pad, gout, grads)?,
            Op::Tanh(x) => {
                let y = self.value(NodeId(i)).data();
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout.data()).zip(y) {
                        *gi += go * (F::one() - yv * yv);
                    }
                });
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                let y = self.value(NodeId(i)).data();
                self.acc_into(grads, *x, |g| {
                    for (((gi, &go), &x), &yv) in g.iter_mut().zip(gout.data()).zip(xv).zip(y) {
                        *gi += go * if x > F::zero() { F::one() } else { yv + F::one() };
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.value(NodeId(i)).data();
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout.data()).zip(y) {
                        *gi += go * yv;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout.data()).zip(xv) {
                        *gi += go / x;
                    }
                });
            }
            Op::Pow10(x) => {
                let ln10 = F::from_f64(std::f64::consts::LN_10);
                let y = self.value(NodeId(i)).data();
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout.data()).zip(y) {
                        *gi += go * ln10 * yv;
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = self.value(NodeId(i)).data();
                let half = F::from_f64(0.5);
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout.data()).zip(y) {
                        *gi += go * half / yv;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout.data()).zip(xv) {
                        let s = if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *gi += go * s;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = F::from_f64(2.0);
                self.acc_into(grads, *x, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout.data()).zip(xv) {
                        *gi += go * two * x;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backprop_layer_norm(*x, *gamma, *beta, *eps, gout, grads)?
            }
            Op::SoftmaxRows(x) => {
                let (r, d) = self.value(NodeId(i)).dims2()?;
                let y = self.value(NodeId(i)).data();
                let go = gout.data();
                self.acc_into(grads, *x, |g| {
                    for ri in 0..r {
                        let ys = &y[ri * d..(ri + 1) * d];
                        let gs = &go[ri * d..(ri + 1) * d];
                        let dot = ys
                            .iter()
                            .zip(gs)
                            .fold(F::zero(), |a, (&yv, &gv)| a + yv * gv);
                        let out = &mut g[ri * d..(ri + 1) * d];
                        for j in 0..d {
                            out[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, alen, inner) = axis_split(&shape, *axis);
                let width = end - start;
                let go = gout.data();
                self.acc_into(grads, *x, |g| {
                    for o in 0..outer {
                        let dst = &mut g[(o * alen + start) * inner..(o * alen + end) * inner];
                        let src = &go[o * width * inner..(o + 1) * width * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat { axis, inputs } => {
                let total = self.value(NodeId(i)).shape()[*axis];
                let out_shape = self.value(NodeId(i)).shape().to_vec();
                let (outer, _, inner) = axis_split(&out_shape, *axis);
                let go = gout.data();
                let mut off = 0usize;
                for &id in inputs {
                    let alen = self.value(id).shape()[*axis];
                    self.acc_into(grads, id, |g| {
                        for o in 0..outer {
                            let src = &go[(o * total + off) * inner..(o * total + off + alen) * inner];
                            let dst = &mut g[o * alen * inner..(o + 1) * alen * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += alen;
                }
            }
            Op::Sum(x) => {
                let gv = gout.data()[0];
                self.acc_into(grads, *x, |g| g.iter_mut().for_each(|v| *v += gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = gout.data()[0] / F::from_f64(n as f64);
                self.acc_into(grads, *x, |g| g.iter_mut().for_each(|v| *v += gv));
            }
            Op::AddBias { x, b, kind } => {
                self.acc_into(grads, *x, |g| add_assign(g, gout.data(), F::one()));
                match kind {
                    Bias::Col => {
                        let (r, c) = self.value(*x).dims2()?;
                        let go = gout.data();
                        self.acc_into(grads, *b, |g| {
                            for ri in 0..r {
                                for j in 0..c {
                                    g[j] += go[ri * c + j];
                                }
                            }
                        });
                    }
                    Bias::Channel => {
                        let (bs, c, t) = self.value(*x).dims3()?;
                        let go = gout.data();
                        self.acc_into(grads, *b, |g| {
                            for bi in 0..bs {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * t;
                                    let mut s = F::zero();
                                    for ti in 0..t {
                                        s += go[base + ti];
                                    }
                                    g[ci] += s;
                                }
                            }
                        });
                    }
                }
            }
            Op::Frames { x, win, hop } => {
                let f = self.value(NodeId(i)).shape()[0];
                let (win, hop) = (*win, *hop);
                let go = gout.data();
                self.acc_into(grads, *x, |g| {
                    for fi in 0..f {
                        let src = &go[fi * win..(fi + 1) * win];
                        let dst = &mut g[fi * hop..fi * hop + win];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let c = self.value(*x).shape()[1];
                let go = gout.data();
                self.acc_into(grads, *x, |g| {
                    for (ii, &ri) in indices.iter().enumerate() {
                        let src = &go[ii * c..(ii + 1) * c];
                        let dst = &mut g[ri * c..(ri + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc_into(grads, *x, |g| add_assign(g, gout.data(), F::one()));
            }
        }
        Ok(())
    }

    /// Run `f` on the gradient buffer of `id`, allocating zeros on first touch.
    /// Skips entirely when `id` does not need gradients.
    fn acc_into(
        &self,
        grads: &mut [Option<Tensor<F>>],
        id: NodeId,
        f: impl FnOnce(&mut [F]),
    ) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_matmul(
        &self,
        a: NodeId,
        b: NodeId,
        gout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (m, k) = self.value(a).dims2().expect("checked at construction");
        let (_, n) = self.value(b).dims2().expect("checked at construction");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let go = gout.data();
        // da = g · bᵀ
        self.acc_into(grads, a, |g| {
            par::for_each_chunk_mut(g, k, |ii, row| {
                let grow = &go[ii * n..(ii + 1) * n];
                for kk in 0..k {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let mut s = F::zero();
                    for j in 0..n {
                        s += grow[j] * brow[j];
                    }
                    row[kk] += s;
                }
            });
        });
        // db = aᵀ · g
        self.acc_into(grads, b, |g| {
            par::for_each_chunk_mut(g, n, |kk, row| {
                for ii in 0..m {
                    let avk = av[ii * k + kk];
                    if avk == F::zero() {
                        continue;
                    }
                    let grow = &go[ii * n..(ii + 1) * n];
                    for j in 0..n {
                        row[j] += avk * grow[j];
                    }
                }
            });
        });
    }

    fn backprop_conv1d(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        gout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let (bs, ci, t) = self.value(x).dims3()?;
        let (co, _, k) = self.value(w).dims3()?;
        let to = gout.shape()[2];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let go = gout.data();
        if let Some(bias) = b {
            self.acc_into(grads, bias, |g| {
                for bi in 0..bs {
                    for coi in 0..co {
                        let grow = &go[(bi * co + coi) * to..(bi * co + coi + 1) * to];
                        g[coi] += grow.iter().fold(F::zero(), |a, &v| a + v);
                    }
                }
            });
        }
        // dw[co,ci,k] += Σ_{b,to} g[b,co,to] · x[b,ci,to·s+k−p]
        self.acc_into(grads, w, |g| {
            par::for_each_chunk_mut(g, ci * k, |coi, wplane| {
                for bi in 0..bs {
                    let grow = &go[(bi * co + coi) * to..(bi * co + coi + 1) * to];
                    for (toi, &gv) in grow.iter().enumerate() {
                        if gv == F::zero() {
                            continue;
                        }
                        let base = toi * stride;
                        let klo = pad.saturating_sub(base);
                        let khi = k.min(t + pad - base);
                        for cii in 0..ci {
                            let xrow = &xd[(bi * ci + cii) * t..(bi * ci + cii + 1) * t];
                            let wrow = &mut wplane[cii * k..(cii + 1) * k];
                            for kk in klo..khi {
                                wrow[kk] += gv * xrow[base + kk - pad];
                            }
                        }
                    }
                }
            });
        });
        // dx[b,ci,t] += Σ_{co,to,k} g[b,co,to] · w[co,ci,k]
        self.acc_into(grads, x, |g| {
            par::for_each_chunk_mut(g, t, |plane, xrow| {
                let bi = plane / ci;
                let cii = plane % ci;
                for coi in 0..co {
                    let grow = &go[(bi * co + coi) * to..(bi * co + coi + 1) * to];
                    let wrow = &wd[(coi * ci + cii) * k..(coi * ci + cii + 1) * k];
                    for (toi, &gv) in grow.iter().enumerate() {
                        if gv == F::zero() {
                            continue;
                        }
                        let base = toi * stride;
                        let klo = pad.saturating_sub(base);
                        let khi = k.min(t + pad - base);
                        for kk in klo..khi {
                            xrow[base + kk - pad] += gv * wrow[kk];
                        }
                    }
                }
            });
        });
        Ok(())
    }

    fn backprop_convt1d(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        gout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let (bs, ci, t) = self.value(x).dims3()?;
        let (_, co, k) = self.value(w).dims3()?;
        let ty = gout.shape()[2];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let go = gout.data();
        if let Some(bias) = b {
            self.acc_into(grads, bias, |g| {
                for bi in 0..bs {
                    for coi in 0..co {
                        let grow = &go[(bi * co + coi) * ty..(bi * co + coi + 1) * ty];
                        g[coi] += grow.iter().fold(F::zero(), |a, &v| a + v);
                    }
                }
            });
        }
        // dx[b,ci,t] += Σ_{co,k} g[b,co,t·s+k−p] · w[ci,co,k]
        self.acc_into(grads, x, |g| {
            par::for_each_chunk_mut(g, t, |plane, xrow| {
                let bi = plane / ci;
                let cii = plane % ci;
                for coi in 0..co {
                    let grow = &go[(bi * co + coi) * ty..(bi * co + coi + 1) * ty];
                    let wrow = &wd[(cii * co + coi) * k..(cii * co + coi + 1) * k];
                    for ti in 0..t {
                        let base = ti * stride;
                        let klo = pad.saturating_sub(base);
                        let khi = k.min(ty + pad - base);
                        let mut s = F::zero();
                        for kk in klo..khi {
                            s += grow[base + kk - pad] * wrow[kk];
                        }
                        xrow[ti] += s;
                    }
                }
            });
        });
        // dw[ci,co,k] += Σ_{b,t} x[b,ci,t] · g[b,co,t·s+k−p]
        self.acc_into(grads, w, |g| {
            par::for_each_chunk_mut(g, co * k, |cii, wplane| {
                for bi in 0..bs {
                    let xrow = &xd[(bi * ci + cii) * t..(bi * ci + cii + 1) * t];
                    for (ti, &xv) in xrow.iter().enumerate() {
                        if xv == F::zero() {
                            continue;
                        }
                        let base = ti * stride;
                        let klo = pad.saturating_sub(base);
                        let khi = k.min(ty + pad - base);
                        for coi in 0..co {
                            let grow = &go[(bi * co + coi) * ty..(bi * co + coi + 1) * ty];
                            let wrow = &mut wplane[coi * k..(coi + 1) * k];
                            for kk in klo..khi {
                                wrow[kk] += xv * grow[base + kk - pad];
                            }
                        }
                    }
                }
            });
        });
        Ok(())
    }

    fn backprop_layer_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
        gout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let (r, d) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let go = gout.data();
        let df = F::from_f64(d as f64);
        // Recompute per-row stats; cheaper than caching at these sizes.
        let mut xhat = vec![F::zero(); r * d];
        let mut inv = vec![F::zero(); r];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mu = row.iter().fold(F::zero(), |a, &v| a + v) / df;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu)) / df;
            inv[i] = (var + eps).sqrt().recip();
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mu) * inv[i];
            }
        }
        self.acc_into(grads, gamma, |g| {
            for i in 0..r {
                for j in 0..d {
                    g[j] += go[i * d + j] * xhat[i * d + j];
                }
            }
        });
        self.acc_into(grads, beta, |g| {
            for i in 0..r {
                for j in 0..d {
                    g[j] += go[i * d + j];
                }
            }
        });
        self.acc_into(grads, x, |g| {
            for i in 0..r {
                let gr = &go[i * d..(i + 1) * d];
                let xh = &xhat[i * d..(i + 1) * d];
                let mut mean_a = F::zero();
                let mut mean_ax = F::zero();
                for j in 0..d {
                    let a = gr[j] * gd[j];
                    mean_a += a;
                    mean_ax += a * xh[j];
                }
                mean_a /= df;
                mean_ax /= df;
                let out = &mut g[i * d..(i + 1) * d];
                for j in 0..d {
                    let a = gr[j] * gd[j];
                    out[j] += inv[i] * (a - mean_a - xh[j] * mean_ax);
                }
            }
        });
        Ok(())
    }
}

/// Valid output range of a conv tap: all `to` with `to·s + k − p ∈ [0, t)`.
#[inline]
fn conv_out_range(k: usize, pad: usize, stride: usize, t: usize, to: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = (t + pad - k - 1) / stride + 1; // t + pad > k guaranteed by shape check
    (lo.min(to), hi_excl.min(to))
}

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F], alpha: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major matrix product used by the graph and exposed for benches.
pub(crate) fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    par::for_each_chunk_mut(&mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bv) in row.iter_mut().zip(brow) {
                *cj += av * bv;
            }
        }
    });
    c
}

/// Sequential twin of [`matmul_kernel`] for bench comparisons.
pub fn matmul_seq<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    par::for_each_chunk_mut_seq(&mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bv) in row.iter_mut().zip(brow) {
                *cj += av * bv;
            }
        }
    });
    c
}

/// Parallel-dispatch matmul on raw slices, for benches.
pub fn matmul_par<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    matmul_kernel(a, b, m, k, n)
}
