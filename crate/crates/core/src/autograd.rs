//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append nodes
//! holding their output value and enough bookkeeping to run the backward
//! pass; [`Graph::backward`] then walks the tape in reverse. Named parameters
//! are bound with [`Graph::param`] so optimizers can map gradients back to a
//! [`ParamStore`](crate::params::ParamStore).

use std::collections::BTreeMap;

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Relu(Var),
    QuickGelu(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    IndexRows { src: Var, rows: Vec<usize> },
    Concat0(Vec<Var>),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    MeanRows(Var),
    SpatialMean(Var),
    Conv2d { x: Var, w: Var, geom: Conv2dGeom },
    AvgPool2d { x: Var, k: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    CausalConv1d { x: Var, w: Var, b: Option<Var>, dilation: usize },
    InterpRows { refs: Var, plan: Vec<InterpTerm> },
    WeightedCe { logits: Var, probs: Tensor, targets: Vec<usize>, weights: Vec<f64>, norm: f64 },
    Sum(Var),
}

/// One interpolated output row: `(1 - lambda) * refs[lo] + lambda * refs[hi]`.
///
/// `lambda == 0.0` copies `refs[lo]` exactly and routes no gradient to `hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpTerm {
    pub lo: usize,
    pub hi: usize,
    pub lambda: f64,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter. Trainable parameters are registered once per
    /// graph; binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if !trainable {
            return self.constant(t.clone());
        }
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of every trainable parameter bound in this graph. Parameters
    /// that did not influence the loss get an all-zero gradient.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x[r, c] + bias[c]` for any `x` whose trailing size equals `bias`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vb.numel();
        assert_eq!(vx.numel() % c, 0, "add_row_bias: width mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRowBias(x, bias), rg)
    }

    /// NCHW `x` plus a per-channel bias of length C.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4);
        let (c, hw) = (s[1], s[2] * s[3]);
        assert_eq!(self.value(bias).numel(), c);
        let vb = self.value(bias).data().to_vec();
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = vb[i % c];
            for v in chunk {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddChannelBias(x, bias), rg)
    }

    /// Adds a constant tensor (masks, fixed offsets).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape());
        let mut out = va.clone();
        out.add_assign(c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape());
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1);
        let sv = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `x * sigmoid(1.702 x)`, the GELU approximation used by CLIP.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(QUICK_GELU_ALPHA * x));
        let rg = self.rg(a);
        self.push(out, Op::QuickGelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---------------------------------------------------------------------
    // Linear algebra and layout
    // ---------------------------------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `[M, K] x [N, K]^T -> [M, N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ndim(), 2, "matmul: lhs must be 2-D");
        assert_eq!(vb.ndim(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (kb, n) = if trans_b {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        assert_eq!(k, kb, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_vec([m, n], out),
            Op::MatMul { a, b, trans_b },
            rg,
        )
    }

    /// `x [R, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_nt(x, w);
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => y,
        }
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2);
        let out = transpose2(va);
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Gathers rows along the leading dimension (rows may repeat).
    pub fn index_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let vs = self.value(src);
        let w = vs.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            assert!(r < vs.rows(), "index_rows: row {r} out of range");
            data.extend_from_slice(vs.row(r));
        }
        let mut shape = vs.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = rows.len();
        let rg = self.rg(src);
        self.push(
            Tensor::from_vec(shape, data),
            Op::IndexRows {
                src,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates along the leading dimension.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat0: trailing shape mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(shape, data), Op::Concat0(parts.to_vec()), rg)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let vs = self.value(src);
        assert_eq!(vs.ndim(), 2);
        let (r, c) = (vs.shape()[0], vs.shape()[1]);
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&vs.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(src);
        self.push(Tensor::from_vec([r, len], data), Op::SliceCols { src, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2);
                assert_eq!(s[0], r, "concat_cols: row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec([r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // Normalisation and reductions
    // ---------------------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = *va.shape().last().expect("softmax of a 0-d tensor");
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Layer normalisation over the last dimension of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let rows = vx.numel() / c;
        let mut out = vec![0.0; vx.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_vec(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            rg,
        )
    }

    /// Scales each row to unit Euclidean norm (norms below `eps` are clamped).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.numel() / c.max(1));
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms, eps }, rg)
    }

    /// Mean over the leading dimension of a 2-D tensor: `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2);
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec([1, c], out), Op::MeanRows(a), rg)
    }

    /// Global average pooling: NCHW -> `[N, C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert_eq!(s.len(), 4);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out: Vec<f64> = va
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::from_vec([n, c], out), Op::SpatialMean(a), rg)
    }

    /// Batch normalisation with fixed running statistics and a trainable
    /// affine transform.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4);
        let (c, hw) = (s[1], s[2] * s[3]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (m, is, gg, bb) = (running_mean[ch], inv_std[ch], g[ch], b[ch]);
            for v in chunk {
                *v = (*v - m) * is * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // Convolutions
    // ---------------------------------------------------------------------

    /// 2-D convolution over NCHW input with OIHW weights, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let sx = vx.shape();
        let sw = vw.shape();
        assert_eq!(sx.len(), 4, "conv2d: input must be NCHW");
        assert_eq!(sw.len(), 4, "conv2d: weight must be OIHW");
        assert_eq!(sx[1], sw[1], "conv2d: channel mismatch");
        assert!(stride >= 1);
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = Conv2dGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let mut out = vec![0.0; n * o * plane];
        let mut cols = vec![0.0; ckk * plane];
        for img in 0..n {
            let xin = &vx.data()[img * c * h * wd..(img + 1) * c * h * wd];
            im2col(xin, &geom, &mut cols);
            gemm(
                o,
                ckk,
                plane,
                vw.data(),
                false,
                &cols,
                false,
                &mut out[img * o * plane..(img + 1) * o * plane],
                0.0,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::from_vec([n, o, ho, wo], out),
            Op::Conv2d { x, w, geom },
            rg,
        )
    }

    /// Non-overlapping average pooling with window and stride `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        assert!(ho > 0 && wo > 0, "avg_pool2d: window larger than input");
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            s += src[(i * k + di) * w + j * k + dj];
                        }
                    }
                    dst[i * wo + j] = s * inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec([n, c, ho, wo], out), Op::AvgPool2d { x, k }, rg)
    }

    /// Causal dilated 1-D convolution over a time-major `[T, C_in]` sequence.
    ///
    /// Weights are `[C_out, C_in, K]`. Tap `k` reads `x[t - (K-1-k) * dilation]`
    /// and reads before the start of the sequence see zeros, so `out[t]` never
    /// depends on `x[s]` for `s > t`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.ndim(), 2, "causal_conv1d: input must be [T, C]");
        assert_eq!(vw.ndim(), 3, "causal_conv1d: weight must be [O, I, K]");
        let (t, cin) = (vx.shape()[0], vx.shape()[1]);
        let (cout, wi, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        assert_eq!(cin, wi, "causal_conv1d: channel mismatch");
        assert!(dilation >= 1);
        let mut out = vec![0.0; t * cout];
        if let Some(b) = b {
            let vb = self.value(b).data();
            assert_eq!(vb.len(), cout);
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(vb);
            }
        }
        for tap in 0..k {
            let off = (k - 1 - tap) * dilation;
            if off >= t {
                continue;
            }
            let wk = conv1d_tap(vw.data(), cout, cin, k, tap);
            let len = t - off;
            gemm(
                len,
                cin,
                cout,
                &vx.data()[..len * cin],
                false,
                &wk,
                true,
                &mut out[off * cout..],
                1.0,
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec([t, cout], out),
            Op::CausalConv1d { x, w, b, dilation },
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // Task-specific fused ops
    // ---------------------------------------------------------------------

    /// Builds rows as two-point linear interpolations of `refs` rows.
    pub fn interp_rows(&mut self, refs: Var, plan: &[InterpTerm]) -> Var {
        let vr = self.value(refs);
        assert_eq!(vr.ndim(), 2);
        let d = vr.shape()[1];
        let mut data = Vec::with_capacity(plan.len() * d);
        for term in plan {
            let lo = vr.row(term.lo);
            if term.lambda == 0.0 {
                data.extend_from_slice(lo);
            } else {
                let hi = vr.row(term.hi);
                let l = term.lambda;
                data.extend(lo.iter().zip(hi).map(|(a, b)| (1.0 - l) * a + l * b));
            }
        }
        let rg = self.rg(refs);
        self.push(
            Tensor::from_vec([plan.len(), d], data),
            Op::InterpRows {
                refs,
                plan: plan.to_vec(),
            },
            rg,
        )
    }

    /// Class-weighted cross-entropy, normalised by the summed sample weights.
    ///
    /// `targets` are 0-based class indices and `class_weights` has one entry
    /// per class. A batch whose weights sum to zero has zero loss.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[f64],
    ) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.ndim(), 2);
        let (b, p) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(targets.len(), b, "weighted_cross_entropy: target count");
        assert_eq!(class_weights.len(), p, "weighted_cross_entropy: weight count");
        let mut probs = vl.clone();
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut weights = Vec::with_capacity(b);
        for (i, row) in probs.data_mut().chunks_mut(p).enumerate() {
            let y = targets[i];
            assert!(y < p, "weighted_cross_entropy: target out of range");
            let lse = log_sum_exp(row);
            let nll = lse - row[y];
            softmax_in_place(row);
            let w = class_weights[y];
            total += w * nll;
            norm += w;
            weights.push(w);
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                probs,
                targets: targets.to_vec(),
                weights,
                norm,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        ));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| accumulate(grads, self, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, gout.clone());
                let c = self.value(*bias).numel();
                let mut gb = vec![0.0; c];
                for row in gout.data().chunks(c) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                acc(*bias, Tensor::from_vec(self.shape(*bias).to_vec(), gb));
            }
            Op::AddChannelBias(x, bias) => {
                acc(*x, gout.clone());
                let s = gout.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                for (i, chunk) in gout.data().chunks(hw).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                acc(*bias, Tensor::from_vec(self.shape(*bias).to_vec(), gb));
            }
            Op::AddConst(a) => acc(*a, gout.clone()),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(gout, vb, |g, y| g * y);
                let gb = zip_map(gout, va, |g, x| g * x);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MulConst(a, c) => acc(*a, zip_map(gout, c, |g, m| g * m)),
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, gout.map(|g| g * s));
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                let va = self.value(*a);
                acc(*a, gout.map(|g| g * sv));
                let gs: f64 = gout.data().iter().zip(va.data()).map(|(g, x)| g * x).sum();
                acc(*s, Tensor::from_vec(self.shape(*s).to_vec(), vec![gs]));
            }
            Op::Exp(a) => acc(*a, zip_map(gout, &node.value, |g, y| g * y)),
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(*a, zip_map(gout, va, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::QuickGelu(a) => {
                let va = self.value(*a);
                acc(
                    *a,
                    zip_map(gout, va, |g, x| {
                        let s = sigmoid(QUICK_GELU_ALPHA * x);
                        g * (s + QUICK_GELU_ALPHA * x * s * (1.0 - s))
                    }),
                );
            }
            Op::Sum(a) => {
                let g = gout.data()[0];
                acc(*a, Tensor::full(self.shape(*a).to_vec(), g));
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = gout.shape()[1];
                if self.rg(*a) {
                    // dA = dC * op(B)^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gout.data(), false, vb.data(), !*trans_b, &mut ga, 0.0);
                    acc(*a, Tensor::from_vec([m, k], ga));
                }
                if self.rg(*b) {
                    if *trans_b {
                        // B is [N, K]: dB = dC^T * A
                        let mut gb = vec![0.0; n * k];
                        gemm(n, m, k, gout.data(), true, va.data(), false, &mut gb, 0.0);
                        acc(*b, Tensor::from_vec([n, k], gb));
                    } else {
                        // B is [K, N]: dB = A^T * dC
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, va.data(), true, gout.data(), false, &mut gb, 0.0);
                        acc(*b, Tensor::from_vec([k, n], gb));
                    }
                }
            }
            Op::Transpose(a) => acc(*a, transpose2(gout)),
            Op::Reshape(a) => acc(*a, gout.clone().reshaped(self.shape(*a).to_vec())),
            Op::IndexRows { src, rows } => {
                let mut g = Tensor::zeros(self.shape(*src).to_vec());
                let w = g.row_len();
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut g.data_mut()[r * w..(r + 1) * w];
                    for (d, s) in dst.iter_mut().zip(&gout.data()[i * w..(i + 1) * w]) {
                        *d += s;
                    }
                }
                acc(*src, g);
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = gout.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(p, Tensor::from_vec(self.shape(p).to_vec(), slice));
                }
            }
            Op::SliceCols { src, start } => {
                let s = self.shape(*src);
                let (r, c) = (s[0], s[1]);
                let len = gout.shape()[1];
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + len]
                        .copy_from_slice(&gout.data()[i * len..(i + 1) * len]);
                }
                acc(*src, Tensor::from_vec([r, c], g));
            }
            Op::ConcatCols(parts) => {
                let r = gout.shape()[0];
                let total = gout.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut g = Vec::with_capacity(r * w);
                    for i in 0..r {
                        g.extend_from_slice(&gout.data()[i * total + start..i * total + start + w]);
                    }
                    start += w;
                    acc(p, Tensor::from_vec([r, w], g));
                }
            }
            Op::SoftmaxRows(a) => {
                let c = *gout.shape().last().unwrap();
                let y = &node.value;
                let mut g = vec![0.0; gout.numel()];
                for ((gr, yr), out) in gout
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(g.chunks_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::from_vec(gout.shape().to_vec(), g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let c = *vx.shape().last().unwrap();
                let gm = self.value(*gamma).data();
                let mut gx = vec![0.0; vx.numel()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..mean.len() {
                    let row = &vx.data()[r * c..(r + 1) * c];
                    let gr = &gout.data()[r * c..(r + 1) * c];
                    let inv = inv_std[r];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean[r]) * inv;
                        dxhat[j] = gr[j] * gm[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let cf = c as f64;
                    for j in 0..c {
                        gx[r * c + j] = inv / cf * (cf * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                acc(*x, Tensor::from_vec(vx.shape().to_vec(), gx));
                acc(*gamma, Tensor::from_vec(self.shape(*gamma).to_vec(), gg));
                acc(*beta, Tensor::from_vec(self.shape(*beta).to_vec(), gb));
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let c = *gout.shape().last().unwrap();
                let y = &node.value;
                let mut g = vec![0.0; gout.numel()];
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &gout.data()[r * c..(r + 1) * c];
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let out = &mut g[r * c..(r + 1) * c];
                    if n > *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            out[j] = gr[j] / n;
                        }
                    }
                }
                acc(*x, Tensor::from_vec(gout.shape().to_vec(), g));
            }
            Op::MeanRows(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let inv = 1.0 / r as f64;
                let mut g = Vec::with_capacity(r * c);
                for _ in 0..r {
                    g.extend(gout.data().iter().map(|v| v * inv));
                }
                acc(*a, Tensor::from_vec([r, c], g));
            }
            Op::SpatialMean(a) => {
                let s = self.shape(*a).to_vec();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                let mut g = Vec::with_capacity(s.iter().product());
                for &v in gout.data() {
                    g.extend(std::iter::repeat_n(v * inv, hw));
                }
                acc(*a, Tensor::from_vec(s, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let gm = self.value(*gamma).data();
                let mut gx = vec![0.0; vx.numel()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (i, (gch, xch)) in gout.data().chunks(hw).zip(vx.data().chunks(hw)).enumerate() {
                    let ch = i % c;
                    let scale = gm[ch] * inv_std[ch];
                    let dst = &mut gx[i * hw..(i + 1) * hw];
                    for j in 0..hw {
                        dst[j] = gch[j] * scale;
                        gg[ch] += gch[j] * (xch[j] - mean[ch]) * inv_std[ch];
                        gb[ch] += gch[j];
                    }
                }
                acc(*x, Tensor::from_vec(s.to_vec(), gx));
                acc(*gamma, Tensor::from_vec(self.shape(*gamma).to_vec(), gg));
                acc(*beta, Tensor::from_vec(self.shape(*beta).to_vec(), gb));
            }
            Op::Conv2d { x, w, geom } => {
                let g = *geom;
                let vx = self.value(*x);
                let vw = self.value(*w);
                let ckk = g.c * g.kh * g.kw;
                let plane = g.ho * g.wo;
                let in_sz = g.c * g.h * g.w;
                let mut cols = vec![0.0; ckk * plane];
                let mut dcols = vec![0.0; ckk * plane];
                let mut gw = vec![0.0; g.o * ckk];
                let mut gx = if self.rg(*x) {
                    vec![0.0; g.n * in_sz]
                } else {
                    Vec::new()
                };
                for img in 0..g.n {
                    let dout = &gout.data()[img * g.o * plane..(img + 1) * g.o * plane];
                    if self.rg(*w) {
                        im2col(&vx.data()[img * in_sz..(img + 1) * in_sz], &g, &mut cols);
                        gemm(g.o, plane, ckk, dout, false, &cols, true, &mut gw, 1.0);
                    }
                    if self.rg(*x) {
                        gemm(ckk, g.o, plane, vw.data(), true, dout, false, &mut dcols, 0.0);
                        col2im(&dcols, &g, &mut gx[img * in_sz..(img + 1) * in_sz]);
                    }
                }
                if self.rg(*w) {
                    acc(*w, Tensor::from_vec(vw.shape().to_vec(), gw));
                }
                if self.rg(*x) {
                    acc(*x, Tensor::from_vec(vx.shape().to_vec(), gx));
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
                let k = *k;
                let inv = 1.0 / (k * k) as f64;
                let mut g = vec![0.0; s.iter().product()];
                for p in 0..s[0] * s[1] {
                    let src = &gout.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = src[i * wo + j] * inv;
                            for di in 0..k {
                                for dj in 0..k {
                                    dst[(i * k + di) * w + j * k + dj] += v;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_vec(s, g));
            }
            Op::CausalConv1d { x, w, b, dilation } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (t, cin) = (vx.shape()[0], vx.shape()[1]);
                let (cout, k) = (vw.shape()[0], vw.shape()[2]);
                let dout = gout.data();
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; cout];
                        for row in dout.chunks(cout) {
                            for (g, v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                        acc(*b, Tensor::from_vec([cout], gb));
                    }
                }
                let mut gx = vec![0.0; t * cin];
                let mut gw = vec![0.0; cout * cin * k];
                let mut gwk = vec![0.0; cout * cin];
                for tap in 0..k {
                    let off = (k - 1 - tap) * dilation;
                    if off >= t {
                        continue;
                    }
                    let len = t - off;
                    if self.rg(*x) {
                        let wk = conv1d_tap(vw.data(), cout, cin, k, tap);
                        gemm(len, cout, cin, &dout[off * cout..], false, &wk, false, &mut gx, 1.0);
                    }
                    if self.rg(*w) {
                        gemm(
                            cout,
                            len,
                            cin,
                            &dout[off * cout..],
                            true,
                            &vx.data()[..len * cin],
                            false,
                            &mut gwk,
                            0.0,
                        );
                        for o in 0..cout {
                            for i in 0..cin {
                                gw[(o * cin + i) * k + tap] += gwk[o * cin + i];
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    acc(*x, Tensor::from_vec([t, cin], gx));
                }
                if self.rg(*w) {
                    acc(*w, Tensor::from_vec([cout, cin, k], gw));
                }
            }
            Op::InterpRows { refs, plan } => {
                let s = self.shape(*refs).to_vec();
                let d = s[1];
                let mut g = vec![0.0; s[0] * d];
                for (p, term) in plan.iter().enumerate() {
                    let gr = &gout.data()[p * d..(p + 1) * d];
                    if term.lambda == 0.0 {
                        for j in 0..d {
                            g[term.lo * d + j] += gr[j];
                        }
                    } else {
                        let l = term.lambda;
                        for j in 0..d {
                            g[term.lo * d + j] += (1.0 - l) * gr[j];
                            g[term.hi * d + j] += l * gr[j];
                        }
                    }
                }
                acc(*refs, Tensor::from_vec(s, g));
            }
            Op::WeightedCe {
                logits,
                probs,
                targets,
                weights,
                norm,
            } => {
                let p = probs.shape()[1];
                let scale = gout.data()[0];
                let mut g = vec![0.0; probs.numel()];
                if *norm > 0.0 {
                    for (i, row) in probs.data().chunks(p).enumerate() {
                        let f = scale * weights[i] / norm;
                        if f == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            g[i * p + j] = f * (row[j] - onehot);
                        }
                    }
                }
                acc(*logits, Tensor::from_vec(probs.shape().to_vec(), g));
            }
        }
    }
}

const QUICK_GELU_ALPHA: f64 = 1.702;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(grads: &mut [Option<Tensor>], graph: &Graph, v: Var, g: Tensor) {
    if !graph.rg(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_vec([c, r], out)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Weight slice for one tap of a `[O, I, K]` kernel, laid out `[O, I]`.
fn conv1d_tap(w: &[f64], cout: usize, cin: usize, k: usize, tap: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cout * cin);
    for o in 0..cout {
        for i in 0..cin {
            out.push(w[(o * cin + i) * k + tap]);
        }
    }
    out
}

fn im2col(x: &[f64], g: &Conv2dGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.wo + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < g.h
                            && (jj as usize) < g.w
                        {
                            x[(ch * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Conv2dGeom, x: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        x[(ch * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
}
