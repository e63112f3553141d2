//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, appends a node holding
//! its value and the ids of its inputs, and returns a [`Var`] handle. Because
//! nodes can only reference earlier nodes, the tape is always in topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! A graph supports exactly one backward pass. A second call is rejected with
//! [`Error::Usage`]; build a fresh graph for every forward pass.

use rand::RngCore as _;

use crate::error::{Error, Result};
use crate::kernels::{self, Strides};
use crate::rng::Rng;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTrailing { x: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, cols: Vec<f64> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var, tanh: Vec<f64> },
    Attention { src: AttnSrc, heads: usize, probs: Vec<f64> },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    MaskMul { x: Var, mask: Vec<f64> },
    WeightedSum { parts: Vec<Var>, weights: Var },
    NormLast(Var),
}

#[derive(Debug)]
enum AttnSrc {
    Separate(Var, Var, Var),
    Packed(Var, Packing),
}

/// Where [`Graph::packed_attention`] finds Q, K and V.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Packing {
    /// `[.., L, 3W]`: Q, K, V are consecutive column blocks.
    Columns,
    /// `[.., 3L, W]`: Q, K, V are consecutive row blocks.
    Rows,
}

/// Addressing of Q/K/V rows for the attention kernels. Role `r`, batch `b`,
/// row `i`, head `h` starts at `roles[r] + b·batch_stride + i·row_stride + h·dh`.
#[derive(Clone, Copy, Debug)]
struct AttnLayout {
    l: usize,
    dh: usize,
    heads: usize,
    batch_stride: usize,
    row_stride: usize,
    roles: [usize; 3],
}

impl AttnLayout {
    fn new(l: usize, w: usize, heads: usize, batch_stride: usize, row_stride: usize, roles: [usize; 3]) -> Result<Self> {
        if heads == 0 || w % heads != 0 {
            return Err(Error::Config(format!("width {w} not divisible by {heads} heads")));
        }
        Ok(AttnLayout { l, dh: w / heads, heads, batch_stride, row_stride, roles })
    }

    fn at(&self, role: usize, b: usize, i: usize, h: usize) -> usize {
        self.roles[role] + b * self.batch_stride + i * self.row_stride + h * self.dh
    }

    fn width(&self) -> usize {
        self.heads * self.dh
    }
}

// four independent lanes so the reduction vectorizes
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Returns the `[batch, L, W]` output and the `[batch, heads, L, L]` weights.
fn attn_forward(src: [&[f64]; 3], lay: &AttnLayout, batch: usize) -> (Vec<f64>, Vec<f64>) {
    let AttnLayout { l, dh, heads, .. } = *lay;
    let w = lay.width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * l * l];
    let mut out = vec![0.0; batch * l * w];
    for (bh, p) in probs.chunks_exact_mut(l * l).enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for (i, row) in p.chunks_exact_mut(l).enumerate() {
            let qi = &src[0][lay.at(0, b, i, h)..][..dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &src[1][lay.at(1, b, j, h)..][..dh]) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            let o = &mut out[(b * l + i) * w + h * dh..][..dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s *= inv;
                let vj = &src[2][lay.at(2, b, j, h)..][..dh];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += *s * vc;
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates dQ, dK, dV into `dst`, role `r` at offset `dst_roles[r]` with
/// the strides of `lay`.
fn attn_backward(src: [&[f64]; 3], lay: &AttnLayout, probs: &[f64], g: &[f64], dst: &mut [f64], dst_roles: [usize; 3]) {
    let AttnLayout { l, dh, heads, .. } = *lay;
    let w = lay.width();
    let scale = 1.0 / (dh as f64).sqrt();
    let d = AttnLayout { roles: dst_roles, ..*lay };
    let mut ds = vec![0.0; l * l];
    for (bh, p) in probs.chunks_exact(l * l).enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        let go = |i: usize| (b * l + i) * w + h * dh;
        // dS = P ⊙ (dO Vᵀ − rowsum(P ⊙ dO Vᵀ))
        for (i, (row, pr)) in ds.chunks_exact_mut(l).zip(p.chunks_exact(l)).enumerate() {
            let goi = &g[go(i)..][..dh];
            let mut acc = 0.0;
            for (j, (s, &pj)) in row.iter_mut().zip(pr).enumerate() {
                *s = dot(goi, &src[2][lay.at(2, b, j, h)..][..dh]);
                acc += pj * *s;
            }
            for (s, &pj) in row.iter_mut().zip(pr) {
                *s = pj * (*s - acc) * scale;
            }
        }
        for i in 0..l {
            let (qi, dqi, goi) = (lay.at(0, b, i, h), d.at(0, b, i, h), go(i));
            for j in 0..l {
                let (sij, pij) = (ds[i * l + j], p[i * l + j]);
                let (kj, dkj, dvj) = (lay.at(1, b, j, h), d.at(1, b, j, h), d.at(2, b, j, h));
                for c in 0..dh {
                    dst[dqi + c] += sij * src[1][kj + c];
                    dst[dkj + c] += sij * src[0][qi + c];
                    dst[dvj + c] += pij * g[goi + c];
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation with gradient storage for its leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(√(2/π)(x + 0.044715x³))`, through one `exp`.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the loss w.r.t. a leaf, available after [`Graph::backward`].
    /// Leaves that did not influence the loss report `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v).to_vec();
        self.grad(v).map(|g| Tensor::new(shape, g.to_vec()).expect("grad congruent with value"))
    }

    /// Fails if `v` holds a NaN or infinity.
    pub fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    // ----------------------------------------------------------------- ops

    /// `a[.., m, k] · b[k, n]`; the leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over matching leading axes: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let batch = numel(&sa[..r - 2]);
        let sbs = if trans_b { Strides::transposed(k) } else { Strides::row_major(n) };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        kernels::for_each_chunk(&mut out, m * n, |s, c| {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                &av[s * m * k..(s + 1) * m * k],
                Strides::row_major(k),
                &bv[s * k * n..(s + 1) * k * n],
                sbs,
                0.0,
                c,
                Strides::row_major(n),
            );
        });
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Fused `Softmax(Q Kᵀ / √d_h) V` over the last two axes of congruent
    /// `[.., L, d_h]` inputs. The attention weights are kept on the node; see
    /// [`Graph::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.multi_head_attention(q, k, v, 1)
    }

    /// Attention of `heads` heads over congruent `[.., L, W]` inputs, head
    /// `h` reading feature columns `h·W/heads .. (h+1)·W/heads`. Equivalent to
    /// splitting heads, attending per head and concatenating, without the
    /// copies. Weights are kept as `[.., heads, L, L]` (`[.., L, L]` for one
    /// head).
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() < 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::dim("attention", &sq, self.shape(k)));
        }
        let (l, w) = (sq[sq.len() - 2], sq[sq.len() - 1]);
        let lay = AttnLayout::new(l, w, heads, l * w, w, [0, 0, 0])?;
        let batch = numel(&sq) / (l * w);
        let (out, probs) = attn_forward([self.value(q).data(), self.value(k).data(), self.value(v).data()], &lay, batch);
        let value = Tensor::new(sq, out)?;
        Ok(self.push(value, Op::Attention { src: AttnSrc::Separate(q, k, v), heads, probs }, &[q, k, v]))
    }

    /// [`Graph::multi_head_attention`] reading Q, K and V out of one tensor:
    /// `[.., L, 3W]` column blocks for [`Packing::Columns`], `[.., 3L, W]` row
    /// blocks for [`Packing::Rows`]. Output is `[.., L, W]`.
    pub fn packed_attention(&mut self, qkv: Var, heads: usize, packing: Packing) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("packed_attention", &s, &[3]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let (l, w) = match packing {
            Packing::Columns if cols % 3 == 0 => (rows, cols / 3),
            Packing::Rows if rows % 3 == 0 => (rows / 3, cols),
            _ => return Err(Error::dim("packed_attention", &s, &[3])),
        };
        let roles = match packing {
            Packing::Columns => [0, w, 2 * w],
            Packing::Rows => [0, l * w, 2 * l * w],
        };
        let lay = AttnLayout::new(l, w, heads, 3 * l * w, cols, roles)?;
        let batch = numel(&s) / (3 * l * w);
        let data = self.value(qkv).data();
        let (out, probs) = attn_forward([data, data, data], &lay, batch);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([l, w]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Attention { src: AttnSrc::Packed(qkv, packing), heads, probs }, &[qkv]))
    }

    /// Row-stochastic weights of a node made by one of the attention ops.
    pub fn attention_weights(&self, out: Var) -> Option<Tensor> {
        match &self.nodes[out.0].op {
            Op::Attention { heads, probs, .. } => {
                let s = self.shape(out);
                let l = s[s.len() - 2];
                let mut shape = s[..s.len() - 2].to_vec();
                if *heads > 1 {
                    shape.push(*heads);
                }
                shape.extend([l, l]);
                Some(Tensor::new(shape, probs.clone()).expect("weights congruent with output"))
            }
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("congruent operands")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_trailing", sx, sb));
        }
        let bv = self.value(b).data();
        let blen = bv.len();
        let data = self
            .value(x)
            .data()
            .chunks(blen)
            .flat_map(|row| row.iter().zip(bv).map(|(u, v)| u + v))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddTrailing { x, b }, &[x, b]))
    }

    /// Same-length 1-D convolution on a channel-last batch.
    ///
    /// `x[n, len, cin]`, `w[cout, cin, kernel]`, `b[cout]` → `[n, len, cout]`,
    /// with `out[s, p, o] = b[o] + Σ_i Σ_t w[o, i, t] · x[s, p − (kernel−1)/2 + t, i]`
    /// and zeros outside `0..len`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sbias) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 3 {
            return Err(Error::dim("conv1d", sx, sw));
        }
        let (cout, cin, kernel) = (sw[0], sw[1], sw[2]);
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size {kernel} is even")));
        }
        if sx.len() != 3 || sx[2] != cin {
            return Err(Error::dim("conv1d", sx, sw));
        }
        if sbias != [cout] {
            return Err(Error::dim("conv1d", sw, sbias));
        }
        let (n, len) = (sx[0], sx[1]);
        let cols = kernels::im2col(self.value(x).data(), n, len, cin, kernel);
        let wm = kernels::conv_weight_matrix(self.value(w).data(), cout, cin, kernel);
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..n * len).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm(
            n * len,
            kernel * cin,
            cout,
            1.0,
            &cols,
            Strides::row_major(kernel * cin),
            &wm,
            Strides::row_major(cout),
            1.0,
            &mut out,
            Strides::row_major(cout),
        );
        let value = Tensor::new(vec![n, len, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, cols }, &[x, w, b]))
    }

    /// Channel-major same-length convolution: `x[.., cin, len]` → `[.., cout, len]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let batched = match sx.len() {
            2 => self.reshape(x, [1, sx[0], sx[1]])?,
            3 => x,
            _ => return Err(Error::dim("conv1d_same", &sx, self.shape(w))),
        };
        let cl = self.transpose(batched)?;
        let y = self.conv1d(cl, w, b)?;
        let y = self.transpose(y)?;
        if sx.len() == 2 {
            let s = self.shape(y).to_vec();
            self.reshape(y, [s[1], s[2]])
        } else {
            Ok(y)
        }
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", sx, self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let tanh: Vec<f64> = t.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out = t.data().iter().zip(&tanh).map(|(&v, &th)| 0.5 * v * (1.0 + th)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { x, tanh }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Usage(format!("invalid permutation {axes:?} for shape {sx:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let data = kernels::permute(self.value(x).data(), sx, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Usage("transpose needs at least two axes".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Usage(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::Usage(format!("slice {start}+{len} on axis {axis} of {sx:?}")));
        }
        let (outer, full, inner) = split_at_axis(&sx, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let sx = self.shape(x);
        if axis >= sx.len() || sizes.iter().sum::<usize>() != sx[axis] {
            return Err(Error::Usage(format!("split {sizes:?} on axis {axis} of {sx:?}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Mean over one axis, which is removed.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Usage(format!("mean axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = split_at_axis(&sx, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Elementwise product with a constant mask of the same length.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::dim("mask_mul", t.shape(), &[mask.len()]));
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MaskMul { x, mask }, &[x]))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 − p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        // drop when a uniform u32 falls below p·2³²
        let cut = (p * 4294967296.0) as u64;
        let mask = (0..self.value(x).len())
            .map(|_| if (rng.next_u32() as u64) < cut { 0.0 } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    /// `Σ_i weights[i] · parts[i]` with a differentiable weight vector.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("weighted sum of an empty part list".into()))?;
        if self.shape(weights) != [parts.len()] {
            return Err(Error::dim("weighted_sum", &[parts.len()], self.shape(weights)));
        }
        for &p in parts {
            self.same_shape("weighted_sum", first, p)?;
        }
        let w = self.value(weights).data();
        let mut out = vec![0.0; self.value(first).len()];
        for (&p, &wi) in parts.iter().zip(w) {
            for (o, v) in out.iter_mut().zip(self.value(p).data()) {
                *o += wi * v;
            }
        }
        let value = Tensor::new(self.shape(first).to_vec(), out)?;
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push(
            value,
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights,
            },
            &inputs,
        ))
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::Usage("norm of a scalar".into()))?;
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = sx[..sx.len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::NormLast(x), &[x]))
    }

    // ------------------------------------------------------------ backward

    /// Propagates d(loss)/d(node) to every leaf created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                backprop(&self.nodes, i, &g, &mut grads);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Adds into the gradient buffer of `v`, allocating it on first touch.
fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let sb = shape(*b);
            let (k, n) = (sb[0], sb[1]);
            let m = nodes[a.0].value.len() / k;
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::gemm(m, n, k, 1.0, g, Strides::row_major(n), val(*b), Strides::transposed(n), 1.0, ga, Strides::row_major(k));
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::gemm(k, m, n, 1.0, val(*a), Strides::transposed(k), g, Strides::row_major(n), 1.0, gb, Strides::row_major(n));
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = shape(*a);
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let n = node.value.shape()[r - 1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · op(B)ᵀ
                let sbt = if *trans_b { Strides::row_major(k) } else { Strides::transposed(n) };
                kernels::for_each_chunk(ga, m * k, |s, ga| {
                    kernels::gemm(m, n, k, 1.0, &g[s * m * n..(s + 1) * m * n], Strides::row_major(n), &bv[s * k * n..(s + 1) * k * n], sbt, 1.0, ga, Strides::row_major(k));
                });
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::for_each_chunk(gb, k * n, |s, gb| {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let as_ = &av[s * m * k..(s + 1) * m * k];
                    if *trans_b {
                        // d(B[n×k]) = dCᵀ · A
                        kernels::gemm(n, m, k, 1.0, gs, Strides::transposed(n), as_, Strides::row_major(k), 1.0, gb, Strides::row_major(k));
                    } else {
                        kernels::gemm(k, m, n, 1.0, as_, Strides::transposed(k), gs, Strides::row_major(n), 1.0, gb, Strides::row_major(n));
                    }
                });
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * y;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::AddTrailing { x, b } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let blen = gb.len();
                for row in g.chunks(blen) {
                    add_into(gb, row);
                }
            }
        }
        Op::Conv1d { x, w, b, cols } => {
            let sx = shape(*x);
            let (n, len, cin) = (sx[0], sx[1], sx[2]);
            let sw = shape(*w);
            let (cout, kernel) = (sw[0], sw[2]);
            let rows = n * len;
            let width = kernel * cin;
            if let Some(gw) = acc(grads, nodes, *w) {
                let mut dwm = vec![0.0; width * cout];
                kernels::gemm(width, rows, cout, 1.0, cols, Strides::transposed(width), g, Strides::row_major(cout), 0.0, &mut dwm, Strides::row_major(cout));
                kernels::conv_weight_matrix_add_back(&dwm, cout, cin, kernel, gw);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(cout) {
                    add_into(gb, row);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let wm = kernels::conv_weight_matrix(val(*w), cout, cin, kernel);
                let mut dcols = vec![0.0; rows * width];
                kernels::gemm(rows, cout, width, 1.0, g, Strides::row_major(cout), &wm, Strides::transposed(cout), 0.0, &mut dcols, Strides::row_major(width));
                kernels::col2im_add(&dcols, n, len, cin, kernel, gx);
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                for ((dx, gy), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[j] += yr[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = shape(*gamma)[0];
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            }
            let gamma_v = val(*gamma);
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, ((dx, gr), hr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gamma_v[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            }
        }
        Op::Gelu { x, tanh } => {
            let xv = val(*x);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (((d, s), &v), &t) in gx.iter_mut().zip(g).zip(xv).zip(tanh) {
                    *d += s * gelu_grad(v, t);
                }
            }
        }
        Op::Permute { x, axes } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let back = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                add_into(gx, &back);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let len = shape(v)[*axis];
                if let Some(gv) = acc(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = split_at_axis(shape(*x), *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Mean { x, axis } => {
            let (outer, len, inner) = split_at_axis(shape(*x), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Attention { src, heads, probs } => {
            let s = node.value.shape();
            let (l, w) = (s[s.len() - 2], s[s.len() - 1]);
            match *src {
                AttnSrc::Separate(q, k, v) => {
                    let n = node.value.len();
                    let lay = AttnLayout::new(l, w, *heads, l * w, w, [0, 0, 0]).expect("checked in forward");
                    let mut d = vec![0.0; 3 * n];
                    attn_backward([val(q), val(k), val(v)], &lay, probs, g, &mut d, [0, n, 2 * n]);
                    for (x, part) in [q, k, v].into_iter().zip(d.chunks_exact(n)) {
                        if let Some(gx) = acc(grads, nodes, x) {
                            add_into(gx, part);
                        }
                    }
                }
                AttnSrc::Packed(x, packing) => {
                    let (roles, row_stride) = match packing {
                        Packing::Columns => ([0, w, 2 * w], 3 * w),
                        Packing::Rows => ([0, l * w, 2 * l * w], w),
                    };
                    let lay = AttnLayout::new(l, w, *heads, 3 * l * w, row_stride, roles).expect("checked in forward");
                    let xv = val(x);
                    if let Some(gx) = acc(grads, nodes, x) {
                        attn_backward([xv, xv, xv], &lay, probs, g, gx, roles);
                    }
                }
            }
        }
        Op::MaskMul { x, mask } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }
        }
        Op::WeightedSum { parts, weights } => {
            let w = val(*weights).to_vec();
            for (&p, &wi) in parts.iter().zip(&w) {
                if let Some(gp) = acc(grads, nodes, p) {
                    for (d, s) in gp.iter_mut().zip(g) {
                        *d += wi * s;
                    }
                }
            }
            if nodes[weights.0].requires_grad {
                let dots: Vec<f64> = parts
                    .iter()
                    .map(|&p| val(p).iter().zip(g).map(|(a, b)| a * b).sum())
                    .collect();
                if let Some(gw) = acc(grads, nodes, *weights) {
                    add_into(gw, &dots);
                }
            }
        }
        Op::NormLast(x) => {
            let c = *shape(*x).last().unwrap();
            let (xv, y) = (val(*x), node.value.data());
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, (dx, xr)) in gx.chunks_mut(c).zip(xv.chunks(c)).enumerate() {
                    if y[r] > 0.0 {
                        let s = g[r] / y[r];
                        for (d, v) in dx.iter_mut().zip(xr) {
                            *d += s * v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn packed_attention_matches_separate_inputs() {
        let mut rng = seeded(40);
        let (n, l, w) = (2, 5, 6);
        for packing in [Packing::Columns, Packing::Rows] {
            let shape = match packing {
                Packing::Columns => [n, l, 3 * w],
                Packing::Rows => [n, 3 * l, w],
            };
            let x = Tensor::randn(shape, 1.0, &mut rng);
            let r = Tensor::randn([n, l, w], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let packed = g.packed_attention(xv, 3, packing).unwrap();
            let axis = if packing == Packing::Columns { 2 } else { 1 };
            let len = shape[axis] / 3;
            let parts = g.split(xv, axis, &[len, len, len]).unwrap();
            let separate = g.multi_head_attention(parts[0], parts[1], parts[2], 3).unwrap();
            assert!(g.value(packed).max_abs_diff(g.value(separate)) < 1e-14);
            let w1 = g.attention_weights(packed).unwrap();
            assert!(w1.max_abs_diff(&g.attention_weights(separate).unwrap()) < 1e-14);

            let loss_of = |fused: bool| {
                let mut g = Graph::new();
                let xv = g.param(x.clone());
                let rv = g.constant(r.clone());
                let out = if fused {
                    g.packed_attention(xv, 3, packing).unwrap()
                } else {
                    let p = g.split(xv, axis, &[len, len, len]).unwrap();
                    g.multi_head_attention(p[0], p[1], p[2], 3).unwrap()
                };
                let m = g.mul(out, rv).unwrap();
                let loss = g.sum(m);
                g.backward(loss).unwrap();
                g.grad_tensor(xv).unwrap()
            };
            assert!(loss_of(true).max_abs_diff(&loss_of(false)) < 1e-13, "{packing:?}");
        }
    }
}
