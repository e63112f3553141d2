//! Dynamic multi-headed convolutional self-attention (DMHCSA) and the
//! pre-normalized block built around it.
//!
//! Queries, keys and values are produced by same-length 1-D convolutions at
//! several kernel sizes, blended by softmax-normalized learned weights, split
//! channel-wise into heads and attended with scaled dot products. The layer
//! runs along one of two axes:
//!
//! * spatial: input `[n, joints, d]`, convolution channels `d`, sliding over
//!   the joints;
//! * temporal: input `[n, frames, joints·d]`, convolution channels `frames`,
//!   sliding over the flattened joint features. Every query column therefore
//!   mixes a local feature neighbourhood across *all* frames before any
//!   attention is computed (the temporal joints profile).
//!
//! Head outputs are concatenated and passed on without an output projection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Packing, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    Spatial,
    Temporal,
}

impl std::fmt::Display for AttentionAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionAxis::Spatial => "spatial",
            AttentionAxis::Temporal => "temporal",
        })
    }
}

/// Q, K, V in that order.
pub const ROLES: [&str; 3] = ["q", "k", "v"];

/// Convolution weights for one kernel size.
#[derive(Clone, Debug)]
pub struct ConvScale {
    pub kernel: usize,
    pub weight: [ParamId; 3],
    pub bias: [ParamId; 3],
}

#[derive(Clone, Debug)]
pub enum QkvProjection {
    /// Multi-scale convolutions blended by `softmax(logits[role])`.
    Convolutional {
        scales: Vec<ConvScale>,
        logits: [ParamId; 3],
    },
    /// Dense `W_Q`, `W_K`, `W_V` over the feature axis, followed by the usual
    /// output projection of vanilla multi-head attention.
    Linear {
        weight: [ParamId; 3],
        bias: [ParamId; 3],
        out_weight: ParamId,
        out_bias: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct DmhcsaParams {
    pub axis: AttentionAxis,
    /// Sequence length attended over (joints or frames).
    pub seq_len: usize,
    /// Feature width of each sequence element.
    pub width: usize,
    pub heads: usize,
    pub qkv: QkvProjection,
    /// Dropout rate on the aggregated Q, K and V.
    pub dropout: f64,
}

fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl DmhcsaParams {
    /// Channels seen by the Q/K/V convolutions.
    pub fn conv_channels(&self) -> usize {
        conv_channels(self.axis, self.seq_len, self.width)
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    fn validate(axis: AttentionAxis, seq_len: usize, width: usize, heads: usize) -> Result<()> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{axis} width {width} is not divisible by {heads} heads"
            )));
        }
        if seq_len == 0 || width == 0 {
            return Err(Error::Config(format!("{axis} attention over an empty axis")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn convolutional(
        store: &mut ParamStore,
        prefix: &str,
        axis: AttentionAxis,
        seq_len: usize,
        width: usize,
        heads: usize,
        kernels: &[usize],
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::validate(axis, seq_len, width, heads)?;
        if kernels.is_empty() {
            return Err(Error::Config("at least one kernel size is required".into()));
        }
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} is even")));
        }
        let c = conv_channels(axis, seq_len, width);
        let scales = kernels
            .iter()
            .enumerate()
            .map(|(i, &kernel)| {
                let weight = ROLES.map(|r| {
                    store.add(
                        format!("{prefix}.conv{i}.{r}.weight"),
                        fan_in_uniform(vec![c, c, kernel], c * kernel, rng),
                    )
                });
                let bias = ROLES.map(|r| store.add(format!("{prefix}.conv{i}.{r}.bias"), Tensor::zeros([c])));
                ConvScale { kernel, weight, bias }
            })
            .collect();
        let logits = ROLES.map(|r| store.add(format!("{prefix}.eta.{r}"), Tensor::zeros([kernels.len()])));
        Ok(Self {
            axis,
            seq_len,
            width,
            heads,
            qkv: QkvProjection::Convolutional { scales, logits },
            dropout,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn linear(
        store: &mut ParamStore,
        prefix: &str,
        axis: AttentionAxis,
        seq_len: usize,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::validate(axis, seq_len, width, heads)?;
        let weight = ROLES.map(|r| {
            store.add(
                format!("{prefix}.{r}.weight"),
                fan_in_uniform(vec![width, width], width, rng),
            )
        });
        let bias = ROLES.map(|r| store.add(format!("{prefix}.{r}.bias"), Tensor::zeros([width])));
        let out_weight = store.add(format!("{prefix}.out.weight"), fan_in_uniform(vec![width, width], width, rng));
        let out_bias = store.add(format!("{prefix}.out.bias"), Tensor::zeros([width]));
        Ok(Self {
            axis,
            seq_len,
            width,
            heads,
            qkv: QkvProjection::Linear {
                weight,
                bias,
                out_weight,
                out_bias,
            },
            dropout,
        })
    }
}

pub fn conv_channels(axis: AttentionAxis, seq_len: usize, width: usize) -> usize {
    match axis {
        AttentionAxis::Spatial => width,
        AttentionAxis::Temporal => seq_len,
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, ratio: usize, rng: &mut Rng) -> Self {
        let hidden = width * ratio;
        Self {
            w1: store.add(format!("{prefix}.fc1.weight"), fan_in_uniform(vec![width, hidden], width, rng)),
            b1: store.add(format!("{prefix}.fc1.bias"), Tensor::zeros([hidden])),
            w2: store.add(format!("{prefix}.fc2.weight"), fan_in_uniform(vec![hidden, width], hidden, rng)),
            b2: store.add(format!("{prefix}.fc2.bias"), Tensor::zeros([width])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([width], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([width])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn: DmhcsaParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
    /// Probability that a residual branch is kept during training.
    pub survival: f64,
}

/// Post-softmax attention weights of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub axis: AttentionAxis,
    pub head: usize,
    /// Index within the batch the layer saw (the frame, for spatial blocks).
    pub sample: usize,
    /// `N × N`, row-stochastic.
    pub matrix: Tensor,
}

/// State shared by every layer of one forward pass.
pub struct Pass<'a> {
    pub params: &'a Bound,
    pub rng: &'a mut Rng,
    pub training: bool,
}

/// `Softmax(Q Kᵀ / √d_h) V` over the last two axes of `[.., N, d_h]` inputs.
/// The weights `[.., N, N]` are available through [`Graph::attention_weights`].
pub fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    g.attention(q, k, v)
}

/// Tensor-level [`scaled_dot_product`] for `N × d_h` inputs.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AttentionRecord)> {
    if q.ndim() != 2 {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = scaled_dot_product(&mut g, qv, kv, vv)?;
    let record = AttentionRecord {
        block: 0,
        axis: AttentionAxis::Spatial,
        head: 0,
        sample: 0,
        matrix: g.attention_weights(out).expect("attention node"),
    };
    Ok((g.value(out).clone(), record))
}

/// Moves `[n, L, W]` into the channel-last layout the Q/K/V convolutions run in.
fn to_conv_layout(g: &mut Graph, x: Var, axis: AttentionAxis) -> Result<Var> {
    match axis {
        AttentionAxis::Spatial => Ok(x),
        AttentionAxis::Temporal => g.transpose(x),
    }
}

fn from_conv_layout(g: &mut Graph, x: Var, axis: AttentionAxis) -> Result<Var> {
    to_conv_layout(g, x, axis)
}

fn check_input(g: &Graph, x: Var, p: &DmhcsaParams) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != p.seq_len || s[2] != p.width {
        return Err(Error::dim("dmhcsa", s, &[p.seq_len, p.width]));
    }
    Ok(())
}

fn conv_parts(
    g: &mut Graph,
    x: Var,
    scales: &[ConvScale],
    axis: AttentionAxis,
    bound: &Bound,
) -> Result<[Vec<Var>; 3]> {
    let z = to_conv_layout(g, x, axis)?;
    let mut parts: [Vec<Var>; 3] = Default::default();
    for s in scales {
        for (r, out) in parts.iter_mut().enumerate() {
            out.push(g.conv1d(z, bound.var(s.weight[r]), bound.var(s.bias[r]))?);
        }
    }
    Ok(parts)
}

/// Per-scale Q, K and V for `x[n, L, W]`, each returned as `[n, L, W]`.
pub fn multi_scale_qkv(g: &mut Graph, x: Var, p: &DmhcsaParams, bound: &Bound) -> Result<[Vec<Var>; 3]> {
    check_input(g, x, p)?;
    let QkvProjection::Convolutional { scales, .. } = &p.qkv else {
        return Err(Error::Usage("multi_scale_qkv on a linear projection".into()));
    };
    let parts = conv_parts(g, x, scales, p.axis, bound)?;
    let mut out: [Vec<Var>; 3] = Default::default();
    for (r, role) in parts.into_iter().enumerate() {
        for v in role {
            out[r].push(from_conv_layout(g, v, p.axis)?);
        }
    }
    Ok(out)
}

/// `Σ_i softmax(logits)_i · parts[i]`.
pub fn dynamic_aggregate(g: &mut Graph, parts: &[Var], logits: Var) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Usage("dynamic aggregation of an empty part list".into()));
    }
    let weights = g.softmax(logits);
    g.weighted_sum(parts, weights)
}

/// Aggregated Q, K and V through a single convolution.
///
/// Convolution is linear in its weights, so `Σ_i η_i conv(z; W_i, b_i)`
/// equals `conv(z; Σ_i η_i W̃_i, Σ_i η_i b_i)` where `W̃_i` is `W_i` zero-padded
/// to the largest kernel. The three roles then share one im2col and one
/// product. [`multi_scale_qkv`] followed by [`dynamic_aggregate`] computes the
/// same quantity scale by scale.
///
/// Returns Q, K, V packed as attention input: `[n, L, 3W]` column blocks for
/// spatial, `[n, 3T, W]` row blocks for temporal.
fn merged_qkv_packed(
    g: &mut Graph,
    x: Var,
    scales: &[ConvScale],
    logits: &[ParamId; 3],
    axis: AttentionAxis,
    bound: &Bound,
) -> Result<(Var, Packing)> {
    let kmax = scales.iter().map(|s| s.kernel).max().expect("at least one scale");
    let c = g.shape(bound.var(scales[0].bias[0]))[0];
    let mut weights = Vec::with_capacity(3);
    let mut biases = Vec::with_capacity(3);
    for r in 0..3 {
        let mut ws = Vec::with_capacity(scales.len());
        let mut bs = Vec::with_capacity(scales.len());
        for s in scales {
            let w = bound.var(s.weight[r]);
            let pad = (kmax - s.kernel) / 2;
            ws.push(if pad == 0 {
                w
            } else {
                let z = g.constant(Tensor::zeros([c, c, pad]));
                g.concat(&[z, w, z], 2)?
            });
            bs.push(bound.var(s.bias[r]));
        }
        let eta = g.softmax(bound.var(logits[r]));
        weights.push(g.weighted_sum(&ws, eta)?);
        biases.push(g.weighted_sum(&bs, eta)?);
    }
    let w = g.concat(&weights, 0)?;
    let b = g.concat(&biases, 0)?;
    let z = to_conv_layout(g, x, axis)?;
    let y = g.conv1d(z, w, b)?;
    Ok(match axis {
        AttentionAxis::Spatial => (y, Packing::Columns),
        AttentionAxis::Temporal => (g.transpose(y)?, Packing::Rows),
    })
}

/// [`merged_qkv_packed`] split into separate `[n, L, W]` roles.
#[cfg(test)]
fn merged_qkv(
    g: &mut Graph,
    x: Var,
    scales: &[ConvScale],
    logits: &[ParamId; 3],
    axis: AttentionAxis,
    bound: &Bound,
) -> Result<Vec<Var>> {
    let (y, packing) = merged_qkv_packed(g, x, scales, logits, axis, bound)?;
    let s = g.shape(y).to_vec();
    let (axis_idx, n) = match packing {
        Packing::Columns => (2, s[2] / 3),
        Packing::Rows => (1, s[1] / 3),
    };
    g.split(y, axis_idx, &[n, n, n])
}

/// Output `[n, L, W]` of one DMHCSA layer, and the attention node whose
/// weights `[n, h, L, L]` [`Graph::attention_weights`] returns.
pub fn dmhcsa(g: &mut Graph, x: Var, p: &DmhcsaParams, pass: &mut Pass<'_>) -> Result<(Var, Var)> {
    check_input(g, x, p)?;
    let bound = pass.params;
    let drop = pass.training && p.dropout > 0.0;
    // head h attends over feature columns h·W/h .. (h+1)·W/h
    let heads = match &p.qkv {
        QkvProjection::Convolutional { scales, logits } => {
            let (mut y, packing) = merged_qkv_packed(g, x, scales, logits, p.axis, bound)?;
            if drop {
                y = g.dropout(y, p.dropout, pass.rng)?;
            }
            g.packed_attention(y, p.heads, packing)?
        }
        QkvProjection::Linear { weight, bias, .. } => {
            let mut qkv = Vec::with_capacity(3);
            for r in 0..3 {
                let y = g.matmul(x, bound.var(weight[r]))?;
                let y = g.add_trailing(y, bound.var(bias[r]))?;
                qkv.push(if drop { g.dropout(y, p.dropout, pass.rng)? } else { y });
            }
            g.multi_head_attention(qkv[0], qkv[1], qkv[2], p.heads)?
        }
    };
    let mut out = heads;
    if let QkvProjection::Linear { out_weight, out_bias, .. } = &p.qkv {
        let y = g.matmul(out, bound.var(*out_weight))?;
        out = g.add_trailing(y, bound.var(*out_bias))?;
    }
    Ok((out, heads))
}

/// Unpacks `[n, h, L, L]` (or single-head `[n, L, L]`) attention weights
/// into per-head records.
pub fn records_from(attn: &Tensor, axis: AttentionAxis, block: usize) -> Vec<AttentionRecord> {
    let s = attn.shape();
    let (n, h, l) = match s.len() {
        3 => (s[0], 1, s[1]),
        _ => (s[0], s[1], s[2]),
    };
    let mut out = Vec::with_capacity(n * h);
    for (i, chunk) in attn.data().chunks(l * l).enumerate() {
        out.push(AttentionRecord {
            block,
            axis,
            head: i % h,
            sample: i / h,
            matrix: Tensor::new([l, l], chunk.to_vec()).expect("square chunk"),
        });
    }
    debug_assert_eq!(out.len(), n * h);
    out
}

/// Zeroes the whole residual branch of each batch element with probability
/// `1 − survival`, scaling kept branches by `1 / survival`.
pub fn drop_path(g: &mut Graph, x: Var, survival: f64, rng: &mut Rng) -> Result<Var> {
    if survival >= 1.0 {
        return Ok(x);
    }
    let s = g.shape(x);
    let n = s[0];
    let per = g.value(x).len() / n;
    let mut mask = Vec::with_capacity(n * per);
    for _ in 0..n {
        let keep = if rng.random::<f64>() < survival { 1.0 / survival } else { 0.0 };
        mask.extend(std::iter::repeat_n(keep, per));
    }
    g.mask_mul(x, mask)
}

pub fn feed_forward(g: &mut Graph, x: Var, p: &FeedForward, bound: &Bound) -> Result<Var> {
    let h = g.matmul(x, bound.var(p.w1))?;
    let h = g.add_trailing(h, bound.var(p.b1))?;
    let h = g.gelu(h);
    let y = g.matmul(h, bound.var(p.w2))?;
    g.add_trailing(y, bound.var(p.b2))
}

/// Pre-norm residual block:
/// `x' = DMHCSA(LN(x)) + x`, `out = FFN(LN(x')) + x'`.
/// Returns the block output and the layer's attention node.
pub fn convformer_block(g: &mut Graph, x: Var, p: &BlockParams, pass: &mut Pass<'_>) -> Result<(Var, Var)> {
    let bound = pass.params;
    let h = g.layer_norm(x, bound.var(p.norm1.gamma), bound.var(p.norm1.beta), LAYER_NORM_EPS)?;
    let (mut a, attn) = dmhcsa(g, h, &p.attn, pass)?;
    if pass.training {
        a = drop_path(g, a, p.survival, pass.rng)?;
    }
    let x1 = g.add(x, a)?;
    let h = g.layer_norm(x1, bound.var(p.norm2.gamma), bound.var(p.norm2.beta), LAYER_NORM_EPS)?;
    let mut f = feed_forward(g, h, &p.ffn, bound)?;
    if pass.training {
        f = drop_path(g, f, p.survival, pass.rng)?;
    }
    Ok((g.add(x1, f)?, attn))
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        attn: DmhcsaParams,
        ffn_ratio: usize,
        survival: f64,
        rng: &mut Rng,
    ) -> Self {
        let width = attn.width;
        let norm1 = LayerNormParams::new(store, &format!("{prefix}.norm1"), width);
        let norm2 = LayerNormParams::new(store, &format!("{prefix}.norm2"), width);
        let ffn = FeedForward::new(store, &format!("{prefix}.ffn"), width, ffn_ratio, rng);
        Self {
            attn,
            norm1,
            norm2,
            ffn,
            survival,
        }
    }
}

/// Evaluates one DMHCSA layer on a single `L × W` input in inference mode.
pub fn dmhcsa_eval(store: &ParamStore, p: &DmhcsaParams, x: &Tensor) -> Result<(Tensor, Vec<AttentionRecord>)> {
    if x.ndim() != 2 {
        return Err(Error::dim("dmhcsa", x.shape(), &[p.seq_len, p.width]));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let xv = g.constant(x.clone().reshape([1, x.shape()[0], x.shape()[1]])?);
    let mut rng = rng::seeded(0);
    let mut pass = Pass {
        params: &bound,
        rng: &mut rng,
        training: false,
    };
    let (out, attn) = dmhcsa(&mut g, xv, p, &mut pass)?;
    let records = records_from(&g.attention_weights(attn).expect("attention node"), p.axis, 0);
    Ok((g.value(out).clone().reshape([p.seq_len, p.width])?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn identity_params(store: &mut ParamStore, axis: AttentionAxis, seq_len: usize, width: usize, heads: usize) -> DmhcsaParams {
        let mut rng = seeded(0);
        let p = DmhcsaParams::convolutional(store, "a", axis, seq_len, width, heads, &[1], 0.2, &mut rng).unwrap();
        let c = p.conv_channels();
        if let QkvProjection::Convolutional { scales, .. } = &p.qkv {
            for &w in &scales[0].weight {
                *store.get_mut(w) = Tensor::eye(c).reshape([c, c, 1]).unwrap();
            }
        }
        p
    }

    /// Direct multi-head attention with nested loops, independent of the graph.
    fn vanilla_mhsa(x: &Tensor, heads: usize) -> Tensor {
        let (l, w) = (x.shape()[0], x.shape()[1]);
        let dh = w / heads;
        let mut out = vec![0.0; l * w];
        for h in 0..heads {
            for i in 0..l {
                let mut scores: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|c| x.at(&[i, h * dh + c]) * x.at(&[j, h * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                scores.iter_mut().for_each(|s| *s = (*s - m).exp());
                let z: f64 = scores.iter().sum();
                for c in 0..dh {
                    out[i * w + h * dh + c] = (0..l).map(|j| scores[j] / z * x.at(&[j, h * dh + c])).sum();
                }
            }
        }
        Tensor::new([l, w], out).unwrap()
    }

    #[test]
    fn single_position_attends_to_itself() {
        let q = Tensor::new([1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let v = Tensor::new([1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        let (out, rec) = scaled_dot_product_attention(&q, &q, &v).unwrap();
        assert_eq!(out, v);
        assert_eq!(rec.matrix.data(), &[1.0]);
    }

    #[test]
    fn zero_keys_average_values() {
        let mut rng = seeded(3);
        let q = Tensor::randn([4, 2], 1.0, &mut rng);
        let k = Tensor::zeros([4, 2]);
        let v = Tensor::randn([4, 2], 1.0, &mut rng);
        let (out, rec) = scaled_dot_product_attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|j| v.at(&[j, c])).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((out.at(&[i, c]) - mean).abs() < 1e-12);
            }
        }
        assert!(rec.matrix.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_token_hand_evaluation() {
        let q = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new([2, 1], vec![1.0, -1.0]).unwrap();
        let (out, rec) = scaled_dot_product_attention(&q, &q, &v).unwrap();
        let e = std::f64::consts::E;
        assert!((rec.matrix.at(&[0, 0]) - e / (e + 1.0)).abs() < 1e-15);
        assert!((rec.matrix.at(&[0, 1]) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((out.at(&[0, 0]) - 0.462_117_157_260_009_7).abs() < 1e-12);
    }

    #[test]
    fn attention_shape_mismatch_is_rejected() {
        let q = Tensor::zeros([3, 2]);
        let k = Tensor::zeros([3, 4]);
        assert!(matches!(
            scaled_dot_product_attention(&q, &k, &q),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn aggregation_edge_cases() {
        let mut rng = seeded(1);
        let mut g = Graph::new();
        let a = g.constant(Tensor::randn([2, 3], 1.0, &mut rng));
        let b = g.constant(Tensor::randn([2, 3], 1.0, &mut rng));
        let c = g.constant(Tensor::randn([2, 3], 1.0, &mut rng));

        let one = g.constant(Tensor::new([1], vec![4.2]).unwrap());
        let y = dynamic_aggregate(&mut g, &[a], one).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(a)) < 1e-15);

        let eq = g.constant(Tensor::zeros([3]));
        let y = dynamic_aggregate(&mut g, &[a, b, c], eq).unwrap();
        for i in 0..6 {
            let mean = (g.value(a).data()[i] + g.value(b).data()[i] + g.value(c).data()[i]) / 3.0;
            assert!((g.value(y).data()[i] - mean).abs() < 1e-12);
        }

        let ln2 = g.constant(Tensor::new([2], vec![2f64.ln(), 0.0]).unwrap());
        let y = dynamic_aggregate(&mut g, &[a, b], ln2).unwrap();
        for i in 0..6 {
            let want = (2.0 * g.value(a).data()[i] + g.value(b).data()[i]) / 3.0;
            assert!((g.value(y).data()[i] - want).abs() < 1e-12);
        }

        assert!(matches!(dynamic_aggregate(&mut g, &[], ln2), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_projection_reduces_to_plain_attention() {
        let mut rng = seeded(5);
        for (axis, l, w, h) in [(AttentionAxis::Spatial, 5, 8, 1), (AttentionAxis::Spatial, 6, 8, 4), (AttentionAxis::Temporal, 3, 12, 3)] {
            let mut store = ParamStore::new();
            let p = identity_params(&mut store, axis, l, w, h);
            let x = Tensor::randn([l, w], 1.0, &mut rng);
            let (out, records) = dmhcsa_eval(&store, &p, &x).unwrap();
            assert!(out.max_abs_diff(&vanilla_mhsa(&x, h)) < 1e-10, "{axis} h={h}");
            assert_eq!(records.len(), h);
        }
    }

    #[test]
    fn eight_heads_produce_eight_stochastic_records() {
        let mut rng = seeded(2);
        let mut store = ParamStore::new();
        let p = DmhcsaParams::convolutional(&mut store, "a", AttentionAxis::Spatial, 7, 32, 8, &[3, 5], 0.0, &mut rng).unwrap();
        let x = Tensor::randn([7, 32], 1.0, &mut rng);
        let (out, records) = dmhcsa_eval(&store, &p, &x).unwrap();
        assert_eq!(out.shape(), &[7, 32]);
        assert_eq!(records.len(), 8);
        for r in &records {
            assert_eq!(r.matrix.shape(), &[7, 7]);
            for row in r.matrix.data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn indivisible_heads_are_a_config_error() {
        let mut store = ParamStore::new();
        let r = DmhcsaParams::convolutional(&mut store, "a", AttentionAxis::Spatial, 5, 10, 3, &[3], 0.0, &mut seeded(0));
        assert!(matches!(r, Err(Error::Config(_))));
        let r = DmhcsaParams::convolutional(&mut store, "a", AttentionAxis::Spatial, 5, 12, 3, &[4], 0.0, &mut seeded(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn random_block(axis: AttentionAxis, l: usize, w: usize, h: usize, kernels: &[usize], rng: &mut Rng) -> (ParamStore, BlockParams) {
        let mut store = ParamStore::new();
        let attn = DmhcsaParams::convolutional(&mut store, "b", axis, l, w, h, kernels, 0.2, rng).unwrap();
        let block = BlockParams::new(&mut store, "b", attn, 2, 0.8, rng);
        for t in store.tensors_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.5, rng);
        }
        (store, block)
    }

    fn eval_block(store: &ParamStore, block: &BlockParams, x: &Tensor, training: bool, seed: u64) -> Tensor {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut rng = seeded(seed);
        let mut pass = Pass { params: &bound, rng: &mut rng, training };
        let (y, _) = convformer_block(&mut g, xv, block, &mut pass).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn multi_scale_parts_preserve_shape() {
        let mut rng = seeded(4);
        for (axis, l, w) in [(AttentionAxis::Spatial, 17, 16), (AttentionAxis::Temporal, 9, 34)] {
            let mut store = ParamStore::new();
            let p = DmhcsaParams::convolutional(&mut store, "a", axis, l, w, 2, &[1, 3, 5], 0.0, &mut rng).unwrap();
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let x = g.constant(Tensor::randn([2, l, w], 1.0, &mut rng));
            let parts = multi_scale_qkv(&mut g, x, &p, &bound).unwrap();
            for role in &parts {
                assert_eq!(role.len(), 3);
                for &v in role {
                    assert_eq!(g.shape(v), &[2, l, w]);
                }
            }
        }
    }

    #[test]
    fn temporal_queries_fuse_all_frames_within_the_kernel_window() {
        let (t, w, kernel) = (5, 24, 5);
        let half = (kernel - 1) / 2;
        let mut rng = seeded(8);
        let mut store = ParamStore::new();
        let p = DmhcsaParams::convolutional(&mut store, "a", AttentionAxis::Temporal, t, w, 4, &[kernel], 0.0, &mut rng).unwrap();
        let x = Tensor::randn([1, t, w], 1.0, &mut rng);
        let queries = |x: &Tensor| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let parts = multi_scale_qkv(&mut g, xv, &p, &bound).unwrap();
            g.value(parts[0][0]).clone()
        };
        let base = queries(&x);
        let (frame, col) = (2, 11);
        let mut y = x.clone();
        y.data_mut()[frame * w + col] += 1.0;
        let moved = queries(&y);
        for f in 0..t {
            for c in 0..w {
                let changed = (moved.at(&[0, f, c]) - base.at(&[0, f, c])).abs() > 1e-12;
                assert_eq!(changed, c.abs_diff(col) <= half, "frame {f} column {c}");
            }
        }
    }

    #[test]
    fn convolutional_attention_is_not_permutation_equivariant() {
        let mut rng = seeded(6);
        let mut store = ParamStore::new();
        let p = DmhcsaParams::convolutional(&mut store, "a", AttentionAxis::Spatial, 6, 8, 2, &[3], 0.0, &mut rng).unwrap();
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let permute_rows = |t: &Tensor| Tensor::from_fn([6, 8], |i| t.at(&[perm[i / 8], i % 8]));
        let (out, _) = dmhcsa_eval(&store, &p, &x).unwrap();
        let (out_perm, _) = dmhcsa_eval(&store, &p, &permute_rows(&x)).unwrap();
        assert!(out_perm.max_abs_diff(&permute_rows(&out)) > 1e-3);
    }

    #[test]
    fn aggregation_weights_lie_on_the_simplex() {
        let mut rng = seeded(10);
        for _ in 0..50 {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::randn([4], 3.0, &mut rng));
            let w = g.softmax(logits);
            let w = g.value(w).data();
            assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_make_the_block_an_identity() {
        let mut rng = seeded(12);
        let (mut store, block) = random_block(AttentionAxis::Spatial, 5, 8, 2, &[3, 5], &mut rng);
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let x = Tensor::randn([3, 5, 8], 1.0, &mut rng);
        assert_eq!(eval_block(&store, &block, &x, false, 0), x);
    }

    #[test]
    fn survival_has_no_effect_at_inference() {
        let mut rng = seeded(14);
        let (store, mut block) = random_block(AttentionAxis::Temporal, 3, 8, 2, &[3], &mut rng);
        let x = Tensor::randn([2, 3, 8], 1.0, &mut rng);
        block.survival = 1.0;
        let a = eval_block(&store, &block, &x, false, 1);
        block.survival = 0.0;
        let b = eval_block(&store, &block, &x, false, 2);
        assert_eq!(a, b);
        // Training with no survivors keeps only the shortcuts.
        assert_eq!(eval_block(&store, &block, &x, true, 3), x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        use crate::gradcheck::{Case, Problem, DEFAULT_STEP, DEFAULT_TOLERANCE};
        for axis in [AttentionAxis::Spatial, AttentionAxis::Temporal] {
            let (l, w) = (4, 6);
            let (_, block) = random_block(axis, l, w, 2, &[1, 3], &mut seeded(0));
            let case = Case::new(
                format!("{axis}_block"),
                move |rng| {
                    let (store, _) = random_block(axis, l, w, 2, &[1, 3], rng);
                    let mut inputs = vec![Tensor::randn([2, l, w], 1.0, rng)];
                    inputs.extend(store.tensors().iter().cloned());
                    Problem { inputs, constants: vec![Tensor::randn([2, l, w], 1.0, rng)] }
                },
                move |g, x, c| {
                    let bound = Bound::from_vars(x[1..].to_vec());
                    let mut rng = seeded(0);
                    let mut pass = Pass { params: &bound, rng: &mut rng, training: false };
                    let (y, _) = convformer_block(g, x[0], &block, &mut pass)?;
                    crate::gradcheck::project(g, y, c[0])
                },
            )
            .with_max_coords(64);
            for seed in 0..3 {
                let err = case.check_seed(seed, DEFAULT_STEP).unwrap();
                assert!(err < DEFAULT_TOLERANCE, "{axis} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn merged_kernels_match_scale_by_scale_aggregation() {
        let mut rng = seeded(21);
        for (axis, l, w) in [(AttentionAxis::Spatial, 7, 8), (AttentionAxis::Temporal, 5, 14)] {
            let mut store = ParamStore::new();
            let p = DmhcsaParams::convolutional(&mut store, "a", axis, l, w, 2, &[1, 3, 5], 0.0, &mut rng).unwrap();
            for t in store.tensors_mut() {
                *t = Tensor::randn(t.shape().to_vec(), 0.7, &mut rng);
            }
            let QkvProjection::Convolutional { scales, logits } = &p.qkv else { unreachable!() };
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let x = g.constant(Tensor::randn([3, l, w], 1.0, &mut rng));
            let merged = merged_qkv(&mut g, x, scales, logits, axis, &bound).unwrap();
            let parts = multi_scale_qkv(&mut g, x, &p, &bound).unwrap();
            for r in 0..3 {
                let direct = dynamic_aggregate(&mut g, &parts[r], bound.var(logits[r])).unwrap();
                assert!(g.value(merged[r]).max_abs_diff(g.value(direct)) < 1e-12, "{axis} role {r}");
            }
        }
    }

    #[test]
    fn fused_attention_matches_the_composed_graph() {
        // [n, L, W] with 2 heads of width 4, against reshape/permute + bmm + softmax
        let mut rng = seeded(30);
        let shape = [3, 6, 8];
        let (q, k, v) = (
            Tensor::randn(shape, 1.0, &mut rng),
            Tensor::randn(shape, 1.0, &mut rng),
            Tensor::randn(shape, 1.0, &mut rng),
        );
        let r = Tensor::randn(shape, 1.0, &mut rng);
        let run = |fused: bool| {
            let mut g = Graph::new();
            let (qv, kv, vv, rv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()), g.constant(r.clone()));
            let (out, weights) = if fused {
                let out = g.multi_head_attention(qv, kv, vv, 2).unwrap();
                (out, g.attention_weights(out).unwrap())
            } else {
                let mut split = |x| {
                    let y = g.reshape(x, [3, 6, 2, 4]).unwrap();
                    g.permute(y, &[0, 2, 1, 3]).unwrap()
                };
                let (qh, kh, vh) = (split(qv), split(kv), split(vv));
                let s = g.bmm(qh, kh, true).unwrap();
                let s = g.scale(s, 0.5);
                let p = g.softmax(s);
                let o = g.bmm(p, vh, false).unwrap();
                let o = g.permute(o, &[0, 2, 1, 3]).unwrap();
                (g.reshape(o, shape).unwrap(), g.value(p).clone())
            };
            let loss = crate::gradcheck::project(&mut g, out, rv).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<Tensor> = [qv, kv, vv].iter().map(|&x| g.grad_tensor(x).unwrap()).collect();
            (g.value(out).clone(), weights, grads)
        };
        let (a, wa, ga) = run(true);
        let (b, wb, gb) = run(false);
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(wa.max_abs_diff(&wb) < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }
}
