//! The full lifting network, its ablation variants, the parameter and FLOP
//! accountant, and checkpoint files.
//!
//! A window of `T` frames of 2D joints `[T, J, 2]` is embedded per joint,
//! refined by spatial blocks that attend across joints within each frame,
//! flattened to `[T, J·d]`, refined by temporal blocks that attend across
//! frames, projected to `3J` per frame and finally collapsed over the frame
//! axis to the 3D pose `[J, 3]` of the central frame.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    convformer_block, records_from, AttentionAxis, AttentionRecord, BlockParams, DmhcsaParams, Pass,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Kernel size used by the single-filter ablation.
pub const SINGLE_FILTER_KERNEL: usize = 7;
/// Standard deviation of the positional embedding initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Multi-scale convolutional Q/K/V with learned aggregation.
    Dynamic,
    /// One convolution of size [`SINGLE_FILTER_KERNEL`] per role.
    SingleFilter,
    /// Dense Q/K/V projections with an output projection.
    LinearBaseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dynamic, Variant::SingleFilter, Variant::LinearBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dynamic => "dynamic",
            Variant::SingleFilter => "single_filter",
            Variant::LinearBaseline => "linear_baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || v.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected dynamic, single_filter or linear_baseline)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Receptive field `T` in frames (odd).
    pub frames: usize,
    pub joints: usize,
    /// Spatial embedding width `d`.
    pub dim: usize,
    pub blocks_spatial: usize,
    pub blocks_temporal: usize,
    pub heads: usize,
    /// Odd kernel sizes of the Q/K/V convolutions.
    pub kernels: Vec<usize>,
    pub ffn_ratio: usize,
    pub dropout: f64,
    /// Probability that a residual branch survives stochastic depth.
    pub survival: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 9,
            joints: 17,
            dim: 32,
            blocks_spatial: 2,
            blocks_temporal: 2,
            heads: 8,
            kernels: vec![7, 7, 7],
            ffn_ratio: 2,
            dropout: 0.2,
            survival: 0.8,
            variant: Variant::Dynamic,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.frames % 2 == 0 {
            return fail(format!("frames must be odd, got {}", self.frames));
        }
        if self.joints == 0 || self.dim == 0 || self.ffn_ratio == 0 {
            return fail("joints, dim and ffn_ratio must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if (self.joints * self.dim) % self.heads != 0 {
            return fail(format!("joints·dim {} is not divisible by {} heads", self.joints * self.dim, self.heads));
        }
        if self.variant == Variant::Dynamic && self.kernels.is_empty() {
            return fail("at least one kernel size is required".into());
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return fail(format!("kernel size {k} is even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.survival) {
            return fail(format!("survival {} outside [0, 1]", self.survival));
        }
        Ok(())
    }

    /// Kernel sizes actually instantiated for this variant (empty for the
    /// linear baseline).
    pub fn effective_kernels(&self) -> Vec<usize> {
        match self.variant {
            Variant::Dynamic => self.kernels.clone(),
            Variant::SingleFilter => vec![SINGLE_FILTER_KERNEL],
            Variant::LinearBaseline => Vec::new(),
        }
    }

    pub fn temporal_width(&self) -> usize {
        self.joints * self.dim
    }
}

/// One line of an itemized parameter or FLOP table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Item {
    pub name: String,
    pub count: u64,
}

fn item(name: impl Into<String>, count: usize) -> Item {
    Item {
        name: name.into(),
        count: count as u64,
    }
}

fn block_param_items(cfg: &ModelConfig, axis: AttentionAxis, index: usize) -> Vec<Item> {
    let (seq, width) = match axis {
        AttentionAxis::Spatial => (cfg.joints, cfg.dim),
        AttentionAxis::Temporal => (cfg.frames, cfg.temporal_width()),
    };
    let prefix = format!("{axis}.{index}");
    let mut items = Vec::new();
    match cfg.variant {
        Variant::LinearBaseline => {
            items.push(item(format!("{prefix}.qkv"), 3 * (width * width + width)));
            items.push(item(format!("{prefix}.out"), width * width + width));
        }
        _ => {
            let c = crate::attention::conv_channels(axis, seq, width);
            let kernels = cfg.effective_kernels();
            let taps: usize = kernels.iter().sum();
            items.push(item(format!("{prefix}.qkv_conv"), 3 * (c * c * taps + c * kernels.len())));
            items.push(item(format!("{prefix}.eta"), 3 * kernels.len()));
        }
    }
    items.push(item(format!("{prefix}.norms"), 4 * width));
    let hidden = width * cfg.ffn_ratio;
    items.push(item(format!("{prefix}.ffn"), 2 * width * hidden + hidden + width));
    items
}

/// Itemized learnable-scalar count, computed from the configuration alone.
pub fn param_table(cfg: &ModelConfig) -> Vec<Item> {
    let (t, j, d) = (cfg.frames, cfg.joints, cfg.dim);
    let mut items = vec![item("embed.weight", 2 * d), item("embed.pos", j * d)];
    for b in 0..cfg.blocks_spatial {
        items.extend(block_param_items(cfg, AttentionAxis::Spatial, b));
    }
    items.push(item("temporal.pos", t * j * d));
    for b in 0..cfg.blocks_temporal {
        items.extend(block_param_items(cfg, AttentionAxis::Temporal, b));
    }
    items.push(item("head.proj", j * d * 3 * j + 3 * j));
    items.push(item("head.collapse", t + 1));
    items
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_table(cfg).iter().map(|i| i.count).sum()
}

fn block_flop_items(cfg: &ModelConfig, axis: AttentionAxis, index: usize) -> Vec<Item> {
    let (batch, seq, width) = match axis {
        AttentionAxis::Spatial => (cfg.frames, cfg.joints, cfg.dim),
        AttentionAxis::Temporal => (1, cfg.frames, cfg.temporal_width()),
    };
    let prefix = format!("{axis}.{index}");
    let mut items = Vec::new();
    match cfg.variant {
        Variant::LinearBaseline => {
            items.push(item(format!("{prefix}.qkv"), 2 * batch * 3 * seq * width * width));
            items.push(item(format!("{prefix}.out"), 2 * batch * seq * width * width));
        }
        _ => {
            let c = crate::attention::conv_channels(axis, seq, width);
            // Each convolution output element costs c·κ multiply-adds and
            // there are seq·width of them per role and scale.
            let taps: usize = cfg.effective_kernels().iter().sum();
            items.push(item(format!("{prefix}.qkv_conv"), 2 * batch * 3 * seq * width * c * taps));
        }
    }
    items.push(item(format!("{prefix}.attention"), 2 * batch * 2 * seq * seq * width));
    items.push(item(format!("{prefix}.ffn"), 2 * batch * 2 * seq * width * width * cfg.ffn_ratio));
    items
}

/// Itemized forward-pass cost for one window: twice the multiply-adds of
/// every matrix product, convolution and attention product.
pub fn flops_table(cfg: &ModelConfig) -> Vec<Item> {
    let (t, j, d) = (cfg.frames, cfg.joints, cfg.dim);
    let mut items = vec![item("embed", 2 * t * j * 2 * d)];
    for b in 0..cfg.blocks_spatial {
        items.extend(block_flop_items(cfg, AttentionAxis::Spatial, b));
    }
    for b in 0..cfg.blocks_temporal {
        items.extend(block_flop_items(cfg, AttentionAxis::Temporal, b));
    }
    items.push(item("head.proj", 2 * t * j * d * 3 * j));
    items.push(item("head.collapse", 2 * t * 3 * j));
    items
}

pub fn estimate_flops(cfg: &ModelConfig) -> u64 {
    flops_table(cfg).iter().map(|i| i.count).sum()
}

/// Attention node of one block, recorded during a forward pass; its weights
/// `[n, h, L, L]` come from [`Graph::attention_weights`].
#[derive(Clone, Copy, Debug)]
pub struct CapturedAttention {
    pub block: usize,
    pub axis: AttentionAxis,
    pub node: Var,
}

#[derive(Clone, Debug)]
pub struct ConvFormerModel {
    config: ModelConfig,
    params: ParamStore,
    embed_weight: ParamId,
    embed_pos: ParamId,
    spatial: Vec<BlockParams>,
    temporal_pos: ParamId,
    temporal: Vec<BlockParams>,
    head_weight: ParamId,
    head_bias: ParamId,
    collapse_weight: ParamId,
    collapse_bias: ParamId,
}

fn build_block(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    axis: AttentionAxis,
    index: usize,
    rng: &mut Rng,
) -> Result<BlockParams> {
    let (seq, width) = match axis {
        AttentionAxis::Spatial => (cfg.joints, cfg.dim),
        AttentionAxis::Temporal => (cfg.frames, cfg.temporal_width()),
    };
    let prefix = format!("{axis}.{index}");
    let attn_prefix = format!("{prefix}.attn");
    let attn = match cfg.variant {
        Variant::LinearBaseline => {
            DmhcsaParams::linear(store, &attn_prefix, axis, seq, width, cfg.heads, cfg.dropout, rng)?
        }
        _ => DmhcsaParams::convolutional(
            store,
            &attn_prefix,
            axis,
            seq,
            width,
            cfg.heads,
            &cfg.effective_kernels(),
            cfg.dropout,
            rng,
        )?,
    };
    Ok(BlockParams::new(store, &prefix, attn, cfg.ffn_ratio, cfg.survival, rng))
}

impl ConvFormerModel {
    /// Builds and initializes the model selected by `config.variant`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let rng = &mut rng;
        let (t, j, d) = (config.frames, config.joints, config.dim);
        let mut store = ParamStore::new();
        let embed_weight = store.add("embed.weight", Tensor::uniform([2, d], 1.0 / 2f64.sqrt(), rng));
        let embed_pos = store.add("embed.pos", Tensor::randn([j, d], EMBEDDING_INIT_STD, rng));
        let spatial = (0..config.blocks_spatial)
            .map(|b| build_block(&mut store, &config, AttentionAxis::Spatial, b, rng))
            .collect::<Result<Vec<_>>>()?;
        let temporal_pos = store.add("temporal.pos", Tensor::randn([t, j * d], EMBEDDING_INIT_STD, rng));
        let temporal = (0..config.blocks_temporal)
            .map(|b| build_block(&mut store, &config, AttentionAxis::Temporal, b, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_weight = store.add(
            "head.weight",
            Tensor::uniform([j * d, 3 * j], 1.0 / ((j * d) as f64).sqrt(), rng),
        );
        let head_bias = store.add("head.bias", Tensor::zeros([3 * j]));
        let collapse_weight = store.add("collapse.weight", Tensor::uniform([t, 1], 1.0 / (t as f64).sqrt(), rng));
        let collapse_bias = store.add("collapse.bias", Tensor::zeros([1]));
        Ok(Self {
            config,
            params: store,
            embed_weight,
            embed_pos,
            spatial,
            temporal_pos,
            temporal,
            head_weight,
            head_bias,
            collapse_weight,
            collapse_bias,
        })
    }

    /// Same as [`ConvFormerModel::new`]; named for the ablation entry point.
    pub fn build_variant(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> u64 {
        self.params.num_scalars() as u64
    }

    pub fn collapse_weight(&self) -> ParamId {
        self.collapse_weight
    }

    pub fn collapse_bias(&self) -> ParamId {
        self.collapse_bias
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_bias
    }

    pub fn temporal_blocks(&self) -> &[BlockParams] {
        &self.temporal
    }

    /// `P W + E_pos` for `[B, T, J, 2]` windows → `[B, T, J, d]`.
    pub fn embed(&self, g: &mut Graph, bound: &Bound, windows: Var) -> Result<Var> {
        let s = g.shape(windows);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.frames || s[2] != c.joints || s[3] != 2 {
            return Err(Error::dim("embed", s, &[c.frames, c.joints, 2]));
        }
        let x = g.matmul(windows, bound.var(self.embed_weight))?;
        g.add_trailing(x, bound.var(self.embed_pos))
    }

    /// Spatial blocks over `[B, T, J, d]`, frames treated as batch elements.
    pub fn spatial(
        &self,
        g: &mut Graph,
        x: Var,
        pass: &mut Pass<'_>,
        capture: &mut Vec<CapturedAttention>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let mut h = g.reshape(x, [s[0] * s[1], s[2], s[3]])?;
        for (block, p) in self.spatial.iter().enumerate() {
            let (y, node) = convformer_block(g, h, p, pass)?;
            capture.push(CapturedAttention {
                block,
                axis: AttentionAxis::Spatial,
                node,
            });
            h = y;
        }
        g.reshape(h, s)
    }

    /// Flattens `[B, T, J, d]` frames, adds `E_temp` and runs the temporal
    /// blocks → `[B, T, J·d]`.
    pub fn temporal(
        &self,
        g: &mut Graph,
        z: Var,
        pass: &mut Pass<'_>,
        capture: &mut Vec<CapturedAttention>,
    ) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let x = g.reshape(z, [s[0], s[1], s[2] * s[3]])?;
        let mut h = g.add_trailing(x, pass.params.var(self.temporal_pos))?;
        for (block, p) in self.temporal.iter().enumerate() {
            let (y, node) = convformer_block(g, h, p, pass)?;
            capture.push(CapturedAttention {
                block,
                axis: AttentionAxis::Temporal,
                node,
            });
            h = y;
        }
        Ok(h)
    }

    /// `[B, T, J·d]` → per-frame `3J` projection → weighted frame collapse → `[B, J, 3]`.
    pub fn head(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let c = &self.config;
        if s.len() != 3 || s[1] != c.frames || s[2] != c.temporal_width() {
            return Err(Error::dim("head", &s, &[c.frames, c.temporal_width()]));
        }
        let y = g.matmul(z, bound.var(self.head_weight))?;
        let y = g.add_trailing(y, bound.var(self.head_bias))?;
        let y = g.transpose(y)?;
        let y = g.matmul(y, bound.var(self.collapse_weight))?;
        let y = g.add_trailing(y, bound.var(self.collapse_bias))?;
        g.reshape(y, [s[0], c.joints, 3])
    }

    /// Full forward pass over `[B, T, J, 2]` windows → `[B, J, 3]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        windows: Var,
        pass: &mut Pass<'_>,
        capture: &mut Vec<CapturedAttention>,
    ) -> Result<Var> {
        let x = self.embed(g, pass.params, windows)?;
        let x = self.spatial(g, x, pass, capture)?;
        let z = self.temporal(g, x, pass, capture)?;
        self.head(g, pass.params, z)
    }

    /// Runs `f` on a fresh graph with the parameters bound as constants, in
    /// inference mode.
    fn eval_with<T>(&self, f: impl FnOnce(&mut Graph, &mut Pass<'_>) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let mut rng = rng::seeded(0);
        let mut pass = Pass {
            params: &bound,
            rng: &mut rng,
            training: false,
        };
        f(&mut g, &mut pass)
    }

    /// Inference on a batch of windows `[B, T, J, 2]` → `[B, J, 3]`.
    pub fn predict(&self, windows: &Tensor) -> Result<Tensor> {
        self.eval_with(|g, pass| {
            let x = g.constant(windows.clone());
            let y = self.forward_graph(g, x, pass, &mut Vec::new())?;
            Ok(g.value(y).clone())
        })
    }

    /// Inference on one window `[T, J, 2]` → `[J, 3]`.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(window)?.0)
    }

    /// Inference on one window, also returning every head's attention map.
    /// Spatial records carry the frame index as `sample`.
    pub fn forward_with_attention(&self, window: &Tensor) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let s = window.shape();
        if s.len() != 3 {
            return Err(Error::dim("forward", s, &[self.config.frames, self.config.joints, 2]));
        }
        let batched = window.clone().reshape([1, s[0], s[1], s[2]])?;
        self.eval_with(|g, pass| {
            let x = g.constant(batched);
            let mut capture = Vec::new();
            let y = self.forward_graph(g, x, pass, &mut capture)?;
            let records = capture
                .iter()
                .flat_map(|c| records_from(&g.attention_weights(c.node).expect("attention node"), c.axis, c.block))
                .collect();
            let out = g.value(y).clone().reshape([self.config.joints, 3])?;
            Ok((out, records))
        })
    }

    /// `xᵢ = PᵢW + E_pos` for one window `[T, J, 2]` → `[T, J, d]`.
    pub fn embed_frames(&self, window: &Tensor) -> Result<Tensor> {
        let s = window.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::dim("embed", s, &[self.config.frames, self.config.joints, 2]));
        }
        let batched = window.clone().reshape([1, s[0], s[1], 2])?;
        self.eval_with(|g, pass| {
            let x = g.constant(batched);
            let y = self.embed(g, pass.params, x)?;
            g.value(y).clone().reshape([s[0], s[1], self.config.dim])
        })
    }

    /// Spatial stack on `[T, J, d]`.
    pub fn spatial_forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        self.eval_with(|g, pass| {
            let v = g.constant(x.clone().reshape([1, s[0], s[1], s[2]])?);
            let y = self.spatial(g, v, pass, &mut Vec::new())?;
            g.value(y).clone().reshape(s)
        })
    }

    /// Temporal stack on `[T, J, d]` → `[T, J·d]`.
    pub fn temporal_forward(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape().to_vec();
        self.eval_with(|g, pass| {
            let v = g.constant(z.clone().reshape([1, s[0], s[1], s[2]])?);
            let y = self.temporal(g, v, pass, &mut Vec::new())?;
            g.value(y).clone().reshape([s[0], s[1] * s[2]])
        })
    }

    /// Regression head on `[T, J·d]` → `[J, 3]`.
    pub fn regression_head(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape().to_vec();
        self.eval_with(|g, pass| {
            let v = g.constant(z.clone().reshape([1, s[0], s[1]])?);
            let y = self.head(g, pass.params, v)?;
            g.value(y).clone().reshape([self.config.joints, 3])
        })
    }

    /// Serializes the checkpoint: a JSON manifest line followed by every
    /// parameter as little-endian `f64` in declaration order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            schema_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("checkpoint has no manifest line".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::MalformedHeader(format!("unexpected format {:?}", manifest.format)));
        }
        if manifest.schema_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.schema_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut model = Self::new(manifest.config, 0)?;
        let expected: Vec<TensorEntry> = model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != manifest.tensors {
            return Err(Error::ExtentMismatch(
                "checkpoint tensor list does not match its configuration".into(),
            ));
        }
        let payload = &bytes[nl + 1..];
        let want = model.params.num_scalars() * 8;
        if payload.len() < want {
            return Err(Error::Truncated {
                expected: want,
                found: payload.len(),
            });
        }
        if payload.len() > want {
            return Err(Error::ExtentMismatch(format!(
                "checkpoint payload has {} trailing bytes",
                payload.len() - want
            )));
        }
        let mut chunks = payload.chunks_exact(8);
        for t in model.params.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
            }
        }
        Ok(model)
    }

    /// Writes the checkpoint through a temporary file renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_checkpoint_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub const CHECKPOINT_FORMAT: &str = "convformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    schema_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Mean per-joint Euclidean error of `pred` against `target`, both `[B, J, 3]`.
pub fn mpjpe_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let norms = g.norm_last(diff)?;
    Ok(g.mean_all(norms))
}

/// Smallest configuration exercising every layer: `T=3, J=5, d=8, h=2, κ=(3)`.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 3,
        joints: 5,
        dim: 8,
        blocks_spatial: 2,
        blocks_temporal: 2,
        heads: 2,
        kernels: vec![3],
        ..ModelConfig::default()
    }
}

fn randomized(cfg: &ModelConfig, rng: &mut Rng) -> ConvFormerModel {
    use rand::Rng as _;
    let mut m = ConvFormerModel::new(cfg.clone(), rng.random()).expect("valid config");
    for t in m.params.tensors_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.4, rng);
    }
    m
}

/// Finite-difference cases for the model stages and the whole network on
/// [`tiny_config`]; every parameter tensor is an input.
pub fn gradcheck_cases() -> Vec<crate::gradcheck::Case> {
    use crate::gradcheck::{project, Case, Problem};
    let mut cases = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            ..tiny_config()
        };
        let template = ConvFormerModel::new(cfg.clone(), 0).expect("valid config");
        let (t, j) = (cfg.frames, cfg.joints);
        let make_cfg = cfg.clone();
        cases.push(
            Case::new(
                format!("model_{variant}"),
                move |rng| {
                    let m = randomized(&make_cfg, rng);
                    let mut inputs = vec![Tensor::randn([2, t, j, 2], 1.0, rng)];
                    inputs.extend(m.params.tensors().iter().cloned());
                    Problem {
                        inputs,
                        constants: vec![Tensor::randn([2, j, 3], 1.0, rng)],
                    }
                },
                move |g, x, c| {
                    let bound = Bound::from_vars(x[1..].to_vec());
                    let mut rng = rng::seeded(0);
                    let mut pass = Pass {
                        params: &bound,
                        rng: &mut rng,
                        training: false,
                    };
                    let y = template.forward_graph(g, x[0], &mut pass, &mut Vec::new())?;
                    project(g, y, c[0])
                },
            )
            .with_max_coords(24),
        );
    }

    let cfg = tiny_config();
    let template = ConvFormerModel::new(cfg.clone(), 0).expect("valid config");
    let make_cfg = cfg.clone();
    let (t, j, d) = (cfg.frames, cfg.joints, cfg.dim);
    cases.push(
        Case::new(
            "spatial_stack",
            move |rng| {
                let m = randomized(&make_cfg, rng);
                let mut inputs = vec![Tensor::randn([1, t, j, d], 1.0, rng)];
                inputs.extend(m.params.tensors().iter().cloned());
                Problem {
                    inputs,
                    constants: vec![Tensor::randn([1, t, j, d], 1.0, rng)],
                }
            },
            move |g, x, c| {
                let bound = Bound::from_vars(x[1..].to_vec());
                let mut rng = rng::seeded(0);
                let mut pass = Pass {
                    params: &bound,
                    rng: &mut rng,
                    training: false,
                };
                let y = template.spatial(g, x[0], &mut pass, &mut Vec::new())?;
                project(g, y, c[0])
            },
        )
        .with_max_coords(24),
    );

    let template = ConvFormerModel::new(cfg.clone(), 0).expect("valid config");
    let make_cfg = cfg;
    cases.push(
        Case::new(
            "regression_head",
            move |rng| {
                let m = randomized(&make_cfg, rng);
                Problem {
                    inputs: vec![
                        Tensor::randn([2, t, j * d], 1.0, rng),
                        m.params.get(m.head_weight).clone(),
                        m.params.get(m.head_bias).clone(),
                        m.params.get(m.collapse_weight).clone(),
                        m.params.get(m.collapse_bias).clone(),
                    ],
                    constants: vec![Tensor::randn([2, j, 3], 1.0, rng)],
                }
            },
            move |g, x, c| {
                let mut vars = vec![x[0]; template.params.len()];
                vars[template.head_weight.index()] = x[1];
                vars[template.head_bias.index()] = x[2];
                vars[template.collapse_weight.index()] = x[3];
                vars[template.collapse_bias.index()] = x[4];
                let bound = Bound::from_vars(vars);
                let y = template.head(g, &bound, x[0])?;
                project(g, y, c[0])
            },
        )
        .with_max_coords(64),
    );
    cases
}
