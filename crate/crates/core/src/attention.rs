//! Non-local attention blocks.
//!
//! Two variants are implemented over flattened feature maps:
//!
//! * the softmax block: attention weights are the row-softmax of the scaled
//!   query-key product, then applied to the value embedding;
//! * the scaled block: the softmax is replaced by a fixed `1/sqrt(HW)`
//!   output scale, which makes the product associative — it can be computed
//!   either with the full `HW x HW` map materialized or as
//!   `query . (key^T . value)` at cost linear in the pixel count. Both
//!   groupings produce the same output up to rounding.
//!
//! Blocks carry an output projection and an optional residual connection, so
//! a zero-initialized block is the identity map. Multi-head composition
//! splits the embedding width across heads, concatenates the per-head
//! outputs, and applies one shared projection (the vertical stack of the
//! per-head projection blocks).
//!
//! Buffer lifetimes inside the forward passes are deliberately pinned: the
//! cost model predicts the peak number of simultaneously live activation
//! elements for exactly this allocation order, and tests hold the two equal.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Attention normalization: row softmax, or a fixed `1/sqrt(HW)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    Softmax,
    Scaled,
}

impl BlockVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BlockVariant::Softmax => "softmax_nl",
            BlockVariant::Scaled => "scaled_nl",
        }
    }
}

/// Which part of the query/key embeddings feeds the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationScope {
    Full,
    MagnitudeOnly,
    DirectionOnly,
}

impl AblationScope {
    pub fn name(&self) -> &'static str {
        match self {
            AblationScope::Full => "full",
            AblationScope::MagnitudeOnly => "magnitude_only",
            AblationScope::DirectionOnly => "direction_only",
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Gaussian with variance 2 / fan_in (fan_in = the matrix's input dim).
    He,
    /// Gaussian with standard deviation 0.01.
    Gaussian0p01,
    /// All-zero weights.
    Zeros,
}

impl InitScheme {
    pub fn name(&self) -> &'static str {
        match self {
            InitScheme::He => "he",
            InitScheme::Gaussian0p01 => "gaussian_0p01",
            InitScheme::Zeros => "zeros",
        }
    }
}

/// Grouping used to evaluate the scaled block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeMode {
    /// `(query . key^T) . value`, materializing the HW x HW map.
    Materialized,
    /// `query . (key^T . value)`, never materializing the map.
    Associative,
}

impl ComputeMode {
    pub fn name(&self) -> &'static str {
        match self {
            ComputeMode::Materialized => "materialized",
            ComputeMode::Associative => "associative",
        }
    }
}

/// Spatially flattened feature map: values has shape [H*W, C] with pixel
/// (h, w) at row h*W + w.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Tensor) -> Result<FeatureMap> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidConfig {
                message: format!("feature map dims must be positive, got {height}x{width}x{channels}"),
            });
        }
        if values.shape() != [height * width, channels] {
            return Err(Error::ShapeMismatch {
                op: "FeatureMap::new",
                left: vec![height * width, channels],
                right: values.shape().to_vec(),
            });
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn random(height: usize, width: usize, channels: usize, rng: &mut Rng) -> Result<FeatureMap> {
        let values = Tensor::standard_normal(vec![height * width, channels], rng)?;
        FeatureMap::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial positions, H*W.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Query, key, value embedding matrices (C x C_e) plus the block's output
/// projection (C_e x C) for one head.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
}

impl EmbeddingSet {
    pub fn new(w_query: Tensor, w_key: Tensor, w_value: Tensor, w_out: Tensor) -> Result<EmbeddingSet> {
        let (c, e) = w_query.matrix_dims("EmbeddingSet::new")?;
        for w in [&w_key, &w_value] {
            if w.shape() != [c, e] {
                return Err(Error::ShapeMismatch {
                    op: "EmbeddingSet::new",
                    left: vec![c, e],
                    right: w.shape().to_vec(),
                });
            }
        }
        if w_out.shape() != [e, c] {
            return Err(Error::ShapeMismatch {
                op: "EmbeddingSet::new",
                left: vec![e, c],
                right: w_out.shape().to_vec(),
            });
        }
        Ok(EmbeddingSet {
            w_query,
            w_key,
            w_value,
            w_out,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_query.shape()[0]
    }

    pub fn embed_channels(&self) -> usize {
        self.w_query.shape()[1]
    }
}

/// Block configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    pub variant: BlockVariant,
    pub scope: AblationScope,
    pub channels: usize,
    pub embed_channels: usize,
    pub heads: usize,
    pub init: InitScheme,
    pub residual: bool,
}

impl AttentionConfig {
    pub fn new(variant: BlockVariant, channels: usize, embed_channels: usize) -> AttentionConfig {
        AttentionConfig {
            variant,
            scope: AblationScope::Full,
            channels,
            embed_channels,
            heads: 1,
            init: InitScheme::He,
            residual: true,
        }
    }

    /// Multi-head configuration with the per-head embedding width C / heads.
    pub fn multi_head(variant: BlockVariant, channels: usize, heads: usize) -> Result<AttentionConfig> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::HeadsDontDivide { channels, heads });
        }
        Ok(AttentionConfig {
            variant,
            scope: AblationScope::Full,
            channels,
            embed_channels: channels / heads,
            heads,
            init: InitScheme::He,
            residual: true,
        })
    }

    pub fn with_init(mut self, init: InitScheme) -> AttentionConfig {
        self.init = init;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> AttentionConfig {
        self.residual = residual;
        self
    }

    pub fn with_scope(mut self, scope: AblationScope) -> AttentionConfig {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed_channels == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig {
                message: format!(
                    "channels={}, embed_channels={}, heads={} must all be positive",
                    self.channels, self.embed_channels, self.heads
                ),
            });
        }
        if self.heads > 1 {
            if !self.channels.is_multiple_of(self.heads) {
                return Err(Error::HeadsDontDivide {
                    channels: self.channels,
                    heads: self.heads,
                });
            }
            if self.embed_channels != self.channels / self.heads {
                return Err(Error::InvalidConfig {
                    message: format!(
                        "multi-head embed_channels must be channels/heads = {}, got {}",
                        self.channels / self.heads,
                        self.embed_channels
                    ),
                });
            }
        }
        Ok(())
    }
}

/// HW x HW matrix of query-to-key attention values.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    values: Tensor,
    normalized: bool,
}

impl AttentionMap {
    /// Wraps a map; when `normalized`, every row must sum to 1 within 1e-10.
    pub fn new(values: Tensor, normalized: bool) -> Result<AttentionMap> {
        let (m, n) = values.matrix_dims("AttentionMap::new")?;
        if m != n {
            return Err(Error::ShapeMismatch {
                op: "AttentionMap::new",
                left: vec![m, m],
                right: vec![m, n],
            });
        }
        if normalized {
            for i in 0..m {
                let sum: f64 = values.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidConfig {
                        message: format!("normalized map row {i} sums to {sum}"),
                    });
                }
            }
        }
        Ok(AttentionMap { values, normalized })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Number of pixels (map side length).
    pub fn side(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Samples the four weight matrices for one head. Draw order is fixed
/// (w_query, w_key, w_value row-major, then w_out) so that a seed pins every
/// value. He initialization uses each matrix's own input dimension as fan-in.
pub fn init_embeddings(cfg: &AttentionConfig, rng: &mut Rng) -> Result<EmbeddingSet> {
    cfg.validate()?;
    let c = cfg.channels;
    let e = cfg.embed_channels;
    let sample = |shape: Vec<usize>, rng: &mut Rng| -> Result<Tensor> {
        let fan_in = shape[0] as f64;
        match cfg.init {
            InitScheme::He => {
                let std = (2.0 / fan_in).sqrt();
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| rng.normal(0.0, std)).collect();
                Tensor::new(shape, data)
            }
            InitScheme::Gaussian0p01 => {
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| rng.normal(0.0, 0.01)).collect();
                Tensor::new(shape, data)
            }
            InitScheme::Zeros => Tensor::zeros(shape),
        }
    };
    let w_query = sample(vec![c, e], rng)?;
    let w_key = sample(vec![c, e], rng)?;
    let w_value = sample(vec![c, e], rng)?;
    let w_out = sample(vec![e, c], rng)?;
    EmbeddingSet::new(w_query, w_key, w_value, w_out)
}

/// Samples one embedding set per head, in head order.
pub fn init_heads(cfg: &AttentionConfig, rng: &mut Rng) -> Result<Vec<EmbeddingSet>> {
    cfg.validate()?;
    (0..cfg.heads).map(|_| init_embeddings(cfg, rng)).collect()
}

/// Linear embedding of a flattened feature map: `x.values . w`, the matmul
/// form of a 1x1 convolution.
pub fn embed(x: &FeatureMap, w: &Tensor) -> Result<Tensor> {
    x.values().matmul(w)
}

/// Attention logits `(1/sqrt(C_e)) q . k^T`, where C_e is the embedding
/// width of `q`.
pub fn logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, e) = q.matrix_dims("logits")?;
    let (_, e2) = k.matrix_dims("logits")?;
    if e != e2 {
        return Err(Error::ShapeMismatch {
            op: "logits",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    q.matmul_nt_scaled(k, 1.0 / (e as f64).sqrt())
}

/// Row norms as an HW x 1 column.
pub fn project_magnitude(e: &Tensor) -> Result<Tensor> {
    let (m, _) = e.matrix_dims("project_magnitude")?;
    let norms = e.row_norms()?;
    Tensor::new(vec![m, 1], norms.data().to_vec())
}

/// Rows rescaled to unit norm. Rows with norm below 1e-12 are refused; the
/// quotient is undefined there and silently smoothing it would change what
/// the ablation measures.
pub fn project_direction(e: &Tensor) -> Result<Tensor> {
    let (m, n) = e.matrix_dims("project_direction")?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = e.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateRow { row: i, norm });
        }
        out.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![m, n], out)
}

fn check_forward_inputs(x: &FeatureMap, emb: &EmbeddingSet, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    if x.channels() != cfg.channels || emb.channels() != cfg.channels {
        return Err(Error::InvalidConfig {
            message: format!(
                "channel mismatch: x has {}, embeddings {}, config {}",
                x.channels(),
                emb.channels(),
                cfg.channels
            ),
        });
    }
    if emb.embed_channels() != cfg.embed_channels {
        return Err(Error::InvalidConfig {
            message: format!(
                "embed-channel mismatch: embeddings {}, config {}",
                emb.embed_channels(),
                cfg.embed_channels
            ),
        });
    }
    Ok(())
}

/// One softmax head: returns the normalized map and the aggregated core
/// output (HW x C_e). Query and key buffers are released before the value
/// embedding is built; the softmax reuses the logit buffer.
fn head_core_softmax(x: &Tensor, emb: &EmbeddingSet) -> Result<(AttentionMap, Tensor)> {
    let scale = 1.0 / (emb.embed_channels() as f64).sqrt();
    let probs = {
        let q = x.matmul(&emb.w_query)?;
        let k = x.matmul(&emb.w_key)?;
        let l = q.matmul_nt_scaled(&k, scale)?;
        drop(q);
        drop(k);
        Tensor::softmax_rows_in_place(l)
    };
    let map = AttentionMap::new(probs, true)?;
    let value = x.matmul(&emb.w_value)?;
    let core = map.values().matmul(&value)?;
    drop(value);
    Ok((map, core))
}

/// One scaled head: returns the core output (HW x C_e). `output_scale` is
/// `1/sqrt(HW)` in the standard block; the no-scale ablation passes 1.
fn head_core_scaled(
    x: &Tensor,
    emb: &EmbeddingSet,
    mode: ComputeMode,
    output_scale: f64,
) -> Result<Tensor> {
    let logit_scale = 1.0 / (emb.embed_channels() as f64).sqrt();
    match mode {
        ComputeMode::Associative => {
            let kv = {
                let k = x.matmul(&emb.w_key)?;
                let v = x.matmul(&emb.w_value)?;
                k.matmul_tn(&v)?
            };
            let q = x.matmul(&emb.w_query)?;
            q.matmul_scaled(&kv, logit_scale * output_scale)
        }
        ComputeMode::Materialized => {
            let l = {
                let q = x.matmul(&emb.w_query)?;
                let k = x.matmul(&emb.w_key)?;
                let l = q.matmul_nt_scaled(&k, logit_scale)?;
                Tensor::scale_in_place(l, output_scale)
            };
            let v = x.matmul(&emb.w_value)?;
            l.matmul(&v)
        }
    }
}

fn finish_single_head(
    x: &FeatureMap,
    emb: &EmbeddingSet,
    cfg: &AttentionConfig,
    core: Tensor,
) -> Result<FeatureMap> {
    let mut y = core.matmul(&emb.w_out)?;
    drop(core);
    if cfg.residual {
        y = Tensor::add_in_place(y, x.values())?;
    }
    FeatureMap::new(x.height(), x.width(), cfg.channels, y)
}

/// Softmax block forward. Returns the output map and the normalized
/// attention map.
pub fn softmax_nl_forward(
    x: &FeatureMap,
    emb: &EmbeddingSet,
    cfg: &AttentionConfig,
) -> Result<(FeatureMap, AttentionMap)> {
    check_forward_inputs(x, emb, cfg)?;
    if cfg.variant != BlockVariant::Softmax {
        return Err(Error::InvalidConfig {
            message: "softmax_nl_forward requires the softmax variant".into(),
        });
    }
    let (map, core) = head_core_softmax(x.values(), emb)?;
    let y = finish_single_head(x, emb, cfg, core)?;
    Ok((y, map))
}

/// Scaled block forward in either grouping; the two modes agree within
/// rounding.
pub fn scaled_nl_forward(
    x: &FeatureMap,
    emb: &EmbeddingSet,
    cfg: &AttentionConfig,
    mode: ComputeMode,
) -> Result<FeatureMap> {
    check_forward_inputs(x, emb, cfg)?;
    if cfg.variant != BlockVariant::Scaled {
        return Err(Error::InvalidConfig {
            message: "scaled_nl_forward requires the scaled variant".into(),
        });
    }
    let output_scale = 1.0 / (x.pixels() as f64).sqrt();
    let core = head_core_scaled(x.values(), emb, mode, output_scale)?;
    finish_single_head(x, emb, cfg, core)
}

/// Logits with the configured ablation applied to the embedded queries and
/// keys. The magnitude projection yields width-1 embeddings, so its logit
/// scale is 1; the direction projection keeps the embedding width and its
/// 1/sqrt(C_e) scale.
fn scoped_logits(x: &FeatureMap, emb: &EmbeddingSet, scope: AblationScope) -> Result<Tensor> {
    let q_e = embed(x, &emb.w_query)?;
    let k_e = embed(x, &emb.w_key)?;
    match scope {
        AblationScope::Full => logits(&q_e, &k_e),
        AblationScope::MagnitudeOnly => {
            let q = project_magnitude(&q_e)?;
            let k = project_magnitude(&k_e)?;
            logits(&q, &k)
        }
        AblationScope::DirectionOnly => {
            let q = project_direction(&q_e)?;
            let k = project_direction(&k_e)?;
            logits(&q, &k)
        }
    }
}

/// Forward pass with the magnitude-only or direction-only attention logits.
/// The scaled variant is evaluated in materialized form (the projections are
/// not linear in the embeddings, so no associative shortcut exists).
pub fn ablated_forward(
    x: &FeatureMap,
    emb: &EmbeddingSet,
    cfg: &AttentionConfig,
) -> Result<FeatureMap> {
    check_forward_inputs(x, emb, cfg)?;
    if cfg.scope == AblationScope::Full {
        return Err(Error::InvalidConfig {
            message: "ablated_forward requires magnitude_only or direction_only scope".into(),
        });
    }
    let l = scoped_logits(x, emb, cfg.scope)?;
    let core = match cfg.variant {
        BlockVariant::Softmax => {
            let a = Tensor::softmax_rows_in_place(l);
            let v = embed(x, &emb.w_value)?;
            a.matmul(&v)?
        }
        BlockVariant::Scaled => {
            let scaled = Tensor::scale_in_place(l, 1.0 / (x.pixels() as f64).sqrt());
            let v = embed(x, &emb.w_value)?;
            scaled.matmul(&v)?
        }
    };
    finish_single_head(x, emb, cfg, core)
}

fn check_heads(x: &FeatureMap, heads: &[EmbeddingSet], cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    if heads.len() != cfg.heads {
        return Err(Error::InvalidConfig {
            message: format!("expected {} head(s), got {}", cfg.heads, heads.len()),
        });
    }
    if x.channels() != cfg.channels {
        return Err(Error::InvalidConfig {
            message: format!("x has {} channels, config {}", x.channels(), cfg.channels),
        });
    }
    for (i, emb) in heads.iter().enumerate() {
        if emb.channels() != cfg.channels || emb.embed_channels() != cfg.embed_channels {
            return Err(Error::InvalidConfig {
                message: format!(
                    "head {i} is {}x{}, config requires {}x{}",
                    emb.channels(),
                    emb.embed_channels(),
                    cfg.channels,
                    cfg.embed_channels
                ),
            });
        }
    }
    Ok(())
}

/// Multi-head forward used by both public entry points. Per-head outputs are
/// kept until concatenation; softmax heads also keep their attention maps
/// live for the whole pass, which is what makes softmax peak memory grow
/// linearly with the head count.
pub(crate) fn multi_head_internal(
    x: &FeatureMap,
    heads: &[EmbeddingSet],
    cfg: &AttentionConfig,
    mode: ComputeMode,
    output_scale: f64,
) -> Result<(FeatureMap, Vec<AttentionMap>)> {
    check_heads(x, heads, cfg)?;
    if cfg.scope != AblationScope::Full {
        return Err(Error::InvalidConfig {
            message: "multi-head forward supports the full scope only".into(),
        });
    }
    let mut maps = Vec::new();
    let mut cores = Vec::with_capacity(heads.len());
    for emb in heads {
        match cfg.variant {
            BlockVariant::Softmax => {
                let (map, core) = head_core_softmax(x.values(), emb)?;
                maps.push(map);
                cores.push(core);
            }
            BlockVariant::Scaled => {
                cores.push(head_core_scaled(x.values(), emb, mode, output_scale)?);
            }
        }
    }
    let core_refs: Vec<&Tensor> = cores.iter().collect();
    let cat = Tensor::hstack(&core_refs)?;
    drop(core_refs);
    drop(cores);
    let w_blocks: Vec<&Tensor> = heads.iter().map(|h| &h.w_out).collect();
    let mut y = cat.matmul_blockrows(&w_blocks)?;
    drop(cat);
    if cfg.residual {
        y = Tensor::add_in_place(y, x.values())?;
    }
    Ok((FeatureMap::new(x.height(), x.width(), cfg.channels, y)?, maps))
}

/// Multi-head block forward. `mode` selects the grouping for the scaled
/// variant and is ignored for softmax.
pub fn multi_head_forward(
    x: &FeatureMap,
    heads: &[EmbeddingSet],
    cfg: &AttentionConfig,
    mode: ComputeMode,
) -> Result<FeatureMap> {
    let output_scale = 1.0 / (x.pixels() as f64).sqrt();
    let (y, _maps) = multi_head_internal(x, heads, cfg, mode, output_scale)?;
    Ok(y)
}

/// Multi-head forward that also returns the per-head attention maps
/// (softmax variant only; empty for scaled).
pub fn multi_head_forward_with_maps(
    x: &FeatureMap,
    heads: &[EmbeddingSet],
    cfg: &AttentionConfig,
    mode: ComputeMode,
) -> Result<(FeatureMap, Vec<AttentionMap>)> {
    let output_scale = 1.0 / (x.pixels() as f64).sqrt();
    multi_head_internal(x, heads, cfg, mode, output_scale)
}
