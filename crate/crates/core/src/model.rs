//! Full classifier: band-feature embedding, positional table, a stack of
//! pre-norm attention blocks with the depth-shared adjacency pair, mean
//! pooling over channels, and a linear head. Also the versioned checkpoint
//! format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{faa_forward, AdjacencyPair, FaaParams, HeadPartition, QkvKind};
use crate::layers::{dropout, Activation, Embedding, ForwardError, LayerNorm, Linear, Positional};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, NormMode, Tape, TapeError, Targets};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FATCKPT1";

/// Stream label reserved for parameter initialization.
const INIT_STREAM: u64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Forward(ForwardError::Numeric(e))
    }
}

/// Which projector produces queries, keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QkvLayer {
    /// Fourier analysis layer: periodic cos/sin branch plus affine branch.
    Fal,
    /// Baseline variant with a nonlinearity on the affine branch.
    Fan,
    /// Plain linear projection; requires a zero periodic-head ratio.
    Linear,
}

fn default_embed_dim() -> usize {
    256
}
fn default_heads() -> usize {
    8
}
fn default_depth() -> usize {
    6
}
fn default_p_ratio() -> f64 {
    0.25
}
fn default_true() -> bool {
    true
}
fn default_bands() -> usize {
    5
}
fn default_ffn_mult() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_qkv() -> QkvLayer {
    QkvLayer::Fal
}
fn default_fan_activation() -> Activation {
    Activation::Gelu
}

/// Architecture hyperparameters. Serialized into checkpoints and echoed by
/// the command-line tools, so every field has a serde default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FatConfig {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Fraction of heads operating on the periodic (cos/sin) features.
    #[serde(default = "default_p_ratio")]
    pub p_ratio: f64,
    /// Enables the gated additive adjacency term in attention scores.
    #[serde(default = "default_true")]
    pub use_adjacency: bool,
    pub channels: usize,
    #[serde(default = "default_bands")]
    pub bands: usize,
    pub n_classes: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_qkv")]
    pub qkv_layer: QkvLayer,
    /// Affine-branch activation when `qkv_layer` is the baseline variant.
    #[serde(default = "default_fan_activation")]
    pub fan_activation: Activation,
    #[serde(default = "default_true")]
    pub positional: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FatConfig {
    /// A small default used by tests and as a starting point for overrides.
    pub fn toy(channels: usize, n_classes: usize) -> Self {
        FatConfig {
            embed_dim: 16,
            heads: 2,
            depth: 2,
            p_ratio: 0.5,
            use_adjacency: true,
            channels,
            bands: 5,
            n_classes,
            ffn_mult: 4,
            dropout: 0.0,
            qkv_layer: QkvLayer::Fal,
            fan_activation: Activation::Gelu,
            positional: true,
            seed: 0,
        }
    }

    pub fn partition(&self) -> Result<HeadPartition, ModelError> {
        HeadPartition::new(self.embed_dim, self.heads, self.p_ratio).map_err(ModelError::Config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim must be positive and even, got {}", self.embed_dim));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.bands == 0 {
            return fail("bands must be at least 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        self.partition()?;
        if self.qkv_layer == QkvLayer::Linear && self.p_ratio != 0.0 {
            return fail("linear QKV cannot serve periodic heads; set p_ratio to 0".into());
        }
        Ok(())
    }

    fn qkv_kind(&self) -> QkvKind {
        match self.qkv_layer {
            QkvLayer::Fal => QkvKind::Fal,
            QkvLayer::Fan => QkvKind::Fan(self.fan_activation),
            QkvLayer::Linear => QkvKind::Linear,
        }
    }
}

/// One pre-norm residual block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub faa: FaaParams,
    pub ln2: LayerNorm,
    pub ffn_w1: Linear,
    pub ffn_w2: Linear,
}

pub struct FatModel<S: Scalar> {
    pub cfg: FatConfig,
    pub part: HeadPartition,
    pub params: ParamSet<S>,
    pub embedding: Embedding,
    pub positional: Positional,
    /// Present when the configuration enables the adjacency term; the single
    /// pair is referenced by every block.
    pub adjacency: Option<AdjacencyPair>,
    pub blocks: Vec<Block>,
    pub classifier: Linear,
}

/// Deterministically initialize a model from its configuration; the same
/// configuration (seed included) always yields bitwise-identical parameters.
pub fn build_model<S: Scalar>(cfg: &FatConfig) -> Result<FatModel<S>, ModelError> {
    cfg.validate()?;
    let part = cfg.partition()?;
    let mut rng = Rng::derive(cfg.seed, INIT_STREAM);
    let mut ps = ParamSet::new();
    let embedding = Embedding::init(&mut ps, "embed", cfg.bands, cfg.embed_dim, &mut rng);
    let positional = Positional::init(&mut ps, "pos", cfg.channels, cfg.embed_dim, cfg.positional);
    let adjacency = cfg
        .use_adjacency
        .then(|| AdjacencyPair::init(&mut ps, "adj", cfg.channels));
    let mut blocks = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let ln1 = LayerNorm::init(&mut ps, &format!("block{d}.ln1"), cfg.embed_dim);
        let faa = FaaParams::init(&mut ps, &format!("block{d}.faa"), &part, cfg.qkv_kind(), &mut rng);
        let ln2 = LayerNorm::init(&mut ps, &format!("block{d}.ln2"), cfg.embed_dim);
        let ffn_w1 = Linear::init(
            &mut ps,
            &format!("block{d}.ffn_w1"),
            cfg.embed_dim,
            cfg.ffn_mult * cfg.embed_dim,
            true,
            &mut rng,
        );
        let ffn_w2 = Linear::init(
            &mut ps,
            &format!("block{d}.ffn_w2"),
            cfg.ffn_mult * cfg.embed_dim,
            cfg.embed_dim,
            true,
            &mut rng,
        );
        blocks.push(Block { ln1, faa, ln2, ffn_w1, ffn_w2 });
    }
    let classifier = Linear::init(&mut ps, "classifier", cfg.embed_dim, cfg.n_classes, true, &mut rng);
    Ok(FatModel { cfg: cfg.clone(), part, params: ps, embedding, positional, adjacency, blocks, classifier })
}

/// Forward pass over a `[batch, channels, bands]` input producing
/// `[batch, n_classes]` logits. Train mode updates batch-norm running
/// statistics and applies dropout using `rng`.
pub fn fat_forward<S: Scalar>(
    model: &mut FatModel<S>,
    tape: &mut Tape<S>,
    x: NodeId,
    mode: NormMode,
    rng: &mut Rng,
) -> Result<NodeId, ModelError> {
    let FatModel { cfg, part, params, embedding, positional, adjacency, blocks, classifier } = model;
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.channels {
        return Err(ModelError::Forward(ForwardError::Shape(format!(
            "expected [batch, {}, {}] input, got {:?}",
            cfg.channels, cfg.bands, shape
        ))));
    }
    let mut h = embedding.forward(tape, params, x, mode)?;
    h = positional.forward(tape, params, h);
    for block in blocks.iter() {
        let normed = block.ln1.forward(tape, params, h)?;
        let att = faa_forward(
            tape,
            params,
            normed,
            &block.faa,
            adjacency.as_ref(),
            part,
            cfg.dropout,
            mode,
            rng,
        )?;
        h = tape.add(h, att);
        let normed = block.ln2.forward(tape, params, h)?;
        let f = block.ffn_w1.forward(tape, params, normed);
        let f = tape.relu(f);
        let f = dropout(tape, rng, f, cfg.dropout, mode);
        let f = block.ffn_w2.forward(tape, params, f);
        h = tape.add(h, f);
    }
    let pooled = tape.mean_axis(h, 1);
    Ok(classifier.forward(tape, params, pooled))
}

/// Forward plus cross-entropy; returns `(loss, logits)`.
pub fn fat_loss<S: Scalar>(
    model: &mut FatModel<S>,
    tape: &mut Tape<S>,
    x: NodeId,
    targets: Targets<S>,
    mode: NormMode,
    rng: &mut Rng,
) -> Result<(NodeId, NodeId), ModelError> {
    let logits = fat_forward(model, tape, x, mode, rng)?;
    let loss = tape.cross_entropy(logits, targets)?;
    Ok((loss, logits))
}

/// Number of trainable scalars (running statistics excluded).
pub fn count_params<S: Scalar>(model: &FatModel<S>) -> usize {
    model.params.count_trainable()
}

// ---- checkpoints ---------------------------------------------------------

/// Write magic, length-prefixed config JSON, then every parameter entry
/// (running statistics included) in declaration order as little-endian f32.
pub fn save_checkpoint<S: Scalar>(model: &FatModel<S>, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let cfg_json = serde_json::to_vec(&model.cfg).expect("config serializes");
    w.write_all(&(cfg_json.len() as u64).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    for id in model.params.ids() {
        for &v in model.params.get(id).data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint. Storage is 32-bit, so loading into
/// `f32` round-trips bit-exactly.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<FatModel<S>, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint produced by this tool",
            magic
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| ModelError::Checkpoint("truncated config length".into()))?;
    let cfg_len = u64::from_le_bytes(len_bytes) as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json)
        .map_err(|_| ModelError::Checkpoint("truncated config".into()))?;
    let cfg: FatConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| ModelError::Checkpoint(format!("config does not parse: {e}")))?;
    let mut model = build_model::<S>(&cfg)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let t = model.params.get_mut(id);
        for slot in t.data_mut().iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| ModelError::Checkpoint("truncated parameter data".into()))?;
            *slot = S::of_f32(f32::from_le_bytes(b));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}
