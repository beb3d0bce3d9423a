//! Page embeddings: textual and visual encoders, early fusion, context
//! windowing and the page-index baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::document::Page;
use crate::error::{Error, Result};
use crate::layers::{glorot, uniform, Linear};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// How the textual and visual page vectors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `[t | v]` projected back to the page dimension.
    Concat,
    /// `t + v`.
    Sum,
    /// `l * t + (1 - l) * v` with one learned `l` in (0, 1).
    ScalarWeighted,
    /// Same with a learned weight per dimension.
    VectorWeighted,
    /// Scalar weight computed from the visual vector, `l = sigmoid(u . v + b)`.
    GatedWeighted,
    /// Text channel only.
    NoneText,
    /// Visual channel only.
    NoneVisual,
    /// Hash of the page position only.
    BaselineIndex,
}

impl Fusion {
    pub const ALL: [Fusion; 8] = [
        Fusion::BaselineIndex,
        Fusion::NoneText,
        Fusion::NoneVisual,
        Fusion::Concat,
        Fusion::Sum,
        Fusion::ScalarWeighted,
        Fusion::VectorWeighted,
        Fusion::GatedWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
            Fusion::ScalarWeighted => "scalar_weighted",
            Fusion::VectorWeighted => "vector_weighted",
            Fusion::GatedWeighted => "gated_weighted",
            Fusion::NoneText => "none_text",
            Fusion::NoneVisual => "none_visual",
            Fusion::BaselineIndex => "baseline_index",
        }
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, Fusion::NoneVisual | Fusion::BaselineIndex)
    }

    pub fn uses_visual(self) -> bool {
        !matches!(self, Fusion::NoneText | Fusion::BaselineIndex)
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub page_dim: usize,
    pub word_dim: usize,
    pub max_tokens: usize,
    pub hash_buckets: usize,
    /// One-hot position buckets appended to every token vector.
    pub position_buckets: usize,
    pub attention_hidden: usize,
    pub visual_input_dim: usize,
    pub visual_hidden: usize,
    pub fusion: Fusion,
    pub window_radius: usize,
    pub context_depth: usize,
    pub maxout_pieces: usize,
    pub index_buckets: usize,
    pub dropout: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            page_dim: 96,
            word_dim: 100,
            max_tokens: 512,
            hash_buckets: 1 << 16,
            position_buckets: 8,
            attention_hidden: 32,
            visual_input_dim: 64,
            visual_hidden: 512,
            fusion: Fusion::Sum,
            window_radius: 1,
            context_depth: 2,
            maxout_pieces: 3,
            index_buckets: 4096,
            dropout: 0.2,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("embedding: {m}")));
        if self.page_dim == 0 {
            return fail("page_dim must be positive");
        }
        if self.maxout_pieces < 2 {
            return fail("maxout_pieces must be at least 2");
        }
        if self.hash_buckets == 0 || self.index_buckets == 0 || self.max_tokens == 0 {
            return fail("bucket counts and max_tokens must be positive");
        }
        if self.position_buckets > self.max_tokens {
            return fail("position_buckets cannot exceed max_tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    fn token_dim(&self) -> usize {
        self.word_dim + self.position_buckets
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn token_bucket(token: &str, buckets: usize) -> usize {
    (fnv1a(token.as_bytes()) % buckets as u64) as usize
}

pub fn index_bucket(index: usize, buckets: usize) -> usize {
    (fnv1a(&(index as u64).to_le_bytes()) % buckets as u64) as usize
}

/// Hashed token embeddings, attention pooling and a final linear layer.
/// The embedding table starts at zero, so buckets that never receive a
/// gradient keep contributing zero vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub table: ParamId,
    pub attention: ParamId,
    pub score: ParamId,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisualEncoder {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionParams {
    Concat { projection: Linear },
    Sum,
    ScalarWeighted { logit: ParamId },
    VectorWeighted { logit: ParamId },
    GatedWeighted { gate: Linear },
    NoneText,
    NoneVisual,
    BaselineIndex { table: ParamId },
}

/// Intermediate nodes of one embedding pass.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingNodes {
    pub text: Option<NodeId>,
    pub visual: Option<NodeId>,
    pub fused: NodeId,
    pub contextual: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModule {
    pub config: EmbeddingConfig,
    pub text: Option<TextEncoder>,
    pub visual: Option<VisualEncoder>,
    pub fusion: FusionParams,
    pub context: Vec<Linear>,
}

impl EmbeddingModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: EmbeddingConfig) -> Result<Self> {
        config.validate()?;
        let d = config.page_dim;
        let f = config.fusion;
        let text = f.uses_text().then(|| {
            let td = config.token_dim();
            TextEncoder {
                table: store.add(Tensor::new(
                    "text.table",
                    vec![config.hash_buckets, config.word_dim],
                    vec![0.0; config.hash_buckets * config.word_dim],
                )),
                attention: store.add(Tensor::new(
                    "text.attention",
                    vec![td, config.attention_hidden],
                    glorot(rng, td, config.attention_hidden),
                )),
                score: store.add(Tensor::new(
                    "text.score",
                    vec![config.attention_hidden, 1],
                    glorot(rng, config.attention_hidden, 1),
                )),
                output: Linear::new(store, rng, "text.output", td, d),
            }
        });
        let visual = f.uses_visual().then(|| VisualEncoder {
            first: Linear::new(store, rng, "visual.first", config.visual_input_dim, config.visual_hidden),
            second: Linear::new(store, rng, "visual.second", config.visual_hidden, d),
        });
        let fusion = match f {
            Fusion::Concat => FusionParams::Concat { projection: Linear::new(store, rng, "fusion.concat", 2 * d, d) },
            Fusion::Sum => FusionParams::Sum,
            Fusion::ScalarWeighted => {
                FusionParams::ScalarWeighted { logit: store.add(Tensor::new("fusion.lambda", vec![1, 1], vec![0.0])) }
            }
            Fusion::VectorWeighted => {
                FusionParams::VectorWeighted { logit: store.add(Tensor::new("fusion.lambda", vec![1, d], vec![0.0; d])) }
            }
            Fusion::GatedWeighted => FusionParams::GatedWeighted { gate: Linear::new(store, rng, "fusion.gate", d, 1) },
            Fusion::NoneText => FusionParams::NoneText,
            Fusion::NoneVisual => FusionParams::NoneVisual,
            Fusion::BaselineIndex => FusionParams::BaselineIndex {
                table: store.add(Tensor::new(
                    "baseline.table",
                    vec![config.index_buckets, d],
                    uniform(rng, config.index_buckets * d, 0.1),
                )),
            },
        };
        let width = (2 * config.window_radius + 1) * d;
        let context = (0..config.context_depth)
            .map(|i| Linear::new(store, rng, &format!("context.{i}"), width, d * config.maxout_pieces))
            .collect();
        Ok(EmbeddingModule { config, text, visual, fusion, context })
    }

    /// Textual page vectors (`pages x page_dim`).
    pub fn encode_text(&self, tape: &mut Tape, pages: &[Page]) -> Result<NodeId> {
        let enc = self.text.ok_or_else(|| Error::Config("model has no text encoder".into()))?;
        let cfg = &self.config;
        let pb = cfg.position_buckets;
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = vec![0];
        for page in pages {
            for (pos, tok) in page.tokens.iter().take(cfg.max_tokens).enumerate() {
                rows.push(token_bucket(tok, cfg.hash_buckets));
                let mut onehot = vec![0.0; pb];
                if pb > 0 {
                    onehot[pos * pb / cfg.max_tokens] = 1.0;
                }
                positions.extend(onehot);
            }
            offsets.push(rows.len());
        }
        let n_tokens = rows.len();
        let emb = tape.gather(enc.table, &rows)?;
        let emb = tape.dropout(emb, cfg.dropout);
        let pos = tape.constant(n_tokens, pb, positions);
        let tokens = tape.concat_cols(&[emb, pos])?;
        let w = tape.param(enc.attention);
        let u = tape.param(enc.score);
        let hidden = tape.matmul(tokens, w)?;
        let hidden = tape.tanh(hidden);
        let scores = tape.matmul(hidden, u)?;
        let pooled = tape.attention_pool(tokens, scores, &offsets)?;
        enc.output.forward(tape, pooled)
    }

    /// Visual page vectors: dropout, linear, relu, linear.
    pub fn encode_visual(&self, tape: &mut Tape, pages: &[Page]) -> Result<NodeId> {
        let enc = self.visual.ok_or_else(|| Error::Config("model has no visual encoder".into()))?;
        let v = self.config.visual_input_dim;
        let mut data = Vec::with_capacity(pages.len() * v);
        for p in pages {
            if p.visual.len() != v {
                return Err(Error::Shape { op: "encode_visual", shapes: vec![(p.index, p.visual.len()), (1, v)] });
            }
            data.extend_from_slice(&p.visual);
        }
        let x = tape.constant(pages.len(), v, data);
        let x = tape.dropout(x, self.config.dropout);
        let h = enc.first.forward(tape, x)?;
        let h = tape.relu(h);
        enc.second.forward(tape, h)
    }

    pub fn baseline_index_embed(&self, tape: &mut Tape, indices: &[usize]) -> Result<NodeId> {
        let FusionParams::BaselineIndex { table } = self.fusion else {
            return Err(Error::Config("model is not the index baseline".into()));
        };
        let rows: Vec<usize> = indices.iter().map(|&i| index_bucket(i, self.config.index_buckets)).collect();
        tape.gather(table, &rows)
    }

    /// Combines the two channels according to the configured method.
    pub fn fuse(&self, tape: &mut Tape, text: Option<NodeId>, visual: Option<NodeId>) -> Result<NodeId> {
        let missing = || Error::Config("fusion input missing".into());
        let both = || Ok::<_, Error>((text.ok_or_else(missing)?, visual.ok_or_else(missing)?));
        match self.fusion {
            FusionParams::Concat { projection } => {
                let (t, v) = both()?;
                let c = tape.concat_cols(&[t, v])?;
                projection.forward(tape, c)
            }
            FusionParams::Sum => {
                let (t, v) = both()?;
                tape.add(t, v)
            }
            FusionParams::ScalarWeighted { logit } | FusionParams::VectorWeighted { logit } => {
                let (t, v) = both()?;
                let l = tape.param(logit);
                let lambda = tape.sigmoid(l);
                convex(tape, t, v, lambda)
            }
            FusionParams::GatedWeighted { gate } => {
                let (t, v) = both()?;
                let g = gate.forward(tape, v)?;
                let lambda = tape.sigmoid(g);
                convex(tape, t, v, lambda)
            }
            FusionParams::NoneText => text.ok_or_else(missing),
            FusionParams::NoneVisual => visual.ok_or_else(missing),
            FusionParams::BaselineIndex { .. } => Err(Error::Config("baseline embeddings are not fused".into())),
        }
    }

    /// Window concatenation, linear map, maxout and a residual connection,
    /// repeated `context_depth` times.
    pub fn contextualize(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut x = x;
        for layer in &self.context {
            let w = tape.window(x, self.config.window_radius);
            let h = layer.forward(tape, w)?;
            let m = tape.maxout(h, self.config.maxout_pieces)?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    pub fn forward(&self, tape: &mut Tape, pages: &[Page]) -> Result<EmbeddingNodes> {
        if let FusionParams::BaselineIndex { .. } = self.fusion {
            let idx: Vec<usize> = pages.iter().map(|p| p.index).collect();
            let fused = self.baseline_index_embed(tape, &idx)?;
            let contextual = self.contextualize(tape, fused)?;
            return Ok(EmbeddingNodes { text: None, visual: None, fused, contextual });
        }
        let text = self.text.is_some().then(|| self.encode_text(tape, pages)).transpose()?;
        let visual = self.visual.is_some().then(|| self.encode_visual(tape, pages)).transpose()?;
        let fused = self.fuse(tape, text, visual)?;
        let contextual = self.contextualize(tape, fused)?;
        Ok(EmbeddingNodes { text, visual, fused, contextual })
    }
}

/// `lambda * t + (1 - lambda) * v`, computed as `v + lambda * (t - v)`.
fn convex(tape: &mut Tape, t: NodeId, v: NodeId, lambda: NodeId) -> Result<NodeId> {
    let diff = tape.sub(t, v)?;
    let scaled = tape.mul(diff, lambda)?;
    tape.add(v, scaled)
}
