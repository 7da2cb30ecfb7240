//! Report tokenisation, the frozen text encoder and the trainable
//! projection into the shared embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volalign_autodiff::{Float, Graph, ParamId, ParamSet, Tensor, Var};

use crate::nn::{init_tensor, row_norms, Init, Linear};
use crate::train::params_sha256;
use crate::{stable_hash, Error, Result};

/// Reserved id prepended to every sequence.
pub const CLS_ID: u32 = 0;
pub const TEXT_ENCODER_COMPONENT: &str = "text_encoder";
const TEXT_ENCODER_SEED: u64 = 0x7e47_5eed_0000_0001;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Set when the report had more tokens than fit.
    pub truncated: bool,
}

/// Lowercase, split on anything that is not alphanumeric, hash each token
/// into `[1, vocab_size)` and prepend [`CLS_ID`]. `max_len` counts the CLS id.
pub fn tokenize(report: &str, max_len: usize, vocab_size: usize) -> TokenSequence {
    let lower = report.to_lowercase();
    let mut ids = vec![CLS_ID];
    let mut truncated = false;
    for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        if ids.len() >= max_len.max(1) {
            truncated = true;
            break;
        }
        let id = 1 + stable_hash(tok.as_bytes()) % (vocab_size as u64 - 1);
        ids.push(id as u32);
    }
    TokenSequence { ids, truncated }
}

/// Raw report feature from the frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Vec<f32>);

/// Report feature after projection into the shared space; unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedText(pub Vec<f32>);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            dim: 128,
            max_len: 64,
        }
    }
}

/// Frozen report encoder. Implementations never change their parameters
/// after construction.
pub trait TextEncoder: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode_tokens(&self, tokens: &TokenSequence) -> Result<TextEmbedding>;
    /// Parameters, all under the [`TEXT_ENCODER_COMPONENT`] component.
    fn parameters(&self) -> &ParamSet<f32>;

    fn encode(&self, report: &str) -> Result<TextEmbedding> {
        self.encode_tokens(&tokenize(report, self.max_len(), self.vocab_size()))
    }

    fn checksum(&self) -> String {
        params_sha256(self.parameters(), Some(TEXT_ENCODER_COMPONENT))
    }
}

/// Embedding-bag encoder: mean of token embeddings, one dense layer, tanh.
#[derive(Clone, Debug)]
pub struct BagEncoder {
    params: ParamSet<f32>,
    table: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
    cfg: TextEncoderConfig,
}

impl BagEncoder {
    /// Deterministic construction from the fixed build seed.
    pub fn new(cfg: &TextEncoderConfig) -> Result<Self> {
        if cfg.vocab_size < 2 || cfg.dim == 0 {
            return Err(Error::Config("text encoder needs vocab_size >= 2 and dim >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(TEXT_ENCODER_SEED);
        let mut ps = ParamSet::new();
        let c = TEXT_ENCODER_COMPONENT;
        ps.insert("text_encoder.embedding", c, init_tensor(&[cfg.vocab_size, cfg.dim], Init::Normal(1.0), &mut rng))?;
        ps.insert("text_encoder.dense.weight", c, init_tensor(&[cfg.dim, cfg.dim], Init::Scaled(cfg.dim), &mut rng))?;
        ps.insert("text_encoder.dense.bias", c, Tensor::zeros([cfg.dim]))?;
        Self::from_params(ps, cfg)
    }

    /// Rebuild from stored parameters (e.g. from a checkpoint).
    pub fn from_params(mut params: ParamSet<f32>, cfg: &TextEncoderConfig) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing text encoder parameter `{name}`")))?;
            if params.tensor(id).shape() != shape {
                return Err(Error::Checkpoint(format!("text encoder parameter `{name}` has the wrong shape")));
            }
            Ok(id)
        };
        let table = get("text_encoder.embedding", &[cfg.vocab_size, cfg.dim])?;
        let dense_w = get("text_encoder.dense.weight", &[cfg.dim, cfg.dim])?;
        let dense_b = get("text_encoder.dense.bias", &[cfg.dim])?;
        params.set_component_frozen(TEXT_ENCODER_COMPONENT, true);
        Ok(Self {
            params,
            table,
            dense_w,
            dense_b,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }
}

impl TextEncoder for BagEncoder {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn encode_tokens(&self, tokens: &TokenSequence) -> Result<TextEmbedding> {
        let d = self.cfg.dim;
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        if tokens.ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        // summing in sorted id order makes the bag exactly order-invariant
        let mut ids = tokens.ids.clone();
        ids.sort_unstable();
        let table = self.params.tensor(self.table).data();
        let mut mean = vec![0f32; d];
        for id in ids {
            let row = &table[id as usize * d..(id as usize + 1) * d];
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = 1.0 / tokens.ids.len() as f32;
        mean.iter_mut().for_each(|m| *m *= inv);
        let w = self.params.tensor(self.dense_w).data();
        let b = self.params.tensor(self.dense_b).data();
        let out = (0..d)
            .map(|j| {
                let s: f32 = (0..d).map(|i| mean[i] * w[i * d + j]).sum();
                (s + b[j]).tanh()
            })
            .collect();
        Ok(TextEmbedding(out))
    }

    fn parameters(&self) -> &ParamSet<f32> {
        &self.params
    }
}

/// Trainable affine map from the encoder space to the shared space,
/// followed by L2 normalisation.
#[derive(Clone, Debug)]
pub struct TextProjector {
    pub linear: Linear,
}

impl TextProjector {
    pub fn new<F: Float>(ps: &mut ParamSet<F>, component: &str, d_text: usize, d_embed: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(ps, "projector", component, d_text, d_embed, Init::Scaled(d_text), rng)?,
        })
    }

    /// Square projector with identity weights, zero bias.
    pub fn identity<F: Float>(ps: &mut ParamSet<F>, component: &str, dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(Self {
            linear: Linear::new(ps, "projector", component, dim, dim, Init::Identity, &mut rng)?,
        })
    }

    /// `text` is `[1, d_text]`; returns the unit-norm `[1, d_embed]` projection.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, text: Var) -> Result<Var> {
        let y = self.linear.forward(g, ps, text);
        if !g.value(y).all_finite() {
            return Err(Error::NonFinite("text projection"));
        }
        if row_norms(g.value(y)).iter().any(|&n| n == 0.0) {
            return Err(Error::DegenerateProjection);
        }
        Ok(g.l2_normalize_rows(y))
    }
}

/// Project one embedding outside of any training graph.
pub fn project_text<F: Float>(projector: &TextProjector, ps: &ParamSet<F>, embedding: &TextEmbedding) -> Result<ProjectedText> {
    if embedding.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("text embedding"));
    }
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new([1, embedding.0.len()], embedding.0.iter().map(|&v| F::from_f64_lossy(v as f64)).collect())?);
    let y = projector.forward(&mut g, ps, x)?;
    Ok(ProjectedText(g.value(y).data().iter().map(|v| v.to_f64_lossy() as f32).collect()))
}
