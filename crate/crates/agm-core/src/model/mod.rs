//! A small transformer encoder trained from scratch, with a classification
//! head and a masked-language-model head sharing the same encoder weights.
//!
//! Both heads read the same encoder parameters: an optimizer step driven by
//! either head's loss moves every downstream output. The classification head
//! reads the final hidden state at the CLS position; the MLM head reads
//! every position.

mod checkpoint;
mod encoder;
mod infer;

pub use encoder::{
    ce_loss_taped, classify_logits_taped, encode_taped, encode_taped_from_embeddings,
    mlm_logits_taped, mlm_loss_taped, token_embeddings, Dropout, TapedEncoding, TapedParams,
};

use indexmap::IndexMap;
use ndarray::Array1;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Ids 0..4 are reserved: PAD, CLS, MASK, UNK.
pub const NUM_SPECIAL_TOKENS: u32 = 4;

/// Returns true for ids that never carry content (PAD/CLS/MASK/UNK).
pub fn is_special_token(id: u32) -> bool {
    id < NUM_SPECIAL_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub num_labels: usize,
}

impl ModelConfig {
    /// Desk-scale default: minutes-scale CPU training while preserving
    /// transformer structure.
    pub fn desk_default() -> Self {
        Self {
            vocab_size: 1000,
            max_seq_len: 64,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            num_labels: 2,
        }
    }

    /// Minimal config for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 16,
            max_seq_len: 8,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            num_labels: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIAL_TOKENS as usize {
            return Err(Error::config(format!(
                "vocab_size {} must exceed the {} reserved special tokens",
                self.vocab_size, NUM_SPECIAL_TOKENS
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0
        {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.num_labels < 2 {
            return Err(Error::config("num_labels must be at least 2"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: IndexMap<String, Mat>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Mat::len).sum()
    }
}

/// Final-layer representations for one input sequence.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// L×d matrix of final-layer hidden states.
    pub hidden_states: Mat,
    /// Final hidden state at the CLS position (row 0 of `hidden_states`).
    pub pooled: Array1<f64>,
}

/// Encoder plus classification and MLM heads over shared encoder weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: Params,
}

impl Model {
    /// Fresh model: encoder weights ~ N(0, 0.02), layer-norm gains 1,
    /// every bias and both head weight matrices zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "model-init");
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut randn = |r: usize, c: usize| Mat::from_shape_fn((r, c), |_| normal.sample(&mut rng));

        let d = config.hidden_dim;
        let mut params = Params::default();
        params.insert("embed.tok", randn(config.vocab_size, d));
        params.insert("embed.pos", randn(config.max_seq_len, d));
        params.insert("embed.ln.g", Mat::ones((1, d)));
        params.insert("embed.ln.b", Mat::zeros((1, d)));
        for i in 0..config.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("enc.{i}.attn.{w}"), randn(d, d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("enc.{i}.attn.{b}"), Mat::zeros((1, d)));
            }
            params.insert(format!("enc.{i}.ln1.g"), Mat::ones((1, d)));
            params.insert(format!("enc.{i}.ln1.b"), Mat::zeros((1, d)));
            params.insert(format!("enc.{i}.ffn.w1"), randn(d, config.ffn_dim));
            params.insert(format!("enc.{i}.ffn.b1"), Mat::zeros((1, config.ffn_dim)));
            params.insert(format!("enc.{i}.ffn.w2"), randn(config.ffn_dim, d));
            params.insert(format!("enc.{i}.ffn.b2"), Mat::zeros((1, d)));
            params.insert(format!("enc.{i}.ln2.g"), Mat::ones((1, d)));
            params.insert(format!("enc.{i}.ln2.b"), Mat::zeros((1, d)));
        }
        params.insert("cls.w", Mat::zeros((d, config.num_labels)));
        params.insert("cls.b", Mat::zeros((1, config.num_labels)));
        params.insert("mlm.w", Mat::zeros((d, config.vocab_size)));
        params.insert("mlm.b", Mat::zeros((1, config.vocab_size)));

        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Names of encoder parameters (everything except the two heads).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with("cls.") && !n.starts_with("mlm."))
            .cloned()
            .collect()
    }

    /// Validate a (tokens, attention mask) pair against this model.
    pub fn check_input(&self, tokens: &[u32], mask: &[bool]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() != mask.len() {
            return Err(Error::invalid(format!(
                "tokens ({}) and attention mask ({}) lengths differ",
                tokens.len(),
                mask.len()
            )));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::UnknownTokenId {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Deterministic (eval-mode) encoder pass.
    pub fn encode(&self, tokens: &[u32], mask: &[bool]) -> Result<EncoderOutput> {
        self.check_input(tokens, mask)?;
        let hidden = infer::encode_plain(&self.config, &self.params, tokens, mask);
        let pooled = hidden.row(0).to_owned();
        Ok(EncoderOutput {
            hidden_states: hidden,
            pooled,
        })
    }

    /// Classification logits from the CLS position.
    pub fn classify(&self, tokens: &[u32], mask: &[bool]) -> Result<Vec<f64>> {
        let out = self.encode(tokens, mask)?;
        Ok(infer::classify_from_pooled(&self.params, &out.pooled))
    }

    /// Predicted label, ties broken toward the lower label index.
    pub fn predict_label(&self, tokens: &[u32], mask: &[bool]) -> Result<u8> {
        let logits = self.classify(tokens, mask)?;
        Ok(argmax_tie_low(&logits) as u8)
    }

    /// Token-embedding rows for a sequence (position embeddings excluded).
    pub fn token_embedding_rows(&self, tokens: &[u32]) -> Result<Mat> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::UnknownTokenId {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        let table = self.params.get("embed.tok");
        let mut out = Mat::zeros((tokens.len(), self.config.hidden_dim));
        for (i, &t) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&table.row(t as usize));
        }
        Ok(out)
    }

    /// Eval-mode classification logits from explicit token embeddings.
    pub fn classify_from_embeddings(&self, tok_emb: &Mat, mask: &[bool]) -> Result<Vec<f64>> {
        if tok_emb.nrows() != mask.len() || tok_emb.nrows() > self.config.max_seq_len {
            return Err(Error::invalid("embedding rows do not fit the model"));
        }
        let hidden = infer::encode_plain_from_embeddings(&self.config, &self.params, tok_emb, mask);
        let pooled = hidden.row(0).to_owned();
        Ok(infer::classify_from_pooled(&self.params, &pooled))
    }

    /// Per-position vocabulary logits (L×V).
    pub fn mlm_logits(&self, tokens: &[u32], mask: &[bool]) -> Result<Mat> {
        let out = self.encode(tokens, mask)?;
        Ok(infer::mlm_from_hidden(&self.params, &out.hidden_states))
    }

    /// Greedy per-position token predictions; logit ties break toward the
    /// lowest token id. Predictions at non-masked positions are computed
    /// like any other but callers normally ignore them.
    pub fn mlm_predict(&self, tokens: &[u32], mask: &[bool]) -> Result<Vec<u32>> {
        let logits = self.mlm_logits(tokens, mask)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| argmax_tie_low(row.as_slice().expect("contiguous row")) as u32)
            .collect())
    }

    /// Inject every parameter into a tape as differentiable leaves.
    pub fn inject(&self, tape: &mut Tape) -> TapedParams {
        let mut ids = IndexMap::new();
        for (name, value) in self.params.iter() {
            ids.insert(name.clone(), tape.param(value.clone()));
        }
        TapedParams::new(ids)
    }

    /// Collect parameter gradient values from a completed backward pass,
    /// scaled by `scale`, into `acc` (entries are created on first use).
    pub fn accumulate_grads(
        &self,
        tape: &Tape,
        grads: &crate::autograd::Grads,
        taped: &TapedParams,
        scale: f64,
        acc: &mut IndexMap<String, Mat>,
    ) {
        for (name, value) in self.params.iter() {
            let Some(gid) = taped.try_id(name).and_then(|id| grads.get(id)) else {
                continue;
            };
            let g = tape.value(gid);
            let entry = acc
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(value.dim()));
            entry.scaled_add(scale, g);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// All-ones attention mask of the given length.
pub fn full_mask(len: usize) -> Vec<bool> {
    vec![true; len]
}

/// Node id for one parameter name within one tape lifetime.
pub struct ParamNode(pub NodeId);
