// SPDX-License-Identifier: MIT OR Apache-2.0

//! A miniature decoder-only transformer used as a stand-in for a series of
//! pre-training checkpoints.
//!
//! Pre-norm residual blocks (causal self-attention, then a GELU MLP), learned
//! positional embeddings and an output head tied to the token embedding. All
//! arithmetic is plain f32 loops in a fixed order, so training and inference
//! are bitwise reproducible for a given seed.
//!
//! "Layer `l`" is the residual stream after block `l`; layer 0 is the
//! embedding output. Captures and interventions both address that stream.

mod extract;
mod io;
mod linalg;
mod model;
mod params;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::InterventionSpec;

pub use extract::{extract_activations, ExtractionReport, SkippedRow};
pub use params::{BlockParams, Params};
pub use train::{mean_loss, train, Optimizer, TrainConfig};

/// Byte-level tokenizer: token `b` is byte `b`, plus two specials.
pub mod tokenizer {
    /// Beginning-of-sequence token, prepended by [`encode`].
    pub const BOS: u32 = 256;
    /// End-of-sequence token.
    pub const EOS: u32 = 257;
    /// Vocabulary size needed by the tokenizer.
    pub const VOCAB_SIZE: usize = 258;

    /// `[BOS]` followed by the UTF-8 bytes of `text`.
    pub fn encode(text: &str) -> Vec<u32> {
        std::iter::once(BOS)
            .chain(text.bytes().map(u32::from))
            .collect()
    }

    /// UTF-8 bytes of `text` without specials.
    pub fn encode_plain(text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Drops specials and decodes the remaining bytes lossily.
    pub fn decode(tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::invalid("vocab_size does not fit token ids"));
        }
        Ok(())
    }
}

/// Weights of the toy model at one training step. Immutable once created.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmCheckpoint {
    config: ToyLmConfig,
    step: u64,
    params: Params,
}

impl ToyLmCheckpoint {
    /// Seeded random initialization at step 0.
    pub fn init(config: ToyLmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            params: Params::init(&config),
        })
    }

    /// Wraps existing parameters after checking shapes and finiteness.
    pub fn from_params(config: ToyLmConfig, step: u64, params: Params) -> Result<Self> {
        config.validate()?;
        let layout = Params::layout(&config);
        let tensors = params.tensors();
        if tensors.len() != layout.len() {
            return Err(Error::validation(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            let want: usize = shape.iter().product();
            if t.len() != want {
                return Err(Error::validation(format!(
                    "tensor {name}: expected {want} values, found {}",
                    t.len()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::validation("non-finite parameter"));
        }
        Ok(Self {
            config,
            step,
            params,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Zero-padded identifier used in manifests, e.g. `step_000050`.
    pub fn checkpoint_id(&self) -> String {
        format!("step_{:06}", self.step)
    }

    /// Parameters keyed by name, e.g. `blocks.0.attn.wq`.
    pub fn parameters(&self) -> BTreeMap<String, (Vec<usize>, &[f32])> {
        Params::layout(&self.config)
            .into_iter()
            .zip(self.params.tensors())
            .map(|((name, shape), t)| (name, (shape, t.as_slice())))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::invalid(format!(
                "token {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_intervention(&self, spec: Option<&InterventionSpec>) -> Result<()> {
        if let Some(spec) = spec {
            if spec.layer > self.config.n_layers {
                return Err(Error::invalid(format!(
                    "intervention layer {} out of range 0..={}",
                    spec.layer, self.config.n_layers
                )));
            }
            if spec.vector.direction.len() != self.config.d_model {
                return Err(Error::DimensionMismatch {
                    expected: self.config.d_model,
                    got: spec.vector.direction.len(),
                });
            }
            if !spec.alpha.is_finite() {
                return Err(Error::invalid("intervention strength must be finite"));
            }
        }
        Ok(())
    }
}

/// Activation capture at one layer. Only the last token is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRequest {
    pub layer: usize,
}

impl CaptureRequest {
    pub fn last_token(layer: usize) -> Self {
        Self { layer }
    }

    /// The only supported position policy.
    pub fn position_policy(&self) -> &'static str {
        crate::actv::LAST_TOKEN
    }
}

/// Result of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits over the vocabulary at the final position.
    pub logits: Vec<f32>,
    /// Last-token residual of each requested layer, in request order.
    pub captures: Vec<Vec<f32>>,
}

/// Runs the model on `tokens`, returning final-position logits and the
/// requested captures. With an intervention at layer `l`, the stream after
/// block `l` becomes `h + α·v` at the configured positions before later
/// blocks read it, and captures see the steered stream.
pub fn forward(
    ckpt: &ToyLmCheckpoint,
    tokens: &[u32],
    captures: &[CaptureRequest],
    intervention: Option<&InterventionSpec>,
) -> Result<ForwardOutput> {
    ckpt.check_tokens(tokens)?;
    ckpt.check_intervention(intervention)?;
    let cfg = &ckpt.config;
    if let Some(c) = captures.iter().find(|c| c.layer > cfg.n_layers) {
        return Err(Error::invalid(format!(
            "capture layer {} out of range 0..={}",
            c.layer, cfg.n_layers
        )));
    }
    let streams = model::residual_streams(&ckpt.params, cfg, tokens, intervention);
    let d = cfg.d_model;
    let t = tokens.len();
    let last_row = |l: usize| streams[l][(t - 1) * d..t * d].to_vec();
    let logits = model::head_logits(&ckpt.params, cfg, &last_row(cfg.n_layers), 1);
    Ok(ForwardOutput {
        logits,
        captures: captures.iter().map(|c| last_row(c.layer)).collect(),
    })
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `n_steps` tokens after `prompt`.
///
/// Once the sequence outgrows `max_seq_len` the model sees only the most
/// recent `max_seq_len` tokens. The intervention applies at every step.
pub fn generate(
    ckpt: &ToyLmCheckpoint,
    prompt: &[u32],
    n_steps: usize,
    intervention: Option<&InterventionSpec>,
) -> Result<Vec<u32>> {
    ckpt.check_tokens(prompt)?;
    ckpt.check_intervention(intervention)?;
    let mut out = prompt.to_vec();
    for _ in 0..n_steps {
        let start = out.len().saturating_sub(ckpt.config.max_seq_len);
        let next = argmax(&forward(ckpt, &out[start..], &[], intervention)?.logits);
        out.push(next as u32);
    }
    Ok(out)
}

/// Summed cross-entropy and predicted-position count over a corpus.
///
/// Sequences longer than `max_seq_len` are cut into windows that overlap by
/// one token, so every position after the first is predicted exactly once.
pub(crate) fn corpus_loss(
    ckpt: &ToyLmCheckpoint,
    corpus: &[Vec<u32>],
    intervention: Option<&InterventionSpec>,
) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    ckpt.check_intervention(intervention)?;
    let span = ckpt.config.max_seq_len;
    let mut total = 0.0;
    let mut count = 0;
    for seq in corpus {
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= ckpt.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} out of range")));
        }
        let mut start = 0;
        while start + 1 < seq.len() {
            let end = (start + span).min(seq.len());
            let (loss, n) =
                model::sequence_loss(&ckpt.params, &ckpt.config, &seq[start..end], intervention);
            total += loss;
            count += n;
            if end == seq.len() {
                break;
            }
            start = end - 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("corpus has no predictable positions"));
    }
    Ok((total, count))
}

/// `exp` of the mean next-token cross-entropy (nats) over all predicted
/// positions, optionally under an intervention.
pub fn perplexity(
    ckpt: &ToyLmCheckpoint,
    corpus: &[Vec<u32>],
    intervention: Option<&InterventionSpec>,
) -> Result<f64> {
    let (total, count) = corpus_loss(ckpt, corpus, intervention)?;
    Ok((total / count as f64).exp())
}

pub use io::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
