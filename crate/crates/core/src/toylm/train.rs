// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic next-token training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Params;
use super::{corpus_loss, model, ToyLmCheckpoint};
use crate::error::{Error, Result};

/// Parameter update rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent with a fixed learning rate.
    #[default]
    Sgd,
    /// Adam with bias correction.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Training schedule and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    /// A checkpoint is emitted at every step that is a multiple of this.
    pub checkpoint_every: u64,
    pub learning_rate: f32,
    /// Sequences per step.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Seeds batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            checkpoint_every: 50,
            learning_rate: 0.1,
            batch_size: 8,
            optimizer: Optimizer::Sgd,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

/// Mean next-token cross-entropy (nats) over a corpus.
pub fn mean_loss(ckpt: &ToyLmCheckpoint, corpus: &[Vec<u32>]) -> Result<f64> {
    let (total, count) = corpus_loss(ckpt, corpus, None)?;
    Ok(total / count as f64)
}

/// Trains a copy of `ckpt` for `config.steps` steps.
///
/// Returns the input checkpoint followed by one checkpoint per step number
/// divisible by `checkpoint_every`, so steps strictly increase. Each step
/// draws `batch_size` sequences uniformly (with replacement) and, for
/// sequences longer than `max_seq_len`, a random window of that length.
pub fn train(
    ckpt: &ToyLmCheckpoint,
    corpus: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<Vec<ToyLmCheckpoint>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if config.checkpoint_every == 0 {
        return Err(Error::invalid("checkpoint_every must be positive"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be positive and finite"));
    }
    let cfg = *ckpt.config();
    let usable: Vec<&[u32]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| s.as_slice())
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "corpus has no sequence of length at least 2",
        ));
    }
    for seq in &usable {
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token {t} out of range")));
        }
    }

    let mut out = vec![ckpt.clone()];
    let mut params = ckpt.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam_state = match config.optimizer {
        Optimizer::Adam { .. } => Some((params.zeros_like(), params.zeros_like())),
        Optimizer::Sgd => None,
    };

    for i in 1..=config.steps {
        let mut grads = params.zeros_like();
        let mut count = 0usize;
        for _ in 0..config.batch_size {
            let seq = usable[rng.random_range(0..usable.len())];
            let window = if seq.len() > cfg.max_seq_len {
                let start = rng.random_range(0..=seq.len() - cfg.max_seq_len);
                &seq[start..start + cfg.max_seq_len]
            } else {
                seq
            };
            count += model::accumulate_gradients(&params, &cfg, window, &mut grads).1;
        }
        let mut scale = 1.0 / count as f32;
        if let Some(clip) = config.grad_clip {
            let norm = global_norm(&grads) * scale as f64;
            if norm > clip as f64 {
                scale *= (clip as f64 / norm) as f32;
            }
        }
        match (&mut adam_state, config.optimizer) {
            (Some((m, v)), Optimizer::Adam { beta1, beta2, eps }) => {
                let bc1 = 1.0 - beta1.powi(i as i32);
                let bc2 = 1.0 - beta2.powi(i as i32);
                let lr = config.learning_rate;
                for ((p, g), (m, v)) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()))
                {
                    for j in 0..p.len() {
                        let gj = g[j] * scale;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            _ => {
                let step = config.learning_rate * scale;
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= step * gv;
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::validation(format!(
                "training diverged at step {}",
                ckpt.step() + i
            )));
        }
        let global = ckpt.step() + i;
        if global % config.checkpoint_every == 0 {
            out.push(ToyLmCheckpoint::from_params(cfg, global, params.clone())?);
        }
    }
    Ok(out)
}

fn global_norm(p: &Params) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}
