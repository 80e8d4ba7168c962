// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter storage for the toy transformer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ToyLmConfig;

/// Weights of one pre-norm block. Matrices are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

/// All trainable tensors. The output head reuses `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Vec<f32>,
    pub pos_emb: Vec<f32>,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
}

const INIT_STD: f64 = 0.02;

fn normal(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f32> {
    (0..len)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect()
}

impl Params {
    /// Gaussian init (std 0.02; residual output projections scaled by
    /// `1/√(2·n_layers)`), unit layer-norm gains, zero biases.
    pub fn init(cfg: &ToyLmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, d, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal(&mut rng, v * d, INIT_STD);
        let pos_emb = normal(&mut rng, t * d, INIT_STD);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: normal(&mut rng, d * d, INIT_STD),
                wk: normal(&mut rng, d * d, INIT_STD),
                wv: normal(&mut rng, d * d, INIT_STD),
                wo: normal(&mut rng, d * d, resid_std),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w1: normal(&mut rng, d * f, INIT_STD),
                b1: vec![0.0; f],
                w2: normal(&mut rng, f * d, resid_std),
                b2: vec![0.0; d],
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
        }
    }

    /// Same shapes, all zeros (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.iter_mut().for_each(|x| *x = 0.0));
        out
    }

    /// Tensor names with shapes, in a fixed order.
    pub fn layout(cfg: &ToyLmConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![t, d]),
        ];
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out
    }

    /// Tensors in [`Params::layout`] order.
    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain,
                &b.ln1_bias,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.w1,
                &b.b1,
                &b.w2,
                &b.b2,
            ]);
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut Vec<f32>)) {
        for (i, t) in self.tensors_mut().into_iter().enumerate() {
            f(i, t);
        }
    }

    /// Rebuilds parameters from tensors in [`Params::layout`] order.
    pub(crate) fn from_tensors(cfg: &ToyLmConfig, mut tensors: Vec<Vec<f32>>) -> Self {
        let tail = tensors.split_off(2);
        let mut it = tail.into_iter();
        let mut next = || it.next().expect("layout length checked by caller");
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        let lnf_gain = next();
        let lnf_bias = next();
        let mut head = tensors.into_iter();
        Self {
            tok_emb: head.next().expect("tok_emb"),
            pos_emb: head.next().expect("pos_emb"),
            blocks,
            lnf_gain,
            lnf_bias,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}
