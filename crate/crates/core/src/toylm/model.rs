// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward passes of the toy decoder.
//!
//! Shapes: `T` positions, `D = d_model`, `F = d_ff`, `V = vocab_size`,
//! `H` heads of width `D / H`. Every activation buffer is row-major `[T, ·]`.

use super::linalg::{add_assign, dot, matmul, matmul_a_bt, matmul_at_b_acc};
use super::params::{BlockParams, Params};
use super::ToyLmConfig;
use crate::steering::{apply_intervention_f32, InterventionScope, InterventionSpec};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // √(2/π)

struct LnCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], t: usize, d: usize) -> (Vec<f32>, LnCache) {
    let mut out = vec![0.0f32; t * d];
    let mut xhat = vec![0.0f32; t * d];
    let mut rstd = vec![0.0f32; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f32],
    cache: &LnCache,
    gain: &[f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
    t: usize,
    d: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; t * d];
    let mut dxhat = vec![0.0f32; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let (mut m1, mut m2) = (0.0f32, 0.0f32);
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= d as f32;
        m2 /= d as f32;
        for j in 0..d {
            dx[i * d + j] = cache.rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044_715 * u * u * u)).tanh())
}

fn gelu_grad(u: f32) -> f32 {
    let inner = GELU_C * (u + 0.044_715 * u * u * u);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044_715 * u * u)
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    o: Vec<f32>,
    ln2: LnCache,
    b: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
}

/// Causal multi-head attention. Returns the concatenated head outputs and,
/// if requested, the `[H, T, T]` attention probabilities.
fn attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    t: usize,
    d: usize,
    heads: usize,
    keep_probs: bool,
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut o = vec![0.0f32; t * d];
    let mut probs = if keep_probs {
        vec![0.0f32; heads * t * t]
    } else {
        Vec::new()
    };
    let mut p = vec![0.0f32; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0f32;
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let oi = &mut o[i * d + off..i * d + off + dh];
            for j in 0..=i {
                let w = p[j] / sum;
                if keep_probs {
                    probs[(h * t + i) * t + j] = w;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                for (ov, &vv) in oi.iter_mut().zip(vj) {
                    *ov += w * vv;
                }
            }
        }
    }
    (o, probs)
}

fn block_forward(
    bp: &BlockParams,
    cfg: &ToyLmConfig,
    x: &mut [f32],
    t: usize,
    cache: Option<&mut Vec<BlockCache>>,
) {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let (a, ln1) = layer_norm(x, &bp.ln1_gain, &bp.ln1_bias, t, d);
    let q = matmul(&a, &bp.wq, t, d, d);
    let k = matmul(&a, &bp.wk, t, d, d);
    let v = matmul(&a, &bp.wv, t, d, d);
    let keep = cache.is_some();
    let (o, probs) = attention(&q, &k, &v, t, d, cfg.n_heads, keep);
    let attn_out = matmul(&o, &bp.wo, t, d, d);
    add_assign(x, &attn_out);

    let (b, ln2) = layer_norm(x, &bp.ln2_gain, &bp.ln2_bias, t, d);
    let mut u = matmul(&b, &bp.w1, t, d, f);
    for i in 0..t {
        add_assign(&mut u[i * f..(i + 1) * f], &bp.b1);
    }
    let g: Vec<f32> = u.iter().map(|&z| gelu(z)).collect();
    let mut m = matmul(&g, &bp.w2, t, f, d);
    for i in 0..t {
        add_assign(&mut m[i * d..(i + 1) * d], &bp.b2);
    }
    add_assign(x, &m);

    if let Some(cache) = cache {
        cache.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            b,
            u,
            g,
        });
    }
}

fn intervene(x: &mut [f32], t: usize, d: usize, spec: &InterventionSpec) {
    let rows: Box<dyn Iterator<Item = usize>> = match spec.scope {
        InterventionScope::AllPositions => Box::new(0..t),
        InterventionScope::LastPosition => Box::new(t.saturating_sub(1)..t),
    };
    for i in rows {
        apply_intervention_f32(&mut x[i * d..(i + 1) * d], spec);
    }
}

/// Residual stream after every layer: entry `l` is `[T, D]` after block `l`
/// (entry 0 is the embedding output), with any intervention already applied.
///
/// Callers have validated tokens, sequence length and intervention shape.
pub(crate) fn residual_streams(
    params: &Params,
    cfg: &ToyLmConfig,
    tokens: &[u32],
    intervention: Option<&InterventionSpec>,
) -> Vec<Vec<f32>> {
    let t = tokens.len();
    let d = cfg.d_model;
    let mut x = embed(params, d, tokens);
    let mut out = Vec::with_capacity(cfg.n_layers + 1);
    if let Some(spec) = intervention.filter(|s| s.layer == 0) {
        intervene(&mut x, t, d, spec);
    }
    out.push(x.clone());
    for (l, bp) in params.blocks.iter().enumerate() {
        block_forward(bp, cfg, &mut x, t, None);
        if let Some(spec) = intervention.filter(|s| s.layer == l + 1) {
            intervene(&mut x, t, d, spec);
        }
        out.push(x.clone());
    }
    out
}

fn embed(params: &Params, d: usize, tokens: &[u32]) -> Vec<f32> {
    let mut x = vec![0.0f32; tokens.len() * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        let te = &params.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &params.pos_emb[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }
    x
}

/// Logits `[rows, V]` for a `[rows, D]` block of final-layer residuals.
pub(crate) fn head_logits(
    params: &Params,
    cfg: &ToyLmConfig,
    hidden: &[f32],
    rows: usize,
) -> Vec<f32> {
    let d = cfg.d_model;
    let (z, _) = layer_norm(hidden, &params.lnf_gain, &params.lnf_bias, rows, d);
    matmul_a_bt(&z, &params.tok_emb, rows, d, cfg.vocab_size)
}

/// Summed next-token cross-entropy (nats) over positions `0..T−1` and the
/// number of predicted positions.
pub(crate) fn sequence_loss(
    params: &Params,
    cfg: &ToyLmConfig,
    tokens: &[u32],
    intervention: Option<&InterventionSpec>,
) -> (f64, usize) {
    let t = tokens.len();
    if t < 2 {
        return (0.0, 0);
    }
    let streams = residual_streams(params, cfg, tokens, intervention);
    let last = streams.last().expect("at least the embedding layer");
    let logits = head_logits(params, cfg, &last[..(t - 1) * cfg.d_model], t - 1);
    let v = cfg.vocab_size;
    let mut total = 0.0f64;
    for i in 0..t - 1 {
        total += cross_entropy(&logits[i * v..(i + 1) * v], tokens[i + 1] as usize);
    }
    (total, t - 1)
}

fn cross_entropy(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&z| (z as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - logits[target] as f64
}

/// Adds the gradient of the summed cross-entropy of one sequence to `grads`
/// and returns `(summed loss, predicted positions)`.
pub(crate) fn accumulate_gradients(
    params: &Params,
    cfg: &ToyLmConfig,
    tokens: &[u32],
    grads: &mut Params,
) -> (f64, usize) {
    let t = tokens.len();
    if t < 2 {
        return (0.0, 0);
    }
    let (d, f, v, heads) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);

    // Forward with caches.
    let mut x = embed(params, d, tokens);
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for bp in &params.blocks {
        block_forward(bp, cfg, &mut x, t, Some(&mut caches));
    }
    let (z, lnf) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias, t, d);
    let logits = matmul_a_bt(&z, &params.tok_emb, t, d, v);

    // Softmax cross-entropy; the last position has no target.
    let mut dlogits = vec![0.0f32; t * v];
    let mut loss = 0.0f64;
    for i in 0..t - 1 {
        let row = &logits[i * v..(i + 1) * v];
        let target = tokens[i + 1] as usize;
        loss += cross_entropy(row, target);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        let drow = &mut dlogits[i * v..(i + 1) * v];
        for (dz, &zv) in drow.iter_mut().zip(row) {
            *dz = (zv - max).exp();
            sum += *dz;
        }
        drow.iter_mut().for_each(|dz| *dz /= sum);
        drow[target] -= 1.0;
    }

    // Tied head.
    let dz = matmul(&dlogits, &params.tok_emb, t, v, d);
    matmul_at_b_acc(&mut grads.tok_emb, &dlogits, &z, t, v, d);
    let mut dx = layer_norm_backward(
        &dz,
        &lnf,
        &params.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
        t,
        d,
    );

    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    for (l, cache) in caches.iter().enumerate().rev() {
        let bp = &params.blocks[l];
        let gb = &mut grads.blocks[l];

        // MLP branch.
        let dm = &dx;
        for i in 0..t {
            add_assign(&mut gb.b2, &dm[i * d..(i + 1) * d]);
        }
        matmul_at_b_acc(&mut gb.w2, &cache.g, dm, t, f, d);
        let dg = matmul_a_bt(dm, &bp.w2, t, d, f);
        let du: Vec<f32> = dg
            .iter()
            .zip(&cache.u)
            .map(|(g, &u)| g * gelu_grad(u))
            .collect();
        for i in 0..t {
            add_assign(&mut gb.b1, &du[i * f..(i + 1) * f]);
        }
        matmul_at_b_acc(&mut gb.w1, &cache.b, &du, t, d, f);
        let db = matmul_a_bt(&du, &bp.w1, t, f, d);
        let dln2 = layer_norm_backward(
            &db,
            &cache.ln2,
            &bp.ln2_gain,
            &mut gb.ln2_gain,
            &mut gb.ln2_bias,
            t,
            d,
        );
        add_assign(&mut dx, &dln2);

        // Attention branch.
        matmul_at_b_acc(&mut gb.wo, &cache.o, &dx, t, d, d);
        let d_o = matmul_a_bt(&dx, &bp.wo, t, d, d);
        let mut dq = vec![0.0f32; t * d];
        let mut dk = vec![0.0f32; t * d];
        let mut dv = vec![0.0f32; t * d];
        let mut dp = vec![0.0f32; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let doi = &d_o[i * d + off..i * d + off + dh];
                let prow = &cache.probs[(h * t + i) * t..(h * t + i) * t + t];
                let mut weighted = 0.0f32;
                for j in 0..=i {
                    dp[j] = dot(doi, &cache.v[j * d + off..j * d + off + dh]);
                    weighted += prow[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (a, &b) in dvj.iter_mut().zip(doi) {
                        *a += prow[j] * b;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                        dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                    }
                }
            }
        }
        matmul_at_b_acc(&mut gb.wq, &cache.a, &dq, t, d, d);
        matmul_at_b_acc(&mut gb.wk, &cache.a, &dk, t, d, d);
        matmul_at_b_acc(&mut gb.wv, &cache.a, &dv, t, d, d);
        let mut da = matmul_a_bt(&dq, &bp.wq, t, d, d);
        add_assign(&mut da, &matmul_a_bt(&dk, &bp.wk, t, d, d));
        add_assign(&mut da, &matmul_a_bt(&dv, &bp.wv, t, d, d));
        let dln1 = layer_norm_backward(
            &da,
            &cache.ln1,
            &bp.ln1_gain,
            &mut gb.ln1_gain,
            &mut gb.ln1_bias,
            t,
            d,
        );
        add_assign(&mut dx, &dln1);
    }

    for (i, &tok) in tokens.iter().enumerate() {
        let g = &dx[i * d..(i + 1) * d];
        add_assign(
            &mut grads.tok_emb[tok as usize * d..(tok as usize + 1) * d],
            g,
        );
        add_assign(&mut grads.pos_emb[i * d..(i + 1) * d], g);
    }
    (loss, t - 1)
}
