// SPDX-License-Identifier: MIT OR Apache-2.0

//! Proxy-tuning: logit combination identities and the directional effect of
//! a tuned/untuned pair on a separately trained base model.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracetrust::datasets::{tagged_lines, two_style_corpus, StyleCorpusConfig};
use tracetrust::proxytune::{proxy_combine, proxy_generate, LogitVector};
use tracetrust::toylm::{
    generate, tokenizer, train, Optimizer, ToyLmCheckpoint, ToyLmConfig, TrainConfig,
};

fn config(seed: u64) -> ToyLmConfig {
    ToyLmConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        seed,
        ..ToyLmConfig::default()
    }
}

fn adam(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        checkpoint_every: steps,
        learning_rate: 1e-2,
        batch_size: 8,
        optimizer: Optimizer::adam(),
        seed,
        ..TrainConfig::default()
    }
}

fn lv(v: &[f64]) -> LogitVector {
    LogitVector::new(v.to_vec()).unwrap()
}

fn trained(seed: u64, lines: &[Vec<u32>], steps: u64) -> ToyLmCheckpoint {
    let init = ToyLmCheckpoint::init(config(seed)).unwrap();
    train(&init, lines, &adam(steps, seed))
        .unwrap()
        .pop()
        .unwrap()
}

/// Share of adjacent generated letters that step backward through the
/// alphabet, the label-1 style.
fn backward_share(seqs: &[Vec<u32>], prompt_len: usize) -> f64 {
    let (mut back, mut total) = (0usize, 0usize);
    for s in seqs {
        for w in s[prompt_len - 1..].windows(2) {
            let (a, b) = (w[0], w[1]);
            if (97..123).contains(&a) && (97..123).contains(&b) {
                total += 1;
                back += usize::from((a + 25 - 97) % 26 == b - 97);
            }
        }
    }
    back as f64 / total.max(1) as f64
}

#[test]
fn equal_tuned_and_untuned_reproduce_the_base_generation() {
    let lines: Vec<Vec<u32>> = vec![tokenizer::encode("abcabc"), tokenizer::encode("cbacba")];
    let base = trained(1, &lines, 20);
    let other = trained(2, &lines, 20);
    for text in ["a", "cb", "abc"] {
        let prompt = tokenizer::encode(text);
        let expected = generate(&base, &prompt, 8, None).unwrap();
        assert_eq!(
            proxy_generate(&base, &other, &other, &prompt, 8).unwrap(),
            expected
        );
        let tuned_gen = generate(&other, &prompt, 8, None).unwrap();
        assert_eq!(
            proxy_generate(&base, &other, &base, &prompt, 8).unwrap(),
            tuned_gen
        );
    }
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let base = ToyLmCheckpoint::init(config(1)).unwrap();
    let small = ToyLmCheckpoint::init(ToyLmConfig {
        vocab_size: 64,
        ..config(1)
    })
    .unwrap();
    let err = proxy_generate(&base, &small, &base, &[tokenizer::BOS], 2);
    assert!(err.is_err());
    assert!(proxy_combine(&lv(&[0.0; 3]), &lv(&[0.0; 2]), &lv(&[0.0; 3])).is_err());
}

#[test]
fn zero_steps_returns_the_prompt() {
    let m = ToyLmCheckpoint::init(config(3)).unwrap();
    let prompt = tokenizer::encode("keep");
    assert_eq!(proxy_generate(&m, &m, &m, &prompt, 0).unwrap(), prompt);
}

#[test]
fn tuning_toward_one_style_shifts_the_base_toward_it() {
    let corpus = two_style_corpus(&StyleCorpusConfig {
        n: 400,
        length: 10,
        noise: 0.1,
        seed: 4,
    })
    .unwrap();
    let all: Vec<Vec<u32>> = tagged_lines(&corpus)
        .iter()
        .map(|s| tokenizer::encode(s))
        .collect();
    let backward: Vec<Vec<u32>> = all
        .iter()
        .zip(&corpus.labels)
        .filter(|(_, &y)| y == 1)
        .map(|(s, _)| s.clone())
        .collect();

    let base = trained(11, &all, 300);
    let untuned = trained(12, &all, 300);
    let tuned = train(&untuned, &backward, &adam(150, 13))
        .unwrap()
        .pop()
        .unwrap();

    // Two random letters: no consistent style to continue.
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let prompts: Vec<Vec<u32>> = (0..120)
        .map(|_| {
            let text: String = (0..2)
                .map(|_| (b'a' + r.random_range(0..26u8)) as char)
                .collect();
            tokenizer::encode(&text)
        })
        .collect();
    let steps = 6;
    let base_out: Vec<Vec<u32>> = prompts
        .iter()
        .map(|p| generate(&base, p, steps, None).unwrap())
        .collect();
    let proxy_out: Vec<Vec<u32>> = prompts
        .iter()
        .map(|p| proxy_generate(&base, &tuned, &untuned, p, steps).unwrap())
        .collect();
    let before = backward_share(&base_out, 3);
    let after = backward_share(&proxy_out, 3);
    assert!(
        after > before + 0.1,
        "backward share {before:.3} -> {after:.3} over {} prompts",
        prompts.len()
    );
}

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #[test]
    fn combined_shifts_compose(
        (b, t, u, t2) in (1usize..16).prop_flat_map(|n| (logits(n), logits(n), logits(n), logits(n)))
    ) {
        let once = proxy_combine(&lv(&b), &lv(&t2), &lv(&u)).unwrap();
        let first = proxy_combine(&lv(&b), &lv(&t), &lv(&u)).unwrap();
        let twice = proxy_combine(&first, &lv(&t2), &lv(&t)).unwrap();
        for (x, y) in once.values().iter().zip(twice.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn identities_hold_bitwise(
        (b, t) in (1usize..16).prop_flat_map(|n| (logits(n), logits(n)))
    ) {
        prop_assert_eq!(proxy_combine(&lv(&b), &lv(&t), &lv(&t)).unwrap(), lv(&b));
        prop_assert_eq!(proxy_combine(&lv(&b), &lv(&t), &lv(&b)).unwrap(), lv(&t));
    }
}
