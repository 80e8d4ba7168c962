// SPDX-License-Identifier: MIT OR Apache-2.0

//! Proxy-tuning: steer a base model at decode time by the logit difference
//! between a tuned expert and its untuned ancestor.
//!
//! The combination happens on logits, before any softmax:
//! `out = base + (tuned − untuned)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::{self, ToyLmCheckpoint};

/// Pre-softmax scores over a shared vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite logit at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest score; the lowest index wins ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.map_or(true, |b| v > self.values[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// Error-free transformation: `a + b == s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// `base + (tuned − untuned)` entrywise.
///
/// Each entry is the three-term sum with compensated rounding, so a zero
/// shift (`tuned == untuned`) returns `base` and `base == untuned` returns
/// `tuned`, both bitwise.
pub fn proxy_combine(
    base: &LogitVector,
    tuned: &LogitVector,
    untuned: &LogitVector,
) -> Result<LogitVector> {
    let v = base.len();
    for other in [tuned, untuned] {
        if other.len() != v {
            return Err(Error::DimensionMismatch {
                expected: v,
                got: other.len(),
            });
        }
    }
    let values = base
        .values
        .iter()
        .zip(&tuned.values)
        .zip(&untuned.values)
        .map(|((&b, &t), &u)| combine_entry(b, t, u))
        .collect();
    LogitVector::new(values)
}

fn combine_entry(b: f64, t: f64, u: f64) -> f64 {
    if t.to_bits() == u.to_bits() {
        return b;
    }
    if b.to_bits() == u.to_bits() {
        return t;
    }
    let (d, e1) = two_sum(t, -u);
    let (s, e2) = two_sum(b, d);
    s + (e1 + e2)
}

fn final_logits(ckpt: &ToyLmCheckpoint, tokens: &[u32]) -> Result<LogitVector> {
    let start = tokens.len().saturating_sub(ckpt.config().max_seq_len);
    LogitVector::from_f32(&toylm::forward(ckpt, &tokens[start..], &[], None)?.logits)
}

/// Greedy decoding where each next token is the argmax of
/// [`proxy_combine`] over the three models' final-position logits.
pub fn proxy_generate(
    base: &ToyLmCheckpoint,
    tuned: &ToyLmCheckpoint,
    untuned: &ToyLmCheckpoint,
    prompt: &[u32],
    n_steps: usize,
) -> Result<Vec<u32>> {
    let v = base.config().vocab_size;
    for (name, m) in [("tuned", tuned), ("untuned", untuned)] {
        if m.config().vocab_size != v {
            return Err(Error::invalid(format!(
                "{name} model vocab_size {} differs from base vocab_size {v}",
                m.config().vocab_size
            )));
        }
    }
    let mut out = prompt.to_vec();
    for _ in 0..n_steps {
        let (b, (t, u)) = rayon::join(
            || final_logits(base, &out),
            || rayon::join(|| final_logits(tuned, &out), || final_logits(untuned, &out)),
        );
        let combined = proxy_combine(&b?, &t?, &u?)?;
        out.push(combined.argmax().expect("non-empty vocabulary") as u32);
    }
    if n_steps == 0 {
        // Still validate the prompt against every model.
        for m in [base, tuned, untuned] {
            final_logits(m, prompt)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(
            proxy_combine(&lv(&[1.0, 2.0]), &lv(&[0.0, 1.0]), &lv(&[2.0, 0.0])).unwrap(),
            lv(&[-1.0, 3.0])
        );
        assert!(proxy_combine(&lv(&[1.0]), &lv(&[1.0, 2.0]), &lv(&[1.0, 2.0])).is_err());
        assert!(LogitVector::new(vec![f64::NAN]).is_err());
        assert_eq!(lv(&[1.0, 3.0, 3.0]).argmax(), Some(1));
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3f64..1e3, 5)
    }

    proptest! {
        #[test]
        fn zero_shift_returns_base(b in logits(), t in logits()) {
            let out = proxy_combine(&lv(&b), &lv(&t), &lv(&t)).unwrap();
            for (x, y) in out.values().iter().zip(&b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        #[test]
        fn full_transfer_returns_tuned(b in logits(), t in logits()) {
            let out = proxy_combine(&lv(&b), &lv(&t), &lv(&b)).unwrap();
            for (x, y) in out.values().iter().zip(&t) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        #[test]
        fn shifts_compose(b in logits(), t in logits(), u in logits(), t2 in logits()) {
            let once = proxy_combine(&lv(&b), &lv(&t2), &lv(&u)).unwrap();
            let step = proxy_combine(&lv(&b), &lv(&t), &lv(&u)).unwrap();
            let twice = proxy_combine(&step, &lv(&t2), &lv(&t)).unwrap();
            for (x, y) in once.values().iter().zip(twice.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn shared_constant_keeps_argmax(b in logits(), t in logits(), u in logits(), c in -1e3f64..1e3) {
            let shift = |v: &Vec<f64>| lv(&v.iter().map(|x| x + c).collect::<Vec<_>>());
            let plain = proxy_combine(&lv(&b), &lv(&t), &lv(&u)).unwrap();
            let shifted = proxy_combine(&shift(&b), &shift(&t), &shift(&u)).unwrap();
            let (i, j) = (plain.argmax().unwrap(), shifted.argmax().unwrap());
            // Rounding may only swap near-ties.
            prop_assert!(i == j || (plain.values()[i] - plain.values()[j]).abs() <= 1e-9);
        }
    }
}
