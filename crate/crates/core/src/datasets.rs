// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled text corpora: TSV ingestion, class balancing, seeded splits and
//! the case-flip perturbation used to build robustness datasets.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actv::DimensionLabel;
use crate::error::{Error, Result};

/// Sentences with one binary label each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub sentences: Vec<String>,
    pub labels: Vec<u8>,
    pub dimension_label: DimensionLabel,
}

impl LabeledCorpus {
    pub fn new(
        sentences: Vec<String>,
        labels: Vec<u8>,
        dimension_label: DimensionLabel,
    ) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::validation("corpus is empty"));
        }
        if sentences.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} sentences but {} labels",
                sentences.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::validation(format!(
                "label {} at row {i} is not 0 or 1",
                labels[i]
            )));
        }
        Ok(Self {
            sentences,
            labels,
            dimension_label,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// `(count of label 0, count of label 1)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (self.labels.len() - pos, pos)
    }

    pub fn is_balanced(&self) -> bool {
        let (neg, pos) = self.class_counts();
        neg.abs_diff(pos) <= 1
    }

    /// Reads a two-column `sentence<TAB>label` file.
    pub fn read_tsv<R: BufRead>(reader: R, dimension_label: DimensionLabel) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let (sentence, label) = line.rsplit_once('\t').ok_or_else(|| {
                Error::format(format!("line {lineno}: expected `sentence<TAB>label`"))
            })?;
            let label = match label.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::format(format!(
                        "line {lineno}: label must be 0 or 1, found {other:?}"
                    )))
                }
            };
            if sentence.contains('\t') {
                return Err(Error::format(format!(
                    "line {lineno}: more than two columns"
                )));
            }
            sentences.push(sentence.to_string());
            labels.push(label);
        }
        Self::new(sentences, labels, dimension_label)
    }

    pub fn write_tsv<W: Write>(&self, mut writer: W) -> Result<()> {
        for (i, (s, y)) in self.sentences.iter().zip(&self.labels).enumerate() {
            if s.contains(['\t', '\n', '\r']) {
                return Err(Error::validation(format!(
                    "sentence {i} contains a tab or line break and cannot be written as TSV"
                )));
            }
            writeln!(writer, "{s}\t{y}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Case perturbation
// ---------------------------------------------------------------------------

/// Case-flipped counterpart of `c`, if `c` is a letter with a one-to-one
/// case mapping.
fn flipped_case(c: char) -> Option<char> {
    let swapped: Vec<char> = if c.is_lowercase() {
        c.to_uppercase().collect()
    } else if c.is_uppercase() {
        c.to_lowercase().collect()
    } else {
        return None;
    };
    let [first] = swapped[..] else { return None };
    // Only accept mappings that flip back to the original character.
    let back: Vec<char> = if first.is_lowercase() {
        first.to_uppercase().collect()
    } else {
        first.to_lowercase().collect()
    };
    (back == [c]).then_some(first)
}

/// Flips the case of the characters at `positions` (char indices).
///
/// Applying the same positions twice restores the input.
pub fn flip_case_at(sentence: &str, positions: &[usize]) -> String {
    let mut chars: Vec<char> = sentence.chars().collect();
    for &p in positions {
        if let Some(c) = chars.get(p).copied().and_then(flipped_case) {
            chars[p] = c;
        }
    }
    chars.into_iter().collect()
}

/// Number of letters flipped for a given rate: `rate × letters`, rounded half
/// to even.
pub fn flip_count(rate: f64, letters: usize) -> usize {
    (rate * letters as f64).round_ties_even() as usize
}

/// [`perturb_case`] that also returns the flipped char indices, ascending.
pub fn perturb_case_with_flips(
    sentence: &str,
    rate: f64,
    seed: u64,
) -> Result<(String, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "perturbation rate {rate} outside [0, 1]"
        )));
    }
    let letters: Vec<usize> = sentence
        .chars()
        .enumerate()
        .filter(|&(_, c)| flipped_case(c).is_some())
        .map(|(i, _)| i)
        .collect();
    let k = flip_count(rate, letters.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips: Vec<usize> = index::sample(&mut rng, letters.len(), k)
        .into_iter()
        .map(|j| letters[j])
        .collect();
    flips.sort_unstable();
    Ok((flip_case_at(sentence, &flips), flips))
}

/// Flips the case of `round(rate × L)` letters chosen uniformly without
/// replacement, where `L` is the number of letters in `sentence`.
///
/// Non-letters are never touched, so the output has the same length and is
/// equal to the input up to case.
pub fn perturb_case(sentence: &str, rate: f64, seed: u64) -> Result<String> {
    perturb_case_with_flips(sentence, rate, seed).map(|(s, _)| s)
}

/// Per-row seed for [`perturbation_corpus`].
fn row_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Robustness dataset: every input sentence appears twice, the original
/// labeled 0 immediately followed by its case-perturbed copy labeled 1.
///
/// Input labels are ignored. Row `i` is perturbed with a seed derived from
/// `(seed, i)`, so output is reproducible and independent of corpus order
/// elsewhere.
pub fn perturbation_corpus(corpus: &LabeledCorpus, rate: f64, seed: u64) -> Result<LabeledCorpus> {
    let mut sentences = Vec::with_capacity(2 * corpus.len());
    let mut labels = Vec::with_capacity(2 * corpus.len());
    for (i, s) in corpus.sentences.iter().enumerate() {
        let perturbed = perturb_case(s, rate, row_seed(seed, i))?;
        sentences.push(s.clone());
        labels.push(0);
        sentences.push(perturbed);
        labels.push(1);
    }
    LabeledCorpus::new(sentences, labels, DimensionLabel::Robustness)
}

// ---------------------------------------------------------------------------
// Balancing and splits
// ---------------------------------------------------------------------------

/// Downsamples the majority class so both classes have the minority count.
///
/// Retained items keep their relative order; minority items are never dropped.
pub fn balance(corpus: &LabeledCorpus, seed: u64) -> Result<LabeledCorpus> {
    let (neg, pos) = corpus.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::invalid("cannot balance a single-class corpus"));
    }
    if neg.abs_diff(pos) <= 1 {
        return Ok(corpus.clone());
    }
    let majority = if pos > neg { 1u8 } else { 0u8 };
    let keep = neg.min(pos);
    let majority_rows: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.labels[i] == majority)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = vec![false; corpus.len()];
    for j in index::sample(&mut rng, majority_rows.len(), keep) {
        kept[majority_rows[j]] = true;
    }
    let (mut sentences, mut labels) = (Vec::new(), Vec::new());
    for ((s, &y), &k) in corpus.sentences.iter().zip(&corpus.labels).zip(&kept) {
        if y != majority || k {
            sentences.push(s.clone());
            labels.push(y);
        }
    }
    LabeledCorpus::new(sentences, labels, corpus.dimension_label)
}

// ---------------------------------------------------------------------------
// Synthetic two-style corpus
// ---------------------------------------------------------------------------

/// Settings for [`two_style_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleCorpusConfig {
    /// Number of sentences; labels alternate `0, 1, 0, 1, ...`.
    pub n: usize,
    /// Letters per sentence.
    pub length: usize,
    /// Probability that a letter is drawn uniformly instead of following the style.
    pub noise: f64,
    pub seed: u64,
}

impl Default for StyleCorpusConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            length: 24,
            noise: 0.2,
            seed: 0,
        }
    }
}

/// Lowercase letter strings in two styles that share the same letter
/// frequencies: label 0 walks the alphabet forward (`a→b→…→z→a`), label 1
/// walks it backward. The style is visible only in how neighbouring letters
/// relate, never in which letters occur. Every sentence ends with
/// [`STYLE_END`], so the final token carries no style information either.
pub fn two_style_corpus(config: &StyleCorpusConfig) -> Result<LabeledCorpus> {
    if config.n == 0 || config.length == 0 {
        return Err(Error::invalid(
            "corpus size and sentence length must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&config.noise) {
        return Err(Error::invalid(format!(
            "noise {} outside [0, 1]",
            config.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sentences = Vec::with_capacity(config.n);
    let mut labels = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let label = (i % 2) as u8;
        let step = if label == 0 { 1 } else { 25 };
        let mut c: u8 = rng.random_range(0..26);
        let mut s = String::with_capacity(config.length);
        for _ in 0..config.length {
            s.push((b'a' + c) as char);
            c = if rng.random_bool(config.noise) {
                rng.random_range(0..26)
            } else {
                (c + step) % 26
            };
        }
        s.push(STYLE_END);
        sentences.push(s);
        labels.push(label);
    }
    LabeledCorpus::new(sentences, labels, DimensionLabel::Other)
}

/// Terminator of every [`two_style_corpus`] sentence.
pub const STYLE_END: char = '.';

/// Continuations appended by [`tagged_lines`] for labels 0 and 1.
pub const STYLE_TAGS: [char; 2] = ['-', '+'];

/// Sentences followed by their label tag, for language-model training.
///
/// A model trained on these lines must predict the tag after the final
/// token, which rewards tracking the style in the residual stream.
pub fn tagged_lines(corpus: &LabeledCorpus) -> Vec<String> {
    corpus
        .sentences
        .iter()
        .zip(&corpus.labels)
        .map(|(s, &y)| format!("{s}{}", STYLE_TAGS[y as usize]))
        .collect()
}

/// How rows are divided between probe training and evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Development/test halves, then train:validation 4:1 inside development.
    #[default]
    DevTest,
    /// A single train:test split at 4:1.
    Simple,
}

/// Seeded partition of `0..n` into train, validation and test indices.
///
/// Index lists are sorted ascending. Under [`SplitScheme::Simple`] the
/// validation list is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub scheme: SplitScheme,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    /// Development rows (train ∪ validation), ascending.
    pub fn dev(&self) -> Vec<usize> {
        let mut dev: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        dev.sort_unstable();
        dev
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Development/test 1:1, then train/validation 4:1 inside development.
pub fn make_splits(n: usize, seed: u64) -> Result<SplitPlan> {
    make_split_with(n, seed, SplitScheme::DevTest)
}

pub fn make_split_with(n: usize, seed: u64, scheme: SplitScheme) -> Result<SplitPlan> {
    let perm = shuffled(n, seed);
    match scheme {
        SplitScheme::DevTest => {
            if n < 5 {
                return Err(Error::invalid(format!(
                    "need at least 5 rows for a dev/test then train/val split, got {n}"
                )));
            }
            let n_test = n / 2;
            let n_dev = n - n_test;
            let n_val = (n_dev as f64 / 5.0).round_ties_even() as usize;
            let (test, dev) = perm.split_at(n_test);
            let (val, train) = dev.split_at(n_val);
            Ok(SplitPlan {
                seed,
                scheme,
                train: sorted(train.to_vec()),
                val: sorted(val.to_vec()),
                test: sorted(test.to_vec()),
            })
        }
        SplitScheme::Simple => {
            if n < 2 {
                return Err(Error::invalid(format!(
                    "need at least 2 rows for a train/test split, got {n}"
                )));
            }
            let n_test = ((n as f64 / 5.0).round_ties_even() as usize).clamp(1, n - 1);
            let (test, train) = perm.split_at(n_test);
            Ok(SplitPlan {
                seed,
                scheme,
                train: sorted(train.to_vec()),
                val: Vec::new(),
                test: sorted(test.to_vec()),
            })
        }
    }
}
