//! Likelihood evaluation, the brute-force normalization oracle, ROUGE and
//! the context-length sweep. All log quantities are natural logs.

use std::collections::HashMap;
use std::hash::Hash;

use log::warn;
use thiserror::Error;

use crate::grouping::{make_singleton, Grouping, GroupingError};
use crate::net::{forward, log_softmax, ModelParams, NetError};
use crate::tensor::Scalar;

/// Largest number of sequences [`joint_mass`] will enumerate.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("enumerating {vocab}^{len} sequences exceeds the limit of {ENUMERATION_LIMIT}")]
    TooLarge { vocab: usize, len: usize },
    #[error("vocabulary {given} does not match the model's {model}")]
    VocabMismatch { given: usize, model: usize },
    #[error("grouping covers {grouping} positions, expected {len}")]
    LengthMismatch { grouping: usize, len: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean negative log-likelihood per token, in nats.
    pub nll: f64,
    pub perplexity: f64,
    pub grouping: Grouping,
    pub tokens: usize,
    pub context_len: usize,
}

/// Per-token log-probabilities `log p(x_i | x_{earlier groups})`.
pub fn token_log_probs<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
) -> Result<Vec<f64>, EvalError> {
    let out = forward(params, tokens, g)?;
    Ok(log_softmax(&out.logits)
        .iter()
        .zip(tokens)
        .map(|(row, &x)| row[x as usize])
        .collect())
}

pub fn sequence_nll<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
) -> Result<EvalReport, EvalError> {
    let lp = token_log_probs(params, tokens, g)?;
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    Ok(EvalReport {
        nll,
        perplexity: nll.exp(),
        grouping: g.clone(),
        tokens: tokens.len(),
        context_len: tokens.len(),
    })
}

/// Mean NLL of `tokens[from..]` given everything before, left to right.
/// This is the self-judged score of a generated continuation.
pub fn continuation_nll<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    from: usize,
) -> Result<f64, EvalError> {
    let lp = token_log_probs(params, tokens, &make_singleton(tokens.len())?)?;
    let tail = &lp[from.min(lp.len())..];
    Ok(-tail.iter().sum::<f64>() / tail.len().max(1) as f64)
}

/// Total probability the model assigns to all `vocab^len` sequences under
/// grouping `g`, by exhaustive enumeration. A correctly masked model gives
/// exactly 1 for every grouping.
pub fn joint_mass<T: Scalar>(
    params: &ModelParams<T>,
    g: &Grouping,
    vocab: usize,
    len: usize,
) -> Result<f64, EvalError> {
    if vocab != params.config.vocab_size {
        return Err(EvalError::VocabMismatch {
            given: vocab,
            model: params.config.vocab_size,
        });
    }
    if g.len() != len {
        return Err(EvalError::LengthMismatch {
            grouping: g.len(),
            len,
        });
    }
    let count = (vocab as u64)
        .checked_pow(len as u32)
        .filter(|&c| c <= ENUMERATION_LIMIT)
        .ok_or(EvalError::TooLarge { vocab, len })?;
    let mut seq = vec![0u32; len];
    let mut total = 0.0;
    for mut code in 0..count {
        for x in seq.iter_mut() {
            *x = (code % vocab as u64) as u32;
            code /= vocab as u64;
        }
        total += token_log_probs(params, &seq, g)?.iter().sum::<f64>().exp();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_f1<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    fn grams<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
        let mut m = HashMap::new();
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
        m
    }
    let (c, r) = (grams(cand, n), grams(reference, n));
    let (nc, nr) = (c.values().sum::<usize>(), r.values().sum::<usize>());
    if nc == 0 && nr == 0 {
        // Both too short to have n-grams: only identical inputs match.
        return if cand == reference { 1.0 } else { 0.0 };
    }
    let overlap = c
        .iter()
        .map(|(k, &v)| v.min(r.get(k).copied().unwrap_or(0)))
        .sum();
    f1(overlap, nc, nr)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 over arbitrary token sequences.
pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScores {
    if candidate.is_empty() || reference.is_empty() {
        warn!("ROUGE of an empty sequence is zero");
        return RougeScores {
            rouge1: 0.0,
            rouge2: 0.0,
            rouge_l: 0.0,
        };
    }
    RougeScores {
        rouge1: ngram_f1(candidate, reference, 1),
        rouge2: ngram_f1(candidate, reference, 2),
        rouge_l: f1(lcs_len(candidate, reference), candidate.len(), reference.len()),
    }
}

/// ROUGE over whitespace-separated words.
pub fn rouge_words(candidate: &str, reference: &str) -> RougeScores {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge(&c, &r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthRow {
    pub length: usize,
    pub windows: usize,
    pub nll: f64,
}

/// Mean left-to-right NLL over non-overlapping windows of each length.
///
/// Every length reads the same prefix of `tokens` (the longest prefix that
/// is a whole number of windows of the longest length), so the rows differ
/// only in how much context each prediction gets.
pub fn length_sweep<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    lengths: &[usize],
) -> Result<Vec<LengthRow>, EvalError> {
    let Some(&longest) = lengths.iter().max() else {
        return Ok(Vec::new());
    };
    let span = &tokens[..tokens.len() - tokens.len() % longest.max(1)];
    lengths
        .iter()
        .map(|&len| {
            let g = make_singleton(len)?;
            let mut total = 0.0;
            let mut windows = 0;
            for w in span.chunks_exact(len) {
                total += sequence_nll(params, w, &g)?.nll;
                windows += 1;
            }
            Ok(LengthRow {
                length: len,
                windows,
                nll: total / windows.max(1) as f64,
            })
        })
        .collect()
}

pub fn length_sweep_csv(rows: &[LengthRow]) -> String {
    let mut out = String::from("length,windows,nll_nats\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.length, r.windows, r.nll));
    }
    out
}

/// `(max - min) / min`; zero for fewer than two values.
pub fn relative_spread(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    (max - min) / min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::make_permuted;
    use crate::net::{init_params, ModelConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 80,
            bos: 0,
            pad: None,
        }
    }

    fn random(vocab: usize, seed: u64) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(&cfg(vocab), &mut rng).unwrap();
        p.randomize_output(&mut rng);
        p
    }

    #[test]
    fn zero_output_gives_log_vocab() {
        let p: ModelParams<f64> = init_params(&cfg(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = make_permuted(7, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = sequence_nll(&p, &[1, 2, 3, 0, 1, 2, 3], &g).unwrap();
        assert!((r.nll - 4f64.ln()).abs() < 1e-6);
        assert!((r.perplexity - 4.0).abs() < 1e-6);
        let rows = length_sweep(&p, &[1; 70], &[8, 16]).unwrap();
        assert!(rows.iter().all(|r| (r.nll - 4f64.ln()).abs() < 1e-6));
        assert_eq!(rows[0].windows, 8);
        assert_eq!(rows[1].windows, 4);
        assert!(length_sweep(&p, &[1; 70], &[]).unwrap().is_empty());
    }

    #[test]
    fn nll_ignores_listing_order_within_groups() {
        let p = random(5, 3);
        let a = Grouping::new(vec![vec![0, 1, 2], vec![4, 5], vec![3]]);
        let b = Grouping::new(vec![vec![2, 1, 0], vec![5, 4], vec![3]]);
        let x = [1, 4, 2, 3, 0, 2];
        let (na, nb) = (
            sequence_nll(&p, &x, &a).unwrap().nll,
            sequence_nll(&p, &x, &b).unwrap().nll,
        );
        assert!((na - nb).abs() < 1e-6);
    }

    #[test]
    fn single_position_mass_is_one() {
        let p = random(2, 1);
        let m = joint_mass(&p, &make_singleton(1).unwrap(), 2, 1).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mass_sums_to_one_for_arbitrary_groupings() {
        let p = random(4, 2);
        for g in [
            make_singleton(4).unwrap(),
            Grouping::new(vec![vec![0, 1, 2, 3]]),
            Grouping::new(vec![vec![3, 1], vec![0], vec![2]]),
        ] {
            let m = joint_mass(&p, &g, 4, 4).unwrap();
            assert!((m - 1.0).abs() < 1e-9, "{m}");
        }
    }

    #[test]
    fn mass_refuses_large_or_mismatched_problems() {
        let p = random(4, 2);
        let g = make_singleton(11).unwrap();
        assert_eq!(
            joint_mass(&p, &g, 4, 11),
            Err(EvalError::TooLarge { vocab: 4, len: 11 })
        );
        assert!(matches!(
            joint_mass(&p, &make_singleton(2).unwrap(), 3, 2),
            Err(EvalError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn rouge_examples() {
        let id = rouge_words("the cat sat", "the cat sat");
        assert_eq!((id.rouge1, id.rouge2, id.rouge_l), (1.0, 1.0, 1.0));
        let none = rouge_words("a b", "c d");
        assert_eq!((none.rouge1, none.rouge2, none.rouge_l), (0.0, 0.0, 0.0));
        let r = rouge_words("a b c", "a c d");
        assert!((r.rouge1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.rouge2, 0.0);
        assert!((r.rouge_l - 2.0 / 3.0).abs() < 1e-12);
        let empty = rouge_words("", "a");
        assert_eq!(empty.rouge1, 0.0);
        assert_eq!(rouge(&[7u32], &[7u32]).rouge2, 1.0);
    }

    proptest! {
        #[test]
        fn rouge_of_self_is_one(x in proptest::collection::vec(0u8..6, 1..30)) {
            let r = rouge(&x, &x);
            prop_assert_eq!((r.rouge1, r.rouge2, r.rouge_l), (1.0, 1.0, 1.0));
        }

        #[test]
        fn rouge_is_symmetric_and_bounded(
            a in proptest::collection::vec(0u8..5, 1..20),
            b in proptest::collection::vec(0u8..5, 1..20),
        ) {
            let (x, y) = (rouge(&a, &b), rouge(&b, &a));
            prop_assert!((x.rouge1 - y.rouge1).abs() < 1e-12);
            prop_assert!((x.rouge_l - y.rouge_l).abs() < 1e-12);
            for v in [x.rouge1, x.rouge2, x.rouge_l] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn spread_and_csv() {
        assert_eq!(relative_spread(&[2.0, 2.5, 2.2]), 0.25);
        assert_eq!(relative_spread(&[1.0]), 0.0);
        let csv = length_sweep_csv(&[LengthRow {
            length: 64,
            windows: 2,
            nll: 1.25,
        }]);
        assert_eq!(csv, "length,windows,nll_nats\n64,2,1.250000\n");
    }
}
