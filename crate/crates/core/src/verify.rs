//! Executable correctness checks: mask soundness, information flow,
//! normalization and gradients. Each suite returns a result instead of
//! panicking so the CLI can report all of them.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::joint_mass;
use crate::grouping::{make_permuted, make_singleton, Grouping};
use crate::masking::{check_flow, MaskPair};
use crate::net::{check_gradients, forward, init_params, ModelConfig, ModelParams, NetError};
use crate::tensor::Scalar;

/// Allowed logit change at positions that must not see a perturbed token.
pub const LEAKAGE_TOL: f64 = 1e-5;
pub const MASS_TOL: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
pub const GRAD_PASS_RATE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// A random grouping of `n` positions: singleton, contiguous or permuted.
pub fn random_grouping<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Grouping {
    let s = rng.random_range(1..=n.clamp(1, 4));
    match rng.random_range(0..3) {
        0 => make_singleton(n).expect("n >= 1"),
        1 => crate::grouping::make_fixed(n, s).expect("n, s >= 1"),
        _ => make_permuted(n, s, rng).expect("n, s >= 1"),
    }
}

/// Recomputes both masks of `cases` random groupings from their definition.
pub fn flow_suite(cases: usize, max_n: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(1..=max_n);
        let g = random_grouping(n, &mut rng);
        for bos in [false, true] {
            let result = MaskPair::new(&g, bos)
                .map_err(|e| e.to_string())
                .and_then(|mp| check_flow(&mp, &g).map_err(|e| e.to_string()));
            if let Err(e) = result {
                return SuiteResult {
                    name: "mask flow",
                    passed: false,
                    detail: format!("case {case} ({g}): {e}"),
                };
            }
        }
    }
    SuiteResult {
        name: "mask flow",
        passed: true,
        detail: format!("{cases} groupings, both masks match their definition"),
    }
}

/// Outcome of perturbing every position of one sequence in turn.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LeakageStats {
    /// Largest logit change at a position that must not see the token.
    pub max_forbidden: f64,
    /// Largest logit change at a position that may see the token.
    pub max_allowed: f64,
}

/// Perturbs each position `j` of `tokens` and measures the logit change at
/// every position whose group does not come after `j`'s group.
pub fn leakage_case<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
    rng: &mut R,
) -> Result<LeakageStats, NetError> {
    let content: Vec<u32> = (0..params.config.vocab_size as u32)
        .filter(|t| !params.config.reserved().contains(t))
        .collect();
    let rank = g.group_of();
    let base = forward(params, tokens, g)?;
    let mut stats = LeakageStats::default();
    for j in 0..tokens.len() {
        let mut changed = tokens.to_vec();
        while changed[j] == tokens[j] && content.len() > 1 {
            changed[j] = content[rng.random_range(0..content.len())];
        }
        let out = forward(params, &changed, g)?;
        for i in 0..tokens.len() {
            let diff = base
                .logits
                .row(i)
                .iter()
                .zip(out.logits.row(i))
                .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
                .fold(0.0, f64::max);
            if rank[i] <= rank[j] {
                stats.max_forbidden = stats.max_forbidden.max(diff);
            } else {
                stats.max_allowed = stats.max_allowed.max(diff);
            }
        }
    }
    Ok(stats)
}

fn tiny_config(vocab: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_len,
        bos: 0,
        pad: None,
    }
}

/// Fresh parameters with a random output projection, so predictions are
/// not uniform.
pub fn random_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_params(cfg, &mut rng)?;
    p.randomize_output(&mut rng);
    Ok(p)
}

/// Perturbation test over `cases` random sequences of length `<= max_n`.
pub fn leakage_suite<T: Scalar>(
    params: &ModelParams<T>,
    cases: usize,
    max_n: usize,
    seed: u64,
) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_n = max_n.min(params.config.max_tokens());
    let content_ids: Vec<u32> = (0..params.config.vocab_size as u32)
        .filter(|t| !params.config.reserved().contains(t))
        .collect();
    let mut worst = LeakageStats::default();
    for case in 0..cases {
        let n = rng.random_range(1..=max_n);
        let g = random_grouping(n, &mut rng);
        let tokens: Vec<u32> = (0..n)
            .map(|_| content_ids[rng.random_range(0..content_ids.len())])
            .collect();
        match leakage_case(params, &tokens, &g, &mut rng) {
            Ok(s) => {
                worst.max_forbidden = worst.max_forbidden.max(s.max_forbidden);
                worst.max_allowed = worst.max_allowed.max(s.max_allowed);
            }
            Err(e) => {
                return SuiteResult {
                    name: "leakage",
                    passed: false,
                    detail: format!("case {case}: {e}"),
                }
            }
        }
    }
    SuiteResult {
        name: "leakage",
        passed: worst.max_forbidden <= LEAKAGE_TOL,
        detail: format!(
            "{cases} cases, max forbidden change {:.3e} (tolerance {LEAKAGE_TOL:.0e}), max allowed change {:.3e}",
            worst.max_forbidden, worst.max_allowed
        ),
    }
}

/// The groupings the normalization oracle enumerates for length 5.
pub fn normalization_groupings(seed: u64) -> Vec<Grouping> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        make_singleton(5).expect("nonzero"),
        Grouping::new(vec![(0..5).collect()]),
        Grouping::new(vec![vec![0, 1, 2], vec![4], vec![3]]),
        make_permuted(5, 2, &mut rng).expect("nonzero"),
        make_permuted(5, 3, &mut rng).expect("nonzero"),
    ]
}

/// Sums the joint probability of all `4^5` sequences under five groupings.
pub fn normalization_suite(seed: u64) -> SuiteResult {
    let name = "normalization";
    let params: ModelParams<f64> = match random_model(&tiny_config(4, 8), seed) {
        Ok(p) => p,
        Err(e) => {
            return SuiteResult {
                name,
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let mut masses = Vec::new();
    for g in normalization_groupings(seed) {
        match joint_mass(&params, &g, 4, 5) {
            Ok(m) => masses.push(m),
            Err(e) => {
                return SuiteResult {
                    name,
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    let worst = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    SuiteResult {
        name,
        passed: worst <= MASS_TOL,
        detail: format!("masses {masses:.8?}, worst deviation {worst:.2e}"),
    }
}

/// Central differences against the reverse pass under a singleton and a
/// permuted grouping.
pub fn gradient_suite(samples: usize, seed: u64) -> SuiteResult {
    let name = "gradients";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ModelParams<f64> = match random_model(&tiny_config(5, 8), seed) {
        Ok(p) => p,
        Err(e) => {
            return SuiteResult {
                name,
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let tokens: Vec<u32> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let groupings = [
        make_singleton(6).expect("nonzero"),
        make_permuted(6, 2, &mut rng).expect("nonzero"),
    ];
    let mut details = Vec::new();
    let mut passed = true;
    for g in &groupings {
        match check_gradients(&params, &tokens, g, samples, 1e-3, GRAD_REL_TOL, &mut rng) {
            Ok(r) => {
                passed &= r.pass_rate() >= GRAD_PASS_RATE;
                details.push(format!(
                    "{}/{} coordinates within {GRAD_REL_TOL:.0e} (max rel err {:.2e})",
                    r.passed, r.checked, r.max_rel_err
                ));
            }
            Err(e) => {
                return SuiteResult {
                    name,
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    SuiteResult {
        name,
        passed,
        detail: details.join("; "),
    }
}

/// All four suites. `model` is used for the leakage test when given;
/// otherwise a fresh tiny model is.
pub fn run_all(model: Option<&ModelParams<f32>>, small: bool, seed: u64) -> Vec<SuiteResult> {
    let (flow_cases, leak_cases, grad_samples) = if small { (30, 20, 100) } else { (100, 200, 500) };
    let leakage = match model {
        Some(p) => leakage_suite(p, leak_cases.min(40), 12, seed),
        None => match random_model::<f64>(&tiny_config(6, 16), seed) {
            Ok(p) => leakage_suite(&p, leak_cases, 12, seed),
            Err(e) => SuiteResult {
                name: "leakage",
                passed: false,
                detail: e.to_string(),
            },
        },
    };
    vec![
        flow_suite(flow_cases, 12, seed),
        leakage,
        normalization_suite(seed),
        gradient_suite(grad_samples, seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let results = run_all(None, true, 1);
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn later_rows_move_and_earlier_rows_do_not() {
        let p: ModelParams<f64> = random_model(&tiny_config(6, 16), 2).unwrap();
        let g = make_singleton(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = leakage_case(&p, &[1, 2, 3, 4, 5, 1], &g, &mut rng).unwrap();
        assert_eq!(s.max_forbidden, 0.0);
        assert!(s.max_allowed > 1e-3);
    }
}
