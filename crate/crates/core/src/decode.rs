//! Groupwise sampling and dynamic resampling.
//!
//! Groupwise sampling walks a fixed grouping: one forward pass per group to
//! be generated, with every token of the group drawn independently from its
//! row. Dynamic resampling instead scores every unfinished position on each
//! pass and commits the best few according to a selection policy.
//!
//! Two random streams are used, both derived from the config seed: one for
//! token sampling and one for commit selection. Tokens are always drawn in
//! ascending position order, so two decoders that commit the same positions
//! in the same order produce the same tokens.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grouping::Grouping;
use crate::net::{forward, softmax, ModelParams, NetError};
use crate::tensor::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("distribution is not a finite probability vector")]
    BadDistribution,
    #[error("grouping does not line up with the template: {0}")]
    Misaligned(String),
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Groupwise,
    Dynamic,
}

/// Built-in commit criteria for dynamic resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Highest maximum probability first.
    Confidence,
    /// Lowest Shannon entropy first.
    Entropy,
    /// Uniformly random subset.
    Random,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Confidence => "confidence",
            Criterion::Entropy => "entropy",
            Criterion::Random => "random",
        }
    }
}

/// How finished positions are grouped in each dynamic-resampling pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DynamicContext {
    /// Known positions as singletons in position order, then every commit
    /// set as its own group, in commit order.
    #[default]
    CommitOrder,
    /// All finished positions in a single group.
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub group_size: usize,
    pub criterion: Criterion,
    pub temperature: f64,
    pub top_p: f64,
    /// Take the most likely token instead of sampling.
    pub greedy: bool,
    pub max_new: usize,
    pub seed: u64,
    pub context: DynamicContext,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Groupwise,
            group_size: 1,
            criterion: Criterion::Confidence,
            temperature: 1.5,
            top_p: 0.95,
            greedy: false,
            max_new: 32,
            seed: 0,
            context: DynamicContext::CommitOrder,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if self.group_size == 0 {
            return bad("group size must be positive".into());
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top-p {} must lie in (0, 1]", self.top_p));
        }
        Ok(())
    }

    fn sampling_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn selection_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        rng
    }
}

/// Draws a token from `dist` after temperature scaling and nucleus
/// truncation. The nucleus is the shortest prefix of tokens sorted by
/// probability (ties to the lower id) whose mass reaches `top_p`.
pub fn sample_token<R: Rng + ?Sized>(
    dist: &[f64],
    temperature: f64,
    top_p: f64,
    greedy: bool,
    rng: &mut R,
) -> Result<u32, DecodeError> {
    let total: f64 = dist.iter().sum();
    if dist.is_empty() || dist.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(DecodeError::BadDistribution);
    }
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    if greedy {
        return Ok(order[0] as u32);
    }
    // p^(1/T), scaled by the largest entry to stay in range.
    let log_max = dist[order[0]].ln();
    let scaled: Vec<f64> = order
        .iter()
        .map(|&i| ((dist[i].ln() - log_max) / temperature).exp())
        .collect();
    let z: f64 = scaled.iter().sum();
    let mut kept = 0;
    let mut mass = 0.0;
    for p in &scaled {
        kept += 1;
        mass += p / z;
        if mass >= top_p - 1e-9 {
            break;
        }
    }
    let kept_mass: f64 = scaled[..kept].iter().sum();
    let mut u = rng.random::<f64>() * kept_mass;
    for (k, p) in scaled[..kept].iter().enumerate() {
        if u < *p {
            return Ok(order[k] as u32);
        }
        u -= p;
    }
    Ok(order[kept - 1] as u32)
}

/// The ids a nucleus keeps, sorted by probability.
pub fn nucleus(dist: &[f64], temperature: f64, top_p: f64) -> Vec<u32> {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let scaled: Vec<f64> = order.iter().map(|&i| dist[i].powf(1.0 / temperature)).collect();
    let z: f64 = scaled.iter().sum();
    let mut mass = 0.0;
    let mut out = Vec::new();
    for (k, p) in scaled.iter().enumerate() {
        out.push(order[k] as u32);
        mass += p / z;
        if mass >= top_p - 1e-9 {
            break;
        }
    }
    out
}

/// Zeroes reserved ids (the BOS sentinel, padding) and renormalizes.
pub fn content_distribution(row: &[f64], reserved: &[u32]) -> Vec<f64> {
    let mut out = row.to_vec();
    for &r in reserved {
        if let Some(p) = out.get_mut(r as usize) {
            *p = 0.0;
        }
    }
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

pub fn entropy(dist: &[f64]) -> f64 {
    -dist.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Chooses which unfinished positions to commit in a dynamic-resampling pass.
pub trait CommitPolicy {
    /// Name recorded in the commit trace.
    fn name(&self) -> &str;

    /// A score per row; higher commits first. The returned value is also
    /// what the trace records.
    fn score(&mut self, position: usize, dist: &[f64], rng: &mut ChaCha8Rng) -> f64;

    /// Whether a higher score is better.
    fn higher_is_better(&self) -> bool {
        true
    }
}

impl CommitPolicy for Criterion {
    fn name(&self) -> &str {
        Criterion::name(self)
    }

    fn score(&mut self, _: usize, dist: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Criterion::Confidence => dist.iter().copied().fold(0.0, f64::max),
            Criterion::Entropy => entropy(dist),
            Criterion::Random => rng.random::<f64>(),
        }
    }

    fn higher_is_better(&self) -> bool {
        !matches!(self, Criterion::Entropy)
    }
}

/// Picks `min(g, rows.len())` positions by `policy`, ties to the lowest
/// position. Returns the chosen positions in ascending order with their
/// scores.
pub fn select_commit(
    rows: &[(usize, Vec<f64>)],
    policy: &mut dyn CommitPolicy,
    g: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .map(|(pos, dist)| (*pos, policy.score(*pos, dist, rng)))
        .collect();
    let better = policy.higher_is_better();
    scored.sort_by(|a, b| {
        let ord = if better {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        ord.then(a.0.cmp(&b.0))
    });
    scored.truncate(g.min(rows.len()));
    scored.sort_by_key(|s| s.0);
    scored
}

/// One dynamic-resampling pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitStep {
    pub iteration: usize,
    /// Committed positions with their criterion scores, ascending.
    pub committed: Vec<(usize, f64)>,
    /// Unfinished positions the pass produced distributions for.
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub forward_passes: usize,
    /// Total number of predicted rows the passes actually used.
    pub evaluated_positions: usize,
    /// Commit trace; empty for groupwise sampling.
    pub trace: Vec<CommitStep>,
    pub criterion: String,
}

impl DecodeOutput {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,position,criterion,score\n");
        for step in &self.trace {
            for (pos, score) in &step.committed {
                out.push_str(&format!(
                    "{},{},{},{:.6}\n",
                    step.iteration, pos, self.criterion, score
                ));
            }
        }
        out
    }
}

fn row_distributions<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
    positions: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>, DecodeError> {
    let out = forward(params, tokens, g)?;
    let sub = crate::tensor::Mat::from_vec(
        positions.len(),
        out.logits.cols,
        positions
            .iter()
            .flat_map(|&p| out.logits.row(p).to_vec())
            .collect(),
    );
    let reserved = params.config.reserved();
    Ok(positions
        .iter()
        .zip(softmax(&sub))
        .map(|(&p, row)| (p, content_distribution(&row, &reserved)))
        .collect())
}

/// Fills the unknown positions of `template` group by group.
///
/// The known positions must be exactly the leading groups of `g`; every
/// later group is generated in one forward pass.
pub fn groupwise_fill<T: Scalar>(
    params: &ModelParams<T>,
    template: &[Option<u32>],
    g: &Grouping,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    g.validate(template.len()).map_err(NetError::from)?;
    let groups = g.groups();
    let k0 = groups
        .iter()
        .take_while(|grp| grp.iter().all(|&i| template[i].is_some()))
        .count();
    if let Some(bad) = groups[k0..].iter().flatten().find(|&&i| template[i].is_some()) {
        return Err(DecodeError::Misaligned(format!(
            "known position {bad} lies after the first group to generate"
        )));
    }
    let placeholder = params.config.bos;
    let mut tokens: Vec<u32> = template.iter().map(|t| t.unwrap_or(placeholder)).collect();
    let mut rng = cfg.sampling_rng();
    let mut passes = 0;
    let mut evaluated = 0;
    for grp in &groups[k0..] {
        let mut positions = grp.clone();
        positions.sort_unstable();
        let rows = row_distributions(params, &tokens, g, &positions)?;
        passes += 1;
        evaluated += positions.len();
        for (pos, dist) in rows {
            tokens[pos] = sample_token(&dist, cfg.temperature, cfg.top_p, cfg.greedy, &mut rng)?;
        }
    }
    Ok(DecodeOutput {
        tokens,
        forward_passes: passes,
        evaluated_positions: evaluated,
        trace: Vec::new(),
        criterion: "groupwise".into(),
    })
}

/// Continues `prompt` by `cfg.max_new` tokens generated in contiguous groups
/// of `cfg.group_size`.
pub fn groupwise_sample<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    let n = prompt.len() + cfg.max_new;
    let mut groups: Vec<Vec<usize>> = (0..prompt.len()).map(|i| vec![i]).collect();
    let targets: Vec<usize> = (prompt.len()..n).collect();
    groups.extend(targets.chunks(cfg.group_size.max(1)).map(<[usize]>::to_vec));
    groupwise_fill(
        params,
        &template(prompt, cfg.max_new),
        &Grouping::new(groups),
        cfg,
    )
}

/// `prompt` followed by `blanks` unknown positions.
pub fn template(prompt: &[u32], blanks: usize) -> Vec<Option<u32>> {
    prompt
        .iter()
        .map(|&t| Some(t))
        .chain(std::iter::repeat_n(None, blanks))
        .collect()
}

/// Dynamic resampling with the built-in criterion of `cfg` and the context
/// layout of `cfg.context`.
pub fn dynamic_resample<T: Scalar>(
    params: &ModelParams<T>,
    template: &[Option<u32>],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    let known: Vec<usize> = (0..template.len()).filter(|&i| template[i].is_some()).collect();
    let context = match cfg.context {
        DynamicContext::CommitOrder => known.into_iter().map(|i| vec![i]).collect(),
        DynamicContext::Merged if known.is_empty() => Vec::new(),
        DynamicContext::Merged => vec![known],
    };
    let mut criterion = cfg.criterion;
    dynamic_resample_with(params, template, context, &mut criterion, cfg)
}

/// Dynamic resampling with an explicit grouping of the known positions and
/// an arbitrary commit policy.
///
/// Each pass groups the sequence as `context | commits so far | unfinished`
/// and reads `p(x_i | finished)` for every unfinished `i` off one forward
/// pass. Under [`DynamicContext::Merged`] the commits are folded into the
/// last context group instead of getting groups of their own.
pub fn dynamic_resample_with<T: Scalar>(
    params: &ModelParams<T>,
    template: &[Option<u32>],
    context: Vec<Vec<usize>>,
    policy: &mut dyn CommitPolicy,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    let placeholder = params.config.bos;
    let mut tokens: Vec<u32> = template.iter().map(|t| t.unwrap_or(placeholder)).collect();
    let mut unfinished: Vec<usize> = (0..template.len()).filter(|&i| template[i].is_none()).collect();
    let mut out = DecodeOutput {
        tokens: Vec::new(),
        forward_passes: 0,
        evaluated_positions: 0,
        trace: Vec::new(),
        criterion: policy.name().to_string(),
    };
    if unfinished.is_empty() {
        warn!("template has no blank positions; nothing to decode");
        out.tokens = tokens;
        return Ok(out);
    }
    let mut covered: Vec<bool> = vec![false; template.len()];
    for &i in context.iter().flatten() {
        if template.get(i).copied().flatten().is_none() || covered[i] {
            return Err(DecodeError::Misaligned(format!(
                "context group entry {i} is not a distinct known position"
            )));
        }
        covered[i] = true;
    }
    if covered.iter().zip(template).any(|(&c, t)| !c && t.is_some()) {
        return Err(DecodeError::Misaligned(
            "context groups miss a known position".into(),
        ));
    }

    let mut groups = context;
    let mut sample_rng = cfg.sampling_rng();
    let mut select_rng = cfg.selection_rng();
    let mut iteration = 0;
    while !unfinished.is_empty() {
        let mut current = groups.clone();
        current.push(unfinished.clone());
        let rows = row_distributions(params, &tokens, &Grouping::new(current), &unfinished)?;
        out.forward_passes += 1;
        out.evaluated_positions += rows.len();

        let committed = select_commit(&rows, policy, cfg.group_size, &mut select_rng);
        for &(pos, _) in &committed {
            let dist = &rows.iter().find(|(p, _)| *p == pos).expect("selected row").1;
            tokens[pos] = sample_token(dist, cfg.temperature, cfg.top_p, cfg.greedy, &mut sample_rng)?;
        }
        let positions: Vec<usize> = committed.iter().map(|c| c.0).collect();
        unfinished.retain(|p| !positions.contains(p));
        match cfg.context {
            DynamicContext::Merged if !groups.is_empty() => {
                let last = groups.len() - 1;
                groups[last].extend(&positions);
            }
            _ => groups.push(positions),
        }
        out.trace.push(CommitStep {
            iteration,
            committed,
            evaluated: rows.len(),
        });
        iteration += 1;
    }
    out.tokens = tokens;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ModelConfig};

    fn model(seed: u64) -> ModelParams<f32> {
        let cfg = ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 24,
            bos: 0,
            pad: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: ModelParams<f32> = init_params(&cfg, &mut rng).unwrap();
        p.randomize_output(&mut rng);
        p
    }

    #[test]
    fn point_mass_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (t, p) in [(0.5, 0.1), (1.0, 1.0), (3.0, 0.95)] {
            assert_eq!(
                sample_token(&[1.0, 0.0, 0.0, 0.0], t, p, false, &mut rng).unwrap(),
                0
            );
        }
    }

    #[test]
    fn nucleus_is_the_shortest_prefix() {
        assert_eq!(nucleus(&[0.5, 0.3, 0.1, 0.1], 1.0, 0.8), vec![0, 1]);
        assert_eq!(nucleus(&[0.1, 0.3, 0.5, 0.1], 1.0, 0.8), vec![2, 1]);
        // Ties go to the lower id.
        assert_eq!(nucleus(&[0.25; 4], 1.0, 0.5), vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = sample_token(&[0.5, 0.3, 0.1, 0.1], 1.0, 0.8, false, &mut rng).unwrap();
            assert!(t < 2);
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..20)
                .map(|_| sample_token(&[0.25; 4], 1.0, 1.0, false, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.iter().any(|&t| t != a[0]));
    }

    #[test]
    fn temperature_sharpens_and_flattens() {
        let dist = [0.6, 0.3, 0.1];
        let count = |t: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..4000)
                .filter(|_| sample_token(&dist, t, 1.0, false, &mut rng).unwrap() == 0)
                .count()
        };
        assert!(count(0.5) > count(1.0));
        assert!(count(1.0) > count(2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            sample_token(&[0.2, 0.5, 0.3], 1.0, 1.0, true, &mut rng).unwrap(),
            1
        );
    }

    #[test]
    fn malformed_distributions_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [vec![f64::NAN, 1.0], vec![0.5, 0.2], vec![]] {
            assert_eq!(
                sample_token(&bad, 1.0, 1.0, false, &mut rng),
                Err(DecodeError::BadDistribution)
            );
        }
    }

    #[test]
    fn selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows = vec![(3, vec![0.97, 0.01, 0.01, 0.01]), (5, vec![0.25; 4])];
        let pick = |c: Criterion, rows: &[(usize, Vec<f64>)], rng: &mut ChaCha8Rng| {
            select_commit(rows, &mut c.clone(), 1, rng)
        };
        assert_eq!(pick(Criterion::Confidence, &rows, &mut rng)[0].0, 3);
        let e = pick(Criterion::Entropy, &rows, &mut rng);
        assert_eq!(e[0].0, 3);
        assert!((e[0].1 - 0.168).abs() < 1e-3);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        let twins = vec![(7, vec![0.5, 0.5]), (2, vec![0.5, 0.5])];
        assert_eq!(pick(Criterion::Confidence, &twins, &mut rng)[0].0, 2);
        let all = select_commit(&rows, &mut Criterion::Random, 5, &mut rng);
        assert_eq!(all.iter().map(|c| c.0).collect::<Vec<_>>(), vec![3, 5]);
    }

    #[test]
    fn reserved_ids_are_never_sampled() {
        let d = content_distribution(&[0.5, 0.25, 0.25], &[0]);
        assert_eq!(d, vec![0.0, 0.5, 0.5]);
        let p = model(3);
        let cfg = DecodeConfig {
            max_new: 10,
            temperature: 3.0,
            top_p: 1.0,
            ..Default::default()
        };
        let out = groupwise_sample(&p, &[1, 2], &cfg).unwrap();
        assert!(out.tokens.iter().all(|&t| t != 0));
    }

    #[test]
    fn groupwise_pass_count() {
        let p = model(1);
        let cfg = DecodeConfig {
            group_size: 4,
            max_new: 8,
            ..Default::default()
        };
        let out = groupwise_sample(&p, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(out.forward_passes, 2);
        assert_eq!(out.evaluated_positions, 8);
        assert_eq!(&out.tokens[..3], &[1, 2, 3]);
    }

    #[test]
    fn groupwise_rejects_misaligned_templates() {
        let p = model(1);
        let g = Grouping::new(vec![vec![0], vec![1, 2], vec![3]]);
        let t = [Some(1), None, Some(2), None];
        assert!(matches!(
            groupwise_fill(&p, &t, &g, &DecodeConfig::default()),
            Err(DecodeError::Misaligned(_))
        ));
    }

    #[test]
    fn dynamic_pass_count_and_trace_partition() {
        let p = model(2);
        let blanks = [2, 3, 5, 6, 7, 9, 10, 11];
        let t: Vec<Option<u32>> = (0..12)
            .map(|i| {
                if blanks.contains(&i) {
                    None
                } else {
                    Some(1 + i as u32 % 6)
                }
            })
            .collect();
        for g in [1, 2, 3, 8, 20] {
            for criterion in [Criterion::Confidence, Criterion::Entropy, Criterion::Random] {
                let cfg = DecodeConfig {
                    strategy: Strategy::Dynamic,
                    group_size: g,
                    criterion,
                    ..Default::default()
                };
                let out = dynamic_resample(&p, &t, &cfg).unwrap();
                assert_eq!(out.forward_passes, blanks.len().div_ceil(g));
                let mut seen: Vec<usize> = out
                    .trace
                    .iter()
                    .flat_map(|s| s.committed.iter().map(|c| c.0))
                    .collect();
                seen.sort_unstable();
                assert_eq!(seen, blanks);
                for (i, tok) in t.iter().enumerate() {
                    if let Some(v) = tok {
                        assert_eq!(out.tokens[i], *v);
                    }
                }
            }
        }
    }

    #[test]
    fn dynamic_with_one_group_equals_one_groupwise_step() {
        let p = model(5);
        let t = template(&[1, 2, 3], 5);
        let base = DecodeConfig {
            group_size: 5,
            max_new: 5,
            seed: 11,
            ..Default::default()
        };
        let g = groupwise_sample(&p, &[1, 2, 3], &base).unwrap();
        let d = dynamic_resample(
            &p,
            &t,
            &DecodeConfig {
                strategy: Strategy::Dynamic,
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(d.forward_passes, 1);
        assert_eq!(d.tokens, g.tokens);
    }

    #[test]
    fn empty_blank_set_is_a_no_op() {
        let p = model(5);
        let t = template(&[1, 2, 3], 0);
        let out = dynamic_resample(&p, &t, &DecodeConfig::default()).unwrap();
        assert_eq!(out.tokens, vec![1, 2, 3]);
        assert_eq!(out.forward_passes, 0);
    }

    #[test]
    fn merged_context_also_terminates() {
        let p = model(6);
        let cfg = DecodeConfig {
            strategy: Strategy::Dynamic,
            group_size: 3,
            context: DynamicContext::Merged,
            ..Default::default()
        };
        let out = dynamic_resample(&p, &template(&[4, 4], 7), &cfg).unwrap();
        assert_eq!(out.forward_passes, 3);
        assert!(out.tokens.iter().all(|&t| t != 0));
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let p = model(8);
        let cfg = DecodeConfig {
            greedy: true,
            group_size: 2,
            max_new: 6,
            ..Default::default()
        };
        let a = groupwise_sample(&p, &[3], &cfg).unwrap();
        let b = groupwise_sample(&p, &[3], &DecodeConfig { seed: 99, ..cfg }).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn trace_csv_lists_every_commit() {
        let p = model(2);
        let cfg = DecodeConfig {
            strategy: Strategy::Dynamic,
            group_size: 2,
            ..Default::default()
        };
        let out = dynamic_resample(&p, &template(&[1], 3), &cfg).unwrap();
        let csv = out.trace_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("iteration,position,criterion,score\n0,"));
    }
}
