//! Three-stage curriculum training.
//!
//! Stage 1 trains with singleton groups (plain left-to-right), stage 2 with
//! contiguous groups of growing size, and stage 3 with groups cut from a
//! fresh random permutation of every sequence.

use std::fmt;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::{make_fixed, make_permuted, make_singleton, Grouping, GroupingError};
use crate::io::{save_checkpoint, Checkpoint, IoError, Tokenizer};
use crate::net::{grad_loss_into, init_params, ModelConfig, ModelParams, NetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("dataset is empty, nothing to schedule")]
    EmptySchedule,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step} (stage {stage}): {source}")]
    NonFinite {
        step: usize,
        stage: u8,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Stage lengths and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumPlan {
    /// Epochs of data spent in stages 1, 2 and 3.
    pub stage_fractions: [f64; 3],
    /// Group sizes of stage 2, in the order they are trained.
    pub stage2_sizes: Vec<usize>,
    /// Inclusive range stage-3 group sizes are drawn from.
    pub stage3_sizes: [usize; 2],
    /// Linear warmup length, restarted at every stage.
    pub warmup_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for CurriculumPlan {
    fn default() -> Self {
        Self {
            stage_fractions: [0.2, 0.2, 1.0],
            stage2_sizes: vec![2, 4],
            stage3_sizes: [1, 4],
            warmup_steps: 20,
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 8,
            seq_len: 256,
            seed: 0,
        }
    }
}

impl CurriculumPlan {
    /// The ablation arm that spends the whole data budget on stage 3.
    pub fn skip_to_stage3(mut self) -> Self {
        self.stage_fractions = [0.0, 0.0, self.stage_fractions.iter().sum()];
        self
    }

    pub fn validate(&self, max_len: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Plan(m));
        let f = self.stage_fractions;
        if f.iter().any(|&x| !x.is_finite() || x < 0.0) || f.iter().all(|&x| x == 0.0) {
            return bad(format!(
                "stage fractions {f:?} must be non-negative with one positive"
            ));
        }
        if f[1] > 0.0 && (self.stage2_sizes.is_empty() || self.stage2_sizes.contains(&0)) {
            return bad("stage 2 needs positive group sizes".into());
        }
        let [lo, hi] = self.stage3_sizes;
        if lo == 0 || lo > hi || hi > max_len {
            return bad(format!(
                "stage-3 size range {lo}..={hi} must lie in 1..={max_len}"
            ));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch size and sequence length must be positive".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!(
                "lr {} / weight decay {} invalid",
                self.lr, self.weight_decay
            ));
        }
        Ok(())
    }
}

/// How the grouping of each training sequence is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Singleton,
    Fixed(usize),
    /// Random permutation cut into groups of a size drawn from `min..=max`.
    Permuted {
        min: usize,
        max: usize,
    },
}

impl Sampler {
    pub fn grouping<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Grouping, GroupingError> {
        match *self {
            Sampler::Singleton => make_singleton(n),
            Sampler::Fixed(s) => make_fixed(n, s),
            Sampler::Permuted { min, max } => {
                let s = rng.random_range(min..=max);
                make_permuted(n, s, rng)
            }
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Singleton => write!(f, "1"),
            Sampler::Fixed(s) => write!(f, "{s}"),
            Sampler::Permuted { min, max } => write!(f, "{min}-{max}"),
        }
    }
}

/// A run of steps sharing one grouping sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub stage: u8,
    pub steps: usize,
    pub sampler: Sampler,
}

/// Splits the plan into phases. A stage gets
/// `floor(fraction * dataset_tokens / (batch * seq_len))` steps, at least one
/// when its fraction is positive. Stage 2 divides its steps evenly over its
/// sizes, the remainder going to the last size.
pub fn schedule(plan: &CurriculumPlan, dataset_tokens: usize) -> Result<Vec<Phase>, TrainError> {
    if dataset_tokens == 0 {
        return Err(TrainError::EmptySchedule);
    }
    let per_epoch = dataset_tokens as f64 / (plan.batch_size * plan.seq_len) as f64;
    let steps = |frac: f64| -> usize {
        if frac <= 0.0 {
            0
        } else {
            ((frac * per_epoch + 1e-9).floor() as usize).max(1)
        }
    };
    let mut phases = Vec::new();
    let s1 = steps(plan.stage_fractions[0]);
    phases.push(Phase {
        stage: 1,
        steps: s1,
        sampler: Sampler::Singleton,
    });
    let s2 = steps(plan.stage_fractions[1]);
    let k = plan.stage2_sizes.len().max(1);
    for (i, &s) in plan.stage2_sizes.iter().enumerate() {
        let share = if i + 1 == k {
            s2 - (s2 / k) * (k - 1)
        } else {
            s2 / k
        };
        phases.push(Phase {
            stage: 2,
            steps: share,
            sampler: Sampler::Fixed(s),
        });
    }
    let [min, max] = plan.stage3_sizes;
    phases.push(Phase {
        stage: 3,
        steps: steps(plan.stage_fractions[2]),
        sampler: Sampler::Permuted { min, max },
    });
    phases.retain(|p| p.steps > 0);
    Ok(phases)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every array in `params` from the matching gradient.
    pub fn step_slices(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, lr: f64, weight_decay: f64) {
        assert_eq!(
            params.len(),
            grads.len(),
            "gradient arrays do not match parameters"
        );
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (1.0 - lr * weight_decay) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "gradient array shape mismatch");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] = p[i] * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &ModelParams<f32>,
        lr: f64,
        weight_decay: f64,
    ) {
        let g: Vec<&[f32]> = grads.tensors().into_iter().map(|t| t.data).collect();
        self.step_slices(params.tensors_mut(), g, lr, weight_decay);
    }
}

/// Learning rate `step` steps into a stage.
pub fn warmup_lr(plan: &CurriculumPlan, step_in_stage: usize) -> f64 {
    if plan.warmup_steps == 0 {
        plan.lr
    } else {
        plan.lr * ((step_in_stage + 1) as f64 / plan.warmup_steps as f64).min(1.0)
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub sampler: Sampler,
    pub loss: f64,
    /// Number of per-token loss terms in the batch.
    pub terms: usize,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,stage,s,loss\n");
    for r in log {
        out.push_str(&format!("{},{},{},{:.6}\n", r.step, r.stage, r.sampler, r.loss));
    }
    out
}

/// Receives parameter snapshots during training.
pub trait CheckpointSink {
    fn save(&mut self, tag: &str, params: &ModelParams<f32>, step: usize) -> Result<(), TrainError>;
}

/// Discards every snapshot.
pub struct NullSink;

impl CheckpointSink for NullSink {
    fn save(&mut self, _: &str, _: &ModelParams<f32>, _: usize) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Keeps snapshots in memory, in the order they were taken.
#[derive(Default)]
pub struct MemorySink {
    pub saved: Vec<(String, usize, ModelParams<f32>)>,
}

impl CheckpointSink for MemorySink {
    fn save(&mut self, tag: &str, params: &ModelParams<f32>, step: usize) -> Result<(), TrainError> {
        self.saved.push((tag.to_string(), step, params.clone()));
        Ok(())
    }
}

/// Writes `<dir>/<tag>.a3ck` files.
pub struct DirSink {
    pub dir: PathBuf,
    pub tokenizer: Tokenizer,
    pub seed: u64,
}

impl CheckpointSink for DirSink {
    fn save(&mut self, tag: &str, params: &ModelParams<f32>, step: usize) -> Result<(), TrainError> {
        std::fs::create_dir_all(&self.dir).map_err(IoError::from)?;
        let ckpt = Checkpoint {
            params: params.clone(),
            tokenizer: self.tokenizer.clone(),
            seed: self.seed,
            step: step as u64,
        };
        save_checkpoint(&self.dir.join(format!("{tag}.a3ck")), &ckpt)?;
        Ok(())
    }
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub log: Vec<LossRecord>,
}

/// Initializes a model from `plan.seed` and trains it through the schedule.
pub fn train_run(
    cfg: &ModelConfig,
    plan: &CurriculumPlan,
    corpus: &[Vec<u32>],
    sink: &mut dyn CheckpointSink,
) -> Result<TrainOutput, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let params = init_params(cfg, &mut rng)?;
    train_from(params, plan, corpus, sink, &mut rng)
}

/// Trains existing parameters through the schedule of `plan`.
pub fn train_from(
    mut params: ModelParams<f32>,
    plan: &CurriculumPlan,
    corpus: &[Vec<u32>],
    sink: &mut dyn CheckpointSink,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutput, TrainError> {
    plan.validate(params.config.max_tokens())?;
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(TrainError::EmptyCorpus);
    }
    let corpus: Vec<&Vec<u32>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    let dataset_tokens: usize = corpus.iter().map(|s| s.len()).sum();
    let phases = schedule(plan, dataset_tokens)?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut opt = AdamW::default();
    let mut log = Vec::new();
    let mut grads = params.zeros_like();
    let mut step = 0;
    let mut stage_step = 0;
    for (pi, phase) in phases.iter().enumerate() {
        if pi > 0 && phases[pi - 1].stage != phase.stage {
            stage_step = 0;
        }
        for _ in 0..phase.steps {
            let mut batch = Vec::with_capacity(plan.batch_size);
            for _ in 0..plan.batch_size {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                let seq = corpus[order[cursor]];
                cursor += 1;
                let g = phase.sampler.grouping(seq.len(), rng)?;
                batch.push((seq, g));
            }
            let (loss, terms) = match batch_grad(&params, &batch, &mut grads) {
                Ok(v) => v,
                Err(source) => {
                    // The parameters have not been touched by this step yet.
                    sink.save("last_good", &params, step)?;
                    return Err(TrainError::NonFinite {
                        step,
                        stage: phase.stage,
                        source,
                    });
                }
            };
            let lr = warmup_lr(plan, stage_step);
            opt.step(&mut params, &grads, lr, plan.weight_decay);
            log.push(LossRecord {
                step,
                stage: phase.stage,
                sampler: phase.sampler,
                loss,
                terms,
            });
            if step % 50 == 0 {
                info!(
                    "step {step} stage {} s={} loss {loss:.4}",
                    phase.stage, phase.sampler
                );
            }
            step += 1;
            stage_step += 1;
        }
        let stage_done = phases.get(pi + 1).is_none_or(|next| next.stage != phase.stage);
        if stage_done {
            sink.save(&format!("stage{}", phase.stage), &params, step)?;
        }
    }
    sink.save("final", &params, step)?;
    Ok(TrainOutput { params, log })
}

/// Token-weighted mean loss of a batch; the gradient lands in `grads`.
/// A finite loss with non-finite gradients is rejected as well.
///
/// Per-sequence gradients are computed in parallel and summed in batch order
/// so results do not depend on the thread count.
fn batch_grad(
    params: &ModelParams<f32>,
    batch: &[(&Vec<u32>, Grouping)],
    grads: &mut ModelParams<f32>,
) -> Result<(f64, usize), NetError> {
    let parts: Vec<Result<(f32, ModelParams<f32>), NetError>> = batch
        .par_iter()
        .map(|(seq, g)| {
            let mut gr = params.zeros_like();
            let l = grad_loss_into(params, seq, g, &mut gr)?;
            Ok((l, gr))
        })
        .collect();
    let terms: usize = batch.iter().map(|(s, _)| s.len()).sum();
    for dst in grads.tensors_mut() {
        dst.fill(0.0);
    }
    let mut total = 0.0;
    for ((seq, _), part) in batch.iter().zip(parts) {
        let (l, gr) = part?;
        let w = seq.len() as f64 / terms as f64;
        total += l as f64 * w;
        grads.add_scaled(&gr, w as f32);
    }
    if !total.is_finite() || grads.first_non_finite().is_some() {
        return Err(NetError::NonFinite { layer: None });
    }
    Ok((total, terms))
}
