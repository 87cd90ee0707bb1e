//! The two-stream transformer.
//!
//! The content stream embeds observed tokens and attends to its own group and
//! all earlier groups. The query stream starts every position from a shared
//! learned vector plus that position's embedding, attends only to content
//! states of strictly earlier groups, and produces the logits. Keys and
//! values of both streams come from the content stream.

mod gradcheck;
mod params;
mod pass;

use thiserror::Error;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use params::{init_params, LayerParams, ModelConfig, ModelParams, TensorView};

use crate::grouping::{Grouping, Violation};
use crate::masking::MaskError;
use crate::tensor::{Mat, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of {vocab_size}")]
    InvalidToken { token: u32, vocab_size: usize },
    #[error(transparent)]
    Grouping(#[from] Violation),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("non-finite loss (first non-finite layer output: {layer:?})")]
    NonFinite { layer: Option<usize> },
    #[error("internal error: {0}")]
    Internal(String),
}

/// Query-stream logits plus the content states that fed the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `n × vocab_size`; row `i` parameterizes `p(x_i | earlier groups)`.
    pub logits: Mat<T>,
    /// `n × d_model` content states entering the final layer (BOS dropped).
    pub content: Mat<T>,
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
) -> Result<ForwardOutput<T>, NetError> {
    let lay = pass::Layout::new(params, tokens, g)?;
    let trace = pass::run(params, &lay);
    Ok(ForwardOutput {
        logits: trace.logits,
        content: trace.content.slice_rows(1, lay.t),
    })
}

/// Mean per-token cross-entropy and its gradient.
pub fn grad_loss<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
) -> Result<(T, ModelParams<T>), NetError> {
    let mut grads = params.zeros_like();
    let loss = grad_loss_into(params, tokens, g, &mut grads)?;
    Ok((loss, grads))
}

/// Like [`grad_loss`] but accumulates into existing gradient arrays.
pub fn grad_loss_into<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    g: &Grouping,
    grads: &mut ModelParams<T>,
) -> Result<T, NetError> {
    let lay = pass::Layout::new(params, tokens, g)?;
    let trace = pass::run(params, &lay);
    pass::backward(params, &lay, &trace, grads)
}

/// Mean per-token cross-entropy without gradients.
pub fn loss<T: Scalar>(params: &ModelParams<T>, tokens: &[u32], g: &Grouping) -> Result<T, NetError> {
    let out = forward(params, tokens, g)?;
    let logp = pass::log_softmax_rows(&out.logits);
    let n = tokens.len();
    let total: f64 = tokens
        .iter()
        .enumerate()
        .map(|(i, &x)| -logp.row(i)[x as usize].to_f64())
        .sum();
    let loss = total / n as f64;
    if loss.is_finite() {
        Ok(T::from_f64(loss))
    } else {
        Err(NetError::NonFinite { layer: None })
    }
}

/// Row-wise log-softmax of a logits matrix, in `f64`.
pub fn log_softmax<T: Scalar>(logits: &Mat<T>) -> Vec<Vec<f64>> {
    (0..logits.rows)
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.into_iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Row-wise softmax of a logits matrix, in `f64`.
pub fn softmax<T: Scalar>(logits: &Mat<T>) -> Vec<Vec<f64>> {
    log_softmax(logits)
        .into_iter()
        .map(|row| row.into_iter().map(f64::exp).collect())
        .collect()
}
