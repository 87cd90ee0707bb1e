//! Central-difference gradient checking.
//!
//! The oracle only evaluates the loss; it never touches the reverse pass.

use rand::seq::index::sample;
use rand::Rng;

use super::{grad_loss, loss, ModelParams, NetError};
use crate::grouping::Grouping;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    /// (tensor name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is zero compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients with central differences of step `step` on
/// `samples` coordinates drawn uniformly from all parameters.
pub fn check_gradients<R: Rng + ?Sized>(
    params: &ModelParams<f64>,
    tokens: &[u32],
    g: &Grouping,
    samples: usize,
    step: f64,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradCheckReport, NetError> {
    let (_, grads) = grad_loss(params, tokens, g)?;
    let sizes: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    let analytic: Vec<f64> = grads
        .tensors()
        .into_iter()
        .flat_map(|t| t.data.to_vec())
        .collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for flat in sample(rng, total, samples.min(total)) {
        let (tensor, offset) = locate(&sizes, flat);
        let original = probe.tensors_mut()[tensor][offset];
        probe.tensors_mut()[tensor][offset] = original + step;
        let plus = loss(&probe, tokens, g)?;
        probe.tensors_mut()[tensor][offset] = original - step;
        let minus = loss(&probe, tokens, g)?;
        probe.tensors_mut()[tensor][offset] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[flat], numeric);
        report.checked += 1;
        if err < tolerance {
            report.passed += 1;
        }
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((sizes[tensor].0.clone(), offset, analytic[flat], numeric));
        }
    }
    Ok(report)
}

fn locate(sizes: &[(String, usize)], mut flat: usize) -> (usize, usize) {
    for (i, (_, size)) in sizes.iter().enumerate() {
        if flat < *size {
            return (i, flat);
        }
        flat -= size;
    }
    unreachable!("flat index beyond parameter count")
}
