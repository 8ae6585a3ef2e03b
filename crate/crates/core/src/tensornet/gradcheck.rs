use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{QNet, Tensor};
use crate::{Error, Result};

/// Above this many checkable entries only a fixed random subsample is used.
pub const GRAD_CHECK_FULL_LIMIT: usize = 10_000;
const SAMPLES_PER_TENSOR: usize = 48;
/// Magnitudes below this are treated as this for relative error, so values
/// that are zero up to rounding do not blow up the ratio.
const ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Where the worst error occurred, e.g. `layer 2 weight[17]`.
    pub worst: String,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU or pooling kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic backward pass against central differences of a
/// fixed random linear functional of the Q-values.
pub fn grad_check(net: &QNet, input: &Tensor, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Range(format!("finite-difference step must be positive, got {eps}")));
    }
    let (q, cache) = net.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let coeffs: Vec<f64> = (0..q.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out_grad = Tensor::from_vec(&q.shape, coeffs.clone())?;
    let grads = net.backward(&cache, &out_grad)?;
    let base_pattern = cache.activation_pattern();

    let objective = |net: &QNet, x: &Tensor| -> Result<(f64, bool)> {
        let (q, c) = net.forward(x)?;
        let l = q.data.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        Ok((l, c.activation_pattern() == base_pattern))
    };

    // (label, analytic values) for every tensor, parameters first
    let mut targets: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, g) in grads.params.iter().enumerate() {
        if let Some((dw, db)) = g {
            targets.push((format!("layer {i} weight"), dw.data.clone()));
            targets.push((format!("layer {i} bias"), db.data.clone()));
        }
    }
    let input_grad = grads.input.expect("input gradient requested");
    targets.push(("input".into(), input_grad.data));

    let total: usize = targets.iter().map(|t| t.1.len()).sum();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut probe = net.clone();
    let n_param_tensors = targets.len() - 1;
    for (t, (label, analytic)) in targets.iter().enumerate() {
        let indices: Vec<usize> = if total > GRAD_CHECK_FULL_LIMIT && analytic.len() > SAMPLES_PER_TENSOR {
            let mut idx = sample(&mut rng, analytic.len(), SAMPLES_PER_TENSOR).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..analytic.len()).collect()
        };
        for i in indices {
            let (plus, minus) = if t < n_param_tensors {
                let orig = probe.param_slices_mut()[t][i];
                probe.param_slices_mut()[t][i] = orig + eps;
                let plus = objective(&probe, input)?;
                probe.param_slices_mut()[t][i] = orig - eps;
                let minus = objective(&probe, input)?;
                probe.param_slices_mut()[t][i] = orig;
                (plus, minus)
            } else {
                let mut x = input.clone();
                let orig = x.data[i];
                x.data[i] = orig + eps;
                let plus = objective(net, &x)?;
                x.data[i] = orig - eps;
                let minus = objective(net, &x)?;
                (plus, minus)
            };
            if !plus.1 || !minus.1 {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.0 - minus.0) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = format!("{label}[{i}]");
            }
        }
    }
    Ok(report)
}
