use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::model::{MlpModel, Mode};
use super::train::stack;
use super::TrainingPair;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Parameters sampled per tensor.
pub const SAMPLES_PER_TENSOR: usize = 64;
/// Below this magnitude the absolute difference is used instead of the
/// relative one.
pub const ABSOLUTE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU kink.
    pub skipped: usize,
}

/// Error between an analytic and a numerical derivative.
pub fn derivative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Max derivative error of the single-pair squared loss in inference mode
/// (running batch-norm statistics).
pub fn gradient_check(model: &MlpModel, pair: &TrainingPair) -> Result<f64> {
    Ok(gradient_check_report(model, std::slice::from_ref(pair), Mode::Eval)?.max_error)
}

/// Max derivative error of the batch squared loss in training mode (batch
/// statistics). Needs at least two pairs.
pub fn gradient_check_batch(model: &MlpModel, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::domain("a training-mode gradient check needs at least two pairs"));
    }
    Ok(gradient_check_report(model, pairs, Mode::Train)?.max_error)
}

pub fn gradient_check_report(model: &MlpModel, pairs: &[TrainingPair], mode: Mode) -> Result<GradCheckReport> {
    if pairs.is_empty() {
        return Err(Error::domain("gradient check needs at least one pair"));
    }
    model.validate()?;
    let (x, y) = stack(pairs)?;
    if x.ncols() != model.input_dim() {
        return Err(Error::domain(format!(
            "embedding has dimension {}, model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    check_arrays(model, x.view(), y.view(), mode)
}

fn loss_and_mask(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView1<f64>, mode: Mode) -> (f64, Vec<bool>) {
    let cache = model.forward_cache(x, mode);
    let loss = (&cache.output - &y).mapv(|r| r * r).mean().unwrap();
    (loss, cache.relu_mask())
}

/// Evenly spaced indices into a tensor of length `len`.
fn sample_indices(len: usize) -> Vec<usize> {
    if len <= SAMPLES_PER_TENSOR {
        return (0..len).collect();
    }
    (0..SAMPLES_PER_TENSOR).map(|k| k * len / SAMPLES_PER_TENSOR + (k * 7919) % (len / SAMPLES_PER_TENSOR)).collect()
}

fn check_arrays(model: &MlpModel, x: ArrayView2<f64>, y: ArrayView1<f64>, mode: Mode) -> Result<GradCheckReport> {
    let cache = model.forward_cache(x, mode);
    let base_mask = cache.relu_mask();
    let (_, grads) = model.backward(&cache, y, mode);

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (tensor, grad) in grads.iter().enumerate() {
        for idx in sample_indices(grad.len()) {
            let original = probe.param_slices_mut()[tensor][idx];
            probe.param_slices_mut()[tensor][idx] = original + FD_STEP;
            let (plus, mask_plus) = loss_and_mask(&probe, x, y, mode);
            probe.param_slices_mut()[tensor][idx] = original - FD_STEP;
            let (minus, mask_minus) = loss_and_mask(&probe, x, y, mode);
            probe.param_slices_mut()[tensor][idx] = original;
            if mask_plus != base_mask || mask_minus != base_mask {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = derivative_error(grad[idx], numeric);
            if !err.is_finite() {
                return Err(Error::domain("gradient check produced a non-finite value"));
            }
            report.max_error = report.max_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Numerical and analytic gradients with respect to the standardized
/// input, for one row. Used to probe a stationary point.
pub fn input_gradient(model: &MlpModel, values: &[f64], target: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    let x = Array2::from_shape_vec((1, values.len()), values.to_vec()).map_err(|e| Error::domain(e.to_string()))?;
    let y = Array1::from_elem(1, target);
    let numeric = Array1::from_shape_fn(values.len(), |j| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[[0, j]] += FD_STEP;
        xm[[0, j]] -= FD_STEP;
        let (lp, _) = loss_and_mask(model, xp.view(), y.view(), Mode::Eval);
        let (lm, _) = loss_and_mask(model, xm.view(), y.view(), Mode::Eval);
        (lp - lm) / (2.0 * FD_STEP)
    });
    let cache = model.forward_cache(x.view(), Mode::Eval);
    let residual = cache.output[0] - target;
    // d loss / d x = 2 r * d f / d x, via the first layer's input gradient
    let analytic = first_layer_input_grad(model, &cache, residual).sum_axis(Axis(0)) / &model.input_std;
    Ok((analytic, numeric))
}

fn first_layer_input_grad(model: &MlpModel, cache: &super::model::ForwardCache, residual: f64) -> Array2<f64> {
    let mut upstream = Array2::from_elem((1, 1), 2.0 * residual);
    for l in (1..4).rev() {
        let d_act = upstream.dot(&model.layers[l].weight);
        let k = l - 1;
        let gate = cache.bn_out[k].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        upstream = d_act * gate * &model.norms[k].gamma * &cache.inv_std[k];
    }
    upstream.dot(&model.layers[0].weight)
}
