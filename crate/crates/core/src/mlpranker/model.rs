use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingVector;
use crate::error::{Error, Result};

/// Hidden widths of the regressor; the output layer has width 1.
pub const HIDDEN_WIDTHS: [usize; 3] = [256, 128, 64];

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`, one row per output unit.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// He-uniform weights, zero bias.
    fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        // gemm setup dominates for a handful of rows
        if x.nrows() <= 16 {
            let mut out = Array2::zeros((x.nrows(), self.bias.len()));
            for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
                o.assign(&(self.weight.dot(&row) + &self.bias));
            }
            return out;
        }
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// Training metadata carried inside the model file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u64,
    pub learning_rate: f64,
    pub batch_size: u64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 0,
            learning_rate: 0.0,
            batch_size: 0,
        }
    }
}

/// Four affine layers; the first three are followed by batch
/// normalization and ReLU. Inputs are z-scored with statistics frozen from
/// the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub layers: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub meta: TrainMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics untouched by the forward pass.
    Train,
    /// Running statistics.
    Eval,
}

/// Intermediate values of a forward pass, kept for backpropagation.
pub(crate) struct ForwardCache {
    /// Standardized input, then each hidden activation (post-ReLU).
    pub activations: Vec<Array2<f64>>,
    /// Normalized pre-activations `x_hat` per hidden layer.
    pub normalized: Vec<Array2<f64>>,
    /// Post-batch-norm values (pre-ReLU) per hidden layer.
    pub bn_out: Vec<Array2<f64>>,
    /// `1 / sqrt(var + eps)` per hidden layer.
    pub inv_std: Vec<Array1<f64>>,
    /// Batch mean and biased variance per hidden layer (train mode).
    pub batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
    pub output: Array1<f64>,
}

impl ForwardCache {
    /// ReLU activity pattern; a change means a kink was crossed.
    pub fn relu_mask(&self) -> Vec<bool> {
        self.bn_out.iter().flat_map(|b| b.iter().map(|v| *v > 0.0)).collect()
    }
}

/// Gradients in the same tensor order as [`MlpModel::param_slices_mut`].
pub(crate) type Grads = Vec<Vec<f64>>;

impl MlpModel {
    /// Standard architecture `(input_dim, 256, 128, 64, 1)`.
    pub fn random(input_dim: usize, seed: u64) -> Self {
        Self::with_widths(&[input_dim, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], 1], seed)
    }

    /// Arbitrary widths `[in, h1, h2, h3, 1]`; used by tests and by
    /// hand-built networks. Trained models always use the standard widths.
    pub fn with_widths(widths: &[usize; 5], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths.windows(2).map(|w| Linear::random(w[0], w[1], &mut rng)).collect();
        let norms = widths[1..4].iter().map(|&w| BatchNorm::new(w)).collect();
        Self {
            input_mean: Array1::zeros(widths[0]),
            input_std: Array1::ones(widths[0]),
            layers,
            norms,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn widths(&self) -> [usize; 5] {
        [
            self.input_dim(),
            self.layers[0].bias.len(),
            self.layers[1].bias.len(),
            self.layers[2].bias.len(),
            self.layers[3].bias.len(),
        ]
    }

    pub fn has_standard_widths(&self) -> bool {
        self.widths()[1..] == [HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], 1]
    }

    /// Structural consistency: four layers chained by width, three norms,
    /// matching standardization vectors, positive running variances.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::ModelFormat(m);
        if self.layers.len() != 4 || self.norms.len() != 3 {
            return Err(bad(format!("expected 4 layers and 3 norms, found {} and {}", self.layers.len(), self.norms.len())));
        }
        if self.input_std.len() != self.input_dim() {
            return Err(bad("standardization vectors differ in length".into()));
        }
        let mut fan_in = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, inp) = layer.weight.dim();
            if inp != fan_in || layer.bias.len() != out {
                return Err(bad(format!("layer {i} has shape ({out}, {inp}), expected input {fan_in}")));
            }
            if i < 3 {
                let n = &self.norms[i];
                if [n.gamma.len(), n.beta.len(), n.running_mean.len(), n.running_var.len()] != [out; 4] {
                    return Err(bad(format!("norm {i} does not match width {out}")));
                }
                if n.running_var.iter().any(|v| v.is_nan() || *v <= 0.0) {
                    return Err(bad(format!("norm {i} has a non-positive running variance")));
                }
            }
            fan_in = out;
        }
        if fan_in != 1 {
            return Err(bad(format!("output width is {fan_in}, expected 1")));
        }
        Ok(())
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::domain(format!(
                "embedding has dimension {dim}, model expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_std
    }

    pub(crate) fn forward_cache(&self, x: ArrayView2<f64>, mode: Mode) -> ForwardCache {
        let mut cache = ForwardCache {
            activations: vec![self.standardize(x)],
            normalized: Vec::with_capacity(3),
            bn_out: Vec::with_capacity(3),
            inv_std: Vec::with_capacity(3),
            batch_stats: Vec::with_capacity(3),
            output: Array1::zeros(0),
        };
        for (layer, norm) in self.layers[..3].iter().zip(&self.norms) {
            let z = layer.apply(cache.activations.last().unwrap().view());
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = z.var_axis(Axis(0), 0.0);
                    (mean, var)
                }
                Mode::Eval => (norm.running_mean.clone(), norm.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
            let x_hat = (&z - &mean) * &inv_std;
            let out = &x_hat * &norm.gamma + &norm.beta;
            let act = out.mapv(|v| v.max(0.0));
            if mode == Mode::Train {
                cache.batch_stats.push((mean, var));
            }
            cache.normalized.push(x_hat);
            cache.bn_out.push(out);
            cache.inv_std.push(inv_std);
            cache.activations.push(act);
        }
        let last = self.layers[3].apply(cache.activations.last().unwrap().view());
        cache.output = last.column(0).to_owned();
        cache
    }

    /// Eval-mode predictions for a `(batch, input_dim)` matrix.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_dim(x.ncols())?;
        Ok(self.forward_cache(x, Mode::Eval).output)
    }

    pub fn predict_values(&self, values: &[f64]) -> Result<f64> {
        self.check_dim(values.len())?;
        let x = ArrayView1::from(values).insert_axis(Axis(0));
        Ok(self.forward_cache(x, Mode::Eval).output[0])
    }

    /// Predicted log target perplexity for one prompt embedding.
    pub fn forward(&self, embedding: &EmbeddingVector) -> Result<f64> {
        self.predict_values(&embedding.values)
    }

    /// Gradients of `mean((output - target)^2)` over the batch.
    pub(crate) fn backward(&self, cache: &ForwardCache, targets: ArrayView1<f64>, mode: Mode) -> (f64, Grads) {
        let batch = targets.len() as f64;
        let residual = &cache.output - &targets;
        let loss = residual.mapv(|r| r * r).sum() / batch;

        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(4);
        let mut norm_grads: Vec<(Array1<f64>, Array1<f64>)> = Vec::with_capacity(3);

        // d loss / d output, shaped (batch, 1)
        let mut upstream = residual.mapv(|r| 2.0 * r / batch).insert_axis(Axis(1));
        for l in (0..4).rev() {
            let input = &cache.activations[l];
            let d_weight = upstream.t().dot(input);
            let d_bias = upstream.sum_axis(Axis(0));
            layer_grads.push((d_weight, d_bias));
            if l == 0 {
                break;
            }
            let d_act = upstream.dot(&self.layers[l].weight);
            let k = l - 1;
            let relu_gate = cache.bn_out[k].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let d_bn = d_act * relu_gate;
            let x_hat = &cache.normalized[k];
            let d_gamma = (&d_bn * x_hat).sum_axis(Axis(0));
            let d_beta = d_bn.sum_axis(Axis(0));
            let d_xhat = &d_bn * &self.norms[k].gamma;
            let inv_std = &cache.inv_std[k];
            upstream = match mode {
                Mode::Eval => d_xhat * inv_std,
                Mode::Train => {
                    let sum_dx = d_xhat.sum_axis(Axis(0));
                    let sum_dx_xhat = (&d_xhat * x_hat).sum_axis(Axis(0));
                    let centered = d_xhat * batch - &sum_dx - x_hat * &sum_dx_xhat;
                    centered * inv_std / batch
                }
            };
            norm_grads.push((d_gamma, d_beta));
        }
        layer_grads.reverse();
        norm_grads.reverse();

        let mut grads = Grads::with_capacity(14);
        for (w, b) in layer_grads {
            grads.push(w.iter().copied().collect());
            grads.push(b.to_vec());
        }
        for (g, b) in norm_grads {
            grads.push(g.to_vec());
            grads.push(b.to_vec());
        }
        (loss, grads)
    }

    /// Trainable tensors in a fixed order: each layer's weight then bias,
    /// then each norm's scale then shift.
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(14);
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        for norm in &mut self.norms {
            out.push(norm.gamma.as_slice_mut().expect("standard layout"));
            out.push(norm.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.norms.iter().map(|n| n.gamma.len() + n.beta.len()).sum::<usize>()
    }

    /// Exponential moving update of running statistics from one batch. The
    /// variance is the biased one used for normalization, so a converged
    /// full-batch model predicts the same in both modes.
    pub(crate) fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.bn_momentum;
        for (norm, (mean, var)) in self.norms.iter_mut().zip(&cache.batch_stats) {
            norm.running_mean = &norm.running_mean * (1.0 - m) + mean * m;
            norm.running_var = &norm.running_var * (1.0 - m) + var * m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_norm(width: usize, eps: f64) -> BatchNorm {
        BatchNorm {
            running_var: Array1::from_elem(width, 1.0 - eps),
            ..BatchNorm::new(width)
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = MlpModel::random(5, 1);
        for l in &mut m.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        m.norms = m.layers[..3].iter().map(|l| identity_norm(l.bias.len(), m.bn_eps)).collect();
        assert_eq!(m.predict_values(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_unit_network() {
        let mut m = MlpModel::with_widths(&[1, 1, 1, 1, 1], 0);
        m.layers[0].weight.fill(2.0);
        for l in &mut m.layers[1..] {
            l.weight.fill(1.0);
        }
        for l in &mut m.layers {
            l.bias.fill(0.0);
        }
        m.norms = (0..3).map(|_| identity_norm(1, m.bn_eps)).collect();
        // ReLU(2 * 3) through identity layers, then * 1
        assert!((m.predict_values(&[3.0]).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(m.predict_values(&[-3.0]).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let m = MlpModel::random(4, 0);
        assert!(matches!(m.predict_values(&[1.0; 3]), Err(Error::Domain(_))));
    }

    #[test]
    fn standard_widths() {
        let m = MlpModel::random(7, 3);
        assert_eq!(m.widths(), [7, 256, 128, 64, 1]);
        assert!(m.has_standard_widths());
        m.validate().unwrap();
        assert_eq!(m.param_count(), 7 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 + 1 + 2 * (256 + 128 + 64));
    }

    #[test]
    fn batch_and_single_predictions_agree() {
        let m = MlpModel::random(3, 11);
        let x = ndarray::array![[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]];
        let batch = m.predict_batch(x.view()).unwrap();
        assert_eq!(batch[0], m.predict_values(&[0.1, 0.2, 0.3]).unwrap());
        assert_eq!(batch[1], m.predict_values(&[-1.0, 0.5, 2.0]).unwrap());
    }
}
