use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{MlpModel, Mode, TrainMeta, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use super::TrainingPair;
use crate::error::{Error, Result};

/// Pair counts up to this size train full-batch; larger sets use
/// minibatches of this size.
pub const FULL_BATCH_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None`: full batch up to [`FULL_BATCH_LIMIT`] pairs.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 1000,
            batch_size: None,
            seed: 0,
            adam: AdamConfig::default(),
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return Err(Error::Config("batch-norm momentum must lie in [0, 1] and eps be positive".into()));
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= FULL_BATCH_LIMIT => n,
            None => FULL_BATCH_LIMIT,
        }
    }
}

/// Per-epoch losses. `val_loss` is empty when no validation set was given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) of the returned weights.
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: TrainHistory,
}

struct Adam {
    config: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(model: &mut MlpModel, lr: f64, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
        Self {
            config,
            lr,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn update(&mut self, model: &mut MlpModel, grads: &[Vec<f64>]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((param, grad), m), v) in model.param_slices_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

pub(crate) fn stack(pairs: &[TrainingPair]) -> Result<(Array2<f64>, Array1<f64>)> {
    let dim = pairs[0].embedding.values.len();
    if dim == 0 {
        return Err(Error::domain("training embeddings are empty"));
    }
    let mut x = Array2::zeros((pairs.len(), dim));
    for (row, p) in x.rows_mut().into_iter().zip(pairs) {
        if p.embedding.values.len() != dim {
            return Err(Error::domain(format!(
                "pair ({}, {}) has embedding dimension {}, expected {dim}",
                p.task_id,
                p.example_id,
                p.embedding.values.len()
            )));
        }
        if !p.target.is_finite() {
            return Err(Error::domain(format!("pair ({}, {}) has a non-finite target", p.task_id, p.example_id)));
        }
        row.into_iter().zip(&p.embedding.values).for_each(|(d, s)| *d = *s);
    }
    let y = pairs.iter().map(|p| p.target).collect();
    Ok((x, y))
}

/// Mean squared error of eval-mode predictions.
pub fn evaluate_mse(model: &MlpModel, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty pair set"));
    }
    let (x, y) = stack(pairs)?;
    let pred = model.predict_batch(x.view())?;
    Ok((&pred - &y).mapv(|r| r * r).mean().unwrap())
}

/// Fits the regressor with no validation set; the final weights are kept.
pub fn train(pairs: &[TrainingPair], config: &TrainConfig) -> Result<MlpModel> {
    Ok(train_with_validation(pairs, &[], config)?.model)
}

/// Fits the regressor. When `val` is non-empty the weights with the lowest
/// validation loss are returned.
pub fn train_with_validation(train: &[TrainingPair], val: &[TrainingPair], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let (x, y) = stack(train)?;
    let n = x.nrows();
    let val_data = if val.is_empty() {
        None
    } else {
        let (vx, vy) = stack(val)?;
        if vx.ncols() != x.ncols() {
            return Err(Error::domain("validation embeddings differ in dimension from training embeddings"));
        }
        Some((vx, vy))
    };

    let mut model = MlpModel::random(x.ncols(), config.seed);
    model.bn_eps = config.bn_eps;
    model.bn_momentum = config.bn_momentum;
    model.input_mean = x.mean_axis(Axis(0)).unwrap();
    model.input_std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let batch_size = config.effective_batch_size(n);
    model.meta = TrainMeta {
        seed: config.seed,
        epochs: config.epochs as u64,
        learning_rate: config.learning_rate,
        batch_size: batch_size as u64,
    };

    let mut adam = Adam::new(&mut model, config.learning_rate, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, MlpModel)> = None;

    for epoch in 0..config.epochs {
        if batch_size < n {
            order.shuffle(&mut rng);
        }
        let mut weighted_loss = 0.0;
        for batch in batches(&order, batch_size) {
            let bx = x.select(Axis(0), batch);
            let by = y.select(Axis(0), batch);
            let cache = model.forward_cache(bx.view(), Mode::Train);
            let (loss, grads) = model.backward(&cache, by.view(), Mode::Train);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {loss}"),
                });
            }
            adam.update(&mut model, &grads);
            model.update_running_stats(&cache);
            weighted_loss += loss * batch.len() as f64;
        }
        history.train_loss.push(weighted_loss / n as f64);

        if let Some((vx, vy)) = &val_data {
            let pred = model.predict_batch(vx.view())?;
            let val_loss = (&pred - vy).mapv(|r| r * r).mean().unwrap();
            if !val_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("validation loss became {val_loss}"),
                });
            }
            history.val_loss.push(val_loss);
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, model.clone()));
                history.best_epoch = epoch;
            }
        }
    }

    let model = match best {
        Some((_, m)) => m,
        None => {
            history.best_epoch = config.epochs - 1;
            model
        }
    };
    Ok(TrainOutcome { model, history })
}

/// Contiguous batches over `order`; a trailing singleton is folded into
/// the previous batch so batch statistics are always defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let start = order.len() - size - 1;
        out.pop();
        out.pop();
        out.push(&order[start..]);
    }
    out
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
