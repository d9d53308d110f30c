//! Losses, optimizers and the mini-batch training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, Targets};
use crate::error::{Error, Result};
use crate::layers::{Mode, Param};
use crate::model::{ModelGraph, Task};
use crate::streams;
use crate::tensor::{Matrix, Rng};

/// Lower clamp applied to probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

impl Loss {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => Loss::CrossEntropy,
            Task::Regression => Loss::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            loss: Loss::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.lr();
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::config("optimizer.lr", format!("must be > 0, got {lr}")));
        }
        match self.optimizer {
            OptimizerConfig::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config(
                    "optimizer.momentum",
                    format!("must be in [0, 1), got {momentum}"),
                ));
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) {
                    return Err(Error::config(
                        "optimizer.beta1",
                        format!("must be in [0, 1), got {beta1}"),
                    ));
                }
                if !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config(
                        "optimizer.beta2",
                        format!("must be in [0, 1), got {beta2}"),
                    ));
                }
                if eps.is_nan() || eps <= 0.0 {
                    return Err(Error::config("optimizer.eps", format!("must be > 0, got {eps}")));
                }
            }
            _ => {}
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood and its gradient w.r.t. the pre-softmax
/// logits, `(probs − onehot) / batch`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if probs.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows of probabilities for {} labels", probs.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::domain(
            "cross_entropy",
            format!("label {bad} out of range for {} classes", probs.cols()),
        ));
    }
    let n = probs.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.scale(1.0 / n);
    for (r, &label) in labels.iter().enumerate() {
        loss -= probs.get(r, label).clamp(PROB_FLOOR, 1.0).ln();
        let g = grad.get(r, label) - 1.0 / n;
        grad.set(r, label, g);
    }
    Ok((loss / n, grad))
}

/// Mean squared error over all entries; gradient `2(pred − target)/n_entries`.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

#[derive(Debug, Clone)]
enum Slot {
    Sgd { velocity: Matrix },
    Adam { m: Matrix, v: Matrix },
}

/// Per-parameter optimizer memory, matched to parameters by iteration order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Applies one update to every parameter from its accumulated gradient.
pub fn optimizer_step<'a>(state: &mut OptimizerState, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    for (i, p) in params.into_iter().enumerate() {
        if p.grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "`{}` is {:?} but its gradient is {:?}",
                    p.name,
                    p.value.shape(),
                    p.grad.shape()
                ),
            ));
        }
        if i == state.slots.len() {
            let (r, c) = p.value.shape();
            state.slots.push(match state.config {
                OptimizerConfig::Sgd { .. } => Slot::Sgd {
                    velocity: Matrix::zeros(r, c),
                },
                OptimizerConfig::Adam { .. } => Slot::Adam {
                    m: Matrix::zeros(r, c),
                    v: Matrix::zeros(r, c),
                },
            });
        }
        match (&mut state.slots[i], state.config) {
            (Slot::Sgd { velocity }, OptimizerConfig::Sgd { lr, momentum }) => {
                if velocity.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!("slot {i} does not match `{}`", p.name),
                    ));
                }
                for ((w, v), g) in p
                    .value
                    .as_mut_slice()
                    .iter_mut()
                    .zip(velocity.as_mut_slice())
                    .zip(p.grad.as_slice())
                {
                    *v = momentum * *v - lr * g;
                    *w += *v;
                }
            }
            (Slot::Adam { m, v }, OptimizerConfig::Adam { lr, beta1, beta2, eps }) => {
                if m.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!("slot {i} does not match `{}`", p.name),
                    ));
                }
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, m), v), &g) in p
                    .value
                    .as_mut_slice()
                    .iter_mut()
                    .zip(m.as_mut_slice())
                    .zip(v.as_mut_slice())
                    .zip(p.grad.as_slice())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            _ => unreachable!("slots are created from the same config"),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's mini-batches.
    pub train_loss: f64,
    /// Inference-mode accuracy (classification) or RMSE (regression) on the full training split.
    pub train_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
    /// Wall-clock time; never serialized so reports of identical runs compare equal.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
}

impl FitReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn check_compatible(model: &ModelGraph, data: &DatasetTable, loss: Loss) -> Result<()> {
    if data.n_features() != model.n_features() {
        return Err(Error::config(
            "n_features",
            format!(
                "model expects {} features, data has {}",
                model.n_features(),
                data.n_features()
            ),
        ));
    }
    match (&data.targets, loss) {
        (Targets::Classes { labels, .. }, Loss::CrossEntropy) => {
            if !model.has_softmax_output() {
                return Err(Error::config("task", "cross-entropy needs a classification model"));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= model.n_outputs()) {
                return Err(Error::config(
                    "n_outputs",
                    format!("label {bad} does not fit {} outputs", model.n_outputs()),
                ));
            }
        }
        (Targets::Values(y), Loss::Mse) => {
            if y.cols() != model.n_outputs() {
                return Err(Error::config(
                    "n_outputs",
                    format!(
                        "model has {} outputs, targets have {} columns",
                        model.n_outputs(),
                        y.cols()
                    ),
                ));
            }
        }
        (Targets::Classes { .. }, Loss::Mse) => {
            return Err(Error::config("loss", "mse needs regression targets"));
        }
        (Targets::Values(_), Loss::CrossEntropy) => {
            return Err(Error::config("loss", "cross-entropy needs class labels"));
        }
    }
    Ok(())
}

fn batch_loss(output: &Matrix, targets: &Targets, loss: Loss) -> Result<(f64, Matrix)> {
    match (targets, loss) {
        (Targets::Classes { labels, .. }, Loss::CrossEntropy) => cross_entropy(output, labels),
        (Targets::Values(y), Loss::Mse) => mse(output, y),
        _ => Err(Error::config("loss", "loss does not match target kind")),
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(probs).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Inference-mode loss and metric (accuracy or RMSE) over a whole table.
pub fn evaluate(model: &mut ModelGraph, data: &DatasetTable, loss: Loss) -> Result<(f64, f64)> {
    check_compatible(model, data, loss)?;
    let out = model.forward(&data.features, Mode::Inference)?;
    let (l, _) = batch_loss(&out, &data.targets, loss)?;
    let metric = match &data.targets {
        Targets::Classes { labels, .. } => accuracy(&out, labels),
        Targets::Values(y) => {
            let (m, _) = mse(&out, y)?;
            m.sqrt()
        }
    };
    Ok((l, metric))
}

/// Mini-batch training. Leaves the model's parameters at their final values;
/// callers predict with [`Mode::Inference`] afterwards.
pub fn fit(
    model: &mut ModelGraph,
    train: &DatasetTable,
    validation: Option<&DatasetTable>,
    config: &TrainConfig,
) -> Result<FitReport> {
    config.validate()?;
    check_compatible(model, train, config.loss)?;
    if let Some(v) = validation {
        check_compatible(model, v, config.loss)?;
    }
    let needs_pairs = model.has_batch_norm();
    if needs_pairs && config.batch_size < 2 {
        return Err(Error::config(
            "batch_size",
            "must be >= 2 when the model contains batch normalization",
        ));
    }
    let n = train.n_rows();
    if needs_pairs && n < 2 {
        return Err(Error::config(
            "batch_size",
            "batch normalization needs at least 2 training rows",
        ));
    }

    let mut shuffle_rng = Rng::with_stream(config.seed, streams::SHUFFLE);
    let mut opt = OptimizerState::new(config.optimizer);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = FitReport::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if needs_pairs && batch.len() < 2 {
                continue;
            }
            let x = train.features.select_rows(batch);
            let targets = train.targets.select_rows(batch);
            let out = model.forward(&x, Mode::Training)?;
            let (loss, grad) = batch_loss(&out, &targets, config.loss)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            model.zero_grad();
            match config.loss {
                Loss::CrossEntropy => model.backward_from_logits(&grad)?,
                Loss::Mse => model.backward(&grad)?,
            };
            optimizer_step(&mut opt, model.params_mut())?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let (_, train_metric) = evaluate(model, train, config.loss)?;
        let (val_loss, val_metric) = match validation {
            Some(v) => {
                let (l, m) = evaluate(model, v, config.loss)?;
                (Some(l), Some(m))
            }
            None => (None, None),
        };
        if !train_metric.is_finite() || model.params().any(|p| !p.value.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_metric,
            val_loss,
            val_metric,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}
