//! Mini-batch SGD with momentum for a linear or one-hidden-layer classifier.
//!
//! Update rule per step: `g += weight_decay * theta` for every parameter
//! except the output-layer bias, then `v = momentum * v + g` and
//! `theta -= lr * v`. Per-sample losses (class-balanced when configured) are
//! averaged over the minibatch. A run with a fixed seed is bit-reproducible.

mod model;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::{init_model, prior_bias, Architecture, Layer, ModelParams};
pub use schedule::lr_at;

use crate::effnum::ClassCounts;
use crate::error::{Error, Result};
use crate::longtail::Dataset;
use crate::losses::{ClassBalance, LossFamily, LossSpec};

const SHUFFLE_STREAM: u64 = 1;

/// Loss selection as it appears in a training config; the class counts for
/// the balance term come from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub family: LossFamily,
    #[serde(default)]
    pub gamma: f64,
    /// `None` trains the plain loss.
    #[serde(default)]
    pub beta: Option<f64>,
}

impl LossConfig {
    pub fn plain(family: LossFamily) -> Self {
        Self {
            family,
            gamma: 0.0,
            beta: None,
        }
    }

    pub fn to_spec(&self, counts: &ClassCounts) -> Result<LossSpec> {
        let spec = LossSpec::new(self.family, self.gamma)?;
        Ok(match self.beta {
            Some(beta) => spec.with_class_balance(ClassBalance::new(beta, counts.clone())?),
            None => spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub focal_lr_multiplier: f64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            warmup_epochs: 5,
            decay_epochs: vec![160, 180],
            decay_factor: 0.01,
            loss: LossConfig::plain(LossFamily::Softmax),
            seed: 0,
            focal_lr_multiplier: 1.0,
            architecture: Architecture::Linear,
        }
    }
}

impl TrainConfig {
    /// Changes the epoch budget and moves the decay milestones to the same
    /// fractions of training. Warmup is capped at the new budget.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let old = self.epochs.max(1) as f64;
        let mut scaled: Vec<usize> = self
            .decay_epochs
            .iter()
            .map(|&d| ((d as f64 * epochs as f64 / old).round() as usize).clamp(1, epochs.max(1)))
            .collect();
        scaled.dedup();
        self.decay_epochs = scaled;
        self.warmup_epochs = self.warmup_epochs.min(epochs);
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            ));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing".into());
        }
        if self.decay_epochs.iter().any(|&d| d == 0 || d > self.epochs) {
            return bad(format!("decay_epochs must lie in 1..={}", self.epochs));
        }
        if !(self.focal_lr_multiplier > 0.0 && self.focal_lr_multiplier.is_finite()) {
            return bad("focal_lr_multiplier must be positive".into());
        }
        if !(self.loss.gamma >= 0.0 && self.loss.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.loss.gamma));
        }
        if let Some(beta) = self.loss.beta {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("beta must lie in [0, 1), got {beta}"));
            }
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return bad("hidden layer size must be >= 1".into());
        }
        Ok(())
    }
}

/// Test-set metrics of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall_error: f64,
    /// Error per true class; 0 for classes absent from the test set.
    pub per_class_error: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    /// Unweighted mean error over `classes`.
    pub fn mean_error_over(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        classes
            .iter()
            .map(|&c| self.per_class_error[c])
            .sum::<f64>()
            / classes.len() as f64
    }

    /// Mean error over the `k` classes with the fewest training samples.
    pub fn tail_error(&self, train_counts: &ClassCounts, k: usize) -> f64 {
        self.mean_error_over(&train_counts.smallest_classes(k))
    }
}

/// Default tail size `ceil(C / 3)`.
pub fn default_tail_k(n_classes: usize) -> usize {
    n_classes.div_ceil(3)
}

/// Predicts by argmax over logits (first maximum wins) for every family.
pub fn evaluate(model: &ModelParams, test: &Dataset) -> Result<Evaluation> {
    let c = model.n_classes();
    if test.dim() != model.n_inputs() || test.n_classes() != c {
        return Err(Error::Shape(format!(
            "model maps {} -> {} but test set has dim {} and {} classes",
            model.n_inputs(),
            c,
            test.dim(),
            test.n_classes()
        )));
    }
    let predictions = (0..test.len()).map(|i| argmax(&model.logits(test.row(i))));
    Ok(evaluation_from_predictions(test.labels(), predictions, c))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluation_from_predictions(
    labels: &[usize],
    predictions: impl IntoIterator<Item = usize>,
    n_classes: usize,
) -> Evaluation {
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut wrong = 0u64;
    for (&y, p) in labels.iter().zip(predictions) {
        confusion[y][p] += 1;
        if y != p {
            wrong += 1;
        }
    }
    let per_class_error = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                (total - row[c]) as f64 / total as f64
            }
        })
        .collect();
    Evaluation {
        overall_error: wrong as f64 / labels.len().max(1) as f64,
        per_class_error,
        confusion,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Rate used at the last step of the epoch.
    pub lr: f64,
    /// Mean per-sample (weighted) training loss, without the L2 term.
    pub train_loss: f64,
    pub test_error: f64,
    pub per_class_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Completed,
    Aborted {
        epoch: usize,
        step: usize,
        reason: String,
    },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub status: RunStatus,
    pub train_counts: ClassCounts,
    pub class_weights: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
    /// Metrics after the last completed epoch.
    pub final_eval: Option<Evaluation>,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Same training outcome: status, per-epoch metrics, final evaluation
    /// and weights. Ignores the config snapshot and wall-clock time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.status == other.status
            && self.epochs == other.epochs
            && self.final_eval == other.final_eval
            && self.train_counts == other.train_counts
    }

    pub fn tail_error(&self, k: usize) -> Option<f64> {
        self.final_eval
            .as_ref()
            .map(|e| e.tail_error(&self.train_counts, k))
    }
}

fn sgd_step(
    model: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (((theta, is_output_bias), (v, _)), (g, _)) in model
        .params_mut()
        .zip(velocity.params_mut())
        .zip(grads.params())
    {
        let decay = if is_output_bias { 0.0 } else { weight_decay };
        for ((t, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            *v = momentum * *v + (g + decay * *t);
            *t -= lr * *v;
        }
    }
}

/// Trains on `data`, evaluating on `test` after every epoch.
///
/// A non-finite loss, gradient or parameter stops the run; the record then
/// carries [`RunStatus::Aborted`] with the metrics gathered so far.
pub fn train(data: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<RunRecord> {
    train_model(data, test, config).map(|(record, _)| record)
}

/// [`train`], also returning the parameters at the end of the run.
pub fn train_model(
    data: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(RunRecord, ModelParams)> {
    config.validate()?;
    if data.dim() != test.dim() || data.n_classes() != test.n_classes() {
        return Err(Error::Shape(format!(
            "train set has dim {} and {} classes, test set dim {} and {} classes",
            data.dim(),
            data.n_classes(),
            test.dim(),
            test.n_classes()
        )));
    }
    let start = Instant::now();
    let n_classes = data.n_classes();
    let loss = config.loss.to_spec(data.class_counts())?;
    let class_weights = (0..n_classes).map(|c| loss.weight(c)).collect();
    let mut model = init_model(
        config.architecture,
        n_classes,
        data.dim(),
        config.loss.family,
        config.seed,
    )?;
    let mut velocity = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let n = data.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut status = RunStatus::Completed;
    let mut final_eval = None;
    let mut step = 0;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = config.lr;
        for batch in order.chunks(config.batch_size) {
            lr = lr_at(step, steps_per_epoch, config);
            let mut grads = model.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                match model.accumulate_gradient(
                    data.row(i),
                    data.labels()[i],
                    &loss,
                    scale,
                    &mut grads,
                ) {
                    Ok(out) => batch_loss += out.value,
                    Err(Error::Domain(reason)) => {
                        status = RunStatus::Aborted {
                            epoch: epoch + 1,
                            step,
                            reason,
                        };
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                status = RunStatus::Aborted {
                    epoch: epoch + 1,
                    step,
                    reason: format!("non-finite loss or gradient (batch loss {batch_loss})"),
                };
                break 'epochs;
            }
            loss_sum += batch_loss;
            sgd_step(
                &mut model,
                &mut velocity,
                &grads,
                lr,
                config.momentum,
                config.weight_decay,
            );
            if !model.is_finite() {
                status = RunStatus::Aborted {
                    epoch: epoch + 1,
                    step,
                    reason: "parameters became non-finite".into(),
                };
                break 'epochs;
            }
            step += 1;
        }
        let eval = evaluate(&model, test)?;
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n as f64,
            test_error: eval.overall_error,
            per_class_error: eval.per_class_error.clone(),
        });
        final_eval = Some(eval);
    }

    let record = RunRecord {
        config: config.clone(),
        status,
        train_counts: data.class_counts().clone(),
        class_weights,
        epochs,
        final_eval,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}

/// Loss of one sample under `loss` before and after a single plain SGD step
/// of size `lr` on that sample.
pub fn single_sample_step(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    loss: &LossSpec,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut grads = model.zeros_like();
    let before = model
        .accumulate_gradient(x, y, loss, 1.0, &mut grads)?
        .value;
    let mut stepped = model.clone();
    for ((theta, _), (g, _)) in stepped.params_mut().zip(grads.params()) {
        theta
            .iter_mut()
            .zip(g.iter())
            .for_each(|(t, g)| *t -= lr * g);
    }
    let after = loss.evaluate(&stepped.logits(x), y)?.value;
    Ok((before, after))
}
