//! Stage-1 expert training: only the Q/V deltas move; the base model and
//! the expert's head stay frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::model::{head_forward, AdapterGrads, AdapterSpec, BaseModel, ExpertAdapter, TokenBatch};
use crate::model::count_trainable;
use crate::tensor::{argmax, cross_entropy, DenseTensor, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// `p ← p − lr · g`
    Sgd,
    /// Bias-corrected first/second moment updates.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adapter: AdapterSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(1.0),
            adapter: AdapterSpec::toy_tt(),
        }
    }
}

impl TrainConfig {
    /// LoRA defaults: same loop, a tenth of the TT learning rate.
    pub fn lora() -> Self {
        Self {
            learning_rate: 5e-4,
            adapter: AdapterSpec::toy_lora(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: i32,
    first: Vec<DenseTensor<T>>,
    second: Vec<DenseTensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[&DenseTensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| DenseTensor::zeros(p.shape())).collect();
        Self {
            kind,
            lr: T::lit(lr),
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update. Any non-finite gradient aborts before a single
    /// parameter is touched; the error carries the offending tensor's index.
    pub fn step(
        &mut self,
        params: &mut [&mut DenseTensor<T>],
        grads: &[DenseTensor<T>],
    ) -> std::result::Result<(), usize> {
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(bad);
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
                let eps = T::lit(ADAM_EPS);
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * gv;
                        v[j] = b2 * v[j] + (T::one() - b2) * gv * gv;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-run training record; serialized as one JSON line by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: String,
    /// Mean training loss of each completed epoch (index 0 is epoch 1).
    pub train_loss: Vec<f64>,
    /// Validation accuracy after each epoch; index 0 is the untrained adapter.
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub trainable_params: usize,
    /// Optimizer steps whose gradient was rescaled to `clip_norm`.
    pub clipped_steps: usize,
    pub wall_clock_secs: f64,
}

/// Loss and summed gradients of a mini-batch, each example's cross-entropy
/// gradient scaled by `1 / batch`.
fn batch_gradients<T: Scalar>(
    base: &BaseModel<T>,
    adapter: &ExpertAdapter<T>,
    batch: &TokenBatch,
    labels: &[usize],
) -> Result<(f64, AdapterGrads<T>)> {
    let n = batch.len();
    let mut total: Option<AdapterGrads<T>> = None;
    let mut loss = 0.0;
    for b in 0..n {
        let tape = base.forward_tape(batch.sequence(b), Some(adapter))?;
        let hidden = DenseTensor::new(vec![1, tape.hidden().len()], tape.hidden().to_vec())?;
        let logits = head_forward(&hidden, adapter.head())?;
        let (l, g) = cross_entropy(&logits, &labels[b..=b])?;
        loss += l.to_f64();
        let d_logits: Vec<T> = g.data().iter().map(|&v| v / T::lit(n as f64)).collect();
        let grads = base.backward(&tape, adapter, &d_logits)?;
        match total.as_mut() {
            Some(t) => t.add_assign(&grads)?,
            None => total = Some(grads),
        }
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok((loss / n as f64, total))
}

fn global_norm<T: Scalar>(grads: &AdapterGrads<T>) -> f64 {
    grads
        .tensors
        .iter()
        .map(|t| t.frobenius().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Trains one expert on `task`, early-stopping on validation accuracy, and
/// returns the adapter from the best validation epoch.
pub fn train_expert<T: Scalar>(
    base: &BaseModel<T>,
    task: &TaskDataset,
    config: &TrainConfig,
    expert_id: u32,
) -> Result<(ExpertAdapter<T>, TrainReport)> {
    config.validate()?;
    task.validate()?;
    if task.train.is_empty() || task.validation.is_empty() {
        return Err(Error::Config(format!(
            "task {} needs non-empty train and validation splits",
            task.name
        )));
    }
    let started = Instant::now();
    let mut adapter = ExpertAdapter::new(
        base.config(),
        &config.adapter,
        expert_id,
        task.name.clone(),
        task.num_classes,
        config.seed,
    )?;
    let labels_of = adapter.param_labels();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &adapter.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);

    let initial = evaluate(base, &adapter, task, Split::Validation)?;
    let mut report = TrainReport {
        task: task.name.clone(),
        train_loss: Vec::new(),
        val_accuracy: vec![initial],
        best_epoch: 0,
        best_val_accuracy: initial,
        epochs_run: 0,
        early_stopped: false,
        trainable_params: count_trainable(&adapter),
        clipped_steps: 0,
        wall_clock_secs: 0.0,
    };
    let mut best = adapter.clone();
    let mut since_best = 0;
    let mut order = task.train.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = task.tokens.select(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| task.labels[i]).collect();
            let (loss, mut grads) = batch_gradients(base, &adapter, &batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            if let Some(max) = config.clip_norm {
                let norm = global_norm(&grads);
                if norm.is_finite() && norm > max {
                    grads.scale(T::lit(max / norm));
                    report.clipped_steps += 1;
                }
            }
            let mut params = adapter.params_mut();
            if let Err(i) = optimizer.step(&mut params, &grads.tensors) {
                let (layer, matrix, factor) = labels_of[i];
                return Err(Error::NonFiniteGradient {
                    layer,
                    matrix,
                    factor,
                });
            }
        }
        let mean_loss = epoch_loss / order.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        report.train_loss.push(mean_loss);
        report.epochs_run = epoch;
        let acc = evaluate(base, &adapter, task, Split::Validation)?;
        report.val_accuracy.push(acc);
        if acc > report.best_val_accuracy {
            report.best_val_accuracy = acc;
            report.best_epoch = epoch;
            best = adapter.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                report.early_stopped = true;
                break;
            }
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((best, report))
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
pub fn accuracy_from_logits<T: Scalar>(logits: &DenseTensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate_batch<T: Scalar>(
    base: &BaseModel<T>,
    adapter: &ExpertAdapter<T>,
    batch: &TokenBatch,
    labels: &[usize],
) -> Result<f64> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= adapter.num_classes()) {
        return Err(Error::Index {
            what: "evaluation label",
            index: bad,
            bound: adapter.num_classes(),
        });
    }
    let out = base.forward(batch, Some(adapter))?;
    let logits = out.logits.expect("adapter supplies a head");
    Ok(accuracy_from_logits(&logits, labels))
}

/// Validation (or train) accuracy of `adapter` on `task`.
pub fn evaluate<T: Scalar>(
    base: &BaseModel<T>,
    adapter: &ExpertAdapter<T>,
    task: &TaskDataset,
    split: Split,
) -> Result<f64> {
    if adapter.num_classes() != task.num_classes {
        return Err(Error::Config(format!(
            "adapter head has {} classes, task {} has {}",
            adapter.num_classes(),
            task.name,
            task.num_classes
        )));
    }
    let (batch, labels) = task.split(split);
    evaluate_batch(base, adapter, &batch, &labels)
}
