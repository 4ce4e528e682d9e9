//! Synthetic classification tasks and the equal-share routing corpus.
//!
//! Task `i` draws every token from its own vocabulary band
//! `[i·w, (i+1)·w)`, which is what makes the router's job separable. Inside
//! the band a task-specific membership rule splits offsets into two sets and
//! the label is whether members form a strict majority of the sequence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseModel, TokenBatch};
use crate::tensor::{argmax, DenseTensor, Scalar};

/// Bands never get wider than `vocab / MIN_BANDS`; wider bands dilute the
/// per-token signal below what the frozen features can resolve.
pub const MIN_BANDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
}

/// Band-relative membership rules. A token is a "member" when the rule
/// holds for its offset inside the task's band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    UpperHalf,
    Odd,
    AlternateQuarters,
}

impl Rule {
    pub fn from_id(id: usize) -> Self {
        match id % 3 {
            0 => Rule::UpperHalf,
            1 => Rule::Odd,
            _ => Rule::AlternateQuarters,
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn is_member(self, offset: usize, width: usize) -> bool {
        match self {
            Rule::UpperHalf => offset >= width / 2,
            Rule::Odd => offset % 2 == 1,
            Rule::AlternateQuarters => (offset / (width / 4).max(1)) % 2 == 1,
        }
    }

    /// 1 when members are a strict majority, else 0.
    pub fn label(self, seq: &[u32], band_start: u32, width: usize) -> usize {
        let members = seq
            .iter()
            .filter(|&&t| self.is_member((t - band_start) as usize, width))
            .count();
        usize::from(2 * members > seq.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub rule: Rule,
    pub band_start: u32,
    pub band_width: usize,
    /// Seed that produced the accepted sample set.
    pub seed: u64,
    pub num_classes: usize,
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Linear-probe validation accuracy on frozen base features at generation time.
    pub probe_accuracy: f64,
}

impl TaskDataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn split(&self, split: Split) -> (TokenBatch, Vec<usize>) {
        let idx = self.indices(split);
        (
            self.tokens.select(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "task {}: {} labels for {} sequences",
                self.name,
                self.labels.len(),
                self.tokens.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index {
                what: "task label",
                index: bad,
                bound: self.num_classes,
            });
        }
        let mut seen = vec![false; self.labels.len()];
        for &i in self.train.iter().chain(&self.validation) {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidInput(format!(
                    "task {}: train/validation splits overlap or index out of range",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenConfig {
    pub train_size: usize,
    pub validation_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token is drawn from the target class's set.
    pub bias: f64,
    pub probe_threshold: f64,
    pub max_attempts: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            train_size: 128,
            validation_size: 64,
            min_len: 8,
            max_len: 16,
            bias: 0.9,
            probe_threshold: 0.9,
            max_attempts: 8,
        }
    }
}

/// Generates `n_tasks` balanced two-class tasks over disjoint vocabulary
/// bands. Each task is accepted only if a logistic-regression probe on the
/// frozen base model's pooled features reaches `probe_threshold` on its
/// validation split; otherwise it is regenerated from the next seed.
pub fn gen_synthetic_tasks<T: Scalar>(
    base: &BaseModel<T>,
    n_tasks: usize,
    seed: u64,
    gen: &TaskGenConfig,
) -> Result<Vec<TaskDataset>> {
    if n_tasks == 0 {
        return Err(Error::Config("need at least one task".into()));
    }
    let vocab = base.config().vocab;
    let width = vocab / n_tasks.max(MIN_BANDS);
    if width < 4 {
        return Err(Error::Config(format!(
            "vocab {vocab} too small for {n_tasks} bands of width >= 4"
        )));
    }
    if gen.min_len == 0 || gen.min_len > gen.max_len || gen.max_len > base.config().max_len {
        return Err(Error::Config(format!(
            "sequence lengths {}..={} invalid for model max_len {}",
            gen.min_len,
            gen.max_len,
            base.config().max_len
        )));
    }
    (0..n_tasks)
        .map(|i| {
            let rule = Rule::from_id(i);
            let band_start = (i * width) as u32;
            let mut task_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            for _ in 0..gen.max_attempts {
                let mut task = sample_task(i, rule, band_start, width, task_seed, gen, base.config().max_len)?;
                task.probe_accuracy = linear_probe(base, &task)?;
                if task.probe_accuracy >= gen.probe_threshold {
                    return Ok(task);
                }
                task_seed = task_seed.wrapping_add(1);
            }
            Err(Error::Config(format!(
                "task {i}: no probe-separable sample set after {} attempts",
                gen.max_attempts
            )))
        })
        .collect()
}

fn sample_task(
    index: usize,
    rule: Rule,
    band_start: u32,
    width: usize,
    seed: u64,
    gen: &TaskGenConfig,
    seq_len: usize,
) -> Result<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members: Vec<u32> = (0..width)
        .filter(|&o| rule.is_member(o, width))
        .map(|o| band_start + o as u32)
        .collect();
    let others: Vec<u32> = (0..width)
        .filter(|&o| !rule.is_member(o, width))
        .map(|o| band_start + o as u32)
        .collect();
    let total = gen.train_size + gen.validation_size;
    let mut seqs: Vec<Vec<u32>> = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for n in 0..total {
        let target = n % 2;
        let preferred = if target == 1 { &members } else { &others };
        let seq = loop {
            let len = rng.random_range(gen.min_len..=gen.max_len);
            let seq: Vec<u32> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < gen.bias {
                        preferred[rng.random_range(0..preferred.len())]
                    } else {
                        band_start + rng.random_range(0..width as u32)
                    }
                })
                .collect();
            if rule.label(&seq, band_start, width) == target {
                break seq;
            }
        };
        seqs.push(seq);
        labels.push(target);
    }
    // Alternating labels keep each split exactly balanced when sizes are even.
    let train: Vec<usize> = (0..gen.train_size).collect();
    let validation: Vec<usize> = (gen.train_size..total).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    Ok(TaskDataset {
        name: format!("band{index}-{}", rule_name(rule)),
        rule,
        band_start,
        band_width: width,
        seed,
        num_classes: 2,
        tokens: TokenBatch::from_sequences(&refs, seq_len)?,
        labels,
        train,
        validation,
        probe_accuracy: 0.0,
    })
}

fn rule_name(rule: Rule) -> &'static str {
    match rule {
        Rule::UpperHalf => "upper-half",
        Rule::Odd => "odd",
        Rule::AlternateQuarters => "alt-quarters",
    }
}

/// Softmax regression on standardized frozen features, trained on the
/// train split by full-batch gradient descent; returns validation accuracy.
pub fn linear_probe<T: Scalar>(base: &BaseModel<T>, task: &TaskDataset) -> Result<f64> {
    let features = |split| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let (batch, labels) = task.split(split);
        let hidden = base.forward(&batch, None)?.hidden;
        Ok((
            (0..hidden.rows())
                .map(|r| hidden.row(r).iter().map(|&v| Scalar::to_f64(v)).collect())
                .collect(),
            labels,
        ))
    };
    let (train_x, train_y) = features(Split::Train)?;
    let (val_x, val_y) = features(Split::Validation)?;
    let probe = fit_softmax_regression(&train_x, &train_y, task.num_classes, 400, 0.5);
    Ok(probe.accuracy(&val_x, &val_y))
}

/// Multinomial logistic regression with per-feature standardization.
pub struct SoftmaxRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn predict(&self, x: &[f64]) -> usize {
        let z: Vec<f64> = self.logits(x);
        argmax(&z)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let xs: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&xs).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }
}

pub fn fit_softmax_regression(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    iterations: usize,
    lr: f64,
) -> SoftmaxRegression {
    let dim = xs.first().map_or(0, Vec::len);
    let n = xs.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-8)
        })
        .collect();
    let mut model = SoftmaxRegression {
        mean,
        scale,
        weight: vec![vec![0.0; dim]; classes],
        bias: vec![0.0; classes],
    };
    let standardized: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            x.iter()
                .zip(&model.mean)
                .zip(&model.scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    for _ in 0..iterations {
        let mut gw = vec![vec![0.0; dim]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in standardized.iter().zip(ys) {
            let z: Vec<f64> = model
                .weight
                .iter()
                .zip(&model.bias)
                .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            let p = crate::tensor::softmax(&z).expect("finite logits");
            for c in 0..classes {
                let g = p[c] - f64::from(u8::from(c == y));
                gb[c] += g / n;
                for j in 0..dim {
                    gw[c][j] += g * x[j] / n;
                }
            }
        }
        for c in 0..classes {
            model.bias[c] -= lr * gb[c];
            for j in 0..dim {
                model.weight[c][j] -= lr * gw[c][j];
            }
        }
    }
    model
}

/// One routing-corpus example: tokens, task label `y`, expert label `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedExample {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedDataset {
    pub examples: Vec<MixedExample>,
    pub per_task: usize,
    pub seed: u64,
    pub task_names: Vec<String>,
    /// Label arity of each source task.
    pub num_classes: Vec<usize>,
    pub seq_len: usize,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<TokenBatch> {
        let seqs: Vec<&[u32]> = rows.iter().map(|&r| self.examples[r].tokens.as_slice()).collect();
        TokenBatch::from_sequences(&seqs, self.seq_len)
    }

    pub fn all_tokens(&self) -> Result<TokenBatch> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch(&rows)
    }
}

/// Pools an equal number of `split` examples from every task, tagging each
/// with its source-task index, then shuffles deterministically. `None`
/// takes the smallest task's split size.
pub fn build_mixed(
    tasks: &[TaskDataset],
    per_task: Option<usize>,
    split: Split,
    seed: u64,
) -> Result<MixedDataset> {
    if tasks.is_empty() {
        return Err(Error::Config("mixed dataset needs at least one task".into()));
    }
    let smallest = tasks.iter().map(|t| t.indices(split).len()).min().unwrap_or(0);
    let per_task = match per_task {
        Some(n) if n > smallest => {
            return Err(Error::Config(format!(
                "per_task {n} exceeds the smallest task's {smallest} examples"
            )))
        }
        Some(n) => n,
        None => smallest,
    };
    let seq_len = tasks.iter().map(|t| t.tokens.seq_len).max().unwrap_or(1);
    let mut examples = Vec::with_capacity(per_task * tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        for &i in &task.indices(split)[..per_task] {
            examples.push(MixedExample {
                tokens: task.tokens.sequence(i).to_vec(),
                label: task.labels[i],
                task: t,
            });
        }
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MixedDataset {
        examples,
        per_task,
        seed,
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        num_classes: tasks.iter().map(|t| t.num_classes).collect(),
        seq_len,
    })
}

/// Hidden states of the frozen base for a whole batch, as a `[B × d]` tensor.
pub fn base_features<T: Scalar>(base: &BaseModel<T>, batch: &TokenBatch) -> Result<DenseTensor<T>> {
    Ok(base.forward(batch, None)?.hidden)
}
