//! Stage-2 sparse mixture of frozen experts.
//!
//! A linear router reads the frozen base model's pooled hidden state and
//! produces one noisy logit per expert:
//!
//! ```text
//! g_i = (h · W_gate + b_gate)_i + ε_i · softplus((h · W_noise)_i),  ε ~ N(0, 1)
//! ```
//!
//! Noise is only drawn in [`GateMode::Train`]. Keeping the top-1 logit and
//! softmaxing the masked vector yields an exactly one-hot gate, so the
//! selected expert's output passes through with weight 1.0 and every other
//! expert contributes nothing. Inference is two passes: the base model alone
//! for `h`, then the base model with the chosen expert's deltas and head.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::model::{BaseModel, ExpertAdapter, TokenBatch};
use crate::tensor::{
    argmax, cross_entropy, matmul, matmul_transpose_a, sigmoid, softmax, softplus, DenseTensor,
    Scalar,
};
use crate::train::{Optimizer, OptimizerKind};

/// Trainable router weights: gate projection with bias, bias-free noise projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T = f32> {
    pub w_gate: DenseTensor<T>,
    pub b_gate: DenseTensor<T>,
    pub w_noise: DenseTensor<T>,
}

pub fn router_param_count(d: usize, n: usize) -> usize {
    2 * d * n + n
}

impl<T: Scalar> RouterParams<T> {
    pub fn init(d: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = T::one() / T::lit(d as f64).sqrt();
        Self {
            w_gate: DenseTensor::uniform(&[d, n], bound, &mut rng),
            b_gate: DenseTensor::zeros(&[n]),
            w_noise: DenseTensor::uniform(&[d, n], bound, &mut rng),
        }
    }

    pub fn from_parts(w_gate: DenseTensor<T>, b_gate: DenseTensor<T>, w_noise: DenseTensor<T>) -> Result<Self> {
        let (d, n) = (w_gate.rows(), w_gate.cols());
        if b_gate.shape() != [n] || w_noise.shape() != [d, n] {
            return Err(Error::shape("RouterParams", w_gate.shape(), w_noise.shape()));
        }
        Ok(Self {
            w_gate,
            b_gate,
            w_noise,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_gate.len() + self.b_gate.len() + self.w_noise.len()
    }

    fn tensors(&self) -> [&DenseTensor<T>; 3] {
        [&self.w_gate, &self.b_gate, &self.w_noise]
    }

    fn tensors_mut(&mut self) -> [&mut DenseTensor<T>; 3] {
        [&mut self.w_gate, &mut self.b_gate, &mut self.w_noise]
    }

    /// Gradients of the router parameters given `d loss / d g`, using the
    /// same `h` and noise draws as the forward call.
    pub fn backward(
        &self,
        h: &DenseTensor<T>,
        noise: Option<&DenseTensor<T>>,
        d_logits: &DenseTensor<T>,
    ) -> Result<[DenseTensor<T>; 3]> {
        let d_w_gate = matmul_transpose_a(h, d_logits)?;
        let n = self.num_experts();
        let mut d_b = vec![T::zero(); n];
        for r in 0..d_logits.rows() {
            for (acc, &v) in d_b.iter_mut().zip(d_logits.row(r)) {
                *acc += v;
            }
        }
        let d_w_noise = match noise {
            Some(eps) => {
                let proj = matmul(h, &self.w_noise)?;
                let scaled = DenseTensor::from_fn(proj.shape(), |i| {
                    d_logits.data()[i] * eps.data()[i] * sigmoid(proj.data()[i])
                });
                matmul_transpose_a(h, &scaled)?
            }
            None => DenseTensor::zeros(self.w_noise.shape()),
        };
        Ok([d_w_gate, DenseTensor::new(vec![n], d_b)?, d_w_noise])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    Train,
    Eval,
}

/// Router logits for explicit standard-normal draws (`None` = no noise).
pub fn gate_logits<T: Scalar>(
    h: &DenseTensor<T>,
    params: &RouterParams<T>,
    noise: Option<&DenseTensor<T>>,
) -> Result<DenseTensor<T>> {
    if h.ndim() != 2 || h.cols() != params.hidden_dim() {
        return Err(Error::shape("noisy_gate", h.shape(), params.w_gate.shape()));
    }
    let mut g = matmul(h, &params.w_gate)?;
    for r in 0..g.rows() {
        for (v, &b) in g.row_mut(r).iter_mut().zip(params.b_gate.data()) {
            *v += b;
        }
    }
    if let Some(eps) = noise {
        if eps.shape() != g.shape() {
            return Err(Error::shape("noisy_gate noise", eps.shape(), g.shape()));
        }
        let proj = matmul(h, &params.w_noise)?;
        for ((v, &e), &p) in g.data_mut().iter_mut().zip(eps.data()).zip(proj.data()) {
            *v += e * softplus(p);
        }
    }
    Ok(g)
}

/// Draws one N(0, 1) per (sample, expert) in train mode; eval mode is the
/// clean, deterministic score.
pub fn noisy_gate<T: Scalar, R: Rng + ?Sized>(
    h: &DenseTensor<T>,
    params: &RouterParams<T>,
    mode: GateMode,
    rng: &mut R,
) -> Result<DenseTensor<T>> {
    let noise = draw_noise(mode, h.rows(), params.num_experts(), rng);
    gate_logits(h, params, noise.as_ref())
}

fn draw_noise<T: Scalar, R: Rng + ?Sized>(
    mode: GateMode,
    rows: usize,
    experts: usize,
    rng: &mut R,
) -> Option<DenseTensor<T>> {
    match mode {
        GateMode::Train => Some(DenseTensor::randn(&[rows, experts], T::one(), rng)),
        GateMode::Eval => None,
    }
}

/// Keeps the `k` largest entries and sets the rest to `-inf`. Among equal
/// values the lower index wins.
pub fn topk_mask<T: Scalar>(g: &[T], k: usize) -> Result<Vec<T>> {
    if k == 0 || k > g.len() {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            g.len()
        )));
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![T::neg_infinity(); g.len()];
    for &i in &order[..k] {
        out[i] = g[i];
    }
    Ok(out)
}

/// One sample's routing outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision<T> {
    pub logits: Vec<T>,
    pub masked: Vec<T>,
    /// `softmax(masked)`; exactly one-hot when `k = 1`.
    pub gate: Vec<T>,
    pub selected: usize,
}

pub fn gate_vector<T: Scalar>(g: &[T], k: usize) -> Result<GateDecision<T>> {
    let masked = topk_mask(g, k)?;
    let gate = softmax(&masked)?;
    Ok(GateDecision {
        logits: g.to_vec(),
        selected: argmax(&masked),
        masked,
        gate,
    })
}

/// Frozen experts addressable by gate index.
#[derive(Clone, Debug)]
pub struct ExpertBank<T = f32> {
    experts: Vec<ExpertAdapter<T>>,
    config_hash: u64,
}

impl<T: Scalar> ExpertBank<T> {
    pub fn new(experts: Vec<ExpertAdapter<T>>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("expert bank is empty".into()))?;
        let config_hash = first.config_hash;
        if let Some(bad) = experts.iter().find(|e| e.config_hash != config_hash) {
            return Err(Error::ConfigHash {
                expected: config_hash,
                found: bad.config_hash,
            });
        }
        Ok(Self {
            experts,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn experts(&self) -> &[ExpertAdapter<T>] {
        &self.experts
    }

    pub fn get(&self, i: usize) -> &ExpertAdapter<T> {
        &self.experts[i]
    }

    /// `(expert_id, task_name)` in gate order.
    pub fn table(&self) -> Vec<(u32, String)> {
        self.experts
            .iter()
            .map(|e| (e.expert_id, e.task_name.clone()))
            .collect()
    }

    /// Applies a gate vector to the stack: the expert at the single nonzero
    /// entry, which must be exactly 1.0.
    pub fn select(&self, gate: &[T]) -> Result<&ExpertAdapter<T>> {
        if gate.len() != self.len() {
            return Err(Error::shape("ExpertBank::select", &[gate.len()], &[self.len()]));
        }
        let hot: Vec<usize> = (0..gate.len()).filter(|&i| gate[i] != T::zero()).collect();
        match hot.as_slice() {
            [i] if gate[*i] == T::one() => Ok(&self.experts[*i]),
            _ => Err(Error::InvalidInput("gate vector is not one-hot".into())),
        }
    }
}

/// Result of a two-pass routed forward.
#[derive(Clone, Debug)]
pub struct MoeOutput<T> {
    /// Per-sample logits; widths follow each sample's selected expert head.
    pub logits: Vec<Vec<T>>,
    pub decisions: Vec<GateDecision<T>>,
    /// Pass-1 pooled hidden states.
    pub hidden: DenseTensor<T>,
}

impl<T: Scalar> MoeOutput<T> {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter().map(|l| argmax(l)).collect()
    }
}

pub fn moe_forward<T: Scalar, R: Rng + ?Sized>(
    tokens: &TokenBatch,
    base: &BaseModel<T>,
    bank: &ExpertBank<T>,
    params: &RouterParams<T>,
    mode: GateMode,
    rng: &mut R,
) -> Result<MoeOutput<T>> {
    if bank.is_empty() {
        return Err(Error::Config("expert bank is empty".into()));
    }
    check_router(base, bank, params)?;
    let hidden = base.forward(tokens, None)?.hidden;
    let g = noisy_gate(&hidden, params, mode, rng)?;
    let decisions = (0..g.rows())
        .map(|r| gate_vector(g.row(r), 1))
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, d) in decisions.iter().enumerate() {
        groups.entry(d.selected).or_default().push(r);
    }
    let mut logits: Vec<Vec<T>> = vec![Vec::new(); tokens.len()];
    for (&e, rows) in &groups {
        let expert = bank.select(&decisions[rows[0]].gate)?;
        let weight = decisions[rows[0]].gate[e];
        let out = base.forward(&tokens.select(rows), Some(expert))?;
        let l = out.logits.expect("expert supplies a head");
        for (i, &r) in rows.iter().enumerate() {
            logits[r] = l.row(i).iter().map(|&v| v * weight).collect();
        }
    }
    Ok(MoeOutput {
        logits,
        decisions,
        hidden,
    })
}

fn check_router<T: Scalar>(base: &BaseModel<T>, bank: &ExpertBank<T>, params: &RouterParams<T>) -> Result<()> {
    if params.hidden_dim() != base.config().d_model || params.num_experts() != bank.len() {
        return Err(Error::shape(
            "router",
            params.w_gate.shape(),
            &[base.config().d_model, bank.len()],
        ));
    }
    if bank.config_hash() != base.config_hash() {
        return Err(Error::ConfigHash {
            expected: base.config_hash(),
            found: bank.config_hash(),
        });
    }
    Ok(())
}

/// Loss parts and `d loss / d g` for a batch.
#[derive(Clone, Debug)]
pub struct CombinedLoss<T> {
    pub total: T,
    pub task: T,
    pub router: T,
    pub d_router_logits: DenseTensor<T>,
}

/// `L_task + λ · L_router`, where `L_task` is the mean cross-entropy of each
/// sample's selected-expert logits and `L_router` the cross-entropy of the
/// router logits against the source-task index. The hard top-1 dispatch
/// applies a constant weight of 1.0, so only `L_router` yields a router
/// gradient.
pub fn combined_loss<T: Scalar>(
    task_logits: &[Vec<T>],
    labels: &[usize],
    router_logits: &DenseTensor<T>,
    tasks: &[usize],
    lambda: T,
) -> Result<CombinedLoss<T>> {
    if task_logits.len() != labels.len() || router_logits.rows() != tasks.len() || labels.len() != tasks.len() {
        return Err(Error::shape(
            "combined_loss",
            &[task_logits.len(), labels.len()],
            &[router_logits.rows(), tasks.len()],
        ));
    }
    let mut task = T::zero();
    for (l, &y) in task_logits.iter().zip(labels) {
        let row = DenseTensor::new(vec![1, l.len()], l.clone())?;
        task += cross_entropy(&row, &[y])?.0;
    }
    if !labels.is_empty() {
        task /= T::lit(labels.len() as f64);
    }
    let (router, d_router) = cross_entropy(router_logits, tasks)?;
    Ok(CombinedLoss {
        total: task + lambda * router,
        task,
        router,
        d_router_logits: d_router.scale(lambda),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without routing-accuracy improvement before stopping.
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 16,
            max_epochs: 100,
            patience: 30,
            lambda: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// A trained router plus what it routes to.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRouter<T = f32> {
    pub params: RouterParams<T>,
    pub lambda: f64,
    /// `(expert_id, task_name)` in gate order.
    pub experts: Vec<(u32, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub num_experts: usize,
    pub trainable_params: usize,
    pub lambda: f64,
    pub train_total_loss: Vec<f64>,
    pub train_task_loss: Vec<f64>,
    pub train_router_loss: Vec<f64>,
    /// Held-out routing accuracy after each epoch; index 0 is the untrained router.
    pub routing_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_routing_accuracy: f64,
    pub per_task_routing_accuracy: Vec<f64>,
    pub epochs_run: usize,
    pub wall_clock_secs: f64,
}

/// Eval-mode routing accuracy (`e* == t`) over precomputed hidden states,
/// overall and per source task.
pub fn routing_accuracy<T: Scalar>(
    hidden: &DenseTensor<T>,
    tasks: &[usize],
    params: &RouterParams<T>,
) -> Result<(f64, Vec<f64>)> {
    let g = gate_logits(hidden, params, None)?;
    let n = params.num_experts();
    let mut hits = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for (r, &t) in tasks.iter().enumerate() {
        counts[t] += 1;
        if gate_vector(g.row(r), 1)?.selected == t {
            hits[t] += 1;
        }
    }
    let total = tasks.len().max(1) as f64;
    let per_task = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    Ok((hits.iter().sum::<usize>() as f64 / total, per_task))
}

fn check_mixed<T: Scalar>(bank: &ExpertBank<T>, mixed: &MixedDataset) -> Result<()> {
    if mixed.num_tasks() != bank.len() {
        return Err(Error::Config(format!(
            "mixed dataset has {} tasks, bank has {} experts",
            mixed.num_tasks(),
            bank.len()
        )));
    }
    for (i, (e, &c)) in bank.experts().iter().zip(&mixed.num_classes).enumerate() {
        if e.num_classes() != c {
            return Err(Error::Config(format!(
                "expert {i} head has {} classes, task has {c}",
                e.num_classes()
            )));
        }
    }
    if let Some(bad) = mixed.examples.iter().find(|x| x.task >= bank.len()) {
        return Err(Error::Index {
            what: "expert label",
            index: bad.task,
            bound: bank.len(),
        });
    }
    Ok(())
}

/// Optimizes only `W_gate`, `b_gate` and `W_noise` on the combined loss over
/// `train`, selecting the epoch with the best held-out routing accuracy on
/// `eval`. Base model and bank are only borrowed immutably.
pub fn train_router<T: Scalar>(
    base: &BaseModel<T>,
    bank: &ExpertBank<T>,
    train: &MixedDataset,
    eval: &MixedDataset,
    config: &RouterConfig,
) -> Result<(TrainedRouter<T>, RouterReport)> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config("router training needs non-empty mixed datasets".into()));
    }
    if config.patience == 0 || !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(Error::Config("router config needs patience >= 1, lr > 0, batch_size >= 1".into()));
    }
    check_mixed(bank, train)?;
    check_mixed(bank, eval)?;
    let started = Instant::now();
    let d = base.config().d_model;
    let n = bank.len();
    let mut params = RouterParams::init(d, n, config.seed);
    check_router(base, bank, &params)?;
    let lambda = T::lit(config.lambda);

    // pass 1 is independent of the router, so compute it once
    let train_h = base.forward(&train.all_tokens()?, None)?.hidden;
    let eval_h = base.forward(&eval.all_tokens()?, None)?.hidden;
    let eval_t: Vec<usize> = eval.examples.iter().map(|x| x.task).collect();

    // pass-2 logits are deterministic per (sample, expert)
    let mut pass2: HashMap<(usize, usize), Vec<T>> = HashMap::new();
    let mut expert_logits = |sample: usize, expert: usize| -> Result<Vec<T>> {
        if let Some(l) = pass2.get(&(sample, expert)) {
            return Ok(l.clone());
        }
        let batch = train.batch(&[sample])?;
        let out = base.forward(&batch, Some(bank.get(expert)))?;
        let l = out.logits.expect("expert supplies a head").into_data();
        pass2.insert((sample, expert), l.clone());
        Ok(l)
    };

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7011_7e5);
    let (initial, initial_per_task) = routing_accuracy(&eval_h, &eval_t, &params)?;
    let mut report = RouterReport {
        num_experts: n,
        trainable_params: params.param_count(),
        lambda: config.lambda,
        train_total_loss: Vec::new(),
        train_task_loss: Vec::new(),
        train_router_loss: Vec::new(),
        routing_accuracy: vec![initial],
        best_epoch: 0,
        best_routing_accuracy: initial,
        per_task_routing_accuracy: initial_per_task,
        epochs_run: 0,
        wall_clock_secs: 0.0,
    };
    let mut best = params.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut task_part, mut router_part) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let h = DenseTensor::from_fn(&[chunk.len(), d], |i| train_h.get(&[chunk[i / d], i % d]));
            let noise = draw_noise(GateMode::Train, chunk.len(), n, &mut rng);
            let g = gate_logits(&h, &params, noise.as_ref())?;
            let mut task_logits = Vec::with_capacity(chunk.len());
            for (r, &s) in chunk.iter().enumerate() {
                let decision = gate_vector(g.row(r), 1)?;
                task_logits.push(expert_logits(s, decision.selected)?);
            }
            let labels: Vec<usize> = chunk.iter().map(|&s| train.examples[s].label).collect();
            let tasks: Vec<usize> = chunk.iter().map(|&s| train.examples[s].task).collect();
            let loss = combined_loss(&task_logits, &labels, &g, &tasks, lambda)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.total.to_f64(),
                });
            }
            let w = chunk.len() as f64;
            total += loss.total.to_f64() * w;
            task_part += loss.task.to_f64() * w;
            router_part += loss.router.to_f64() * w;
            let grads = params.backward(&h, noise.as_ref(), &loss.d_router_logits)?;
            let mut tensors = params.tensors_mut();
            if let Err(i) = optimizer.step(&mut tensors, &grads) {
                return Err(Error::NonFiniteGradient {
                    layer: 0,
                    matrix: ["w_gate", "b_gate", "w_noise"][i],
                    factor: 0,
                });
            }
        }
        let m = train.len() as f64;
        report.train_total_loss.push(total / m);
        report.train_task_loss.push(task_part / m);
        report.train_router_loss.push(router_part / m);
        report.epochs_run = epoch;
        let (acc, per_task) = routing_accuracy(&eval_h, &eval_t, &params)?;
        report.routing_accuracy.push(acc);
        if acc > report.best_routing_accuracy {
            report.best_routing_accuracy = acc;
            report.best_epoch = epoch;
            report.per_task_routing_accuracy = per_task;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((
        TrainedRouter {
            params: best,
            lambda: config.lambda,
            experts: bank.table(),
        },
        report,
    ))
}
