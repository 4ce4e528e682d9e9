//! Frozen toy decoder whose Query and Value projections accept low-rank
//! deltas, plus the per-expert classification heads.
//!
//! The base weights are drawn once from a fixed seed and never exposed
//! mutably. Only the [`Delta`]s inside an [`ExpertAdapter`] are trainable;
//! [`BaseModel::backward`] returns gradients for exactly those.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_transpose_a, matmul_transpose_b, softmax, DenseTensor, Scalar};
use crate::tt::{lora_param_count, TtCores, TtShape};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    /// Width of the Value projection; strictly smaller than `d_model`.
    pub d_value: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            d_value: 16,
            n_layers: 2,
            n_heads: 4,
            max_len: 16,
            d_ff: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Dimensions of the 1B-parameter model behind the parameter tables.
    /// Only used for parameter accounting; never instantiated as a model.
    pub fn paper() -> Self {
        Self {
            vocab: 128_256,
            d_model: 2048,
            d_value: 512,
            n_layers: 16,
            n_heads: 32,
            max_len: 2048,
            d_ff: 8192,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab,
            self.d_model,
            self.d_value,
            self.n_layers,
            self.n_heads,
            self.max_len,
            self.d_ff,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_value >= self.d_model {
            return Err(Error::Config(format!(
                "d_value ({}) must be smaller than d_model ({})",
                self.d_value, self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 || self.d_value % self.n_heads != 0 {
            return Err(Error::Config(
                "d_model and d_value must be divisible by n_heads".into(),
            ));
        }
        Ok(())
    }

    /// Stable 64-bit identity of the architecture and weight seed.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Padded batch of token sequences. Row `b` is valid up to `lengths[b]`;
/// whatever follows is padding and never read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&[u32]], seq_len: usize) -> Result<Self> {
        let mut ids = vec![0; seqs.len() * seq_len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            if s.is_empty() || s.len() > seq_len {
                return Err(Error::InvalidInput(format!(
                    "sequence length {} outside 1..={seq_len}",
                    s.len()
                )));
            }
            ids[b * seq_len..b * seq_len + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Ok(Self {
            ids,
            lengths,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Valid (unpadded) tokens of row `b`.
    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..b * self.seq_len + self.lengths[b]]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * self.seq_len);
        for &r in rows {
            ids.extend_from_slice(&self.ids[r * self.seq_len..(r + 1) * self.seq_len]);
        }
        Self {
            ids,
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
            seq_len: self.seq_len,
        }
    }
}

/// Rank-`r` update `alpha · x · A · B` with `A: [d_in × r]`, `B: [r × d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors<T> {
    pub a: DenseTensor<T>,
    pub b: DenseTensor<T>,
    pub alpha: T,
}

impl<T: Scalar> LoraFactors<T> {
    /// `A` Gaussian, `B` zero, so the initial delta vanishes.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = T::one() / T::lit(d_in as f64).sqrt();
        Self {
            a: DenseTensor::randn(&[d_in, rank], std, &mut rng),
            b: DenseTensor::zeros(&[rank, d_out]),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// Trainable additive update to one frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub enum Delta<T> {
    Tt(TtCores<T>),
    Lora(LoraFactors<T>),
}

impl<T: Scalar> Delta<T> {
    pub fn forward(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        match self {
            Delta::Tt(cores) => cores.forward(x),
            Delta::Lora(l) => Ok(matmul(&matmul(x, &l.a)?, &l.b)?.scale(l.alpha)),
        }
    }

    /// Parameter gradients (in [`Delta::params`] order) and the input gradient.
    pub fn backward(
        &self,
        x: &DenseTensor<T>,
        upstream: &DenseTensor<T>,
    ) -> Result<(Vec<DenseTensor<T>>, DenseTensor<T>)> {
        match self {
            Delta::Tt(cores) => {
                let g = cores.backward(x, upstream)?;
                Ok((g.cores, g.input))
            }
            Delta::Lora(l) => {
                let h = matmul(x, &l.a)?;
                let d_b = matmul_transpose_a(&h, upstream)?.scale(l.alpha);
                let d_h = matmul_transpose_b(upstream, &l.b)?.scale(l.alpha);
                let d_a = matmul_transpose_a(x, &d_h)?;
                let d_x = matmul_transpose_b(&d_h, &l.a)?;
                Ok((vec![d_a, d_b], d_x))
            }
        }
    }

    pub fn params(&self) -> Vec<&DenseTensor<T>> {
        match self {
            Delta::Tt(c) => c.cores().iter().collect(),
            Delta::Lora(l) => vec![&l.a, &l.b],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        match self {
            Delta::Tt(c) => c.cores_mut().iter_mut().collect(),
            Delta::Lora(l) => vec![&mut l.a, &mut l.b],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Delta::Tt(c) => c.param_count(),
            Delta::Lora(l) => lora_param_count(l.a.rows(), l.b.cols(), l.rank()),
        }
    }

    pub fn as_tt(&self) -> Option<&TtCores<T>> {
        match self {
            Delta::Tt(c) => Some(c),
            Delta::Lora(_) => None,
        }
    }
}

/// `x · w0 + delta(x)`; with no delta this is exactly the frozen projection.
pub fn adapted_linear_forward<T: Scalar>(
    x: &DenseTensor<T>,
    w0: &DenseTensor<T>,
    delta: Option<&Delta<T>>,
) -> Result<DenseTensor<T>> {
    let mut out = matmul(x, w0)?;
    if let Some(d) = delta {
        let upd = d.forward(x)?;
        out.add_assign(&upd)?;
    }
    Ok(out)
}

/// Frozen affine classifier `hidden · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub weight: DenseTensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Head<T> {
    /// Uniform(-1/√d, 1/√d) for weight and bias.
    pub fn init(d: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = T::one() / T::lit(d as f64).sqrt();
        let weight = DenseTensor::uniform(&[d, classes], bound, &mut rng);
        let bias = DenseTensor::uniform(&[classes], bound, &mut rng).into_data();
        Self { weight, bias }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

pub fn head_forward<T: Scalar>(hidden: &DenseTensor<T>, head: &Head<T>) -> Result<DenseTensor<T>> {
    let mut out = matmul(hidden, &head.weight)?;
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(&head.bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Q and V deltas for one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter<T> {
    pub q: Delta<T>,
    pub v: Delta<T>,
}

/// How to build the deltas of a fresh adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdapterSpec {
    Tt {
        q_shape: TtShape,
        v_shape: TtShape,
        alpha: f64,
        init_std: f64,
    },
    Lora {
        rank: usize,
        alpha: f64,
    },
}

impl AdapterSpec {
    /// Rank-3 TT on the toy dimensions: Q `[8,8]→[8,8]`, V `[8,8]→[4,4]`.
    pub fn toy_tt() -> Self {
        AdapterSpec::Tt {
            q_shape: TtShape::new(vec![8, 8], vec![8, 8], 3),
            v_shape: TtShape::new(vec![8, 8], vec![4, 4], 3),
            alpha: 1.0,
            init_std: 0.02,
        }
    }

    /// Rank-2 LoRA on the toy dimensions.
    pub fn toy_lora() -> Self {
        AdapterSpec::Lora { rank: 2, alpha: 8.0 }
    }

    pub fn paper_tt() -> Self {
        AdapterSpec::Tt {
            q_shape: crate::tt::paper::query_shape(),
            v_shape: crate::tt::paper::value_shape(),
            alpha: 16.0,
            init_std: 0.02,
        }
    }

    pub fn paper_lora() -> Self {
        AdapterSpec::Lora {
            rank: crate::tt::paper::LORA_RANK,
            alpha: 8.0,
        }
    }
}

/// One task expert: Q/V deltas for every layer plus its frozen head.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertAdapter<T = f32> {
    pub expert_id: u32,
    pub task_name: String,
    pub config_hash: u64,
    layers: Vec<LayerAdapter<T>>,
    head: Head<T>,
}

impl<T: Scalar> ExpertAdapter<T> {
    /// Fresh adapter whose deltas are all exactly zero.
    pub fn new(
        config: &ModelConfig,
        spec: &AdapterSpec,
        expert_id: u32,
        task_name: impl Into<String>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("a head needs at least 2 classes".into()));
        }
        let (d, dv) = (config.d_model, config.d_value);
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (q_seed, v_seed) = (seeds.random::<u64>(), seeds.random::<u64>());
            let layer = match spec {
                AdapterSpec::Tt {
                    q_shape,
                    v_shape,
                    alpha,
                    init_std,
                } => {
                    q_shape.validate(d, d)?;
                    v_shape.validate(d, dv)?;
                    let (alpha, std) = (T::lit(*alpha), T::lit(*init_std));
                    LayerAdapter {
                        q: Delta::Tt(TtCores::init(q_shape, q_seed, std, alpha)?),
                        v: Delta::Tt(TtCores::init(v_shape, v_seed, std, alpha)?),
                    }
                }
                AdapterSpec::Lora { rank, alpha } => {
                    if *rank == 0 {
                        return Err(Error::Config("lora rank must be positive".into()));
                    }
                    let alpha = T::lit(*alpha);
                    LayerAdapter {
                        q: Delta::Lora(LoraFactors::init(d, d, *rank, alpha, q_seed)),
                        v: Delta::Lora(LoraFactors::init(d, dv, *rank, alpha, v_seed)),
                    }
                }
            };
            layers.push(layer);
        }
        let head = Head::init(d, num_classes, seeds.random());
        Ok(Self {
            expert_id,
            task_name: task_name.into(),
            config_hash: config.hash(),
            layers,
            head,
        })
    }

    pub fn from_parts(
        expert_id: u32,
        task_name: String,
        config_hash: u64,
        layers: Vec<LayerAdapter<T>>,
        head: Head<T>,
    ) -> Self {
        Self {
            expert_id,
            task_name,
            config_hash,
            layers,
            head,
        }
    }

    pub fn layers(&self) -> &[LayerAdapter<T>] {
        &self.layers
    }

    pub fn head(&self) -> &Head<T> {
        &self.head
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Every trainable tensor, layer by layer, Q before V.
    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let mut p = l.q.params_mut();
                p.extend(l.v.params_mut());
                p
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&DenseTensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut p = l.q.params();
                p.extend(l.v.params());
                p
            })
            .collect()
    }

    /// `(layer, "q" | "v", factor index)` for each entry of [`Self::params`].
    pub fn param_labels(&self) -> Vec<(usize, &'static str, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend((0..l.q.params().len()).map(|k| (i, "q", k)));
            out.extend((0..l.v.params().len()).map(|k| (i, "v", k)));
        }
        out
    }

    pub fn trainable_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            hash_tensor(&mut h, p);
        }
        hex(&h.finalize())
    }

    pub fn head_hash(&self) -> String {
        let mut h = Sha256::new();
        hash_tensor(&mut h, &self.head.weight);
        hash_slice(&mut h, &self.head.bias);
        hex(&h.finalize())
    }
}

/// Trainable adapter parameters `spec` would give a model with `config`'s
/// dimensions, computed from the shapes alone (nothing is allocated).
pub fn adapter_param_count(config: &ModelConfig, spec: &AdapterSpec) -> Result<usize> {
    let (d, dv) = (config.d_model, config.d_value);
    let per_layer = match spec {
        AdapterSpec::Tt { q_shape, v_shape, .. } => {
            q_shape.validate(d, d)?;
            v_shape.validate(d, dv)?;
            q_shape.param_count() + v_shape.param_count()
        }
        AdapterSpec::Lora { rank, .. } => lora_param_count(d, d, *rank) + lora_param_count(d, dv, *rank),
    };
    Ok(per_layer * config.n_layers)
}

/// Trainable parameters summed over all adapted matrices (head and base excluded).
pub fn count_trainable<T: Scalar>(adapter: &ExpertAdapter<T>) -> usize {
    adapter
        .layers()
        .iter()
        .map(|l| l.q.param_count() + l.v.param_count())
        .sum()
}

/// Gradients for every delta parameter, same order as [`ExpertAdapter::params`].
#[derive(Clone, Debug)]
pub struct AdapterGrads<T> {
    pub tensors: Vec<DenseTensor<T>>,
}

impl<T: Scalar> AdapterGrads<T> {
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Layer<T> {
    attn_gain: Vec<T>,
    wq: DenseTensor<T>,
    wk: DenseTensor<T>,
    wv: DenseTensor<T>,
    wo: DenseTensor<T>,
    ffn_gain: Vec<T>,
    w1: DenseTensor<T>,
    b1: Vec<T>,
    w2: DenseTensor<T>,
    b2: Vec<T>,
}

/// Frozen pre-norm causal transformer. No mutable access to any weight.
#[derive(Clone, Debug)]
pub struct BaseModel<T = f32> {
    config: ModelConfig,
    tok_emb: DenseTensor<T>,
    pos_emb: DenseTensor<T>,
    layers: Vec<Layer<T>>,
    final_gain: Vec<T>,
}

/// Output of [`BaseModel::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// Final-norm state of each row's last valid token, `[B × d]`.
    pub hidden: DenseTensor<T>,
    /// `[B × C]` when an adapter (and hence a head) was supplied.
    pub logits: Option<DenseTensor<T>>,
}

struct LayerTape<T> {
    x_in: DenseTensor<T>,
    a: DenseTensor<T>,
    q: DenseTensor<T>,
    k: DenseTensor<T>,
    v: DenseTensor<T>,
    probs: Vec<DenseTensor<T>>,
    x_mid: DenseTensor<T>,
    u: DenseTensor<T>,
}

/// Activations of one sequence, kept for [`BaseModel::backward`].
pub struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    x_last: Vec<T>,
    hidden: Vec<T>,
}

impl<T> Tape<T> {
    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }
}

impl<T: Scalar> BaseModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dv, ff) = (config.d_model, config.d_value, config.d_ff);
        let fan = |n: usize| T::one() / T::lit(n as f64).sqrt();
        // residual-branch output projections shrink with depth, GPT-2 style
        let residual = T::one() / T::lit((2 * config.n_layers) as f64).sqrt();
        let tok_emb = DenseTensor::randn(&[config.vocab, d], T::one(), &mut rng);
        let pos_emb = DenseTensor::randn(&[config.max_len, d], T::lit(0.1), &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_gain: vec![T::one(); d],
                wq: DenseTensor::randn(&[d, d], fan(d), &mut rng),
                wk: DenseTensor::randn(&[d, d], fan(d), &mut rng),
                wv: DenseTensor::randn(&[d, dv], fan(d), &mut rng),
                wo: DenseTensor::randn(&[dv, d], fan(dv) * residual, &mut rng),
                ffn_gain: vec![T::one(); d],
                w1: DenseTensor::randn(&[d, ff], fan(d), &mut rng),
                b1: vec![T::zero(); ff],
                w2: DenseTensor::randn(&[ff, d], fan(ff) * residual, &mut rng),
                b2: vec![T::zero(); d],
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_gain: vec![T::one(); d],
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    /// SHA-256 over every base weight, in a fixed order.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        hash_tensor(&mut h, &self.tok_emb);
        hash_tensor(&mut h, &self.pos_emb);
        for l in &self.layers {
            hash_slice(&mut h, &l.attn_gain);
            for w in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                hash_tensor(&mut h, w);
            }
            hash_slice(&mut h, &l.ffn_gain);
            hash_slice(&mut h, &l.b1);
            hash_slice(&mut h, &l.b2);
        }
        hash_slice(&mut h, &self.final_gain);
        hex(&h.finalize())
    }

    fn check_adapter(&self, adapter: &ExpertAdapter<T>) -> Result<()> {
        if adapter.config_hash != self.config_hash() || adapter.layers.len() != self.layers.len() {
            return Err(Error::ConfigHash {
                expected: self.config_hash(),
                found: adapter.config_hash,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, seq: &[u32]) -> Result<()> {
        if seq.is_empty() || seq.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} outside 1..={}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                bound: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Runs the full stack over one sequence and records the activations.
    pub fn forward_tape(&self, seq: &[u32], adapter: Option<&ExpertAdapter<T>>) -> Result<Tape<T>> {
        self.check_tokens(seq)?;
        if let Some(a) = adapter {
            self.check_adapter(a)?;
        }
        let n = seq.len();
        let d = self.config.d_model;
        let mut x = DenseTensor::from_fn(&[n, d], |i| {
            let (t, c) = (i / d, i % d);
            self.tok_emb.get(&[seq[t] as usize, c]) + self.pos_emb.get(&[t, c])
        });
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let deltas = adapter.map(|a| &a.layers[li]);
            let a = rms_norm(&x, &layer.attn_gain);
            let q = adapted_linear_forward(&a, &layer.wq, deltas.map(|l| &l.q))?;
            let k = matmul(&a, &layer.wk)?;
            let v = adapted_linear_forward(&a, &layer.wv, deltas.map(|l| &l.v))?;
            let (o, probs) = self.attention(&q, &k, &v)?;
            let mut x_mid = x.clone();
            x_mid.add_assign(&matmul(&o, &layer.wo)?)?;
            let b = rms_norm(&x_mid, &layer.ffn_gain);
            let mut u = matmul(&b, &layer.w1)?;
            add_bias(&mut u, &layer.b1);
            let g = map(&u, gelu);
            let mut f = matmul(&g, &layer.w2)?;
            add_bias(&mut f, &layer.b2);
            let mut x_out = x_mid.clone();
            x_out.add_assign(&f)?;
            tapes.push(LayerTape {
                x_in: x,
                a,
                q,
                k,
                v,
                probs,
                x_mid,
                u,
            });
            x = x_out;
        }
        let x_last = x.row(n - 1).to_vec();
        let hidden = rms_norm_row(&x_last, &self.final_gain);
        Ok(Tape {
            layers: tapes,
            x_last,
            hidden,
        })
    }

    /// Causal multi-head attention. Returns the concatenated head outputs
    /// `[n × d_value]` and each head's attention matrix.
    fn attention(
        &self,
        q: &DenseTensor<T>,
        k: &DenseTensor<T>,
        v: &DenseTensor<T>,
    ) -> Result<(DenseTensor<T>, Vec<DenseTensor<T>>)> {
        let n = q.rows();
        let heads = self.config.n_heads;
        let (dh, dvh) = (self.config.d_model / heads, self.config.d_value / heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = DenseTensor::zeros(&[n, self.config.d_value]);
        let mut all_probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut probs = DenseTensor::zeros(&[n, n]);
            for t in 0..n {
                let qt = &q.row(t)[h * dh..(h + 1) * dh];
                let scores: Vec<T> = (0..=t)
                    .map(|s| {
                        let ks = &k.row(s)[h * dh..(h + 1) * dh];
                        qt.iter().zip(ks).map(|(&a, &b)| a * b).sum::<T>() * scale
                    })
                    .collect();
                let p = softmax(&scores)?;
                probs.row_mut(t)[..=t].copy_from_slice(&p);
                let orow = &mut out.row_mut(t)[h * dvh..(h + 1) * dvh];
                for (s, &w) in p.iter().enumerate() {
                    for (o, &vv) in orow.iter_mut().zip(&v.row(s)[h * dvh..(h + 1) * dvh]) {
                        *o += w * vv;
                    }
                }
            }
            all_probs.push(probs);
        }
        Ok((out, all_probs))
    }

    /// Backpropagates `d loss / d logits` (one sequence) to every delta parameter.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        adapter: &ExpertAdapter<T>,
        d_logits: &[T],
    ) -> Result<AdapterGrads<T>> {
        self.check_adapter(adapter)?;
        let head = adapter.head();
        if d_logits.len() != head.num_classes() {
            return Err(Error::shape(
                "backward",
                &[d_logits.len()],
                &[head.num_classes()],
            ));
        }
        let d = self.config.d_model;
        // d hidden = W_head · d logits
        let d_hidden: Vec<T> = (0..d)
            .map(|i| {
                head.weight
                    .row(i)
                    .iter()
                    .zip(d_logits)
                    .map(|(&w, &g)| w * g)
                    .sum()
            })
            .collect();
        let n = tape.layers[0].x_in.rows();
        let mut dx = DenseTensor::zeros(&[n, d]);
        dx.row_mut(n - 1)
            .copy_from_slice(&rms_norm_row_backward(&tape.x_last, &self.final_gain, &d_hidden));

        let mut per_layer: Vec<(Vec<DenseTensor<T>>, Vec<DenseTensor<T>>)> =
            Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lt = &tape.layers[li];
            let deltas = &adapter.layers[li];

            // feed-forward block: x_out = x_mid + ffn(norm(x_mid))
            let d_g = matmul_transpose_b(&dx, &layer.w2)?;
            let mut d_u = d_g;
            for (du, &u) in d_u.data_mut().iter_mut().zip(lt.u.data()) {
                *du *= gelu_grad(u);
            }
            let d_b = matmul_transpose_b(&d_u, &layer.w1)?;
            let mut d_mid = dx;
            d_mid.add_assign(&rms_norm_backward(&lt.x_mid, &layer.ffn_gain, &d_b))?;

            // attention block: x_mid = x_in + attn(norm(x_in))
            let d_o = matmul_transpose_b(&d_mid, &layer.wo)?;
            let (d_q, d_k, d_v) = self.attention_backward(lt, &d_o);
            let (q_grads, dq_in) = deltas.q.backward(&lt.a, &d_q)?;
            let (v_grads, dv_in) = deltas.v.backward(&lt.a, &d_v)?;
            let mut d_a = matmul_transpose_b(&d_q, &layer.wq)?;
            d_a.add_assign(&dq_in)?;
            d_a.add_assign(&matmul_transpose_b(&d_k, &layer.wk)?)?;
            d_a.add_assign(&matmul_transpose_b(&d_v, &layer.wv)?)?;
            d_a.add_assign(&dv_in)?;
            let mut d_in = d_mid;
            d_in.add_assign(&rms_norm_backward(&lt.x_in, &layer.attn_gain, &d_a))?;
            dx = d_in;
            per_layer.push((q_grads, v_grads));
        }
        per_layer.reverse();
        let tensors = per_layer
            .into_iter()
            .flat_map(|(q, v)| q.into_iter().chain(v))
            .collect();
        Ok(AdapterGrads { tensors })
    }

    fn attention_backward(
        &self,
        lt: &LayerTape<T>,
        d_o: &DenseTensor<T>,
    ) -> (DenseTensor<T>, DenseTensor<T>, DenseTensor<T>) {
        let n = lt.q.rows();
        let heads = self.config.n_heads;
        let (dh, dvh) = (self.config.d_model / heads, self.config.d_value / heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut d_q = DenseTensor::zeros(lt.q.shape());
        let mut d_k = DenseTensor::zeros(lt.k.shape());
        let mut d_v = DenseTensor::zeros(lt.v.shape());
        for (h, probs) in lt.probs.iter().enumerate() {
            for t in 0..n {
                let dot = &d_o.row(t)[h * dvh..(h + 1) * dvh];
                let p = &probs.row(t)[..=t];
                // d P[t, s] = d o_t · v_s
                let d_p: Vec<T> = (0..=t)
                    .map(|s| {
                        let vs = &lt.v.row(s)[h * dvh..(h + 1) * dvh];
                        dot.iter().zip(vs).map(|(&a, &b)| a * b).sum()
                    })
                    .collect();
                let inner: T = p.iter().zip(&d_p).map(|(&a, &b)| a * b).sum();
                for s in 0..=t {
                    for (dv, &g) in d_v.row_mut(s)[h * dvh..(h + 1) * dvh].iter_mut().zip(dot) {
                        *dv += p[s] * g;
                    }
                    let d_score = p[s] * (d_p[s] - inner) * scale;
                    let ks = lt.k.row(s)[h * dh..(h + 1) * dh].to_vec();
                    let qt = lt.q.row(t)[h * dh..(h + 1) * dh].to_vec();
                    for (dq, &kv) in d_q.row_mut(t)[h * dh..(h + 1) * dh].iter_mut().zip(&ks) {
                        *dq += d_score * kv;
                    }
                    for (dk, &qv) in d_k.row_mut(s)[h * dh..(h + 1) * dh].iter_mut().zip(&qt) {
                        *dk += d_score * qv;
                    }
                }
            }
        }
        (d_q, d_k, d_v)
    }

    /// Batched inference: pooled hidden states, plus head logits when an
    /// adapter is supplied.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        adapter: Option<&ExpertAdapter<T>>,
    ) -> Result<ForwardOutput<T>> {
        let d = self.config.d_model;
        let mut hidden = DenseTensor::zeros(&[batch.len(), d]);
        for b in 0..batch.len() {
            let tape = self.forward_tape(batch.sequence(b), adapter)?;
            hidden.row_mut(b).copy_from_slice(&tape.hidden);
        }
        let logits = match adapter {
            Some(a) => Some(head_forward(&hidden, a.head())?),
            None => None,
        };
        Ok(ForwardOutput { hidden, logits })
    }
}

pub fn base_forward<T: Scalar>(
    model: &BaseModel<T>,
    tokens: &TokenBatch,
    adapter: Option<&ExpertAdapter<T>>,
) -> Result<ForwardOutput<T>> {
    model.forward(tokens, adapter)
}

fn add_bias<T: Scalar>(x: &mut DenseTensor<T>, bias: &[T]) {
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn map<T: Scalar>(x: &DenseTensor<T>, f: impl Fn(T) -> T) -> DenseTensor<T> {
    DenseTensor::from_fn(x.shape(), |i| f(x.data()[i]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let t = (c * (x + T::lit(0.044715) * x * x * x)).tanh();
    let d_inner = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * d_inner
}

fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T]) -> Vec<T> {
    let inv = inv_rms(x);
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn inv_rms<T: Scalar>(x: &[T]) -> T {
    let ms = x.iter().map(|&v| v * v).sum::<T>() / T::lit(x.len() as f64);
    T::one() / (ms + T::lit(NORM_EPS)).sqrt()
}

fn rms_norm_row_backward<T: Scalar>(x: &[T], gain: &[T], dy: &[T]) -> Vec<T> {
    let inv = inv_rms(x);
    let n = T::lit(x.len() as f64);
    let dot: T = x
        .iter()
        .zip(gain)
        .zip(dy)
        .map(|((&xv, &g), &d)| xv * g * d)
        .sum();
    x.iter()
        .zip(gain)
        .zip(dy)
        .map(|((&xv, &g), &d)| inv * g * d - xv * inv * inv * inv * dot / n)
        .collect()
}

fn rms_norm<T: Scalar>(x: &DenseTensor<T>, gain: &[T]) -> DenseTensor<T> {
    let mut out = DenseTensor::zeros(x.shape());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&rms_norm_row(x.row(r), gain));
    }
    out
}

fn rms_norm_backward<T: Scalar>(x: &DenseTensor<T>, gain: &[T], dy: &DenseTensor<T>) -> DenseTensor<T> {
    let mut out = DenseTensor::zeros(x.shape());
    for r in 0..x.rows() {
        out.row_mut(r)
            .copy_from_slice(&rms_norm_row_backward(x.row(r), gain, dy.row(r)));
    }
    out
}

fn hash_slice<T: Scalar>(h: &mut Sha256, data: &[T]) {
    let mut buf = Vec::with_capacity(data.len() * (T::BITS as usize / 8));
    for &v in data {
        v.write_le(&mut buf);
    }
    h.update(&buf);
}

fn hash_tensor<T: Scalar>(h: &mut Sha256, t: &DenseTensor<T>) {
    for &dim in t.shape() {
        h.update((dim as u64).to_le_bytes());
    }
    hash_slice(h, t.data());
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BaseModel<f64> {
        BaseModel::new(ModelConfig::default()).unwrap()
    }

    fn perturbed(adapter: &mut ExpertAdapter<f64>, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in adapter.params_mut() {
            for v in p.data_mut() {
                *v += std * f64::sample_normal(&mut rng);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.d_value = 64;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn adapted_linear_with_zero_init_is_exactly_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseTensor::<f32>::randn(&[3, 64], 1.0, &mut rng);
        let w0 = DenseTensor::<f32>::randn(&[64, 16], 0.1, &mut rng);
        let shape = TtShape::new(vec![8, 8], vec![4, 4], 3);
        let delta = Delta::Tt(TtCores::init(&shape, 3, 0.02, 1.0).unwrap());
        let base = matmul(&x, &w0).unwrap();
        let none = adapted_linear_forward(&x, &w0, None).unwrap();
        let zero = adapted_linear_forward(&x, &w0, Some(&delta)).unwrap();
        let bits = |t: &DenseTensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&none), bits(&base));
        assert_eq!(bits(&zero), bits(&base));
    }

    #[test]
    fn adapted_linear_delta_matches_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DenseTensor::<f64>::randn(&[4, 64], 1.0, &mut rng);
        let w0 = DenseTensor::<f64>::randn(&[64, 16], 0.1, &mut rng);
        let shape = TtShape::new(vec![8, 8], vec![4, 4], 3);
        let cores: Vec<_> = (0..4)
            .map(|k| DenseTensor::randn(&shape.core_shape(k), 0.5, &mut rng))
            .collect();
        let tt = TtCores::from_cores(shape, cores, 2.0).unwrap();
        let out = adapted_linear_forward(&x, &w0, Some(&Delta::Tt(tt.clone()))).unwrap();
        let delta_part = DenseTensor::from_fn(out.shape(), |i| {
            out.data()[i] - matmul(&x, &w0).unwrap().data()[i]
        });
        let oracle = matmul(&x, &tt.reconstruct()).unwrap().scale(2.0);
        assert!(delta_part.rel_err(&oracle) < 1e-5);
    }

    #[test]
    fn head_forward_cases() {
        let head = Head::<f64>::init(4, 3, 9);
        let zero = head_forward(&DenseTensor::zeros(&[2, 4]), &head).unwrap();
        for r in 0..2 {
            assert_eq!(zero.row(r), head.bias.as_slice());
        }
        let onehot = DenseTensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let out = head_forward(&onehot, &head).unwrap();
        for c in 0..3 {
            assert_eq!(out.row(0)[c], head.weight.get(&[2, c]) + head.bias[c]);
        }
        assert!(head_forward(&DenseTensor::zeros(&[1, 5]), &head).is_err());
    }

    #[test]
    fn head_forward_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = Head::<f64>::init(6, 4, 1);
        let h = DenseTensor::randn(&[3, 6], 1.0, &mut rng);
        let got = head_forward(&h, &head).unwrap();
        for b in 0..3 {
            for c in 0..4 {
                let mut acc = head.bias[c];
                for i in 0..6 {
                    acc += h.get(&[b, i]) * head.weight.get(&[i, c]);
                }
                assert!((got.get(&[b, c]) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_zero_adapter_is_transparent() {
        let model = toy();
        let batch = TokenBatch::from_sequences(&[&[1, 5, 9, 3], &[7, 7]], 16).unwrap();
        let a = model.forward(&batch, None).unwrap();
        let b = model.forward(&batch, None).unwrap();
        assert_eq!(a, b);
        let adapter =
            ExpertAdapter::new(model.config(), &AdapterSpec::toy_tt(), 0, "t", 2, 4).unwrap();
        let with = model.forward(&batch, Some(&adapter)).unwrap();
        assert_eq!(with.hidden, a.hidden);
        assert!(with.logits.is_some());
    }

    #[test]
    fn padding_after_the_sequence_is_ignored() {
        let model = toy();
        let single = TokenBatch::from_sequences(&[&[12]], 1).unwrap();
        let mut padded = TokenBatch::from_sequences(&[&[12]], 8).unwrap();
        padded.ids[1..].copy_from_slice(&[3, 4, 5, 6, 7, 8, 9]);
        let a = model.forward(&single, None).unwrap();
        let b = model.forward(&padded, None).unwrap();
        assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn out_of_range_token_is_an_index_error() {
        let model = toy();
        let batch = TokenBatch::from_sequences(&[&[64]], 4).unwrap();
        assert!(matches!(
            model.forward(&batch, None),
            Err(Error::Index { index: 64, .. })
        ));
    }

    #[test]
    fn toy_trainable_count_matches_formula() {
        let config = ModelConfig::default();
        let adapter =
            ExpertAdapter::<f32>::new(&config, &AdapterSpec::toy_tt(), 0, "t", 2, 0).unwrap();
        // Q: [8,8|8,8] r=3 -> 1*8*3 + 3*8*3 + 3*8*3 + 3*8*1; V: [8,8|4,4] r=3 -> 24+72+36+12
        let q = 24 + 72 + 72 + 24;
        let v = 24 + 72 + 36 + 12;
        assert_eq!(count_trainable(&adapter), 2 * (q + v));
    }

    #[test]
    fn paper_scale_counts() {
        let config = ModelConfig::paper();
        let tt = ExpertAdapter::<f32>::new(&config, &AdapterSpec::paper_tt(), 0, "p", 2, 0).unwrap();
        assert_eq!(count_trainable(&tt), 33_920);
        let lora =
            ExpertAdapter::<f32>::new(&config, &AdapterSpec::paper_lora(), 0, "p", 2, 0).unwrap();
        assert_eq!(count_trainable(&lora), 1_703_936);
        assert_eq!(adapter_param_count(&config, &AdapterSpec::paper_tt()).unwrap(), 33_920);
        assert_eq!(adapter_param_count(&config, &AdapterSpec::paper_lora()).unwrap(), 1_703_936);
        let toy = ModelConfig::default();
        assert!(adapter_param_count(&toy, &AdapterSpec::paper_tt()).is_err());
    }

    /// Central differences of `<logits, upstream>` against the analytic
    /// gradient, over a random subset of every adapter tensor.
    fn check_model_gradients(spec: &AdapterSpec) {
        let model = toy();
        let mut adapter = ExpertAdapter::new(model.config(), spec, 0, "g", 3, 11).unwrap();
        perturbed(&mut adapter, 12, 0.3);
        let seq = [3u32, 17, 40, 2, 9];
        let upstream = [0.7, -1.1, 0.4];
        let objective = |a: &ExpertAdapter<f64>| -> f64 {
            let tape = model.forward_tape(&seq, Some(a)).unwrap();
            let hidden = DenseTensor::new(vec![1, 64], tape.hidden().to_vec()).unwrap();
            let logits = head_forward(&hidden, a.head()).unwrap();
            logits.data().iter().zip(&upstream).map(|(l, u)| l * u).sum()
        };
        let tape = model.forward_tape(&seq, Some(&adapter)).unwrap();
        let grads = model.backward(&tape, &adapter, &upstream).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (pi, g) in grads.tensors.iter().enumerate() {
            for _ in 0..4 {
                let idx = rng.random_range(0..g.len());
                let mut plus = adapter.clone();
                plus.params_mut()[pi].data_mut()[idx] += h;
                let mut minus = adapter.clone();
                minus.params_mut()[pi].data_mut()[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.data()[idx];
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "max rel err {worst}");
    }

    #[test]
    fn full_model_tt_gradients_match_finite_differences() {
        check_model_gradients(&AdapterSpec::toy_tt());
    }

    #[test]
    fn full_model_lora_gradients_match_finite_differences() {
        check_model_gradients(&AdapterSpec::Lora {
            rank: 2,
            alpha: 1.0,
        });
    }
}
