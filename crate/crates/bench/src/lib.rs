//! Shared inputs for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttmoe_core::bench::bench_cores;
use ttmoe_core::model::{AdapterSpec, BaseModel, ExpertAdapter, ModelConfig, TokenBatch};
use ttmoe_core::router::{ExpertBank, RouterParams};
use ttmoe_core::{DenseTensor, TtCores, TtShape};

pub const BATCHES: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];

/// Nonzero cores for `shape` and a standard-normal input batch.
pub fn contraction_case(shape: &TtShape, batch: usize) -> (TtCores<f32>, DenseTensor<f32>) {
    let cores = bench_cores(shape, 1.0, 0).expect("valid shape");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DenseTensor::randn(&[batch, shape.d_in()], 1.0, &mut rng);
    (cores, x)
}

/// Toy base, a bank of `n` freshly initialized experts, a random router and
/// `batch` token sequences of full length.
pub fn routing_case(n: usize, batch: usize) -> (BaseModel, ExpertBank, RouterParams, TokenBatch) {
    let config = ModelConfig::default();
    let base = BaseModel::new(config.clone()).expect("toy config");
    let experts = (0..n)
        .map(|i| ExpertAdapter::new(&config, &AdapterSpec::toy_tt(), i as u32, format!("t{i}"), 2, i as u64))
        .collect::<Result<Vec<_>, _>>()
        .expect("toy adapters");
    let bank = ExpertBank::new(experts).expect("non-empty bank");
    let router = RouterParams::init(config.d_model, n, 0);
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|b| (0..config.max_len).map(|t| ((b * 7 + t * 3) % config.vocab) as u32).collect())
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let tokens = TokenBatch::from_sequences(&refs, config.max_len).expect("valid tokens");
    (base, bank, router, tokens)
}
