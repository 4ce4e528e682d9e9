//! Latency of direct TT contraction against reconstruct-then-multiply.
//!
//! Both paths are timed per forward call with a monotonic clock around the
//! math only: the reconstruction path pays for building the dense `ΔW` on
//! every call. Repetitions alternate between the two paths so that any
//! background load hits both alike.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, DenseTensor, Scalar};
use crate::tt::{TtCores, TtShape};

pub const MIN_REPS: usize = 10;
pub const MIN_WARMUP: usize = 3;
/// Relative disagreement above which timings are refused.
pub const AGREEMENT_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub batch: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub shape: TtShape,
    pub reps: usize,
    pub warmup: usize,
    pub reconstruct_median_s: f64,
    pub reconstruct_iqr_s: f64,
    pub contract_median_s: f64,
    pub contract_iqr_s: f64,
    /// Reconstruction median over contraction median.
    pub speedup: f64,
    /// Relative error between the two paths' outputs.
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
            seed: 0,
            alpha: 1.0,
        }
    }
}

/// `ΔW = reconstruct(cores)`, then `alpha · x · ΔW`.
pub fn reconstruct_path<T: Scalar>(x: &DenseTensor<T>, cores: &TtCores<T>) -> Result<DenseTensor<T>> {
    let w = cores.reconstruct();
    Ok(matmul(x, &w)?.scale(cores.alpha()))
}

pub fn contract_path<T: Scalar>(x: &DenseTensor<T>, cores: &TtCores<T>) -> Result<DenseTensor<T>> {
    cores.forward(x)
}

/// Linear-interpolated quantile of already sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    (
        quantile(&samples, 0.5),
        quantile(&samples, 0.75) - quantile(&samples, 0.25),
    )
}

/// Random cores with every factor (including the last) nonzero, scaled so
/// the delta has entries of order one.
pub fn bench_cores<T: Scalar>(shape: &TtShape, alpha: T, seed: u64) -> Result<TtCores<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cores = (0..shape.num_cores())
        .map(|k| {
            let dims = shape.core_shape(k);
            let std = T::one() / T::lit(dims[0] as f64).sqrt();
            DenseTensor::randn(&dims, std, &mut rng)
        })
        .collect();
    TtCores::from_cores(shape.clone(), cores, alpha)
}

pub fn bench_contract_vs_reconstruct<T: Scalar>(
    shape: &TtShape,
    batch_sizes: &[usize],
    config: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    if config.reps < MIN_REPS || config.warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "benchmark needs reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}, got {} / {}",
            config.reps, config.warmup
        )));
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| b == 0) {
        return Err(Error::Config(format!("batch size must be positive, got {b}")));
    }
    shape.validate(shape.d_in(), shape.d_out())?;
    let cores = bench_cores::<T>(shape, T::lit(config.alpha), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    batch_sizes
        .iter()
        .map(|&batch| {
            let x = DenseTensor::randn(&[batch, shape.d_in()], T::one(), &mut rng);
            let reference = reconstruct_path(&x, &cores)?;
            let direct = contract_path(&x, &cores)?;
            let rel_err = direct.rel_err(&reference);
            if !(rel_err < AGREEMENT_TOL) {
                return Err(Error::Correctness(format!(
                    "batch {batch}: contraction and reconstruction disagree (rel err {rel_err:.3e})"
                )));
            }
            for _ in 0..config.warmup {
                std::hint::black_box(reconstruct_path(&x, &cores)?);
                std::hint::black_box(contract_path(&x, &cores)?);
            }
            let mut recon = Vec::with_capacity(config.reps);
            let mut contract = Vec::with_capacity(config.reps);
            for _ in 0..config.reps {
                let t = Instant::now();
                std::hint::black_box(reconstruct_path(std::hint::black_box(&x), &cores)?);
                recon.push(t.elapsed().as_secs_f64());
                let t = Instant::now();
                std::hint::black_box(contract_path(std::hint::black_box(&x), &cores)?);
                contract.push(t.elapsed().as_secs_f64());
            }
            let (reconstruct_median_s, reconstruct_iqr_s) = summarize(recon);
            let (contract_median_s, contract_iqr_s) = summarize(contract);
            Ok(BenchResult {
                batch,
                d_in: shape.d_in(),
                d_out: shape.d_out(),
                shape: shape.clone(),
                reps: config.reps,
                warmup: config.warmup,
                reconstruct_median_s,
                reconstruct_iqr_s,
                contract_median_s,
                contract_iqr_s,
                speedup: reconstruct_median_s / contract_median_s,
                rel_err,
            })
        })
        .collect()
}

/// Two runs agree when every per-batch median differs by at most `tol`
/// (relative to the smaller of the pair).
pub fn medians_stable(a: &[BenchResult], b: &[BenchResult], tol: f64) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= tol * x.min(y);
    a.len() == b.len()
        && a.iter().zip(b).all(|(p, q)| {
            p.batch == q.batch
                && close(p.reconstruct_median_s, q.reconstruct_median_s)
                && close(p.contract_median_s, q.contract_median_s)
        })
}
