//! Tensor-train factorized weight updates.
//!
//! A `d_in × d_out` update is viewed as a `(p+q)`-way tensor with axes
//! `[m_1..m_p, n_1..n_q]` and stored as a chain of 3-way cores
//! `G_k ∈ R^{r_{k-1} × f_k × r_k}` with boundary ranks `r_0 = r_{p+q} = 1`.
//!
//! [`TtCores::forward`] applies the update to a batch without ever forming
//! the dense matrix: each input row is reshaped to `[m_1..m_p]`, the input
//! axes are contracted away one core at a time (leaving `[B, r_p]`), and the
//! output axes are then grown one core at a time until the state is
//! `[B, 1, n_1..n_q]`. [`TtCores::reconstruct`] contracts the chain into the
//! full matrix and exists as an oracle and as the benchmark baseline.
//!
//! Convention: `forward(x) = alpha · x · W` with `W` laid out `[d_in × d_out]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, DenseTensor, Scalar};

/// Factorization of a `d_in × d_out` matrix into tensor-train axes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtShape {
    pub input_factors: Vec<usize>,
    pub output_factors: Vec<usize>,
    pub rank: usize,
}

impl TtShape {
    pub fn new(input_factors: Vec<usize>, output_factors: Vec<usize>, rank: usize) -> Self {
        Self {
            input_factors,
            output_factors,
            rank,
        }
    }

    pub fn d_in(&self) -> usize {
        self.input_factors.iter().product()
    }

    pub fn d_out(&self) -> usize {
        self.output_factors.iter().product()
    }

    pub fn num_cores(&self) -> usize {
        self.input_factors.len() + self.output_factors.len()
    }

    /// `[m_1..m_p, n_1..n_q]`.
    pub fn factor_dims(&self) -> Vec<usize> {
        self.input_factors
            .iter()
            .chain(&self.output_factors)
            .copied()
            .collect()
    }

    /// Bond ranks `[1, r, .., r, 1]` of length `p + q + 1`.
    pub fn ranks(&self) -> Vec<usize> {
        let n = self.num_cores();
        (0..=n)
            .map(|i| if i == 0 || i == n { 1 } else { self.rank })
            .collect()
    }

    pub fn core_shape(&self, k: usize) -> [usize; 3] {
        let ranks = self.ranks();
        [ranks[k], self.factor_dims()[k], ranks[k + 1]]
    }

    /// Checks structural constraints and that the factors multiply out to
    /// the adapted layer's dimensions.
    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.input_factors.is_empty() || self.output_factors.is_empty() {
            return Err(Error::Config(
                "tt shape needs at least one input and one output factor".into(),
            ));
        }
        if let Some(f) = self.factor_dims().into_iter().find(|&f| f < 2) {
            return Err(Error::Config(format!("tt factor {f} is below 2")));
        }
        if self.rank == 0 {
            return Err(Error::Config("tt rank must be positive".into()));
        }
        if self.d_in() != d_in {
            return Err(Error::FactorProduct {
                side: "input",
                expected: d_in,
                actual: self.d_in(),
            });
        }
        if self.d_out() != d_out {
            return Err(Error::FactorProduct {
                side: "output",
                expected: d_out,
                actual: self.d_out(),
            });
        }
        Ok(())
    }

    /// `Σ_k r_{k-1} · f_k · r_k`.
    pub fn param_count(&self) -> usize {
        (0..self.num_cores())
            .map(|k| self.core_shape(k).iter().product::<usize>())
            .sum()
    }
}

pub fn validate_shape(shape: &TtShape, d_in: usize, d_out: usize) -> Result<()> {
    shape.validate(d_in, d_out)
}

pub fn tt_param_count(shape: &TtShape) -> usize {
    shape.param_count()
}

/// Trainable parameters of a rank-`r` LoRA pair on a `d_in × d_out` matrix.
pub fn lora_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * d_in + d_out * rank
}

/// A chain of tensor-train cores plus the scaling applied to its output.
#[derive(Clone, Debug, PartialEq)]
pub struct TtCores<T = f32> {
    shape: TtShape,
    cores: Vec<DenseTensor<T>>,
    alpha: T,
}

/// Gradients of `sum(forward(x) ⊙ upstream)`.
#[derive(Clone, Debug)]
pub struct TtGrads<T> {
    pub cores: Vec<DenseTensor<T>>,
    pub input: DenseTensor<T>,
}

impl<T: Scalar> TtCores<T> {
    pub fn from_cores(shape: TtShape, cores: Vec<DenseTensor<T>>, alpha: T) -> Result<Self> {
        shape.validate(shape.d_in(), shape.d_out())?;
        if !(alpha > T::zero()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if cores.len() != shape.num_cores() {
            return Err(Error::shape(
                "TtCores::from_cores",
                &[shape.num_cores()],
                &[cores.len()],
            ));
        }
        for (k, core) in cores.iter().enumerate() {
            let expected = shape.core_shape(k);
            if core.shape() != expected {
                return Err(Error::shape("TtCores::from_cores", &expected, core.shape()));
            }
        }
        Ok(Self {
            shape,
            cores,
            alpha,
        })
    }

    /// Gaussian cores with an all-zero final core, so the initial update is
    /// exactly the zero map.
    pub fn init(shape: &TtShape, seed: u64, std: T, alpha: T) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.num_cores();
        let cores = (0..n)
            .map(|k| {
                let dims = shape.core_shape(k);
                if k + 1 == n {
                    DenseTensor::zeros(&dims)
                } else {
                    DenseTensor::randn(&dims, std, &mut rng)
                }
            })
            .collect();
        Self::from_cores(shape.clone(), cores, alpha)
    }

    pub fn shape(&self) -> &TtShape {
        &self.shape
    }

    pub fn cores(&self) -> &[DenseTensor<T>] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [DenseTensor<T>] {
        &mut self.cores
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    fn check_input(&self, x: &DenseTensor<T>) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.shape.d_in() {
            return Err(Error::shape(
                "tt_contract_forward",
                x.shape(),
                &[self.shape.d_in(), self.shape.d_out()],
            ));
        }
        Ok(())
    }

    /// `alpha · x · W` by sequential contraction; see the module docs.
    pub fn forward(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        self.check_input(x)?;
        let batch = x.rows();
        let mut state = x.data().to_vec();
        for k in 0..self.cores.len() {
            state = self.step(k, batch, &state);
        }
        for v in &mut state {
            *v *= self.alpha;
        }
        DenseTensor::new(vec![batch, self.shape.d_out()], state)
    }

    /// Advances the contraction state through core `k`.
    fn step(&self, k: usize, batch: usize, state: &[T]) -> Vec<T> {
        let p = self.shape.input_factors.len();
        let [ra, f, rc] = self.shape.core_shape(k);
        let g = self.cores[k].data();
        if k < p {
            // [B, ra, f, rest] -> [B, rc, rest]
            let rest: usize = self.shape.input_factors[k + 1..].iter().product();
            let mut out = vec![T::zero(); batch * rc * rest];
            for b in 0..batch {
                for a in 0..ra {
                    for i in 0..f {
                        let src_at = ((b * ra + a) * f + i) * rest;
                        let src = &state[src_at..src_at + rest];
                        for c in 0..rc {
                            let w = g[(a * f + i) * rc + c];
                            let dst_at = (b * rc + c) * rest;
                            for (o, &s) in out[dst_at..dst_at + rest].iter_mut().zip(src) {
                                *o += w * s;
                            }
                        }
                    }
                }
            }
            out
        } else {
            // [B, ra, done] -> [B, rc, done, f]
            let done: usize = self.shape.output_factors[..k - p].iter().product();
            let g_t = transpose_core(g, ra, f, rc);
            let mut out = vec![T::zero(); batch * rc * done * f];
            for b in 0..batch {
                for a in 0..ra {
                    let src_at = (b * ra + a) * done;
                    for c in 0..rc {
                        let w = &g_t[(a * rc + c) * f..(a * rc + c + 1) * f];
                        for j in 0..done {
                            let s = state[src_at + j];
                            let dst_at = ((b * rc + c) * done + j) * f;
                            for (o, &gv) in out[dst_at..dst_at + f].iter_mut().zip(w) {
                                *o += s * gv;
                            }
                        }
                    }
                }
            }
            out
        }
    }

    /// Gradients of the scalar `sum(forward(x) ⊙ upstream)` with respect to
    /// every core and to `x`.
    pub fn backward(&self, x: &DenseTensor<T>, upstream: &DenseTensor<T>) -> Result<TtGrads<T>> {
        self.check_input(x)?;
        let batch = x.rows();
        if upstream.shape() != [batch, self.shape.d_out()] {
            return Err(Error::shape(
                "tt_contract_backward",
                upstream.shape(),
                &[batch, self.shape.d_out()],
            ));
        }
        let n = self.cores.len();
        let p = self.shape.input_factors.len();
        let mut states = Vec::with_capacity(n);
        states.push(x.data().to_vec());
        for k in 0..n - 1 {
            let next = self.step(k, batch, &states[k]);
            states.push(next);
        }

        let mut d_state: Vec<T> = upstream.data().iter().map(|&u| u * self.alpha).collect();
        let mut core_grads: Vec<DenseTensor<T>> = Vec::with_capacity(n);
        for k in (0..n).rev() {
            let [ra, f, rc] = self.shape.core_shape(k);
            let g = self.cores[k].data();
            let s = &states[k];
            let mut dg = vec![T::zero(); ra * f * rc];
            let mut ds = vec![T::zero(); s.len()];
            if k < p {
                let rest: usize = self.shape.input_factors[k + 1..].iter().product();
                for b in 0..batch {
                    for a in 0..ra {
                        for i in 0..f {
                            let s_at = ((b * ra + a) * f + i) * rest;
                            for c in 0..rc {
                                let d_at = (b * rc + c) * rest;
                                let dout = &d_state[d_at..d_at + rest];
                                let src = &s[s_at..s_at + rest];
                                let mut acc = T::zero();
                                for (&sv, &dv) in src.iter().zip(dout) {
                                    acc += sv * dv;
                                }
                                dg[(a * f + i) * rc + c] += acc;
                                let w = g[(a * f + i) * rc + c];
                                for (o, &dv) in ds[s_at..s_at + rest].iter_mut().zip(dout) {
                                    *o += w * dv;
                                }
                            }
                        }
                    }
                }
            } else {
                let done: usize = self.shape.output_factors[..k - p].iter().product();
                for b in 0..batch {
                    for a in 0..ra {
                        for j in 0..done {
                            let sv = s[(b * ra + a) * done + j];
                            let mut acc = T::zero();
                            for c in 0..rc {
                                let d_at = ((b * rc + c) * done + j) * f;
                                for (jj, &dv) in d_state[d_at..d_at + f].iter().enumerate() {
                                    let at = (a * f + jj) * rc + c;
                                    dg[at] += sv * dv;
                                    acc += g[at] * dv;
                                }
                            }
                            ds[(b * ra + a) * done + j] = acc;
                        }
                    }
                }
            }
            core_grads.push(DenseTensor::new(vec![ra, f, rc], dg)?);
            d_state = ds;
        }
        core_grads.reverse();
        Ok(TtGrads {
            cores: core_grads,
            input: DenseTensor::new(vec![batch, self.shape.d_in()], d_state)?,
        })
    }

    /// The dense `[d_in × d_out]` matrix the chain represents, without alpha.
    pub fn reconstruct(&self) -> DenseTensor<T> {
        let mut acc = self.cores[0]
            .clone()
            .reshape(vec![self.shape.core_shape(0)[1], self.shape.core_shape(0)[2]])
            .expect("first core has unit leading rank");
        for k in 1..self.cores.len() {
            let [ra, f, rc] = self.shape.core_shape(k);
            let g = self.cores[k]
                .clone()
                .reshape(vec![ra, f * rc])
                .expect("core reshape");
            let prod = matmul(&acc, &g).expect("chained ranks agree");
            let rows = prod.rows() * f;
            acc = prod.reshape(vec![rows, rc]).expect("core reshape");
        }
        acc.reshape(vec![self.shape.d_in(), self.shape.d_out()])
            .expect("chain covers d_in × d_out")
    }
}

/// `[a, j, c] -> [a, c, j]` so output-axis kernels read contiguously.
fn transpose_core<T: Scalar>(g: &[T], ra: usize, f: usize, rc: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    for a in 0..ra {
        for j in 0..f {
            for c in 0..rc {
                out[(a * rc + c) * f + j] = g[(a * f + j) * rc + c];
            }
        }
    }
    out
}

pub fn init_cores<T: Scalar>(shape: &TtShape, seed: u64, std: T, alpha: T) -> Result<TtCores<T>> {
    TtCores::init(shape, seed, std, alpha)
}

pub fn tt_contract_forward<T: Scalar>(x: &DenseTensor<T>, cores: &TtCores<T>) -> Result<DenseTensor<T>> {
    cores.forward(x)
}

pub fn tt_contract_backward<T: Scalar>(
    x: &DenseTensor<T>,
    cores: &TtCores<T>,
    upstream: &DenseTensor<T>,
) -> Result<TtGrads<T>> {
    cores.backward(x, upstream)
}

pub fn tt_reconstruct<T: Scalar>(cores: &TtCores<T>) -> DenseTensor<T> {
    cores.reconstruct()
}

/// Shapes used for the Query and Value projections of the 1B-parameter
/// base model that the parameter tables were measured on.
pub mod paper {
    use super::TtShape;

    pub const HIDDEN: usize = 2048;
    pub const VALUE_DIM: usize = 512;
    pub const LAYERS: usize = 16;
    pub const TT_RANK: usize = 5;
    pub const LORA_RANK: usize = 16;

    pub fn query_shape() -> TtShape {
        TtShape::new(vec![16, 8, 4, 4], vec![4, 4, 8, 16], TT_RANK)
    }

    pub fn value_shape() -> TtShape {
        TtShape::new(vec![16, 16, 4, 2], vec![2, 16, 16], TT_RANK)
    }
}
