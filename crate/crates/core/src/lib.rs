//! TT-LoRA mixture of experts on a small frozen transformer.
//!
//! Experts are tensor-train low-rank updates to the Query and Value
//! projections, trained one task at a time and then frozen. A noisy top-1
//! router over the base model's pooled hidden state picks one expert per
//! input.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod report;
pub mod router;
pub mod tensor;
pub mod train;
pub mod tt;

pub use bench::{bench_contract_vs_reconstruct, BenchConfig, BenchResult};
pub use checkpoint::{load_bank, load_expert, load_router, save_bank, save_expert, save_router, BankManifest};
pub use config::{resolve_seed, ExperimentConfig};
pub use data::{build_mixed, gen_synthetic_tasks, MixedDataset, Split, TaskDataset, TaskGenConfig};
pub use error::{Error, Result};
pub use model::{
    base_forward, count_trainable, AdapterSpec, BaseModel, Delta, ExpertAdapter, ModelConfig, TokenBatch,
};
pub use router::{
    combined_loss, gate_vector, moe_forward, noisy_gate, router_param_count, topk_mask, train_router,
    ExpertBank, GateDecision, GateMode, RouterConfig, RouterParams, RouterReport, TrainedRouter,
};
pub use tensor::{DenseTensor, Scalar};
pub use train::{evaluate, train_expert, OptimizerKind, TrainConfig, TrainReport};
pub use tt::{
    init_cores, lora_param_count, tt_contract_backward, tt_contract_forward, tt_param_count, tt_reconstruct,
    TtCores, TtShape,
};
