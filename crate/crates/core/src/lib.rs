//! Mixture-of-routers gating for mixture-of-LoRA-experts layers.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod fault;
pub mod layer;
pub mod lora;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod rng;
pub mod routing;
pub mod task;
pub mod telemetry;
pub mod trainer;

pub use error::{MorError, Result};
pub use layer::{GateUpstream, LayerGrads, LayerSpec, LayerTrace, MoeLoraLayer, ParamKind};
pub use lora::{ExpertGrads, LoraExpert, LoraExpertBank};
pub use model::{Activation, Model, ModelGrads, ModelSpec, ModelTrace};
pub use numeric::{init_kaiming, init_zeros, softmax, softmax_backward, top_k_indices, Matrix, Vector};
pub use objective::{balance_loss, router_balance_loss, task_loss, total_loss, ActivationStats, LayerStats, LossBreakdown};
pub use rng::Rng;
pub use routing::{
    main_router_weights, mor_route, routing_grads, single_route, topk_renormalize, Gate, GateMode, RouteGrads,
    RouteUpstream, RouterParams, RoutingDecision, Selection,
};
pub use checkpoint::{summarize, Checkpoint, CheckpointSummary, CHECKPOINT_SCHEMA};
pub use fault::{inject_router_fault, mean_squared_error, selection_agreement, Agreement, FaultMode, FaultSpec};
pub use task::{generate_task, read_dataset_cache, write_dataset_cache, Dataset, Sample, SyntheticTask, TaskSpec};
pub use telemetry::{
    balance_report, bench_forward, bench_models, to_csv, BalanceReport, BenchConfig, HistogramRow, LatencyEntry, LatencyReport,
};
pub use trainer::{
    batch_gradient, evaluate, finite_diff_gradient, gradient_check, train, EpochLog, GradCheck, OptimizerKind, StepLog,
    TrainConfig, TrainOutcome,
};
