//! A miniature end-to-end stack for distributed training and accelerated
//! inference of dense MLPs:
//!
//! - [`tensor`] and [`nn`]: deterministic f32 kernels, backprop, SGD, and a
//!   bit-exact checkpoint format.
//! - [`quant`] and [`accel`]: post-training uint8 quantization, execution
//!   planning, and a benchmark harness.
//! - [`shards`]: partitioned in-memory datasets with per-partition
//!   transforms and CSV ingestion.
//! - [`cluster`]: a multi-process driver/worker runtime over framed TCP with
//!   barrier, broadcast, scatter, and ring allreduce.
//! - [`estimator`]: a fit/predict/evaluate facade that replicates a model
//!   across workers and keeps replicas byte-identical.
//! - [`hpo`]: search spaces, delayed model instantiation, and random/grid
//!   hyperparameter studies.
//!
//! The same partitioning rule underpins dataset sharding, matmul row
//! parallelism, and allreduce chunking; see [`split_sizes`].

pub mod accel;
pub mod cluster;
pub mod codec;
pub mod estimator;
pub mod hpo;
pub mod nn;
pub mod quant;
pub mod shards;
pub mod synth;
pub mod tensor;

pub use accel::{BenchReport, ExecPlan, Precision};
pub use cluster::{ClusterConfig, ClusterContext, ClusterState, ReduceOp, WorkerId};
pub use estimator::{Backend, Estimator, FitConfig, Metric, SgdConfig, TrainReport};
pub use hpo::{Direction, ModelTemplate, Sampler, SearchSpace, SpaceValue, Study, Trial};
pub use nn::{Activation, LayerSpec, LossKind, ModelParams, ModelSpec};
pub use quant::{QuantParams, QuantizedModel, QuantizedTensor};
pub use shards::{Column, RecordBatch, Shards};
pub use tensor::Tensor;

/// Splits `len` items into `n` contiguous chunk sizes that differ by at most
/// one, larger chunks first: the first `len % n` chunks get `len/n + 1`
/// items, the rest get `len/n`.
///
/// This one rule defines dataset partitioning, matmul row ownership, and
/// allreduce chunk layout, so the three always agree.
pub fn split_sizes(len: usize, n: usize) -> Vec<usize> {
    assert!(n > 0, "cannot split into zero chunks");
    let base = len / n;
    let extra = len % n;
    (0..n).map(|i| base + usize::from(i < extra)).collect()
}
