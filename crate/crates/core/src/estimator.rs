//! Distributed sklearn-style Estimator: one model replica per worker, each
//! fed its own data partition, gradients averaged over the ring every step.
//!
//! Training semantics are data-parallel SGD with gradient averaging. Every
//! step each replica computes the mean-loss gradient of its next local
//! minibatch, the flattened gradients are allreduced with Mean, and every
//! replica applies the identical update. Because the loss is a mean over
//! batch rows and the reduction is a mean over replicas, a k-worker step
//! equals a single-process step on the union of the k minibatches (up to
//! float summation order), which is what the serial-equivalence tests check.
//!
//! Local mode runs the exact same replica code in process with n=1 and an
//! identity reduction.

use crate::accel::{infer, AccelError, ExecPlan, ModelHandle};
use crate::cluster::{ClusterContext, ClusterError, ReduceOp, WorkerCtx};
use crate::codec::{decode_record_batch, encode_record_batch, PayloadReader, PayloadWriter};
use crate::nn::{
    argmax_rows, backward, decode_model, encode_model, init_params, load_model, loss_value,
    save_model, sgd_step, CheckpointError, ModelParams, ModelSpec, NnError,
};
use crate::shards::{Column, RecordBatch, Shards, ShardsError};
use crate::tensor::Tensor;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("{partitions} partitions for {replicas} replicas; repartition the dataset to one partition per replica")]
    PartitionMismatch { partitions: usize, replicas: usize },
    #[error("partition {worker} is empty; repartition the dataset so every replica gets rows")]
    EmptyPartition { worker: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("replica parameters diverged across workers at epoch {epoch}")]
    ReplicaDivergence { epoch: usize },
    #[error("unknown metric \"{0}\"; expected \"accuracy\" or \"mse\"")]
    UnknownMetric(String),
    #[error("labels unsuitable for the metric: {0}")]
    BadLabels(String),
    #[error("cannot evaluate on zero rows")]
    EmptyEvaluation,
    #[error("fit cancelled")]
    Cancelled,
    #[error("malformed worker reply: {0}")]
    BadReply(String),
    #[error(transparent)]
    Shards(#[from] ShardsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Accel(#[from] AccelError),
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f32,
    /// Seed for parameter initialization, so replicas can be reconstructed.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    /// Per-replica minibatch rows.
    pub batch_size: usize,
    /// Seed for the per-epoch shuffle permutations.
    pub seed: u64,
    pub shuffle: bool,
    /// When set, every replica checksums its parameters after every step and
    /// the driver fails the fit on any cross-replica mismatch.
    pub debug_checksums: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 1,
            batch_size: 32,
            seed: 0,
            shuffle: false,
            debug_checksums: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean training loss across replicas, one entry per epoch.
    pub epoch_losses: Vec<f32>,
    pub wall_time: Duration,
    /// Total optimizer steps executed across all epochs.
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Mse,
}

impl FromStr for Metric {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "mse" => Ok(Metric::Mse),
            other => Err(EstimatorError::UnknownMetric(other.to_string())),
        }
    }
}

/// Where replicas run: in this process, or on a launched worker fleet.
pub enum Backend {
    Local,
    Cluster(ClusterContext),
}

pub struct Estimator {
    spec: ModelSpec,
    sgd: SgdConfig,
    backend: Backend,
    params: ModelParams,
}

impl Estimator {
    /// Build an estimator with freshly initialized parameters. In cluster
    /// mode the initial parameters are broadcast immediately so every replica
    /// starts from identical bytes.
    pub fn from_model(spec: ModelSpec, sgd: SgdConfig, backend: Backend) -> Result<Self, EstimatorError> {
        spec.validate()?;
        if !sgd.lr.is_finite() || sgd.lr <= 0.0 {
            return Err(EstimatorError::BadConfig(format!(
                "learning rate must be a positive finite number, got {}",
                sgd.lr
            )));
        }
        let params = init_params(&spec, sgd.seed)?;
        let mut est = Estimator { spec, sgd, backend, params };
        est.sync_params()?;
        Ok(est)
    }

    /// Restore an estimator from a checkpoint. The checkpoint carries model
    /// structure and weights but no optimizer settings, so the caller
    /// supplies those. Loaded parameters are re-broadcast in cluster mode.
    pub fn load(path: &Path, sgd: SgdConfig, backend: Backend) -> Result<Self, EstimatorError> {
        let (spec, params) = load_model(path)?;
        let mut est = Estimator { spec, sgd, backend, params };
        est.sync_params()?;
        Ok(est)
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimatorError> {
        save_model(path, &self.spec, &self.params)?;
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n_replicas(&self) -> usize {
        match &self.backend {
            Backend::Local => 1,
            Backend::Cluster(ctx) => ctx.n_workers(),
        }
    }

    /// Tear down the cluster backend, if any. Also happens on drop.
    pub fn shutdown(&mut self) {
        if let Backend::Cluster(ctx) = &mut self.backend {
            ctx.shutdown();
        }
    }

    fn sync_params(&mut self) -> Result<(), EstimatorError> {
        if let Backend::Cluster(ctx) = &mut self.backend {
            let bytes = encode_model(&self.spec, &self.params)?;
            ctx.broadcast(&bytes)?;
        }
        Ok(())
    }

    fn check_partitions(&self, data: &Shards<RecordBatch>) -> Result<(), EstimatorError> {
        let partitions = data.num_partitions();
        let replicas = self.n_replicas();
        if partitions != replicas {
            return Err(EstimatorError::PartitionMismatch { partitions, replicas });
        }
        Ok(())
    }

    pub fn fit(
        &mut self,
        data: &Shards<RecordBatch>,
        feature_cols: &[&str],
        label_cols: &[&str],
        cfg: &FitConfig,
    ) -> Result<TrainReport, EstimatorError> {
        let never = AtomicBool::new(false);
        self.fit_with_cancel(data, feature_cols, label_cols, cfg, &never)
    }

    /// [`Estimator::fit`] that checks a cancellation flag between epochs, for
    /// signal handlers. A cancelled fit leaves the parameters at the last
    /// completed epoch.
    pub fn fit_with_cancel(
        &mut self,
        data: &Shards<RecordBatch>,
        feature_cols: &[&str],
        label_cols: &[&str],
        cfg: &FitConfig,
        cancel: &AtomicBool,
    ) -> Result<TrainReport, EstimatorError> {
        if cfg.epochs < 1 {
            return Err(EstimatorError::BadConfig("epochs must be at least 1".into()));
        }
        if cfg.batch_size < 1 {
            return Err(EstimatorError::BadConfig("batch_size must be at least 1".into()));
        }
        self.check_partitions(data)?;
        for (worker, part) in data.parts().iter().enumerate() {
            if part.is_empty() {
                return Err(EstimatorError::EmptyPartition { worker });
            }
        }
        let start = Instant::now();
        let report = match &mut self.backend {
            Backend::Local => {
                let mut state = ReplicaState::build(
                    self.spec.clone(),
                    self.params.clone(),
                    self.sgd.lr,
                    0,
                    &data.parts()[0],
                    feature_cols,
                    label_cols,
                    cfg,
                )
                .map_err(EstimatorError::Diverged)?;
                let steps_per_epoch = state.ceil_steps();
                let mut epoch_losses = Vec::with_capacity(cfg.epochs);
                for epoch in 0..cfg.epochs {
                    if cancel.load(Ordering::Relaxed) {
                        return Err(EstimatorError::Cancelled);
                    }
                    let mut identity = |v: &[f32]| Ok(v.to_vec());
                    let (loss, _checksums) = state
                        .train_epoch(epoch as u64, steps_per_epoch, &mut identity)
                        .map_err(EstimatorError::Diverged)?;
                    epoch_losses.push(loss);
                }
                self.params = state.params;
                TrainReport {
                    epoch_losses,
                    wall_time: start.elapsed(),
                    steps: steps_per_epoch * cfg.epochs,
                }
            }
            Backend::Cluster(ctx) => {
                let bytes = encode_model(&self.spec, &self.params)?;
                ctx.broadcast(&bytes)?;
                ctx.scatter_shards(data)?;
                let init_args = encode_fit_init(feature_cols, label_cols, cfg, self.sgd.lr);
                let replies = ctx.run_task("fit_init", &init_args)?;
                let mut steps_per_epoch = usize::MAX;
                for reply in &replies {
                    let mut r = PayloadReader::new(reply);
                    let _rows = r.u32().map_err(bad_reply)?;
                    let steps = r.u32().map_err(bad_reply)? as usize;
                    steps_per_epoch = steps_per_epoch.min(steps);
                }
                let mut epoch_losses = Vec::with_capacity(cfg.epochs);
                for epoch in 0..cfg.epochs {
                    if cancel.load(Ordering::Relaxed) {
                        return Err(EstimatorError::Cancelled);
                    }
                    let mut w = PayloadWriter::new();
                    w.u64(epoch as u64).u32(steps_per_epoch as u32);
                    let replies = ctx.run_task("train_epoch", &w.finish())?;
                    check_replica_blobs(epoch, &replies)?;
                    let mut r = PayloadReader::new(&replies[0]);
                    let loss = r.f32().map_err(bad_reply)?;
                    debug!("epoch {epoch}: mean loss {loss}");
                    epoch_losses.push(loss);
                }
                let replies = ctx.run_task("fetch_params", &[])?;
                if replies.iter().any(|r| r != &replies[0]) {
                    return Err(EstimatorError::ReplicaDivergence { epoch: cfg.epochs });
                }
                let (_, params) = decode_model(&replies[0])?;
                self.params = params;
                TrainReport {
                    epoch_losses,
                    wall_time: start.elapsed(),
                    steps: steps_per_epoch * cfg.epochs,
                }
            }
        };
        info!(
            "fit finished: {} epochs, {} steps, final loss {:?}",
            report.epoch_losses.len(),
            report.steps,
            report.epoch_losses.last()
        );
        Ok(report)
    }

    /// Run inference over every partition and return the same shards with
    /// `pred_0..pred_{C-1}` columns appended, global row order preserved.
    pub fn predict(
        &mut self,
        data: &Shards<RecordBatch>,
        feature_cols: &[&str],
        plan: &ExecPlan,
    ) -> Result<Shards<RecordBatch>, EstimatorError> {
        self.check_partitions(data)?;
        match &mut self.backend {
            Backend::Local => {
                let enriched = enrich_batch(&self.spec, &self.params, &data.parts()[0], feature_cols, plan)
                    .map_err(EstimatorError::BadReply)?;
                Ok(Shards::from_parts(vec![enriched]))
            }
            Backend::Cluster(ctx) => {
                let bytes = encode_model(&self.spec, &self.params)?;
                ctx.broadcast(&bytes)?;
                ctx.scatter_shards(data)?;
                let args = encode_predict_args(feature_cols, plan);
                let replies = ctx.run_task("predict_partition", &args)?;
                let mut parts = Vec::with_capacity(replies.len());
                for reply in &replies {
                    parts.push(decode_record_batch(reply).map_err(bad_reply)?);
                }
                Ok(Shards::from_parts(parts))
            }
        }
    }

    /// Compute a metric over all rows. Predictions are gathered to the driver
    /// and the metric runs once over the global row sequence, so distributed
    /// and local evaluation produce identical bytes.
    pub fn evaluate(
        &mut self,
        data: &Shards<RecordBatch>,
        feature_cols: &[&str],
        label_cols: &[&str],
        metric: Metric,
    ) -> Result<f64, EstimatorError> {
        let outputs = self.gathered_outputs(data, feature_cols)?;
        let labels = gather_labels(data, label_cols)?;
        metric_value(metric, &outputs, &labels)
    }

    /// Mean model loss over all rows, measured with the model's own loss
    /// function. Used as the hyperparameter-search objective.
    pub fn validation_loss(
        &mut self,
        data: &Shards<RecordBatch>,
        feature_cols: &[&str],
        label_cols: &[&str],
    ) -> Result<f32, EstimatorError> {
        let outputs = self.gathered_outputs(data, feature_cols)?;
        let labels = gather_labels(data, label_cols)?;
        if outputs.rows() == 0 {
            return Err(EstimatorError::EmptyEvaluation);
        }
        Ok(loss_value(&self.spec, &outputs, &labels)?)
    }

    fn gathered_outputs(
        &mut self,
        data: &Shards<RecordBatch>,
        feature_cols: &[&str],
    ) -> Result<Tensor, EstimatorError> {
        self.check_partitions(data)?;
        let out_dim = self.spec.output_dim();
        match &mut self.backend {
            Backend::Local => {
                let x = data.parts()[0].to_tensor(feature_cols)?;
                Ok(infer(
                    ModelHandle::Fp32 { spec: &self.spec, params: &self.params },
                    &x,
                    &ExecPlan::baseline(),
                )?)
            }
            Backend::Cluster(ctx) => {
                let bytes = encode_model(&self.spec, &self.params)?;
                ctx.broadcast(&bytes)?;
                ctx.scatter_shards(data)?;
                let args = encode_cols(feature_cols);
                let replies = ctx.run_task("evaluate_partition", &args)?;
                let mut all = Vec::new();
                let mut rows = 0usize;
                for reply in &replies {
                    let mut r = PayloadReader::new(reply);
                    let part_rows = r.u32().map_err(bad_reply)? as usize;
                    let cols = r.u32().map_err(bad_reply)? as usize;
                    if cols != out_dim {
                        return Err(EstimatorError::BadReply(format!(
                            "partition output width {cols}, model emits {out_dim}"
                        )));
                    }
                    let values = r.f32s().map_err(bad_reply)?;
                    if values.len() != part_rows * cols {
                        return Err(EstimatorError::BadReply("output size mismatch".into()));
                    }
                    rows += part_rows;
                    all.extend_from_slice(&values);
                }
                Ok(Tensor::from_vec(rows, out_dim, all).map_err(NnError::from)?)
            }
        }
    }
}

impl Drop for Estimator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn bad_reply(e: impl std::fmt::Display) -> EstimatorError {
    EstimatorError::BadReply(e.to_string())
}

/// Fail the fit if any replica's per-epoch blob (loss plus per-step parameter
/// checksums) differs from worker 0's.
fn check_replica_blobs(epoch: usize, replies: &[Vec<u8>]) -> Result<(), EstimatorError> {
    if replies.iter().any(|r| r != &replies[0]) {
        return Err(EstimatorError::ReplicaDivergence { epoch });
    }
    Ok(())
}

fn gather_labels(data: &Shards<RecordBatch>, label_cols: &[&str]) -> Result<Tensor, EstimatorError> {
    let mut parts = Vec::with_capacity(data.num_partitions());
    for part in data.parts() {
        parts.push(part.to_tensor(label_cols)?);
    }
    let rows = parts.iter().map(Tensor::rows).sum();
    let cols = label_cols.len();
    let mut flat = Vec::with_capacity(rows * cols);
    for t in &parts {
        flat.extend_from_slice(t.data());
    }
    Ok(Tensor::from_vec(rows, cols, flat).map_err(NnError::from)?)
}

fn metric_value(metric: Metric, outputs: &Tensor, labels: &Tensor) -> Result<f64, EstimatorError> {
    if outputs.rows() == 0 {
        return Err(EstimatorError::EmptyEvaluation);
    }
    if outputs.rows() != labels.rows() {
        return Err(EstimatorError::BadLabels(format!(
            "{} label rows for {} output rows",
            labels.rows(),
            outputs.rows()
        )));
    }
    match metric {
        Metric::Accuracy => {
            if labels.cols() != 1 {
                return Err(EstimatorError::BadLabels(format!(
                    "accuracy expects one label column of class indices, got {}",
                    labels.cols()
                )));
            }
            let classes = outputs.cols();
            let preds = argmax_rows(outputs);
            let mut correct = 0u64;
            for (r, &pred) in preds.iter().enumerate() {
                let raw = labels.at(r, 0);
                if raw < 0.0 || raw.fract() != 0.0 || raw as usize >= classes {
                    return Err(EstimatorError::BadLabels(format!(
                        "row {r} label {raw} is not a class index below {classes}"
                    )));
                }
                if pred == raw as usize {
                    correct += 1;
                }
            }
            Ok(correct as f64 / outputs.rows() as f64)
        }
        Metric::Mse => {
            if labels.cols() != outputs.cols() {
                return Err(EstimatorError::BadLabels(format!(
                    "mse needs {} label columns, got {}",
                    outputs.cols(),
                    labels.cols()
                )));
            }
            let mut sum = 0f64;
            for (o, l) in outputs.data().iter().zip(labels.data()) {
                let d = (*o - *l) as f64;
                sum += d * d;
            }
            Ok(sum / outputs.data().len() as f64)
        }
    }
}

/// Append `pred_0..pred_{C-1}` columns holding the model outputs for `batch`.
fn enrich_batch(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &RecordBatch,
    feature_cols: &[&str],
    plan: &ExecPlan,
) -> Result<RecordBatch, String> {
    let x = batch.to_tensor(feature_cols).map_err(|e| e.to_string())?;
    let out = infer(ModelHandle::Fp32 { spec, params }, &x, plan).map_err(|e| e.to_string())?;
    let mut enriched = batch.clone();
    for c in 0..out.cols() {
        let col: Vec<f32> = (0..out.rows()).map(|r| out.at(r, c)).collect();
        enriched
            .push_column(&format!("pred_{c}"), Column::Float(col))
            .map_err(|e| e.to_string())?;
    }
    Ok(enriched)
}

pub(crate) fn params_digest(params: &ModelParams) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in params.flatten() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

// ---------------------------------------------------------------------------
// Replica-side training, shared verbatim by local mode and worker tasks
// ---------------------------------------------------------------------------

pub(crate) struct ReplicaState {
    spec: ModelSpec,
    params: ModelParams,
    lr: f32,
    worker_id: usize,
    features: Tensor,
    labels: Tensor,
    batch: usize,
    shuffle: bool,
    seed: u64,
    debug: bool,
}

impl ReplicaState {
    #[allow(clippy::too_many_arguments)]
    fn build(
        spec: ModelSpec,
        params: ModelParams,
        lr: f32,
        worker_id: usize,
        part: &RecordBatch,
        feature_cols: &[&str],
        label_cols: &[&str],
        cfg: &FitConfig,
    ) -> Result<Self, String> {
        let features = part.to_tensor(feature_cols).map_err(|e| e.to_string())?;
        let labels = part.to_tensor(label_cols).map_err(|e| e.to_string())?;
        if features.rows() == 0 {
            return Err("replica partition is empty; repartition the dataset".to_string());
        }
        Ok(ReplicaState {
            spec,
            params,
            lr,
            worker_id,
            features,
            labels,
            batch: cfg.batch_size,
            shuffle: cfg.shuffle,
            seed: cfg.seed,
            debug: cfg.debug_checksums,
        })
    }

    fn ceil_steps(&self) -> usize {
        self.features.rows().div_ceil(self.batch)
    }

    /// One epoch of lockstep SGD. `reduce` is the collective: ring
    /// allreduce(Mean) on workers, identity in local mode. Returns the mean
    /// reduced loss over the epoch's steps plus the concatenated per-step
    /// parameter digests when debug checksums are on.
    fn train_epoch(
        &mut self,
        epoch: u64,
        steps: usize,
        reduce: &mut dyn FnMut(&[f32]) -> Result<Vec<f32>, String>,
    ) -> Result<(f32, Vec<u8>), String> {
        let rows = self.features.rows();
        let mut order: Vec<usize> = (0..rows).collect();
        if self.shuffle {
            // Each replica draws its own per-epoch permutation; the xor keeps
            // worker and epoch streams disjoint.
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.worker_id as u64 ^ epoch);
            order.shuffle(&mut rng);
        }
        let mut checksums = Vec::new();
        let mut loss_sum = 0f64;
        for step in 0..steps {
            let lo = step * self.batch;
            let hi = ((step + 1) * self.batch).min(rows);
            let idx = &order[lo..hi];
            let xb = self.features.gather_rows(idx);
            let yb = self.labels.gather_rows(idx);
            let (local_loss, grads) =
                backward(&self.spec, &self.params, &xb, &yb).map_err(|e| e.to_string())?;
            let mut flat = grads.flatten();
            flat.push(local_loss);
            let reduced = reduce(&flat)?;
            if reduced.len() != flat.len() {
                return Err("reduction changed the gradient length".to_string());
            }
            let mean_loss = reduced[reduced.len() - 1];
            if !mean_loss.is_finite() {
                return Err(format!(
                    "loss became {mean_loss} at epoch {epoch} step {step}; lower the learning rate"
                ));
            }
            let grads = self
                .params
                .unflatten_like(&reduced[..reduced.len() - 1])
                .map_err(|e| e.to_string())?;
            sgd_step(&mut self.params, &grads, self.lr);
            if self.debug {
                checksums.extend_from_slice(&params_digest(&self.params));
            }
            loss_sum += mean_loss as f64;
        }
        Ok(((loss_sum / steps.max(1) as f64) as f32, checksums))
    }
}

// ---------------------------------------------------------------------------
// Task argument encodings
// ---------------------------------------------------------------------------

fn encode_cols(cols: &[&str]) -> Vec<u8> {
    let mut w = PayloadWriter::new();
    w.u32(cols.len() as u32);
    for c in cols {
        w.str(c);
    }
    w.finish()
}

fn decode_cols(r: &mut PayloadReader) -> Result<Vec<String>, String> {
    let n = r.u32().map_err(|e| e.to_string())? as usize;
    let mut cols = Vec::with_capacity(n);
    for _ in 0..n {
        cols.push(r.str().map_err(|e| e.to_string())?);
    }
    Ok(cols)
}

fn encode_fit_init(feature_cols: &[&str], label_cols: &[&str], cfg: &FitConfig, lr: f32) -> Vec<u8> {
    let mut w = PayloadWriter::new();
    w.u32(feature_cols.len() as u32);
    for c in feature_cols {
        w.str(c);
    }
    w.u32(label_cols.len() as u32);
    for c in label_cols {
        w.str(c);
    }
    w.u32(cfg.batch_size as u32)
        .u8(cfg.shuffle as u8)
        .u64(cfg.seed)
        .f32(lr)
        .u8(cfg.debug_checksums as u8);
    w.finish()
}

fn encode_predict_args(feature_cols: &[&str], plan: &ExecPlan) -> Vec<u8> {
    let mut w = PayloadWriter::new();
    w.u32(feature_cols.len() as u32);
    for c in feature_cols {
        w.str(c);
    }
    w.u32(plan.threads as u32)
        .u32(plan.block_size as u32)
        .u8(matches!(plan.precision, crate::accel::Precision::Int8) as u8);
    w.finish()
}

// ---------------------------------------------------------------------------
// Worker-side tasks
// ---------------------------------------------------------------------------

pub(crate) mod tasks {
    use super::*;

    const SLOT: &str = "estimator";

    fn current_params(ctx: &WorkerCtx) -> Result<(ModelSpec, ModelParams), String> {
        let bytes = ctx
            .broadcast_data()
            .ok_or_else(|| "no model parameters have been broadcast".to_string())?;
        decode_model(&bytes).map_err(|e| e.to_string())
    }

    /// Build this worker's replica from the latest broadcast parameters and
    /// scattered partition. Returns partition rows and the replica's own
    /// step count per epoch; the driver takes the minimum.
    pub fn fit_init(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let feature_cols = decode_cols(&mut r)?;
        let label_cols = decode_cols(&mut r)?;
        let batch = r.u32().map_err(|e| e.to_string())? as usize;
        let shuffle = r.u8().map_err(|e| e.to_string())? == 1;
        let seed = r.u64().map_err(|e| e.to_string())?;
        let lr = r.f32().map_err(|e| e.to_string())?;
        let debug = r.u8().map_err(|e| e.to_string())? == 1;
        let cfg = FitConfig {
            epochs: 1,
            batch_size: batch,
            seed,
            shuffle,
            debug_checksums: debug,
        };
        let (spec, params) = current_params(ctx)?;
        let part = ctx.scattered_batch()?;
        let feat_refs: Vec<&str> = feature_cols.iter().map(String::as_str).collect();
        let label_refs: Vec<&str> = label_cols.iter().map(String::as_str).collect();
        let state = ReplicaState::build(
            spec,
            params,
            lr,
            ctx.worker_id,
            &part,
            &feat_refs,
            &label_refs,
            &cfg,
        )?;
        let rows = state.features.rows();
        let steps = state.ceil_steps();
        ctx.state.put(SLOT, state);
        let mut w = PayloadWriter::new();
        w.u32(rows as u32).u32(steps as u32);
        Ok(w.finish())
    }

    /// One training epoch in lockstep with the other replicas. Returns the
    /// epoch's mean loss followed by the per-step parameter digests; the
    /// driver compares the whole reply across workers byte for byte.
    pub fn train_epoch(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let epoch = r.u64().map_err(|e| e.to_string())?;
        let steps = r.u32().map_err(|e| e.to_string())? as usize;
        let mut state: ReplicaState = ctx
            .state
            .take(SLOT)
            .ok_or_else(|| "train_epoch before fit_init".to_string())?;
        let mut reduce = |v: &[f32]| ctx.allreduce(v, ReduceOp::Mean);
        let outcome = state.train_epoch(epoch, steps, &mut reduce);
        drop(reduce);
        ctx.state.put(SLOT, state);
        let (loss, checksums) = outcome?;
        let mut w = PayloadWriter::new();
        w.f32(loss).bytes(&checksums);
        Ok(w.finish())
    }

    /// Serialize this replica's current parameters. The driver uses worker
    /// 0's copy and verifies all replies are byte-identical.
    pub fn fetch_params(ctx: &mut WorkerCtx, _args: &[u8]) -> Result<Vec<u8>, String> {
        let state = ctx
            .state
            .get::<ReplicaState>(SLOT)
            .ok_or_else(|| "fetch_params before fit_init".to_string())?;
        encode_model(&state.spec, &state.params).map_err(|e| e.to_string())
    }

    /// Inference over the scattered partition; returns the partition with
    /// prediction columns appended.
    pub fn predict_partition(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let feature_cols = decode_cols(&mut r)?;
        let threads = r.u32().map_err(|e| e.to_string())? as usize;
        let block = r.u32().map_err(|e| e.to_string())? as usize;
        let int8 = r.u8().map_err(|e| e.to_string())? == 1;
        if int8 {
            return Err("int8 prediction needs a quantized model, which replicas do not hold".into());
        }
        let plan = ExecPlan {
            threads,
            precision: crate::accel::Precision::Fp32,
            block_size: block,
        };
        let (spec, params) = current_params(ctx)?;
        let part = ctx.scattered_batch()?;
        let feat_refs: Vec<&str> = feature_cols.iter().map(String::as_str).collect();
        let enriched = enrich_batch(&spec, &params, &part, &feat_refs, &plan)?;
        Ok(encode_record_batch(&enriched))
    }

    /// Raw model outputs for the scattered partition, for driver-side
    /// metrics: row count, output width, then the values row-major.
    pub fn evaluate_partition(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let feature_cols = decode_cols(&mut r)?;
        let (spec, params) = current_params(ctx)?;
        let part = ctx.scattered_batch()?;
        let feat_refs: Vec<&str> = feature_cols.iter().map(String::as_str).collect();
        let x = part.to_tensor(&feat_refs).map_err(|e| e.to_string())?;
        let out = infer(
            ModelHandle::Fp32 { spec: &spec, params: &params },
            &x,
            &ExecPlan::baseline(),
        )
        .map_err(|e| e.to_string())?;
        let mut w = PayloadWriter::new();
        w.u32(out.rows() as u32).u32(out.cols() as u32).f32s(out.data());
        Ok(w.finish())
    }
}
