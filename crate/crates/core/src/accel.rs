//! Execution planning, accelerated inference, and the benchmark harness.
//!
//! An [`ExecPlan`] bundles the knobs the kernels understand: thread count,
//! numeric precision, and matmul tile edge. [`select_plan`] picks them from
//! the environment and workload using fixed, documented thresholds;
//! [`benchmark`] measures a list of plans against the single-thread fp32
//! baseline and reports speedups.

use crate::nn::{self, ModelParams, ModelSpec, NnError};
use crate::quant::{QuantError, QuantizedModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Rows of work per thread before another thread pays off.
pub const ROWS_PER_THREAD: usize = 16;
/// Layer dimension at which the larger matmul tile wins.
pub const BIG_DIM: usize = 256;
/// Tile edges the planner chooses between.
pub const BLOCK_SMALL: usize = 32;
pub const BLOCK_LARGE: usize = 64;

#[derive(Debug, Error)]
pub enum AccelError {
    #[error("plan asks for {plan} but the model handle is {model}")]
    PlanMismatch { plan: &'static str, model: &'static str },
    #[error("int8 plan in the list but no quantized model was supplied")]
    MissingQuantizedModel,
    #[error("benchmark needs at least 3 repeats, got {0}")]
    TooFewRepeats(usize),
    #[error("benchmark batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Int8,
}

/// Kernel configuration for one inference run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecPlan {
    pub threads: usize,
    pub precision: Precision,
    pub block_size: usize,
}

impl ExecPlan {
    /// The reference configuration every speedup is measured against.
    pub fn baseline() -> Self {
        ExecPlan { threads: 1, precision: Precision::Fp32, block_size: BLOCK_LARGE }
    }
}

/// A plan plus whether the int8 request had to fall back to fp32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanSelection {
    pub plan: ExecPlan,
    /// True when int8 was requested but no quantized model exists, so the
    /// plan silently runs fp32. Callers should surface this as a warning.
    pub int8_fallback: bool,
}

/// Logical cores visible to this process.
pub fn detect_cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Picks an execution plan for a workload.
///
/// Threads scale with batch size at [`ROWS_PER_THREAD`] rows per thread,
/// capped at the detected cores and floored at 1. The tile edge is
/// [`BLOCK_LARGE`] once any layer dimension reaches [`BIG_DIM`]. Precision is
/// int8 only when the caller both wants it and has a quantized model.
pub fn select_plan(
    cores: usize,
    spec: &ModelSpec,
    batch_rows: usize,
    want_int8: bool,
    quantized_available: bool,
) -> PlanSelection {
    let threads = batch_rows.div_ceil(ROWS_PER_THREAD).clamp(1, cores.max(1));
    let largest_dim = spec
        .layers
        .iter()
        .flat_map(|l| [l.input_dim, l.output_dim])
        .max()
        .unwrap_or(1);
    let block_size = if largest_dim >= BIG_DIM { BLOCK_LARGE } else { BLOCK_SMALL };
    let (precision, int8_fallback) = match (want_int8, quantized_available) {
        (true, true) => (Precision::Int8, false),
        (true, false) => (Precision::Fp32, true),
        (false, _) => (Precision::Fp32, false),
    };
    PlanSelection { plan: ExecPlan { threads, precision, block_size }, int8_fallback }
}

/// The model a plan executes against: fp32 weights or a quantized twin.
#[derive(Clone, Copy)]
pub enum ModelHandle<'a> {
    Fp32 { spec: &'a ModelSpec, params: &'a ModelParams },
    Int8(&'a QuantizedModel),
}

/// Runs one batch under a plan. Results are deterministic per plan, and the
/// fp32 path is bit-identical across thread counts, so the single-thread
/// fp32 run is the reference for every other configuration.
pub fn infer(model: ModelHandle, batch: &Tensor, plan: &ExecPlan) -> Result<Tensor, AccelError> {
    match (model, plan.precision) {
        (ModelHandle::Fp32 { spec, params }, Precision::Fp32) => {
            Ok(nn::forward_with(spec, params, batch, plan.threads, plan.block_size)?)
        }
        // The integer kernel keeps weights pre-transposed; the tile edge only
        // applies to the fp32 path.
        (ModelHandle::Int8(q), Precision::Int8) => Ok(q.forward_with(batch, plan.threads)?),
        (ModelHandle::Fp32 { .. }, Precision::Int8) => {
            Err(AccelError::PlanMismatch { plan: "int8", model: "fp32" })
        }
        (ModelHandle::Int8(_), Precision::Fp32) => {
            Err(AccelError::PlanMismatch { plan: "fp32", model: "int8" })
        }
    }
}

/// One measured row of a [`BenchReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    pub threads: usize,
    pub precision: Precision,
    pub block: usize,
    pub latency_ms: f64,
    pub throughput_rps: f64,
    pub speedup: f64,
    pub max_dev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub plans: Vec<PlanReport>,
    pub host_cores: usize,
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

/// Measures `plans` against the fp32 single-thread baseline.
///
/// Every plan gets one unmeasured warmup run, then `repeats` timed runs; the
/// reported latency is the median. The baseline is always measured first and
/// prepended to the report with speedup exactly 1.0 and deviation 0.0 by
/// construction; other speedups are baseline latency over plan latency, and
/// `max_dev` is the largest absolute output difference against the baseline
/// output.
pub fn benchmark(
    spec: &ModelSpec,
    params: &ModelParams,
    quantized: Option<&QuantizedModel>,
    batch: &Tensor,
    plans: &[ExecPlan],
    repeats: usize,
) -> Result<BenchReport, AccelError> {
    if repeats < 3 {
        return Err(AccelError::TooFewRepeats(repeats));
    }
    if batch.rows() == 0 {
        return Err(AccelError::EmptyBatch);
    }
    if plans.iter().any(|p| p.precision == Precision::Int8) && quantized.is_none() {
        return Err(AccelError::MissingQuantizedModel);
    }

    let handle_for = |plan: &ExecPlan| match plan.precision {
        Precision::Fp32 => ModelHandle::Fp32 { spec, params },
        Precision::Int8 => ModelHandle::Int8(quantized.expect("checked above")),
    };

    let measure = |plan: &ExecPlan| -> Result<(f64, Tensor), AccelError> {
        let handle = handle_for(plan);
        let mut output = infer(handle, batch, plan)?; // warmup, excluded
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            output = infer(handle, batch, plan)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok((median_ms(samples), output))
    };

    let baseline_plan = ExecPlan::baseline();
    let (baseline_ms, reference) = measure(&baseline_plan)?;
    let rows = batch.rows() as f64;
    let mut report = BenchReport {
        plans: vec![PlanReport {
            threads: baseline_plan.threads,
            precision: baseline_plan.precision,
            block: baseline_plan.block_size,
            latency_ms: baseline_ms,
            throughput_rps: rows / (baseline_ms / 1e3),
            speedup: 1.0,
            max_dev: 0.0,
        }],
        host_cores: detect_cores(),
    };

    for plan in plans {
        if *plan == baseline_plan {
            continue;
        }
        let (ms, output) = measure(plan)?;
        let max_dev = reference
            .data()
            .iter()
            .zip(output.data())
            .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
        report.plans.push(PlanReport {
            threads: plan.threads,
            precision: plan.precision,
            block: plan.block_size,
            latency_ms: ms,
            throughput_rps: rows / (ms / 1e3),
            speedup: baseline_ms / ms,
            max_dev,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation, LayerSpec, LossKind};
    use crate::quant::quantize_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn classifier(dims: &[usize]) -> (ModelSpec, ModelParams) {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let activation = if i + 2 == dims.len() { Activation::Softmax } else { Activation::Relu };
            layers.push(LayerSpec { input_dim: w[0], output_dim: w[1], activation });
        }
        let spec = ModelSpec { layers, loss: LossKind::CrossEntropy };
        let params = init_params(&spec, 42).unwrap();
        (spec, params)
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn plan_threads_follow_batch_and_cores() {
        let (spec, _) = classifier(&[8, 4, 3]);
        assert_eq!(select_plan(8, &spec, 4, false, false).plan.threads, 1);
        assert_eq!(select_plan(8, &spec, 512, false, false).plan.threads, 8);
        assert_eq!(select_plan(2, &spec, 512, false, false).plan.threads, 2);
        assert_eq!(select_plan(8, &spec, 0, false, false).plan.threads, 1);
    }

    #[test]
    fn plan_block_tracks_largest_dim() {
        let (small, _) = classifier(&[8, 4, 3]);
        assert_eq!(select_plan(4, &small, 64, false, false).plan.block_size, BLOCK_SMALL);
        let (big, _) = classifier(&[784, 512, 10]);
        assert_eq!(select_plan(4, &big, 64, false, false).plan.block_size, BLOCK_LARGE);
    }

    #[test]
    fn int8_request_without_quantized_model_falls_back() {
        let (spec, _) = classifier(&[8, 4, 3]);
        let sel = select_plan(4, &spec, 64, true, false);
        assert_eq!(sel.plan.precision, Precision::Fp32);
        assert!(sel.int8_fallback);
        let sel = select_plan(4, &spec, 64, true, true);
        assert_eq!(sel.plan.precision, Precision::Int8);
        assert!(!sel.int8_fallback);
    }

    #[test]
    fn infer_fp32_bit_identical_across_threads() {
        let (spec, params) = classifier(&[16, 12, 5]);
        let batch = random_batch(37, 16, 1);
        let base = infer(
            ModelHandle::Fp32 { spec: &spec, params: &params },
            &batch,
            &ExecPlan::baseline(),
        )
        .unwrap();
        for threads in [2, 4, 7] {
            let plan = ExecPlan { threads, precision: Precision::Fp32, block_size: 32 };
            let out =
                infer(ModelHandle::Fp32 { spec: &spec, params: &params }, &batch, &plan).unwrap();
            assert_eq!(out.data(), base.data(), "threads={threads}");
        }
    }

    #[test]
    fn infer_int8_stays_near_fp32() {
        let (spec, params) = classifier(&[32, 24, 6]);
        let calib = random_batch(128, 32, 2);
        let q = quantize_model(&spec, &params, &calib).unwrap();
        let batch = random_batch(64, 32, 3);
        let fp = infer(
            ModelHandle::Fp32 { spec: &spec, params: &params },
            &batch,
            &ExecPlan::baseline(),
        )
        .unwrap();
        let plan = ExecPlan { threads: 2, precision: Precision::Int8, block_size: 32 };
        let qr = infer(ModelHandle::Int8(&q), &batch, &plan).unwrap();
        let max_dev = fp
            .data()
            .iter()
            .zip(qr.data())
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(max_dev / fp.max_abs() <= 0.02, "relative deviation {}", max_dev / fp.max_abs());
    }

    #[test]
    fn infer_empty_batch_gives_empty_output() {
        let (spec, params) = classifier(&[8, 4, 3]);
        let out = infer(
            ModelHandle::Fp32 { spec: &spec, params: &params },
            &Tensor::zeros(0, 8),
            &ExecPlan::baseline(),
        )
        .unwrap();
        assert_eq!((out.rows(), out.cols()), (0, 3));
    }

    #[test]
    fn infer_rejects_mismatched_plan() {
        let (spec, params) = classifier(&[8, 4, 3]);
        let plan = ExecPlan { threads: 1, precision: Precision::Int8, block_size: 32 };
        let err = infer(
            ModelHandle::Fp32 { spec: &spec, params: &params },
            &Tensor::zeros(1, 8),
            &plan,
        )
        .unwrap_err();
        assert!(matches!(err, AccelError::PlanMismatch { .. }));
    }

    #[test]
    fn benchmark_baseline_speedup_is_exactly_one() {
        let (spec, params) = classifier(&[16, 8, 4]);
        let calib = random_batch(32, 16, 4);
        let q = quantize_model(&spec, &params, &calib).unwrap();
        let plans = [
            ExecPlan { threads: 2, precision: Precision::Fp32, block_size: 32 },
            ExecPlan { threads: 2, precision: Precision::Int8, block_size: 32 },
        ];
        let report =
            benchmark(&spec, &params, Some(&q), &calib, &plans, 3).unwrap();
        assert_eq!(report.plans.len(), 3);
        assert_eq!(report.plans[0].speedup, 1.0);
        assert_eq!(report.plans[0].max_dev, 0.0);
        assert!(report.plans.iter().all(|p| p.latency_ms > 0.0 && p.throughput_rps > 0.0));
        // fp32 across thread counts is bit-identical, so its deviation is 0.
        assert_eq!(report.plans[1].max_dev, 0.0);
        assert!(report.host_cores >= 1);
    }

    #[test]
    fn benchmark_validates_inputs() {
        let (spec, params) = classifier(&[8, 4, 3]);
        let batch = random_batch(8, 8, 5);
        assert!(matches!(
            benchmark(&spec, &params, None, &batch, &[], 2),
            Err(AccelError::TooFewRepeats(2))
        ));
        assert!(matches!(
            benchmark(&spec, &params, None, &Tensor::zeros(0, 8), &[], 3),
            Err(AccelError::EmptyBatch)
        ));
        let int8 = [ExecPlan { threads: 1, precision: Precision::Int8, block_size: 32 }];
        assert!(matches!(
            benchmark(&spec, &params, None, &batch, &int8, 3),
            Err(AccelError::MissingQuantizedModel)
        ));
    }

    #[test]
    fn bench_report_serializes_to_the_documented_schema() {
        let (spec, params) = classifier(&[8, 4, 3]);
        let batch = random_batch(8, 8, 6);
        let report = benchmark(&spec, &params, None, &batch, &[], 3).unwrap();
        let value: serde_json::Value = serde_json::to_value(&report).unwrap();
        let obj = value.as_object().unwrap();
        assert_eq!(obj.len(), 2);
        assert!(obj.contains_key("plans") && obj.contains_key("host_cores"));
        let row = value["plans"][0].as_object().unwrap();
        let keys: Vec<&str> = row.keys().map(String::as_str).collect();
        for key in ["threads", "precision", "block", "latency_ms", "throughput_rps", "speedup", "max_dev"] {
            assert!(keys.contains(&key), "missing {key}");
        }
        assert_eq!(row.len(), 7);
        assert_eq!(value["plans"][0]["precision"], "fp32");

        let back: BenchReport = serde_json::from_value(value).unwrap();
        assert_eq!(back.plans.len(), report.plans.len());
    }
}
