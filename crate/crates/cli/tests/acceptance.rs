//! Acceptance checks for the whole stack, one verdict line per criterion.
//!
//! The default harness is off for the same reason as the cluster process
//! tests: `launch_cluster` re-executes the current binary with `--worker`, so
//! this executable doubles as the worker and main() has to divert before any
//! checking starts. Criteria run in order, each prints exactly one line
//! (PASS, FAIL, or SKIP with the reason), and any FAIL makes the run exit 1.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::panic;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardpipe_core::accel::{benchmark, ExecPlan, Precision};
use shardpipe_core::cluster::{
    launch_cluster, parse_worker_argv, worker_main, ClusterConfig, ClusterContext, ClusterState,
    ReduceOp,
};
use shardpipe_core::codec::{PayloadReader, PayloadWriter};
use shardpipe_core::estimator::{Backend, Estimator, FitConfig, SgdConfig};
use shardpipe_core::hpo::{run_study, Config, Direction, ModelTemplate, Sampler, SearchSpace, SpaceValue, Study};
use shardpipe_core::nn::{
    argmax_rows, backward, forward, init_params, loss_value, sgd_step, Activation, LayerSpec,
    LossKind, ModelParams, ModelSpec,
};
use shardpipe_core::quant::{calibrate, dequantize, quantize, quantize_model};
use shardpipe_core::shards::{Column, RecordBatch, Shards};
use shardpipe_core::synth;
use shardpipe_core::tensor::Tensor;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if let Some((id, driver)) = parse_worker_argv(&args) {
        worker_main(id, &driver);
    }

    let checks: &[(usize, fn() -> Outcome)] = &[
        (1, c1_allreduce_oracle),
        (2, c2_distributed_serial_equivalence),
        (3, c3_replica_consistency),
        (4, c4_gradient_correctness),
        (5, c5_quantization_fidelity),
        (6, c6_acceleration_floors),
        (7, c7_xshards_equivalence),
        (8, c8_delayed_instantiation),
        (9, c9_lifecycle),
        (10, c10_hpo_end_to_end),
    ];

    // Bare numbers on the command line select criteria, e.g. `-- 5 9`.
    let only: HashSet<usize> = args.iter().skip(1).filter_map(|a| a.parse().ok()).collect();

    let mut failures = 0usize;
    for (n, check) in checks {
        if !only.is_empty() && !only.contains(n) {
            continue;
        }
        let outcome = panic::catch_unwind(check).unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked without a message".into());
            Outcome::Fail(msg.replace('\n', " | "))
        });
        let line = match &outcome {
            Outcome::Pass(detail) => format!("criterion {n}: PASS - {detail}"),
            Outcome::Fail(detail) => format!("criterion {n}: FAIL - {detail}"),
            Outcome::Skip(detail) => format!("criterion {n}: SKIP - {detail}"),
        };
        println!("{line}");
        std::io::stdout().flush().unwrap();
        if matches!(outcome, Outcome::Fail(_)) {
            failures += 1;
        }
    }

    if failures > 0 {
        println!("\nacceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("\nacceptance: all criteria passed");
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn launch(n: usize) -> ClusterContext {
    launch_cluster(ClusterConfig {
        n_workers: n,
        heartbeat_interval: Duration::from_millis(200),
        ..ClusterConfig::default()
    })
    .expect("cluster launch")
}

fn pid_alive(pid: u32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}

/// Live worker processes spawned from this executable, found by command line.
fn worker_procs() -> Vec<u32> {
    let exe = std::env::current_exe().unwrap();
    let exe = exe.to_string_lossy();
    scan_procs(|args| args.first().is_some_and(|a| *a == exe) && args.iter().any(|a| *a == "--worker"))
}

fn scan_procs(pred: impl Fn(&[&str]) -> bool) -> Vec<u32> {
    let mut found = Vec::new();
    let Ok(entries) = fs::read_dir("/proc") else { return found };
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Ok(pid) = name.to_string_lossy().parse::<u32>() else { continue };
        let Ok(raw) = fs::read(entry.path().join("cmdline")) else { continue };
        let args: Vec<&str> = raw
            .split(|b| *b == 0)
            .filter_map(|s| std::str::from_utf8(s).ok())
            .collect();
        if pred(&args) {
            found.push(pid);
        }
    }
    found
}

/// Parent pid from /proc/<pid>/stat, the first field after the parenthesized
/// command name.
fn parent_of(pid: u32) -> Option<u32> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    stat.rsplit(')').next()?.split_whitespace().nth(1)?.parse().ok()
}

/// Dataset of labelled blobs as a RecordBatch with columns f0..f{d-1}, label.
fn blob_batch(n: usize, dim: usize, classes: usize, seed: u64) -> RecordBatch {
    let (x, y) = synth::make_blobs(n, dim, classes, 0.5, seed);
    let mut names: Vec<String> = (0..dim).map(|d| format!("f{d}")).collect();
    let mut cols: Vec<Column> = (0..dim)
        .map(|d| Column::Float((0..n).map(|r| x.at(r, d)).collect()))
        .collect();
    names.push("label".into());
    cols.push(Column::Float((0..n).map(|r| y.at(r, 0)).collect()));
    RecordBatch::new(names, cols).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: ring allreduce against the serial sum
// ---------------------------------------------------------------------------

/// Uniform values in [-1000, 1000], a fresh stream per (seed, worker).
fn signed_vector(seed: u64, worker: usize, len: usize) -> Vec<f32> {
    let stream = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(worker as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    (0..len).map(|_| rng.gen_range(-1000.0f32..1000.0)).collect()
}

fn c1_allreduce_oracle() -> Outcome {
    // The ring and the serial loop add the same operands in different orders,
    // so they agree only up to f32 rounding. Each order carries error bounded
    // by (k-1) * eps * sum|v|, which makes sum|v| the right per-element scale
    // for a relative comparison: signed operands can cancel to a sum near
    // zero while the rounding error stays at operand scale.
    const REL_TOL: f32 = 1e-6;
    let start = Instant::now();
    let mut worst = 0.0f32;
    let mut cases = 0usize;

    for k in 1..=5usize {
        let mut ctx = launch(k);
        for (case, len) in [1, k - 1, k, k + 1, 1000].into_iter().enumerate() {
            let seed = (k * 100 + case) as u64;
            let locals: Vec<Vec<f32>> = (0..k).map(|w| signed_vector(seed, w, len)).collect();
            let mut serial = vec![0.0f32; len];
            for local in &locals {
                for (acc, v) in serial.iter_mut().zip(local) {
                    *acc += v;
                }
            }

            let mut w = PayloadWriter::new();
            w.u8(ReduceOp::Sum.code());
            for v in &locals {
                w.f32s(v);
            }
            let replies = match ctx.run_task("allreduce_fixed", &w.finish()) {
                Ok(r) => r,
                Err(e) => return Outcome::Fail(format!("k={k} len={len}: {e}")),
            };
            for (id, reply) in replies.iter().enumerate().skip(1) {
                if reply != &replies[0] {
                    return Outcome::Fail(format!(
                        "k={k} len={len}: worker {id} reply differs from worker 0 byte-wise"
                    ));
                }
            }
            let mut r = PayloadReader::new(&replies[0]);
            let got = r.f32s().unwrap();
            if got.len() != len {
                return Outcome::Fail(format!("k={k} len={len}: got {} elements", got.len()));
            }
            for e in 0..len {
                let scale = locals.iter().map(|v| v[e].abs()).sum::<f32>().max(1.0);
                let rel = (got[e] - serial[e]).abs() / scale;
                worst = worst.max(rel);
                if rel > REL_TOL {
                    return Outcome::Fail(format!(
                        "k={k} len={len} elem {e}: ring {} vs serial {} is {rel:.2e} of operand scale",
                        got[e], serial[e]
                    ));
                }
            }
            cases += 1;
        }
        ctx.shutdown();
    }

    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        return Outcome::Fail(format!("took {secs:.1}s, limit 30s"));
    }
    Outcome::Pass(format!(
        "k=1..5 x {cases} cases, replies byte-identical, worst error {worst:.1e} of operand scale (tol 1e-6), {secs:.1}s"
    ))
}

// ---------------------------------------------------------------------------
// Criteria 2 and 3: one 4-worker training run, checked two ways
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct FitEvidence {
    steps: usize,
    max_rel: f32,
    secs: f64,
}

static FIT_RUN: OnceLock<Result<FitEvidence, String>> = OnceLock::new();

fn classifier_spec() -> ModelSpec {
    ModelSpec {
        layers: vec![
            LayerSpec { input_dim: 8, output_dim: 16, activation: Activation::Relu },
            LayerSpec { input_dim: 16, output_dim: 8, activation: Activation::Relu },
            LayerSpec { input_dim: 8, output_dim: 3, activation: Activation::Softmax },
        ],
        loss: LossKind::CrossEntropy,
    }
}

/// Single-process oracle for data-parallel SGD: each step stacks every
/// replica's next minibatch into one union batch and takes one step on it.
/// With equal batch sizes the mean loss over the union equals the mean of
/// per-replica means, so the cluster must match this up to f32 reassociation.
fn union_batch_fit(
    spec: &ModelSpec,
    init_seed: u64,
    lr: f32,
    parts: &[RecordBatch],
    feature_cols: &[&str],
    label_cols: &[&str],
    cfg: &FitConfig,
) -> ModelParams {
    let k = parts.len();
    let features: Vec<Tensor> = parts.iter().map(|p| p.to_tensor(feature_cols).unwrap()).collect();
    let labels: Vec<Tensor> = parts.iter().map(|p| p.to_tensor(label_cols).unwrap()).collect();
    let steps = features.iter().map(|f| f.rows().div_ceil(cfg.batch_size)).min().unwrap();
    let mut params = init_params(spec, init_seed).unwrap();
    for _epoch in 0..cfg.epochs {
        for step in 0..steps {
            let mut xdata = Vec::new();
            let mut ydata = Vec::new();
            let mut rows = 0;
            for w in 0..k {
                let lo = step * cfg.batch_size;
                let hi = ((step + 1) * cfg.batch_size).min(features[w].rows());
                let idx: Vec<usize> = (lo..hi).collect();
                let xb = features[w].gather_rows(&idx);
                let yb = labels[w].gather_rows(&idx);
                rows += xb.rows();
                xdata.extend_from_slice(xb.data());
                ydata.extend_from_slice(yb.data());
            }
            let xu = Tensor::from_vec(rows, features[0].cols(), xdata).unwrap();
            let yu = Tensor::from_vec(rows, labels[0].cols(), ydata).unwrap();
            let (_, grads) = backward(spec, &params, &xu, &yu).unwrap();
            sgd_step(&mut params, &grads, lr);
        }
    }
    params
}

fn run_criterion_2_fit() -> Result<FitEvidence, String> {
    let start = Instant::now();
    let feature_cols = ["f0", "f1", "f2", "f3", "f4", "f5", "f6", "f7"];
    let label_cols = ["label"];
    let data = Shards::from_batch(blob_batch(1000, 8, 3, 42), 4).map_err(|e| e.to_string())?;
    let sgd = SgdConfig { lr: 0.1, seed: 7 };
    // 250 rows per worker at batch 25: 10 steps per epoch, 50 over the run,
    // and every union minibatch has four equal slices so the mean-of-means
    // argument holds exactly.
    let cfg = FitConfig {
        epochs: 5,
        batch_size: 25,
        seed: 5,
        shuffle: false,
        debug_checksums: true,
    };

    let oracle = union_batch_fit(
        &classifier_spec(),
        sgd.seed,
        sgd.lr,
        data.parts(),
        &feature_cols,
        &label_cols,
        &cfg,
    );

    let mut est = Estimator::from_model(classifier_spec(), sgd, Backend::Cluster(launch(4)))
        .map_err(|e| e.to_string())?;
    let report = est
        .fit(&data, &feature_cols, &label_cols, &cfg)
        .map_err(|e| format!("cluster fit failed: {e}"))?;
    let got = est.params().flatten();
    est.shutdown();

    let want = oracle.flatten();
    if got.len() != want.len() {
        return Err(format!("parameter count {} vs oracle {}", got.len(), want.len()));
    }
    let mut max_rel = 0.0f32;
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        // Floor the denominator: parameters this small are noise-dominated
        // and a pure ratio would amplify differences below f32 resolution.
        let rel = (g - w).abs() / g.abs().max(w.abs()).max(1e-2);
        if rel > max_rel {
            max_rel = rel;
        }
        if rel > 1e-4 {
            return Err(format!("param {i}: cluster {g} vs union-batch {w} ({rel:.2e} relative)"));
        }
    }
    Ok(FitEvidence { steps: report.steps, max_rel, secs: start.elapsed().as_secs_f64() })
}

fn c2_distributed_serial_equivalence() -> Outcome {
    let result = FIT_RUN.get_or_init(run_criterion_2_fit);
    match result {
        Ok(ev) if ev.secs >= 60.0 => Outcome::Fail(format!("took {:.1}s, limit 60s", ev.secs)),
        Ok(ev) => Outcome::Pass(format!(
            "4 workers vs union-batch oracle: 3-layer MLP, 5 epochs on 1000 rows, max param drift {:.1e} (tol 1e-4), {:.1}s",
            ev.max_rel, ev.secs
        )),
        Err(e) => Outcome::Fail(e.clone()),
    }
}

fn c3_replica_consistency() -> Outcome {
    // The criterion-2 run had per-step checksums on: after every update each
    // replica digests its parameters and the driver fails the fit on the
    // first mismatch. A completed run therefore certifies zero mismatches.
    match FIT_RUN.get_or_init(run_criterion_2_fit) {
        Ok(ev) if ev.steps >= 50 => Outcome::Pass(format!(
            "{} lockstep steps with debug checksums on, zero digest mismatches",
            ev.steps
        )),
        Ok(ev) => Outcome::Fail(format!("only {} steps, need at least 50", ev.steps)),
        Err(e) => Outcome::Fail(format!("criterion-2 run unavailable: {e}")),
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: gradients against central finite differences
// ---------------------------------------------------------------------------

/// Central differences truncate at O(h^2) while f32 loss noise grows as h
/// shrinks; 5e-3 sits at the measured crossover for these nets.
const FD_STEP: f32 = 5e-3;

/// True when any relu pre-activation sits close enough to zero that a +-h
/// parameter nudge could cross the kink. There the loss is not differentiable
/// and a central difference measures a subgradient mix, not the derivative,
/// so such draws are resampled rather than checked.
fn relu_near_kink(spec: &ModelSpec, params: &ModelParams, batch: &Tensor, margin: f32) -> bool {
    let rows = batch.rows();
    let mut acts: Vec<Vec<f32>> = (0..rows).map(|r| batch.row(r).to_vec()).collect();
    for (layer, lp) in spec.layers.iter().zip(&params.layers) {
        let mut next = vec![vec![0.0f32; layer.output_dim]; rows];
        for (r, row) in acts.iter().enumerate() {
            for j in 0..layer.output_dim {
                let mut z = lp.bias.at(0, j);
                for (i, &a) in row.iter().enumerate() {
                    z += a * lp.weight.at(i, j);
                }
                if layer.activation == Activation::Relu && z.abs() < margin {
                    return true;
                }
                next[r][j] = if layer.activation == Activation::Relu { z.max(0.0) } else { z };
            }
        }
        acts = next;
    }
    false
}

fn fd_loss(spec: &ModelSpec, params: &ModelParams, batch: &Tensor, targets: &Tensor) -> f64 {
    let out = forward(spec, params, batch).unwrap();
    loss_value(spec, &out, targets).unwrap() as f64
}

fn c4_gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD);
    let mut checked = 0usize;
    let mut resampled = 0usize;
    let mut partials = 0usize;
    let mut worst = 0.0f64;

    while checked < 100 {
        let depth = rng.gen_range(1..=3usize);
        let mut dims = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            dims.push(rng.gen_range(1..=5usize));
        }
        let head = match rng.gen_range(0..3u8) {
            0 => Activation::Identity,
            1 => Activation::Relu,
            _ => Activation::Softmax,
        };
        let mut acts: Vec<Activation> = (0..depth - 1)
            .map(|_| if rng.gen_bool(0.5) { Activation::Relu } else { Activation::Identity })
            .collect();
        acts.push(head);
        let loss = if head == Activation::Softmax && rng.gen_bool(0.5) {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        };
        let layers = dims
            .windows(2)
            .zip(&acts)
            .map(|(w, &a)| LayerSpec { input_dim: w[0], output_dim: w[1], activation: a })
            .collect();
        let spec = ModelSpec { layers, loss };
        let params = init_params(&spec, rng.gen()).unwrap();
        let rows = rng.gen_range(2..=5usize);
        let bdata: Vec<f32> = (0..rows * spec.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::from_vec(rows, spec.input_dim(), bdata).unwrap();
        let targets = match spec.loss {
            LossKind::Mse => {
                let t: Vec<f32> =
                    (0..rows * spec.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::from_vec(rows, spec.output_dim(), t).unwrap()
            }
            LossKind::CrossEntropy => {
                let t: Vec<f32> =
                    (0..rows).map(|_| rng.gen_range(0..spec.output_dim()) as f32).collect();
                Tensor::from_vec(rows, 1, t).unwrap()
            }
        };
        // A parameter nudge of h shifts pre-activations by at most a few
        // times h through the small fan-ins used here; 6h of clearance keeps
        // every probe on one side of each kink.
        if relu_near_kink(&spec, &params, &batch, 6.0 * FD_STEP) {
            resampled += 1;
            continue;
        }

        let (_, grads) = backward(&spec, &params, &batch, &targets).unwrap();
        let flat_grads = grads.flatten();
        let flat = params.flatten();
        for i in 0..flat.len() {
            let probe = |delta: f32| -> f64 {
                let mut nudged = flat.clone();
                nudged[i] += delta;
                let p = params.unflatten_like(&nudged).unwrap();
                fd_loss(&spec, &p, &batch, &targets)
            };
            let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP as f64);
            let got = flat_grads[i] as f64;
            let tol = (1e-2 * fd.abs().max(got.abs())).max(1e-4);
            let err = (fd - got).abs();
            worst = worst.max(err / tol);
            if err > tol {
                return Outcome::Fail(format!(
                    "net {checked} param {i}: analytic {got} vs central difference {fd} (tol {tol:.1e})"
                ));
            }
            partials += 1;
        }
        checked += 1;
    }

    Outcome::Pass(format!(
        "100 random nets, {partials} partial derivatives at 1e-2 rel / 1e-4 abs, worst at {:.0}% of tolerance ({resampled} draws resampled off relu kinks)",
        worst * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5: quantization fidelity
// ---------------------------------------------------------------------------

fn c5_quantization_fidelity() -> Outcome {
    // 10-class blobs in 784 dimensions. Noise 2.0 against unit-cube centroid
    // spacing leaves a few percent of points genuinely ambiguous, so the
    // fp32/int8 comparison runs where quantization error could flip a call.
    let (x, y) = synth::make_blobs(6000, 784, 10, 2.0, 99);
    let train_idx: Vec<usize> = (0..5000).collect();
    let test_idx: Vec<usize> = (5000..6000).collect();
    let train_x = x.gather_rows(&train_idx);
    let train_y = y.gather_rows(&train_idx);
    let test_x = x.gather_rows(&test_idx);
    let test_y = y.gather_rows(&test_idx);

    let spec = ModelSpec {
        layers: vec![
            LayerSpec { input_dim: 784, output_dim: 64, activation: Activation::Relu },
            LayerSpec { input_dim: 64, output_dim: 10, activation: Activation::Softmax },
        ],
        loss: LossKind::CrossEntropy,
    };
    let mut params = init_params(&spec, 4).unwrap();
    let batch_size = 100;
    for _epoch in 0..3 {
        for step in 0..(5000 / batch_size) {
            let idx: Vec<usize> = (step * batch_size..(step + 1) * batch_size).collect();
            let xb = train_x.gather_rows(&idx);
            let yb = train_y.gather_rows(&idx);
            let (_, grads) = backward(&spec, &params, &xb, &yb).unwrap();
            sgd_step(&mut params, &grads, 0.1);
        }
    }

    let accuracy = |outputs: &Tensor| -> f64 {
        let picks = argmax_rows(outputs);
        let hits = picks
            .iter()
            .enumerate()
            .filter(|(r, &p)| p == test_y.at(*r, 0) as usize)
            .count();
        hits as f64 / outputs.rows() as f64
    };
    let fp32_out = forward(&spec, &params, &test_x).unwrap();
    let fp32_acc = accuracy(&fp32_out);

    let quantized = match quantize_model(&spec, &params, &train_x) {
        Ok(q) => q,
        Err(e) => return Outcome::Fail(format!("quantize_model: {e}")),
    };
    let int8_out = quantized.forward(&test_x).unwrap();
    let int8_acc = accuracy(&int8_out);

    let gap_pp = (fp32_acc - int8_acc).abs() * 100.0;
    if gap_pp > 2.0 {
        return Outcome::Fail(format!(
            "top-1 gap {gap_pp:.2}pp exceeds 2pp (fp32 {:.1}%, int8 {:.1}%)",
            fp32_acc * 100.0,
            int8_acc * 100.0
        ));
    }

    // Element round-trip on a 10^4-point grid spanning the calibrated range.
    // quantize() rounds half away from zero, so the worst in-range error is
    // exactly scale/2; the factor covers f32 noise in the comparison itself.
    let grid: Vec<f32> = (0..10_000).map(|i| -3.0 + 8.0 * i as f32 / 9_999.0).collect();
    let p = calibrate(&grid).unwrap();
    let tol = p.max_round_trip_error() * 1.00001;
    for &v in &grid {
        let err = (dequantize(quantize(v, p), p) - v).abs();
        if err > tol {
            return Outcome::Fail(format!(
                "round-trip of {v} missed by {err:.2e}, over scale/2 = {:.2e}",
                p.max_round_trip_error()
            ));
        }
    }

    Outcome::Pass(format!(
        "784-64-10 on 5000/1000 blobs: fp32 {:.1}% vs int8 {:.1}% (gap {gap_pp:.2}pp, tol 2pp); round-trip within scale/2 on 10^4 grid points",
        fp32_acc * 100.0,
        int8_acc * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Criterion 6: acceleration floors
// ---------------------------------------------------------------------------

/// Physical cores as unique (physical id, core id) pairs in /proc/cpuinfo;
/// hyperthreads share both ids. Falls back to the logical count when the
/// fields are absent (common in VMs).
fn physical_cores() -> usize {
    let Ok(text) = fs::read_to_string("/proc/cpuinfo") else {
        return std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    };
    let mut logical = 0usize;
    let mut pairs = HashSet::new();
    let (mut phys, mut core): (Option<u32>, Option<u32>) = (None, None);
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if let (Some(p), Some(c)) = (phys, core) {
                pairs.insert((p, c));
            }
            phys = None;
            core = None;
            continue;
        }
        let mut parts = line.splitn(2, ':');
        let key = parts.next().unwrap_or("").trim();
        let val = parts.next().unwrap_or("").trim();
        match key {
            "processor" => logical += 1,
            "physical id" => phys = val.parse().ok(),
            "core id" => core = val.parse().ok(),
            _ => {}
        }
    }
    if pairs.is_empty() {
        logical.max(1)
    } else {
        pairs.len()
    }
}

fn c6_acceleration_floors() -> Outcome {
    let cores = physical_cores();
    if cores < 4 {
        return Outcome::Skip(format!(
            "host has {cores} physical core(s); the 4-thread floors need at least 4 to mean anything"
        ));
    }

    let spec = ModelSpec {
        layers: vec![
            LayerSpec { input_dim: 784, output_dim: 512, activation: Activation::Relu },
            LayerSpec { input_dim: 512, output_dim: 512, activation: Activation::Relu },
            LayerSpec { input_dim: 512, output_dim: 10, activation: Activation::Softmax },
        ],
        loss: LossKind::CrossEntropy,
    };
    let params = init_params(&spec, 6).unwrap();
    let batch = synth::uniform(256, 784, -1.0, 1.0, 8);
    let quantized = match quantize_model(&spec, &params, &batch) {
        Ok(q) => q,
        Err(e) => return Outcome::Fail(format!("quantize_model: {e}")),
    };
    let plans = [
        ExecPlan { threads: 4, ..ExecPlan::baseline() },
        ExecPlan { threads: 4, precision: Precision::Int8, ..ExecPlan::baseline() },
    ];
    let report = match benchmark(&spec, &params, Some(&quantized), &batch, &plans, 5) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("benchmark: {e}")),
    };
    // plans[0] is the implicit single-thread fp32 baseline.
    let fp32_4t = report.plans[1].speedup;
    let int8_over_fp32 = report.plans[2].speedup / report.plans[1].speedup;
    if fp32_4t < 1.5 {
        return Outcome::Fail(format!("fp32 4-thread speedup {fp32_4t:.2}x is under the 1.5x floor"));
    }
    if int8_over_fp32 < 1.2 {
        return Outcome::Fail(format!(
            "int8 over fp32 at 4 threads is {int8_over_fp32:.2}x, under the 1.2x floor"
        ));
    }
    Outcome::Pass(format!(
        "batch-256 784-512-512-10: fp32 4t {fp32_4t:.2}x over 1t (floor 1.5x); int8 {int8_over_fp32:.2}x over fp32 at 4t (floor 1.2x)"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 7: shard transforms commute with collect
// ---------------------------------------------------------------------------

fn c7_xshards_equivalence() -> Outcome {
    // The canonical example first: negating a column through the shards is
    // exactly negating it after collect.
    let batch = RecordBatch::new(
        vec!["x".into()],
        vec![Column::Float(vec![1.0, 2.0, 3.0])],
    )
    .unwrap();
    let shards = Shards::from_batch(batch, 2).unwrap();
    let negated = shards
        .transform_shard(|b: &RecordBatch| b.map_float("x", |v| -v))
        .unwrap()
        .collect()
        .unwrap();
    if negated.float_column("x").unwrap() != [-1.0, -2.0, -3.0] {
        return Outcome::Fail("negate example did not reproduce [-1, -2, -3]".into());
    }

    let transforms: &[(&str, fn(f32) -> f32)] = &[
        ("negate", |v| -v),
        ("affine", |v| v * 2.0 + 1.0),
        ("square-shift", |v| v * v - 0.5),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed5);
    let mut cases = 0usize;
    for case in 0..20 {
        // Cover both edges of the row-count range, then sample inside it.
        let rows = match case {
            0 => 1,
            1 => 10_000,
            _ => rng.gen_range(1..=10_000usize),
        };
        let parts = rng.gen_range(1..=8usize);
        let xs: Vec<f32> = (0..rows).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let ys: Vec<f32> = (0..rows).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let batch = RecordBatch::new(
            vec!["x".into(), "y".into()],
            vec![Column::Float(xs), Column::Float(ys)],
        )
        .unwrap();
        let shards = Shards::from_batch(batch.clone(), parts).unwrap();

        for (name, f) in transforms {
            let through_shards = shards
                .transform_shard(|b: &RecordBatch| b.map_float("x", f))
                .unwrap()
                .collect()
                .unwrap();
            let through_collect = shards.collect().unwrap().map_float("x", f).unwrap();
            let a = through_shards.float_column("x").unwrap();
            let b = through_collect.float_column("x").unwrap();
            if a.len() != b.len()
                || a.iter().zip(b).any(|(p, q)| p.to_bits() != q.to_bits())
            {
                return Outcome::Fail(format!(
                    "case {case} ({rows} rows, {parts} partitions, {name}): shard-side and collect-side results differ"
                ));
            }
            let ya = through_shards.float_column("y").unwrap();
            let yb = batch.float_column("y").unwrap();
            if ya.iter().zip(yb).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Outcome::Fail(format!("case {case} ({name}): untouched column changed"));
            }
            cases += 1;
        }
    }
    Outcome::Pass(format!(
        "negate example exact; {cases} random (rows <= 10^4, partitions 1-8, transform) cases bit-identical both ways"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8: delayed instantiation
// ---------------------------------------------------------------------------

fn c8_delayed_instantiation() -> Outcome {
    let template = ModelTemplate::new(1, LossKind::Mse, 3)
        .layer(1, Activation::Identity)
        .space("x", SearchSpace::IntRange { lo: -2, hi: 2 });
    let before = template.construction_count();
    if before != 0 {
        return Outcome::Fail(format!("construction counter is {before} before the study"));
    }

    let mut objective = |_spec: &ModelSpec, _sgd: &SgdConfig, cfg: &Config| -> Result<f64, String> {
        match cfg.get("x") {
            Some(SpaceValue::Int(v)) => {
                let d = *v as f64 - 1.0;
                Ok(d * d)
            }
            other => Err(format!("bad x in config: {other:?}")),
        }
    };
    let study = match run_study(
        &template,
        &mut objective,
        Study::new(Direction::Minimize, 5, Sampler::Grid),
    ) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("run_study: {e}")),
    };

    let after = template.construction_count();
    if after != study.trials.len() as u64 || study.trials.len() != 5 {
        return Outcome::Fail(format!(
            "counter {after} vs {} executed trials (want 5 of each)",
            study.trials.len()
        ));
    }
    let best = study.best_trial().expect("grid study over a clean objective has a best");
    if best.config.get("x") != Some(&SpaceValue::Int(1)) || best.result != Some(0.0) {
        return Outcome::Fail(format!(
            "argmin of (x-1)^2 over -2..=2 should be x=1 with value 0, got {:?} -> {:?}",
            best.config.get("x"),
            best.result
        ));
    }
    Outcome::Pass(format!(
        "counter 0 before, {after} after {} trials; grid argmin of (x-1)^2 over five points is exactly x=1",
        study.trials.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 9: cluster lifecycle
// ---------------------------------------------------------------------------

fn c9_lifecycle() -> Outcome {
    let start = Instant::now();
    for cycle in 0..100 {
        let mut ctx = launch(4);
        let replies = match ctx.run_task("echo", &[]) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("cycle {cycle}: echo failed: {e}")),
        };
        if replies.len() != 4 {
            return Outcome::Fail(format!("cycle {cycle}: {} replies from 4 workers", replies.len()));
        }
        let pids = ctx.worker_pids();
        ctx.shutdown();
        if cycle == 0 {
            // Idempotent: shutting a dead cluster down again is a no-op.
            ctx.shutdown();
            if ctx.state() != ClusterState::Down {
                return Outcome::Fail("second shutdown changed the cluster state".into());
            }
        }
        for pid in pids {
            if pid_alive(pid) {
                return Outcome::Fail(format!("cycle {cycle}: worker {pid} outlived shutdown"));
            }
        }
    }
    let strays = worker_procs();
    if !strays.is_empty() {
        return Outcome::Fail(format!("orphan workers after 100 cycles: {strays:?}"));
    }
    let cycles_secs = start.elapsed().as_secs_f64();

    // SIGINT during a fit, against the real CLI: the driver must exit 130 and
    // take its workers with it.
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("tempdir: {e}")),
    };
    let mut csv = String::from("x,y\n");
    for i in 0..1000 {
        let x = 3.0 * i as f32 / 999.0;
        csv.push_str(&format!("{},{}\n", x, 2.0 * x));
    }
    if let Err(e) = fs::write(dir.path().join("lin.csv"), csv) {
        return Outcome::Fail(format!("write csv: {e}"));
    }
    let cli = env!("CARGO_BIN_EXE_shardpipe");
    let mut child = match Command::new(cli)
        .args([
            "train", "--data", "lin.csv", "--arch", "1-1:id", "--workers", "2", "--epochs",
            "500000", "--batch-size", "100", "--lr", "0.0001", "--out", "sig.spnn",
        ])
        .current_dir(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return Outcome::Fail(format!("spawn cli: {e}")),
    };
    let driver = child.id();
    let deadline = Instant::now() + Duration::from_secs(20);
    let workers = loop {
        let pids = scan_procs(|args| {
            args.iter().any(|a| *a == "--worker") && args.first().is_some_and(|a| *a == cli)
        });
        let mine: Vec<u32> = pids.into_iter().filter(|&p| parent_of(p) == Some(driver)).collect();
        if mine.len() == 2 {
            break mine;
        }
        if Instant::now() > deadline {
            let _ = child.kill();
            return Outcome::Fail(format!("cli cluster never came up, saw workers {mine:?}"));
        }
        std::thread::sleep(Duration::from_millis(100));
    };
    std::thread::sleep(Duration::from_millis(300));
    let _ = Command::new("kill").args(["-INT", &driver.to_string()]).status();
    let deadline = Instant::now() + Duration::from_secs(20);
    let code = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status.code(),
            Ok(None) if Instant::now() > deadline => {
                let _ = child.kill();
                for pid in &workers {
                    let _ = Command::new("kill").args(["-9", &pid.to_string()]).status();
                }
                return Outcome::Fail("driver ignored SIGINT for 20s".into());
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(100)),
            Err(e) => return Outcome::Fail(format!("try_wait: {e}")),
        }
    };
    if code != Some(130) {
        return Outcome::Fail(format!("interrupted run exited {code:?}, want 130"));
    }
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let alive: Vec<u32> = workers.iter().copied().filter(|&p| pid_alive(p)).collect();
        if alive.is_empty() {
            break;
        }
        if Instant::now() > deadline {
            for pid in &alive {
                let _ = Command::new("kill").args(["-9", &pid.to_string()]).status();
            }
            return Outcome::Fail(format!("workers {alive:?} survived the interrupted driver"));
        }
        std::thread::sleep(Duration::from_millis(100));
    }

    Outcome::Pass(format!(
        "100 launch/shutdown cycles of 4 workers in {cycles_secs:.1}s, shutdown idempotent, SIGINT mid-fit exits 130 with no orphans"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 10: the study picks the stable learning rate
// ---------------------------------------------------------------------------

fn c10_hpo_end_to_end() -> Outcome {
    // y = 2x over [0, 3]: the MSE Hessian's large eigenvalue is about 7.7, so
    // gradient descent diverges at lr 1.0 and contracts at 0.05.
    let n = 200usize;
    let xs: Vec<f32> = (0..n).map(|i| 3.0 * i as f32 / (n - 1) as f32).collect();
    let ys: Vec<f32> = xs.iter().map(|x| 2.0 * x).collect();
    let batch = RecordBatch::new(
        vec!["x".into(), "y".into()],
        vec![Column::Float(xs), Column::Float(ys)],
    )
    .unwrap();
    let train = Shards::from_batch(batch.slice(0..160), 1).unwrap();
    let val = Shards::from_batch(batch.slice(160..200), 1).unwrap();
    let cfg = FitConfig { epochs: 150, batch_size: 80, seed: 3, shuffle: false, debug_checksums: false };

    let fit_at = |spec: ModelSpec, sgd: SgdConfig| -> Result<f64, String> {
        let mut est =
            Estimator::from_model(spec, sgd, Backend::Local).map_err(|e| e.to_string())?;
        est.fit(&train, &["x"], &["y"], &cfg).map_err(|e| e.to_string())?;
        est.validation_loss(&val, &["x"], &["y"]).map(f64::from).map_err(|e| e.to_string())
    };
    let line_spec = || ModelSpec {
        layers: vec![LayerSpec { input_dim: 1, output_dim: 1, activation: Activation::Identity }],
        loss: LossKind::Mse,
    };

    // Both configurations standalone first, so the study result is checked
    // against known behavior rather than against itself.
    let unstable = fit_at(line_spec(), SgdConfig { lr: 1.0, seed: 3 });
    if unstable.is_ok() {
        return Outcome::Fail(format!(
            "lr 1.0 was supposed to diverge on this data, got val loss {:?}",
            unstable
        ));
    }
    let stable = match fit_at(line_spec(), SgdConfig { lr: 0.05, seed: 3 }) {
        Ok(l) => l,
        Err(e) => return Outcome::Fail(format!("lr 0.05 failed standalone: {e}")),
    };
    if stable > 1e-3 {
        return Outcome::Fail(format!("lr 0.05 converged poorly standalone: val loss {stable}"));
    }

    let template = ModelTemplate::new(1, LossKind::Mse, 3)
        .layer(1, Activation::Identity)
        .lr_space(
            "lr",
            SearchSpace::Categorical(vec![SpaceValue::Real(1.0), SpaceValue::Real(0.05)]),
        );
    let mut objective = |spec: &ModelSpec, sgd: &SgdConfig, _cfg: &Config| -> Result<f64, String> {
        fit_at(spec.clone(), *sgd)
    };
    let study = match run_study(
        &template,
        &mut objective,
        Study::new(Direction::Minimize, 2, Sampler::Grid),
    ) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("run_study: {e}")),
    };
    if study.trials[0].result.is_some() {
        return Outcome::Fail(format!(
            "the lr 1.0 trial should be recorded failed, got {:?}",
            study.trials[0].result
        ));
    }
    let best = match study.best_trial() {
        Some(t) => t,
        None => return Outcome::Fail("study found no best trial".into()),
    };
    if best.config.get("lr") != Some(&SpaceValue::Real(0.05)) {
        return Outcome::Fail(format!("study picked {:?}, want lr 0.05", best.config.get("lr")));
    }

    Outcome::Pass(format!(
        "standalone: lr 1.0 diverges, lr 0.05 reaches val loss {stable:.1e}; the study records 1.0 failed and picks 0.05"
    ))
}
