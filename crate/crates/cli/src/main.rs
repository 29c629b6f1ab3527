//! `shardpipe`: train, quantize, benchmark, and tune dense MLPs from the
//! command line, scaling from one process to a local worker cluster with the
//! same flags.
//!
//! Machine-readable output is a single JSON document on stdout; human logs go
//! to stderr (level via the SHARDPIPE_LOG env var). Exit codes: 0 success,
//! 1 flag or config errors, 2 data errors, 3 cluster errors, 130 interrupted.
//!
//! Model architectures are written as a mini-language, `d0-d1-...-dk:act1,...,actk`:
//! dash-separated layer widths (input first), a colon, then one activation
//! per layer from {id, relu, softmax}. A softmax head trains with
//! cross-entropy against a class-index label column; any other head trains
//! with mean squared error. `784-64-10:relu,softmax` is a 10-class classifier
//! over 784 features; `1-1:id` is a linear regression.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use shardpipe_core::accel::{benchmark, detect_cores, infer, ExecPlan, ModelHandle, Precision};
use shardpipe_core::cluster::{launch_cluster, parse_worker_argv, worker_main, ClusterConfig};
use shardpipe_core::estimator::{Backend, Estimator, EstimatorError, FitConfig, SgdConfig, TrainReport};
use shardpipe_core::hpo::{auto_estimator_fit, Direction, HpoError, ModelTemplate, Sampler, SearchSpace, SpaceValue, Study};
use shardpipe_core::nn::{forward, init_params, load_model, Activation, LayerSpec, LossKind, ModelSpec};
use shardpipe_core::quant::{load_quantized, quantize_model, save_quantized};
use shardpipe_core::shards::{read_csv, Column, RecordBatch, Shards};
use shardpipe_core::synth;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

#[derive(Parser)]
#[command(
    name = "shardpipe",
    about = "Distributed training and accelerated inference for dense MLPs",
    after_help = "Architecture strings look like 784-64-10:relu,softmax \
                  (layer widths, then one activation per layer from id, relu, softmax). \
                  A softmax head trains with cross-entropy on a class-index label; \
                  other heads train with mean squared error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a CSV, optionally across a local worker cluster
    Train(TrainArgs),
    /// Quantize a checkpoint to int8 using a calibration CSV
    Quantize(QuantizeArgs),
    /// Benchmark inference across thread counts and precisions
    Bench(BenchArgs),
    /// Hyperparameter search over a space file, then refit the best config
    Tune(TuneArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training data: CSV with a header row
    #[arg(long)]
    data: PathBuf,
    /// Model architecture, e.g. 784-64-10:relu,softmax
    #[arg(long)]
    arch: String,
    /// Label column name (default: the last CSV column)
    #[arg(long)]
    label: Option<String>,
    /// Worker processes; 1 trains in-process
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Rows per optimizer step across all workers (a multiple of --workers)
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    /// Seed for parameter init and shuffling; fixed seed, identical outputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reshuffle each worker's rows every epoch
    #[arg(long)]
    shuffle: bool,
    /// Cross-check replica parameter digests every step (distributed runs)
    #[arg(long)]
    debug_checksums: bool,
    /// Checkpoint output path
    #[arg(long, default_value = "model.spnn")]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Checkpoint to quantize
    #[arg(long)]
    model: PathBuf,
    /// Calibration data: CSV of representative inputs
    #[arg(long)]
    calib: PathBuf,
    /// Label column to drop from the calibration CSV, if it has one
    #[arg(long)]
    label: Option<String>,
    /// Quantized model output path
    #[arg(long, default_value = "model.spq1")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark a trained checkpoint
    #[arg(long, conflicts_with = "arch")]
    model: Option<PathBuf>,
    /// Benchmark a randomly initialized architecture instead
    #[arg(long)]
    arch: Option<String>,
    /// Quantized model; adds int8 rows to the plan grid
    #[arg(long)]
    quantized: Option<PathBuf>,
    /// Inference batch rows
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Timed repetitions per plan (median reported)
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Thread counts to sweep, e.g. 1,2,4 (default: 1 through host cores)
    #[arg(long, value_delimiter = ',')]
    threads: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Architecture template; spaces named d1..d{k-1} override hidden widths
    #[arg(long)]
    arch: String,
    /// JSON space file: {"name":{"kind":"categorical","choices":[...]}
    /// |{"kind":"int","lo":..,"hi":..}|{"kind":"real","lo":..,"hi":..,"log":bool}}
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    label: Option<String>,
    /// Trials to run (default: full grid for --sampler grid, 10 for random)
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value = "grid")]
    sampler: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learning rate when the space file does not tune "lr"
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    shuffle: bool,
    /// Best-config checkpoint output path
    #[arg(long, default_value = "model.spnn")]
    out: PathBuf,
    /// Study JSON output path
    #[arg(long, default_value = "study.json")]
    study_out: PathBuf,
}

/// Errors bucketed by exit code: flags and config 1, data 2, cluster 3.
#[derive(Debug)]
enum CliError {
    Parse(String),
    Data(String),
    Cluster(String),
    Interrupted,
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 1,
            CliError::Data(_) => 2,
            CliError::Cluster(_) => 3,
            CliError::Interrupted => 130,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) | CliError::Data(m) | CliError::Cluster(m) => f.write_str(m),
            CliError::Interrupted => f.write_str("interrupted; cluster shut down"),
        }
    }
}

fn estimator_error(e: EstimatorError) -> CliError {
    match e {
        EstimatorError::Cancelled => CliError::Interrupted,
        EstimatorError::Cluster(_) | EstimatorError::ReplicaDivergence { .. } | EstimatorError::BadReply(_) => {
            CliError::Cluster(e.to_string())
        }
        EstimatorError::BadConfig(_) | EstimatorError::UnknownMetric(_) => CliError::Parse(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn hpo_error(e: HpoError) -> CliError {
    match e {
        HpoError::Estimator(inner) => estimator_error(inner),
        HpoError::Shards(inner) => CliError::Data(inner.to_string()),
        HpoError::AllTrialsFailed => CliError::Data(e.to_string()),
        _ => CliError::Parse(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Architecture mini-language
// ---------------------------------------------------------------------------

fn parse_activation(tok: &str) -> Result<Activation, String> {
    match tok {
        "id" => Ok(Activation::Identity),
        "relu" => Ok(Activation::Relu),
        "softmax" => Ok(Activation::Softmax),
        _ => Err(format!("unknown activation \"{tok}\" in --arch (expected id, relu, or softmax)")),
    }
}

/// Parses the `d0-d1-...-dk:act1,...,actk` architecture string. The loss
/// follows the head: softmax trains with cross-entropy, anything else with
/// mean squared error.
fn parse_arch(s: &str) -> Result<ModelSpec, String> {
    let (dims_part, acts_part) = s.split_once(':').ok_or_else(|| {
        format!("--arch \"{s}\" is missing the ':' between widths and activations (like 784-64-10:relu,softmax)")
    })?;
    let dims: Vec<usize> = dims_part
        .split('-')
        .map(|tok| {
            tok.parse::<usize>()
                .ok()
                .filter(|&d| d >= 1)
                .ok_or_else(|| format!("bad dimension \"{tok}\" in --arch"))
        })
        .collect::<Result<_, _>>()?;
    if dims.len() < 2 {
        return Err(format!("--arch \"{s}\" needs at least an input and an output width"));
    }
    let acts: Vec<Activation> = acts_part.split(',').map(parse_activation).collect::<Result<_, _>>()?;
    if acts.len() != dims.len() - 1 {
        return Err(format!(
            "--arch \"{s}\" has {} layers but {} activations; give one per layer",
            dims.len() - 1,
            acts.len()
        ));
    }
    let layers: Vec<LayerSpec> = dims
        .windows(2)
        .zip(&acts)
        .map(|(w, &activation)| LayerSpec { input_dim: w[0], output_dim: w[1], activation })
        .collect();
    let loss = if acts.last() == Some(&Activation::Softmax) { LossKind::CrossEntropy } else { LossKind::Mse };
    let spec = ModelSpec { layers, loss };
    spec.validate().map_err(|e| format!("--arch \"{s}\": {e}"))?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

fn read_data(path: &Path) -> Result<RecordBatch, CliError> {
    read_csv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Splits a batch's columns into features and the label. The label is
/// `--label` when given, otherwise the last column.
fn split_columns(batch: &RecordBatch, label: Option<&str>) -> Result<(Vec<String>, String), CliError> {
    let names = batch.names();
    let label = match label {
        Some(l) => {
            if !names.iter().any(|n| n == l) {
                return Err(CliError::Data(format!(
                    "label column \"{l}\" is not in the data (columns: {})",
                    names.join(", ")
                )));
            }
            l.to_string()
        }
        None => names
            .last()
            .cloned()
            .ok_or_else(|| CliError::Data("the data has no columns".into()))?,
    };
    let features: Vec<String> = names.iter().filter(|n| **n != label).cloned().collect();
    if features.is_empty() {
        return Err(CliError::Data(format!(
            "no feature columns left after taking \"{label}\" as the label"
        )));
    }
    Ok((features, label))
}

fn check_width(spec: &ModelSpec, features: &[String]) -> Result<(), CliError> {
    if spec.input_dim() != features.len() {
        return Err(CliError::Data(format!(
            "--arch expects {} input features but the data has {} ({})",
            spec.input_dim(),
            features.len(),
            features.join(", ")
        )));
    }
    Ok(())
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Reorders rows round-robin (rows with index = 0 mod k first, then 1 mod k,
/// and so on), dealing them to workers like cards. After the contiguous
/// split, worker p holds exactly the original rows congruent to p, so each
/// global optimizer step covers one contiguous block of the original file no
/// matter how many workers share it. That is what keeps `--workers k` runs
/// equal to serial runs at the same global batch size.
fn deal_rows(batch: &RecordBatch, k: usize) -> RecordBatch {
    if k <= 1 {
        return batch.clone();
    }
    let n = batch.len();
    let order: Vec<usize> = (0..k).flat_map(|r| (r..n).step_by(k)).collect();
    let names = batch.names().to_vec();
    let columns = batch
        .columns()
        .map(|(_, col)| match col {
            Column::Float(v) => Column::Float(order.iter().map(|&i| v[i]).collect()),
            Column::Str(v) => Column::Str(order.iter().map(|&i| v[i].clone()).collect()),
        })
        .collect();
    RecordBatch::new(names, columns).expect("reordering keeps the schema")
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn train_json(report: &TrainReport, out: &Path) -> String {
    serde_json::json!({
        "epoch_losses": report.epoch_losses,
        "steps": report.steps,
        "wall_ms": report.wall_time.as_secs_f64() * 1e3,
        "checkpoint": out.display().to_string(),
    })
    .to_string()
}

fn cmd_train(args: &TrainArgs, cancel: &AtomicBool) -> Result<(), CliError> {
    let spec = parse_arch(&args.arch).map_err(CliError::Parse)?;
    if args.workers < 1 {
        return Err(CliError::Parse("--workers must be at least 1".into()));
    }
    if args.batch_size % args.workers != 0 {
        return Err(CliError::Parse(format!(
            "--batch-size {} is not a multiple of --workers {}, so steps cannot split evenly",
            args.batch_size, args.workers
        )));
    }
    let batch = read_data(&args.data)?;
    let (features, label) = split_columns(&batch, args.label.as_deref())?;
    check_width(&spec, &features)?;
    let shards = Shards::from_batch(deal_rows(&batch, args.workers), 1)
        .and_then(|s| s.repartition(args.workers))
        .map_err(|e| CliError::Data(e.to_string()))?;

    let backend = if args.workers > 1 {
        let cfg = ClusterConfig { n_workers: args.workers, ..ClusterConfig::default() };
        let ctx = launch_cluster(cfg).map_err(|e| CliError::Cluster(e.to_string()))?;
        info!("cluster up: {} workers", args.workers);
        Backend::Cluster(ctx)
    } else {
        Backend::Local
    };

    // From here on the estimator owns the cluster; every early return drops
    // it, which shuts the workers down.
    let mut est = Estimator::from_model(spec, SgdConfig { lr: args.lr, seed: args.seed }, backend)
        .map_err(estimator_error)?;
    let cfg = FitConfig {
        epochs: args.epochs,
        batch_size: args.batch_size / args.workers,
        seed: args.seed,
        shuffle: args.shuffle,
        debug_checksums: args.debug_checksums,
    };
    let report = est
        .fit_with_cancel(&shards, &as_strs(&features), &[&label], &cfg, cancel)
        .map_err(estimator_error)?;
    est.save(&args.out).map_err(estimator_error)?;
    println!("{}", train_json(&report, &args.out));
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<(), CliError> {
    let (spec, params) =
        load_model(&args.model).map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let batch = read_data(&args.calib)?;

    // Calibration wants exactly the model's input columns. Drop --label when
    // given; otherwise accept a bare feature file, or a file with one extra
    // column which is assumed to be a trailing label.
    let names = batch.names().to_vec();
    let features: Vec<String> = match &args.label {
        Some(l) => split_columns(&batch, Some(l))?.0,
        None if names.len() == spec.input_dim() => names,
        None if names.len() == spec.input_dim() + 1 => {
            warn!("calibration file has one extra column; treating trailing \"{}\" as a label", names[names.len() - 1]);
            names[..names.len() - 1].to_vec()
        }
        None => {
            return Err(CliError::Data(format!(
                "calibration data has {} columns but the model takes {} inputs; name the label with --label",
                names.len(),
                spec.input_dim()
            )))
        }
    };
    check_width(&spec, &features)?;
    let calib = batch
        .to_tensor(&as_strs(&features))
        .map_err(|e| CliError::Data(e.to_string()))?;

    let quantized = quantize_model(&spec, &params, &calib).map_err(|e| CliError::Data(e.to_string()))?;
    save_quantized(&args.out, &quantized).map_err(|e| CliError::Data(e.to_string()))?;

    let fp32 = forward(&spec, &params, &calib).map_err(|e| CliError::Data(e.to_string()))?;
    let int8 = infer(
        ModelHandle::Int8(&quantized),
        &calib,
        &ExecPlan { precision: Precision::Int8, ..ExecPlan::baseline() },
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let max_dev = fp32
        .data()
        .iter()
        .zip(int8.data())
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));

    println!(
        "{}",
        serde_json::json!({
            "quantized": args.out.display().to_string(),
            "max_deviation": max_dev,
            "calib_rows": calib.rows(),
        })
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let (spec, params) = match (&args.model, &args.arch) {
        (Some(path), _) => load_model(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        (None, Some(arch)) => {
            let spec = parse_arch(arch).map_err(CliError::Parse)?;
            let params = init_params(&spec, args.seed).map_err(|e| CliError::Parse(e.to_string()))?;
            (spec, params)
        }
        (None, None) => return Err(CliError::Parse("bench needs --model or --arch".into())),
    };
    if args.batch < 1 {
        return Err(CliError::Parse("--batch must be at least 1".into()));
    }
    let quantized = match &args.quantized {
        Some(path) => {
            Some(load_quantized(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };

    let threads: Vec<usize> = match &args.threads {
        Some(list) => {
            if list.iter().any(|&t| t < 1) {
                return Err(CliError::Parse("--threads entries must be at least 1".into()));
            }
            list.clone()
        }
        None => (1..=detect_cores()).collect(),
    };
    let mut plans = Vec::new();
    for &t in &threads {
        plans.push(ExecPlan { threads: t, ..ExecPlan::baseline() });
        if quantized.is_some() {
            plans.push(ExecPlan { threads: t, precision: Precision::Int8, ..ExecPlan::baseline() });
        }
    }

    let input = synth::uniform(args.batch, spec.input_dim(), -1.0, 1.0, args.seed);
    let report = benchmark(&spec, &params, quantized.as_ref(), &input, &plans, args.repeats)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

// ---------------------------------------------------------------------------
// Tune
// ---------------------------------------------------------------------------

fn json_to_space_value(name: &str, v: &serde_json::Value) -> Result<SpaceValue, CliError> {
    if let Some(i) = v.as_i64() {
        Ok(SpaceValue::Int(i))
    } else if let Some(f) = v.as_f64() {
        Ok(SpaceValue::Real(f))
    } else if let Some(s) = v.as_str() {
        Ok(SpaceValue::Str(s.to_string()))
    } else {
        Err(CliError::Parse(format!("space \"{name}\": choice {v} is not a number or string")))
    }
}

/// Parses the space file. Returned spaces are sorted by name, which is the
/// declaration order grids enumerate in.
fn parse_space_file(path: &Path) -> Result<Vec<(String, SearchSpace)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let root: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Parse(format!("{}: not valid JSON: {e}", path.display())))?;
    let obj = root
        .as_object()
        .ok_or_else(|| CliError::Parse(format!("{}: the space file must be a JSON object", path.display())))?;

    let mut spaces = Vec::with_capacity(obj.len());
    for (name, def) in obj {
        let def = def
            .as_object()
            .ok_or_else(|| CliError::Parse(format!("space \"{name}\" must be an object with a \"kind\"")))?;
        let kind = def
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| CliError::Parse(format!("space \"{name}\" needs a string \"kind\"")))?;
        let int_field = |field: &str| -> Result<i64, CliError> {
            def.get(field)
                .and_then(|v| v.as_i64())
                .ok_or_else(|| CliError::Parse(format!("space \"{name}\" needs an integer \"{field}\"")))
        };
        let real_field = |field: &str| -> Result<f64, CliError> {
            def.get(field)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| CliError::Parse(format!("space \"{name}\" needs a number \"{field}\"")))
        };
        let space = match kind {
            "categorical" => {
                let choices = def
                    .get("choices")
                    .and_then(|c| c.as_array())
                    .ok_or_else(|| CliError::Parse(format!("space \"{name}\" needs a \"choices\" array")))?;
                SearchSpace::Categorical(
                    choices
                        .iter()
                        .map(|v| json_to_space_value(name, v))
                        .collect::<Result<_, _>>()?,
                )
            }
            "int" => SearchSpace::IntRange { lo: int_field("lo")?, hi: int_field("hi")? },
            "real" => SearchSpace::RealRange {
                lo: real_field("lo")?,
                hi: real_field("hi")?,
                log: def.get("log").and_then(|v| v.as_bool()).unwrap_or(false),
            },
            _ => {
                return Err(CliError::Parse(format!(
                    "space \"{name}\" has unknown kind \"{kind}\" (expected categorical, int, or real)"
                )))
            }
        };
        space
            .validate(name)
            .map_err(|e| CliError::Parse(e.to_string()))?;
        spaces.push((name.clone(), space));
    }
    Ok(spaces)
}

/// Builds the template from the arch string, binding spaces by name: "lr"
/// replaces the learning rate, "d1".."d{k-1}" replace hidden layer widths.
fn build_template(
    arch: &str,
    spaces: Vec<(String, SearchSpace)>,
    lr: f32,
    seed: u64,
) -> Result<ModelTemplate, CliError> {
    let spec = parse_arch(arch).map_err(CliError::Parse)?;
    let k = spec.layers.len();
    let valid: Vec<String> = std::iter::once("lr".to_string())
        .chain((1..k).map(|i| format!("d{i}")))
        .collect();
    for (name, _) in &spaces {
        if !valid.contains(name) {
            return Err(CliError::Parse(format!(
                "space \"{name}\" does not name a tunable leaf; this arch allows: {}",
                valid.join(", ")
            )));
        }
    }
    let find = |wanted: &str| spaces.iter().find(|(n, _)| n == wanted).map(|(_, s)| s.clone());

    let mut template = ModelTemplate::new(spec.input_dim(), spec.loss, seed);
    for (i, layer) in spec.layers.iter().enumerate() {
        // Layer i's width is d{i+1} in the arch string; the head width stays
        // fixed because the label encoding depends on it.
        let space = if i + 1 < k { find(&format!("d{}", i + 1)) } else { None };
        template = match space {
            Some(s) => template.layer_space(&format!("d{}", i + 1), s, layer.activation),
            None => template.layer(layer.output_dim, layer.activation),
        };
    }
    template = match find("lr") {
        Some(s) => template.lr_space("lr", s),
        None => template.lr(lr),
    };
    template.validate().map_err(|e| CliError::Parse(e.to_string()))?;
    Ok(template)
}

fn cmd_tune(args: &TuneArgs) -> Result<(), CliError> {
    let spaces = parse_space_file(&args.space)?;
    let template = build_template(&args.arch, spaces, args.lr, args.seed)?;

    let sampler = match args.sampler.as_str() {
        "grid" => Sampler::Grid,
        "random" => Sampler::Random { seed: args.seed },
        other => {
            return Err(CliError::Parse(format!(
                "unknown sampler \"{other}\" (expected grid or random)"
            )))
        }
    };
    let budget = match (args.budget, &sampler) {
        (Some(b), _) => b,
        (None, Sampler::Grid) => shardpipe_core::hpo::grid_enumerate(template.spaces())
            .map_err(|e| CliError::Parse(e.to_string()))?
            .len(),
        (None, Sampler::Random { .. }) => 10,
    };

    let batch = read_data(&args.data)?;
    let (features, label) = split_columns(&batch, args.label.as_deref())?;
    let spec_probe = parse_arch(&args.arch).map_err(CliError::Parse)?;
    check_width(&spec_probe, &features)?;
    let shards = Shards::from_batch(batch, 1).map_err(|e| CliError::Data(e.to_string()))?;

    let fitcfg = FitConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        shuffle: args.shuffle,
        debug_checksums: false,
    };
    let study = Study::new(Direction::Minimize, budget, sampler);
    let (est, _report, study) = auto_estimator_fit(
        &template,
        &shards,
        &as_strs(&features),
        &[&label],
        &fitcfg,
        study,
    )
    .map_err(hpo_error)?;

    let json = study.to_json();
    std::fs::write(&args.study_out, &json)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.study_out.display())))?;
    est.save(&args.out).map_err(estimator_error)?;
    println!("{json}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry
// ---------------------------------------------------------------------------

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SHARDPIPE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn main() {
    // Cluster drivers spawn this same binary in worker mode; divert before
    // any flag parsing so worker argv never has to satisfy clap.
    let raw: Vec<String> = std::env::args().skip(1).collect();
    if let Some((id, driver)) = parse_worker_argv(&raw) {
        init_logging();
        // Terminal Ctrl-C reaches the whole foreground group. Workers ignore
        // it and wait for the driver's shutdown so the exit stays orderly.
        let _ = ctrlc::set_handler(|| {});
        worker_main(id, &driver);
    }
    init_logging();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            std::process::exit(if help { 0 } else { 1 });
        }
    };

    static CANCEL: AtomicBool = AtomicBool::new(false);
    static SIGINTS: AtomicUsize = AtomicUsize::new(0);
    let _ = ctrlc::set_handler(|| {
        if SIGINTS.fetch_add(1, Ordering::SeqCst) == 0 {
            CANCEL.store(true, Ordering::SeqCst);
            eprintln!("interrupt: finishing the current epoch, then shutting down");
        } else {
            // A second interrupt stops waiting. Workers notice the dropped
            // control connection and exit on their own.
            std::process::exit(130);
        }
    });

    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args, &CANCEL),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Tune(args) => cmd_tune(args),
    };
    match outcome {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_round_trips_the_readme_examples() {
        let spec = parse_arch("784-64-10:relu,softmax").unwrap();
        assert_eq!(spec.layers.len(), 2);
        assert_eq!(spec.input_dim(), 784);
        assert_eq!(spec.layers[1].output_dim, 10);
        assert_eq!(spec.loss, LossKind::CrossEntropy);

        let lin = parse_arch("1-1:id").unwrap();
        assert_eq!(lin.loss, LossKind::Mse);
        assert_eq!(lin.layers[0].activation, Activation::Identity);
    }

    #[test]
    fn arch_errors_name_the_bad_token() {
        let err = parse_arch("784-ten-10:relu,softmax").unwrap_err();
        assert!(err.contains("\"ten\""), "{err}");
        let err = parse_arch("4-2:gelu").unwrap_err();
        assert!(err.contains("\"gelu\""), "{err}");
        let err = parse_arch("4-2-1").unwrap_err();
        assert!(err.contains(':'), "{err}");
        let err = parse_arch("4-2-1:relu").unwrap_err();
        assert!(err.contains("2 layers"), "{err}");
        let err = parse_arch("4-0:id").unwrap_err();
        assert!(err.contains("\"0\""), "{err}");
    }

    #[test]
    fn mid_model_softmax_is_rejected() {
        let err = parse_arch("4-3-2:softmax,id").unwrap_err();
        assert!(err.contains("softmax"), "{err}");
    }

    #[test]
    fn dealing_rows_gives_workers_the_residue_classes() {
        let batch = RecordBatch::new(
            vec!["v".into()],
            vec![Column::Float((0..10).map(|i| i as f32).collect())],
        )
        .unwrap();
        let dealt = deal_rows(&batch, 4);
        assert_eq!(
            dealt.float_column("v").unwrap(),
            // Residues 0,1,2,3 of ten rows, in original order within each.
            &[0.0, 4.0, 8.0, 1.0, 5.0, 9.0, 2.0, 6.0, 3.0, 7.0]
        );
        // Contiguous split sizes [3,3,2,2] then line up with the residue
        // class sizes, so worker p gets exactly the rows = p mod 4.
        let one = deal_rows(&batch, 1);
        assert_eq!(one.float_column("v").unwrap(), batch.float_column("v").unwrap());
    }

    #[test]
    fn template_binds_lr_and_hidden_widths_only() {
        let spaces = vec![
            ("d1".to_string(), SearchSpace::IntRange { lo: 4, hi: 8 }),
            ("lr".to_string(), SearchSpace::RealRange { lo: 1e-3, hi: 1e-1, log: true }),
        ];
        let template = build_template("3-6-2:relu,softmax", spaces, 0.01, 0).unwrap();
        assert_eq!(template.spaces().len(), 2);

        let bad = vec![("d2".to_string(), SearchSpace::IntRange { lo: 1, hi: 2 })];
        let err = build_template("3-6-2:relu,softmax", bad, 0.01, 0).unwrap_err();
        let CliError::Parse(msg) = err else { panic!("wrong bucket: {err:?}") };
        assert!(msg.contains("\"d2\"") && msg.contains("lr, d1"), "{msg}");
    }
}
