//! Hyperparameter search: named search spaces, delayed model instantiation,
//! and sequential random or grid studies.
//!
//! A [`ModelTemplate`] looks like a model plus optimizer config except that
//! some leaves (layer widths, learning rate) name a [`SearchSpace`] instead
//! of holding a value. Nothing is constructed when the template is declared;
//! each trial resolves the template against one sampled configuration, and
//! the template's construction counter observably counts those resolutions.

use crate::estimator::{Backend, Estimator, EstimatorError, FitConfig, SgdConfig, TrainReport};
use crate::nn::{Activation, LayerSpec, LossKind, ModelSpec};
use crate::shards::{RecordBatch, Shards, ShardsError};
use log::{debug, info};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("invalid search space \"{name}\": {reason}")]
    BadSpace { name: String, reason: String },
    #[error("search space \"{0}\" is declared twice")]
    DuplicateSpace(String),
    #[error("template leaf references undeclared space \"{0}\"")]
    UnknownSpace(String),
    #[error("space \"{0}\" is a real range and cannot be enumerated for a grid")]
    NotEnumerable(String),
    #[error("grid too large: {0}")]
    GridTooLarge(String),
    #[error("config is missing a value for space \"{0}\"")]
    MissingKey(String),
    #[error("config value for \"{name}\" is unusable: {reason}")]
    BadValue { name: String, reason: String },
    #[error("invalid study: {0}")]
    BadStudy(String),
    #[error("every trial in the study failed")]
    AllTrialsFailed,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Shards(#[from] ShardsError),
}

/// A scalar a search space can produce.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceValue {
    Int(i64),
    Real(f64),
    Str(String),
}

impl SpaceValue {
    fn to_json(&self) -> String {
        match self {
            SpaceValue::Int(i) => i.to_string(),
            SpaceValue::Real(r) => serde_json::to_string(r).expect("finite real"),
            SpaceValue::Str(s) => serde_json::to_string(s).expect("string encodes"),
        }
    }

    fn as_width(&self) -> Result<usize, String> {
        match self {
            SpaceValue::Int(i) if *i >= 1 => Ok(*i as usize),
            SpaceValue::Int(i) => Err(format!("{i} is not a positive layer width")),
            other => Err(format!("{other:?} is not an integer layer width")),
        }
    }

    fn as_lr(&self) -> Result<f32, String> {
        let v = match self {
            SpaceValue::Int(i) => *i as f64,
            SpaceValue::Real(r) => *r,
            SpaceValue::Str(s) => return Err(format!("\"{s}\" is not a learning rate")),
        };
        if !v.is_finite() || v <= 0.0 {
            return Err(format!("{v} is not a positive finite learning rate"));
        }
        Ok(v as f32)
    }
}

impl fmt::Display for SpaceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceValue::Int(i) => write!(f, "{i}"),
            SpaceValue::Real(r) => write!(f, "{r}"),
            SpaceValue::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchSpace {
    /// Uniform choice among explicit values; at least one.
    Categorical(Vec<SpaceValue>),
    /// Uniform integer, both ends inclusive.
    IntRange { lo: i64, hi: i64 },
    /// Uniform real on [lo, hi); with `log`, the exponent is uniform instead,
    /// which spreads samples evenly across decades.
    RealRange { lo: f64, hi: f64, log: bool },
}

impl SearchSpace {
    pub fn validate(&self, name: &str) -> Result<(), HpoError> {
        let fail = |reason: String| HpoError::BadSpace { name: name.to_string(), reason };
        match self {
            SearchSpace::Categorical(choices) => {
                if choices.is_empty() {
                    return Err(fail("categorical needs at least one choice".into()));
                }
            }
            SearchSpace::IntRange { lo, hi } => {
                if lo > hi {
                    return Err(fail(format!("integer range {lo}..={hi} is empty")));
                }
            }
            SearchSpace::RealRange { lo, hi, log } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(fail(format!("real range needs lo < hi, got {lo}..{hi}")));
                }
                if *log && *lo <= 0.0 {
                    return Err(fail(format!("log scale needs lo > 0, got {lo}")));
                }
            }
        }
        Ok(())
    }

    /// Draw one value. Callers validate the space first.
    pub fn sample(&self, rng: &mut impl Rng) -> SpaceValue {
        match self {
            SearchSpace::Categorical(choices) => choices[rng.gen_range(0..choices.len())].clone(),
            SearchSpace::IntRange { lo, hi } => SpaceValue::Int(rng.gen_range(*lo..=*hi)),
            SearchSpace::RealRange { lo, hi, log } => {
                let v = if *log {
                    rng.gen_range(lo.ln()..hi.ln()).exp().clamp(*lo, *hi)
                } else {
                    rng.gen_range(*lo..*hi)
                };
                SpaceValue::Real(v)
            }
        }
    }

    fn enumerate(&self, name: &str) -> Result<Vec<SpaceValue>, HpoError> {
        match self {
            SearchSpace::Categorical(choices) => Ok(choices.clone()),
            SearchSpace::IntRange { lo, hi } => {
                let count = (hi - lo + 1) as usize;
                if count > 64 {
                    return Err(HpoError::GridTooLarge(format!(
                        "integer space \"{name}\" has {count} values, the grid cap per space is 64"
                    )));
                }
                Ok((*lo..=*hi).map(SpaceValue::Int).collect())
            }
            SearchSpace::RealRange { .. } => Err(HpoError::NotEnumerable(name.to_string())),
        }
    }
}

/// One trial's sampled assignment, space name to value. A BTreeMap so every
/// serialization of the same config is byte-identical.
pub type Config = BTreeMap<String, SpaceValue>;

/// Full Cartesian product of the named spaces, lexicographic by declaration
/// order: the first space varies slowest, the last fastest.
pub fn grid_enumerate(spaces: &[(String, SearchSpace)]) -> Result<Vec<Config>, HpoError> {
    const MAX_GRID: usize = 1_000_000;
    let mut axes = Vec::with_capacity(spaces.len());
    let mut size = 1usize;
    for (name, space) in spaces {
        space.validate(name)?;
        let values = space.enumerate(name)?;
        size = size.saturating_mul(values.len());
        if size > MAX_GRID {
            return Err(HpoError::GridTooLarge(format!(
                "product exceeds {MAX_GRID} configurations"
            )));
        }
        axes.push((name.clone(), values));
    }
    let mut configs = Vec::with_capacity(size);
    let mut indices = vec![0usize; axes.len()];
    loop {
        let mut config = Config::new();
        for ((name, values), &i) in axes.iter().zip(&indices) {
            config.insert(name.clone(), values[i].clone());
        }
        configs.push(config);
        // Odometer increment, last axis fastest.
        let mut axis = axes.len();
        loop {
            if axis == 0 {
                return Ok(configs);
            }
            axis -= 1;
            indices[axis] += 1;
            if indices[axis] < axes[axis].1.len() {
                break;
            }
            indices[axis] = 0;
        }
    }
}

/// A model leaf: either a concrete value or the name of a search space that
/// will supply it at resolution time.
#[derive(Debug, Clone)]
pub enum Param<T> {
    Fixed(T),
    Space(String),
}

/// A model plus optimizer declaration whose layer widths and learning rate
/// may be search spaces. Construction is delayed: declaring the template
/// builds nothing, and `construction_count` reports how many concrete models
/// have been resolved from it.
#[derive(Debug)]
pub struct ModelTemplate {
    input_dim: usize,
    layers: Vec<(Param<usize>, Activation)>,
    loss: LossKind,
    lr: Param<f32>,
    init_seed: u64,
    spaces: Vec<(String, SearchSpace)>,
    counter: AtomicU64,
}

impl ModelTemplate {
    pub fn new(input_dim: usize, loss: LossKind, init_seed: u64) -> Self {
        ModelTemplate {
            input_dim,
            layers: Vec::new(),
            loss,
            lr: Param::Fixed(0.01),
            init_seed,
            spaces: Vec::new(),
            counter: AtomicU64::new(0),
        }
    }

    pub fn layer(mut self, width: usize, activation: Activation) -> Self {
        self.layers.push((Param::Fixed(width), activation));
        self
    }

    /// A layer whose width comes from a search space declared here.
    pub fn layer_space(mut self, name: &str, space: SearchSpace, activation: Activation) -> Self {
        self.spaces.push((name.to_string(), space));
        self.layers.push((Param::Space(name.to_string()), activation));
        self
    }

    pub fn lr(mut self, lr: f32) -> Self {
        self.lr = Param::Fixed(lr);
        self
    }

    pub fn lr_space(mut self, name: &str, space: SearchSpace) -> Self {
        self.spaces.push((name.to_string(), space));
        self.lr = Param::Space(name.to_string());
        self
    }

    /// Declare a space that no template leaf consumes. The sampled value still
    /// appears in every trial config, for objectives that read it directly.
    pub fn space(mut self, name: &str, space: SearchSpace) -> Self {
        self.spaces.push((name.to_string(), space));
        self
    }

    /// Declared spaces in declaration order.
    pub fn spaces(&self) -> &[(String, SearchSpace)] {
        &self.spaces
    }

    /// How many concrete models have been resolved from this template.
    pub fn construction_count(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        for (i, (name, space)) in self.spaces.iter().enumerate() {
            space.validate(name)?;
            if self.spaces[..i].iter().any(|(n, _)| n == name) {
                return Err(HpoError::DuplicateSpace(name.clone()));
            }
        }
        let declared = |n: &str| self.spaces.iter().any(|(name, _)| name == n);
        for (param, _) in &self.layers {
            if let Param::Space(n) = param {
                if !declared(n) {
                    return Err(HpoError::UnknownSpace(n.clone()));
                }
            }
        }
        if let Param::Space(n) = &self.lr {
            if !declared(n) {
                return Err(HpoError::UnknownSpace(n.clone()));
            }
        }
        Ok(())
    }

    /// Instantiate the template against one configuration. Every space leaf is
    /// replaced by its config value, the resulting spec is validated, and the
    /// construction counter moves by exactly one, only on full success.
    pub fn resolve(&self, config: &Config) -> Result<(ModelSpec, SgdConfig), HpoError> {
        self.validate()?;
        for (name, _) in &self.spaces {
            if !config.contains_key(name) {
                return Err(HpoError::MissingKey(name.clone()));
            }
        }
        let lookup = |name: &str| -> &SpaceValue { &config[name] };

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut input_dim = self.input_dim;
        for (param, activation) in &self.layers {
            let width = match param {
                Param::Fixed(w) => *w,
                Param::Space(name) => {
                    lookup(name).as_width().map_err(|reason| HpoError::BadValue {
                        name: name.clone(),
                        reason,
                    })?
                }
            };
            layers.push(LayerSpec {
                input_dim,
                output_dim: width,
                activation: *activation,
            });
            input_dim = width;
        }
        let lr = match &self.lr {
            Param::Fixed(lr) => *lr,
            Param::Space(name) => lookup(name).as_lr().map_err(|reason| HpoError::BadValue {
                name: name.clone(),
                reason,
            })?,
        };
        let spec = ModelSpec { layers, loss: self.loss };
        spec.validate().map_err(|e| HpoError::BadValue {
            name: "<resolved spec>".into(),
            reason: e.to_string(),
        })?;
        self.counter.fetch_add(1, Ordering::Relaxed);
        Ok((spec, SgdConfig { lr, seed: self.init_seed }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    Random { seed: u64 },
    Grid,
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub ordinal: usize,
    pub config: Config,
    /// The objective value; None records a failed trial (error or non-finite
    /// objective), which can never be best.
    pub result: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Study {
    pub direction: Direction,
    pub budget: usize,
    pub sampler: Sampler,
    pub trials: Vec<Trial>,
    pub best: Option<usize>,
}

impl Study {
    pub fn new(direction: Direction, budget: usize, sampler: Sampler) -> Self {
        Study { direction, budget, sampler, trials: Vec::new(), best: None }
    }

    pub fn best_trial(&self) -> Option<&Trial> {
        self.best.and_then(|b| self.trials.iter().find(|t| t.ordinal == b))
    }

    /// Serialize to the stable wire shape:
    /// `{"direction":..., "trials":[{"ordinal":n,"config":{...},"result":f|"failed"}], "best":n}`.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"direction\":");
        out.push_str(match self.direction {
            Direction::Minimize => "\"minimize\"",
            Direction::Maximize => "\"maximize\"",
        });
        out.push_str(",\"trials\":[");
        for (i, t) in self.trials.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{{\"ordinal\":{},\"config\":{{", t.ordinal));
            for (j, (k, v)) in t.config.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key encodes"));
                out.push(':');
                out.push_str(&v.to_json());
            }
            out.push_str("},\"result\":");
            match t.result {
                Some(v) => out.push_str(&serde_json::to_string(&v).expect("finite result")),
                None => out.push_str("\"failed\""),
            }
            out.push('}');
        }
        out.push_str("],\"best\":");
        match self.best {
            Some(n) => out.push_str(&n.to_string()),
            None => out.push_str("null"),
        }
        out.push('}');
        out
    }
}

/// Run `study.budget` trials sequentially. Each trial samples or takes the
/// next grid configuration, resolves the template (a resolution failure marks
/// the trial failed and moves on), and scores it with `objective`. An error
/// or non-finite objective also marks the trial failed. `best` is the argbest
/// over completed trials in `direction`, ties broken by lowest ordinal.
pub fn run_study(
    template: &ModelTemplate,
    objective: &mut dyn FnMut(&ModelSpec, &SgdConfig, &Config) -> Result<f64, String>,
    mut study: Study,
) -> Result<Study, HpoError> {
    if study.budget < 1 {
        return Err(HpoError::BadStudy("budget must be at least 1".into()));
    }
    template.validate()?;

    let configs: Vec<Config> = match &study.sampler {
        Sampler::Grid => {
            let mut grid = grid_enumerate(template.spaces())?;
            grid.truncate(study.budget);
            grid
        }
        Sampler::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..study.budget)
                .map(|_| {
                    let mut config = Config::new();
                    for (name, space) in template.spaces() {
                        config.insert(name.clone(), space.sample(&mut rng));
                    }
                    config
                })
                .collect()
        }
    };

    for (ordinal, config) in configs.into_iter().enumerate() {
        let result = match template.resolve(&config) {
            Ok((spec, sgd)) => match objective(&spec, &sgd, &config) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(v) => {
                    debug!("trial {ordinal}: non-finite objective {v}, marked failed");
                    None
                }
                Err(e) => {
                    debug!("trial {ordinal}: objective failed: {e}");
                    None
                }
            },
            Err(e) => {
                debug!("trial {ordinal}: resolution failed: {e}");
                None
            }
        };
        let better = match (result, study.best.map(|b| &study.trials[b])) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(v), Some(best)) => {
                let bv = best.result.expect("best trial always has a result");
                match study.direction {
                    Direction::Minimize => v < bv,
                    Direction::Maximize => v > bv,
                }
            }
        };
        if better {
            study.best = Some(ordinal);
        }
        study.trials.push(Trial { ordinal, config, result });
    }
    if study.best.is_none() {
        return Err(HpoError::AllTrialsFailed);
    }
    info!(
        "study finished: {} trials, best ordinal {:?}",
        study.trials.len(),
        study.best
    );
    Ok(study)
}

/// Tuned fit: hold out the last 20% of rows (by global order) as the
/// validation fold, score each trial by validation loss after fitting on the
/// first 80%, then refit the best configuration on all rows. Trials and the
/// refit run in local mode, one at a time.
pub fn auto_estimator_fit(
    template: &ModelTemplate,
    data: &Shards<RecordBatch>,
    feature_cols: &[&str],
    label_cols: &[&str],
    fitcfg: &FitConfig,
    study: Study,
) -> Result<(Estimator, TrainReport, Study), HpoError> {
    let all = data.collect()?;
    let rows = all.len();
    let split = rows * 4 / 5;
    if split == 0 || split == rows {
        return Err(HpoError::BadStudy(format!(
            "{rows} rows cannot be split 80/20 into non-empty train and validation folds"
        )));
    }
    let train = Shards::from_batch(all.slice(0..split), 1)?;
    let val = Shards::from_batch(all.slice(split..rows), 1)?;

    let mut objective = |spec: &ModelSpec, sgd: &SgdConfig, _config: &Config| {
        let mut est = Estimator::from_model(spec.clone(), *sgd, Backend::Local)
            .map_err(|e| e.to_string())?;
        est.fit(&train, feature_cols, label_cols, fitcfg)
            .map_err(|e| e.to_string())?;
        let loss = est
            .validation_loss(&val, feature_cols, label_cols)
            .map_err(|e| e.to_string())?;
        Ok(loss as f64)
    };
    let study = run_study(template, &mut objective, study)?;

    let best = study.best_trial().expect("run_study guarantees a best trial");
    let (spec, sgd) = template.resolve(&best.config)?;
    let full = Shards::from_batch(all, 1)?;
    let mut est = Estimator::from_model(spec, sgd, Backend::Local)?;
    let report = est.fit(&full, feature_cols, label_cols, fitcfg)?;
    Ok((est, report, study))
}
