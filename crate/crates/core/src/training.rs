//! Training loop: teachers on disjoint shards, private aggregation of their
//! perturbations, generator updates toward the aggregated targets.
//!
//! Random streams (see [`crate::seed`]): `Partition` shuffles the shards,
//! `GeneratorInit` / `TeacherInit` (index = teacher) initialize weights,
//! `TeacherBatch` (index = teacher) samples real batches, `Latent` draws
//! labels and noise for fakes, `Projection` (index = query number) seeds each
//! record's projection, `AggregationNoise` drives Confident-GNMax and
//! `ClassRatio` the Laplace noise on class counts.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::accountant::{
    laplace_rdp_or_dp, FinalGuarantee, LedgerEntry, PrivacyLedger, PrivacyReport, TopCounts,
};
use crate::aggregator::{dp_grad_agg, Aggregated, BinGrid, GnmaxParams};
use crate::data::TabularDataset;
use crate::error::{param, Error, Result};
use crate::neural::{
    adversarial_perturbation, generator_step, one_hot, teacher_step, Adam, CondInput, MlpParams,
    Sample,
};
use crate::projection::make_projection;
use crate::seed::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_teachers: usize,
    pub batch_size: usize,
    pub bins: usize,
    pub clip: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub threshold: f64,
    /// Capped at the feature count.
    pub projection_dims: usize,
    pub learning_rate: f64,
    /// Generator learning rate; `None` uses `learning_rate`.
    pub generator_learning_rate: Option<f64>,
    pub iterations: usize,
    /// Total ε budget, Laplace class-ratio cost included. May be infinite.
    pub epsilon_target: f64,
    pub delta: f64,
    pub seed: u64,
    pub conditional: bool,
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub teacher_steps: usize,
    pub class_ratio_epsilon: f64,
    /// Checkpoint period in iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_teachers: 10,
            batch_size: 16,
            bins: 10,
            clip: 1e-4,
            sigma1: 8.0,
            sigma2: 4.0,
            threshold: 0.5,
            projection_dims: 4,
            learning_rate: 1e-3,
            generator_learning_rate: Some(5e-5),
            iterations: 1000,
            epsilon_target: f64::INFINITY,
            delta: 1e-5,
            seed: 0,
            conditional: true,
            noise_dim: 16,
            hidden: vec![64, 64],
            teacher_steps: 1,
            class_ratio_epsilon: 0.01,
            checkpoint_every: 0,
        }
    }
}

const PRESETS: &[&str] = &["desk", "mnist-eps1", "mnist-eps10", "credit"];

impl TrainConfig {
    /// Named configurations. `desk` is the default; the others carry the
    /// large-ensemble settings and need far more data and compute.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "desk" => base,
            "mnist-eps1" => Self {
                generator_learning_rate: None,
                num_teachers: 4000,
                batch_size: 15,
                sigma1: 3000.0,
                sigma2: 1000.0,
                projection_dims: 10,
                epsilon_target: 1.0,
                iterations: 20_000,
                ..base
            },
            "mnist-eps10" => Self {
                generator_learning_rate: None,
                num_teachers: 2000,
                batch_size: 30,
                sigma1: 600.0,
                sigma2: 100.0,
                projection_dims: 10,
                epsilon_target: 10.0,
                iterations: 20_000,
                ..base
            },
            "credit" => Self {
                generator_learning_rate: None,
                num_teachers: 2100,
                batch_size: 32,
                sigma1: 1500.0,
                sigma2: 600.0,
                projection_dims: 5,
                epsilon_target: 1.0,
                iterations: 20_000,
                ..base
            },
            other => {
                return param(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                ))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_teachers", self.num_teachers),
            ("batch_size", self.batch_size),
            ("bins", self.bins),
            ("projection_dims", self.projection_dims),
            ("noise_dim", self.noise_dim),
            ("teacher_steps", self.teacher_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return param(format!("{name} must be positive"));
            }
        }
        if self.num_teachers < 2 {
            return param("at least two teachers are required");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return param(format!("clip must be positive and finite, got {}", self.clip));
        }
        for (name, s) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !(s >= 0.0 && s.is_finite()) {
                return param(format!("{name} must be finite and >= 0, got {s}"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return param(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return param(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.generator_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return param(format!("generator_learning_rate must be positive, got {lr}"));
            }
        }
        if !(self.epsilon_target > 0.0) {
            return param(format!("epsilon_target must be positive, got {}", self.epsilon_target));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return param(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.conditional && !(self.class_ratio_epsilon > 0.0) {
            return param("class_ratio_epsilon must be positive");
        }
        if self.hidden.contains(&0) {
            return param("hidden layer sizes must be positive");
        }
        Ok(())
    }

    /// Flat `key = value` text. Blank lines and `#` comments are ignored; a
    /// `preset` key selects the starting values regardless of its position.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                row: Some(i + 1),
                column: None,
                message: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, name)) => Self::preset(name)?,
            None => Self::default(),
        };
        for (line, key, value) in &pairs {
            if key != "preset" {
                cfg.set(key, value).map_err(|e| Error::Parse {
                    row: Some(*line),
                    column: Some(key.clone()),
                    message: e.to_string(),
                })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parameter(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "num_teachers" => self.num_teachers = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "bins" => self.bins = num(key, value)?,
            "clip" => self.clip = num(key, value)?,
            "sigma1" => self.sigma1 = num(key, value)?,
            "sigma2" => self.sigma2 = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "projection_dims" => self.projection_dims = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "generator_learning_rate" => {
                self.generator_learning_rate = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "iterations" => self.iterations = num(key, value)?,
            "epsilon_target" => self.epsilon_target = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "conditional" => self.conditional = num(key, value)?,
            "noise_dim" => self.noise_dim = num(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| num(key, s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "teacher_steps" => self.teacher_steps = num(key, value)?,
            "class_ratio_epsilon" => self.class_ratio_epsilon = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return param(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let glr = self.generator_learning_rate.map_or("none".to_string(), |v| v.to_string());
        let rows: [(&str, String); 20] = [
            ("num_teachers", self.num_teachers.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("bins", self.bins.to_string()),
            ("clip", self.clip.to_string()),
            ("sigma1", self.sigma1.to_string()),
            ("sigma2", self.sigma2.to_string()),
            ("threshold", self.threshold.to_string()),
            ("projection_dims", self.projection_dims.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("generator_learning_rate", glr),
            ("iterations", self.iterations.to_string()),
            ("epsilon_target", self.epsilon_target.to_string()),
            ("delta", self.delta.to_string()),
            ("seed", self.seed.to_string()),
            ("conditional", self.conditional.to_string()),
            ("noise_dim", self.noise_dim.to_string()),
            ("hidden", hidden.join(",")),
            ("teacher_steps", self.teacher_steps.to_string()),
            ("class_ratio_epsilon", self.class_ratio_epsilon.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Split `0..len` into `n` disjoint shards whose sizes differ by at most one.
///
/// Indices are shuffled and dealt round-robin. With `labels`, each class is
/// shuffled separately and the classes are dealt one after another, so every
/// shard receives each class whenever the class has at least `n` records.
pub fn partition(len: usize, labels: Option<&[usize]>, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return param("number of shards must be positive");
    }
    if n > len {
        return param(format!("cannot split {len} records into {n} shards"));
    }
    let mut rng = stream_rng(seed, Stream::Partition, 0);
    let order: Vec<usize> = match labels {
        None => {
            let mut idx: Vec<usize> = (0..len).collect();
            idx.shuffle(&mut rng);
            idx
        }
        Some(labels) => {
            if labels.len() != len {
                return param(format!("{} labels for {len} records", labels.len()));
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let mut by_class = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                by_class[l].push(i);
            }
            by_class
                .into_iter()
                .flat_map(|mut group| {
                    group.shuffle(&mut rng);
                    group
                })
                .collect()
        }
    };
    let mut shards = vec![Vec::with_capacity(len / n + 1); n];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % n].push(idx);
    }
    Ok(shards)
}

fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clamp noisy counts at zero and normalize. Falls back to uniform when
/// nothing survives the clamp; the flag reports the fallback.
pub fn ratio_from_noisy_counts(noisy: &[f64]) -> (Vec<f64>, bool) {
    let clamped: Vec<f64> = noisy.iter().map(|c| c.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total > 0.0 && total.is_finite() {
        (clamped.iter().map(|c| c / total).collect(), false)
    } else {
        let n = noisy.len().max(1) as f64;
        (vec![1.0 / n; noisy.len()], true)
    }
}

/// Class frequencies released with Laplace noise of scale `1/ε` on each
/// count. The cost is appended to `ledger` as entry `class-ratio`.
pub fn noisy_class_ratio<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    epsilon: f64,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return param("class ratio needs at least one label");
    }
    if classes == 0 {
        return param("class ratio needs at least one class");
    }
    let entry = laplace_rdp_or_dp("class-ratio", epsilon)?;
    let mut counts = vec![0.0; classes];
    for &l in labels {
        if l >= classes {
            return param(format!("label {l} outside 0..{classes}"));
        }
        counts[l] += 1.0;
    }
    let scale = 1.0 / epsilon;
    let noisy: Vec<f64> = counts.iter().map(|c| c + laplace(rng, scale)).collect();
    let (ratios, fallback) = ratio_from_noisy_counts(&noisy);
    if fallback {
        log::warn!("all noisy class counts were non-positive; using uniform class ratios");
    }
    ledger.append(entry);
    Ok(ratios)
}

/// One teacher's slice of the training data. Only its owner can read it.
#[derive(Debug, Clone)]
pub struct Shard {
    indices: Vec<usize>,
    samples: Vec<Sample>,
    accessed: BTreeSet<usize>,
}

impl Shard {
    fn new(dataset: &TabularDataset, indices: Vec<usize>, label_dim: usize) -> Self {
        let samples = indices
            .iter()
            .map(|&i| Sample {
                x: dataset.features()[i].clone(),
                label: match (dataset.labels(), label_dim) {
                    (Some(l), c) if c > 0 => one_hot(l[i], c),
                    _ => Vec::new(),
                },
            })
            .collect();
        Self {
            indices,
            samples,
            accessed: BTreeSet::new(),
        }
    }

    /// Dataset row indices held by this shard.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Dataset row indices read so far.
    pub fn accessed(&self) -> &BTreeSet<usize> {
        &self.accessed
    }

    fn batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<Sample> {
        let take = size.min(self.samples.len());
        rand::seq::index::sample(rng, self.samples.len(), take)
            .into_iter()
            .map(|j| {
                self.accessed.insert(self.indices[j]);
                self.samples[j].clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub params: MlpParams,
    adam: Adam,
    shard: Shard,
    rng: ChaCha8Rng,
}

impl Teacher {
    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    fn step_and_perturb(&mut self, fakes: &[Sample], cfg: &TrainConfig) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut loss = 0.0;
        for _ in 0..cfg.teacher_steps {
            let real = self.shard.batch(cfg.batch_size, &mut self.rng);
            loss = teacher_step(&mut self.params, &mut self.adam, &real, fakes)?;
        }
        let perturbations = fakes
            .iter()
            .map(|f| adversarial_perturbation(&self.params, &f.x, &f.label, cfg.clip))
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, perturbations))
    }
}

#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    teachers: Vec<Teacher>,
}

impl TeacherEnsemble {
    pub fn new(dataset: &TabularDataset, cfg: &TrainConfig, label_dim: usize) -> Result<Self> {
        let labels = if label_dim > 0 { dataset.labels() } else { None };
        let shards = partition(dataset.len(), labels, cfg.num_teachers, cfg.seed)?;
        let teachers = shards
            .into_iter()
            .enumerate()
            .map(|(t, indices)| {
                let mut init = stream_rng(cfg.seed, Stream::TeacherInit, t as u64);
                let params =
                    MlpParams::discriminator(dataset.num_features(), &cfg.hidden, label_dim, &mut init)?;
                Ok(Teacher {
                    adam: Adam::new(params.num_params(), cfg.learning_rate),
                    params,
                    shard: Shard::new(dataset, indices, label_dim),
                    rng: stream_rng(cfg.seed, Stream::TeacherBatch, t as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { teachers })
    }

    pub fn teachers(&self) -> &[Teacher] {
        &self.teachers
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// Every teacher trains on its own shard against `fakes`, then scores
    /// each fake. Returns the mean teacher loss and `[teacher][fake]`
    /// perturbations.
    fn round(&mut self, fakes: &[Sample], cfg: &TrainConfig) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
        let results = self
            .teachers
            .par_iter_mut()
            .map(|t| t.step_and_perturb(fakes, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mean_loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        Ok((mean_loss, results.into_iter().map(|r| r.1).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub generator_loss: f64,
    pub teacher_loss: f64,
    /// Fraction of projected dimensions that passed the threshold check.
    pub pass_rate: f64,
    pub mean_vote_gap: f64,
    pub epsilon: f64,
}

impl IterationMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "iteration={} generator_loss={} teacher_loss={} pass_rate={} mean_vote_gap={} epsilon={}",
            self.iteration,
            self.generator_loss,
            self.teacher_loss,
            self.pass_rate,
            self.mean_vote_gap,
            self.epsilon
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    IterationCap,
    Budget,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub iteration: usize,
    pub ledger: PrivacyLedger,
    /// Current guarantee. Its ε is the running maximum of the ledger's
    /// converted ε, which is still a valid bound and never decreases.
    pub guarantee: FinalGuarantee,
    pub metrics: Vec<IterationMetrics>,
    /// Empty for unconditional runs.
    pub class_ratios: Vec<f64>,
    pub stop_reason: Option<StopReason>,
}

/// What the generator update of one iteration saw.
#[derive(Debug, Clone)]
pub struct IterationRecord<'a> {
    pub latents: &'a [CondInput],
    pub fakes: &'a [Vec<f64>],
    pub aggregated: &'a [Aggregated],
    pub targets: &'a [Vec<f64>],
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_start(&mut self, _state: &RunState) -> Result<()> {
        Ok(())
    }
    fn on_iteration(
        &mut self,
        _state: &RunState,
        _record: &IterationRecord<'_>,
        _generator: &MlpParams,
    ) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _iteration: usize, _generator: &MlpParams) -> Result<()> {
        Ok(())
    }
    /// Called with the last good generator before a failure is returned.
    fn on_abort(&mut self, _state: &RunState, _generator: &MlpParams, _error: &Error) -> Result<()> {
        Ok(())
    }
}

struct NoObserver;
impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub generator: MlpParams,
    pub state: RunState,
    pub report: PrivacyReport,
}

fn worst_case_iteration(cfg: &TrainConfig, k: usize) -> Result<Vec<LedgerEntry>> {
    let mut entries = Vec::with_capacity(cfg.batch_size * (k + 1));
    let no_gap = TopCounts::new(0, 0, 0)?;
    for _ in 0..cfg.batch_size {
        entries.push(LedgerEntry::gaussian_threshold("pending", cfg.sigma1, k as u32)?);
        for _ in 0..k {
            entries.push(LedgerEntry::gnmax("pending", cfg.sigma2, no_gap)?);
        }
    }
    Ok(entries)
}

fn sample_latents<R: Rng + ?Sized>(
    count: usize,
    noise_dim: usize,
    ratios: Option<&WeightedIndex<f64>>,
    classes: usize,
    rng: &mut R,
) -> Result<(Vec<CondInput>, Vec<Option<usize>>)> {
    let mut latents = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = ratios.map(|w| w.sample(rng));
        let z: Vec<f64> = (0..noise_dim).map(|_| rng.sample(StandardNormal)).collect();
        let cond = label.map_or_else(Vec::new, |l| one_hot(l, classes));
        latents.push(CondInput::new(z, cond)?);
        labels.push(label);
    }
    Ok((latents, labels))
}

pub fn train(config: &TrainConfig, dataset: &TabularDataset) -> Result<TrainResult> {
    train_with(config, dataset, &mut NoObserver)
}

/// Run training. Stops at the iteration cap or before the first iteration
/// whose worst-case cost would push ε past the target.
pub fn train_with(
    config: &TrainConfig,
    dataset: &TabularDataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainResult> {
    config.validate()?;
    if dataset.is_empty() {
        return param("training set is empty");
    }
    if dataset.scaling().is_none() {
        log::warn!("training on unscaled features; generator outputs lie in (-1, 1)");
    }
    let d = dataset.num_features();
    if d == 0 {
        return param("training set has no feature columns");
    }
    let classes = if config.conditional {
        let c = dataset.num_classes();
        if c == 0 {
            return param("conditional training needs a label column");
        }
        c
    } else {
        0
    };
    let k = config.projection_dims.min(d);
    if k < config.projection_dims {
        log::warn!("projection_dims {} exceeds {d} features; using {k}", config.projection_dims);
    }

    let mut ledger = PrivacyLedger::new();
    let class_ratios = if config.conditional {
        let pending = laplace_rdp_or_dp("class-ratio", config.class_ratio_epsilon)?;
        let cost = ledger.guarantee_after(&[pending], config.delta)?;
        if cost.epsilon > config.epsilon_target {
            return Err(Error::BudgetExhausted(format!(
                "class-ratio release alone costs ε={} > target {}",
                cost.epsilon, config.epsilon_target
            )));
        }
        let mut rng = stream_rng(config.seed, Stream::ClassRatio, 0);
        let labels = dataset.labels().expect("checked above");
        noisy_class_ratio(labels, classes, config.class_ratio_epsilon, &mut ledger, &mut rng)?
    } else {
        Vec::new()
    };
    let weights = if config.conditional {
        Some(WeightedIndex::new(&class_ratios).map_err(|e| Error::Internal(e.to_string()))?)
    } else {
        None
    };

    let mut generator = MlpParams::generator(
        config.noise_dim,
        &config.hidden,
        d,
        classes,
        &mut stream_rng(config.seed, Stream::GeneratorInit, 0),
    )?;
    let mut gen_adam = Adam::new(
        generator.num_params(),
        config.generator_learning_rate.unwrap_or(config.learning_rate),
    );
    let mut ensemble = TeacherEnsemble::new(dataset, config, classes)?;
    let grid = BinGrid::new(config.clip, config.bins)?;
    let gnmax = GnmaxParams::new(config.threshold, config.sigma1, config.sigma2)?;
    let mut latent_rng = stream_rng(config.seed, Stream::Latent, 0);
    let mut noise_rng = stream_rng(config.seed, Stream::AggregationNoise, 0);
    let worst_case = worst_case_iteration(config, k)?;

    let mut state = RunState {
        iteration: 0,
        guarantee: ledger.guarantee(config.delta)?,
        ledger,
        metrics: Vec::new(),
        class_ratios,
        stop_reason: None,
    };
    observer.on_start(&state)?;
    let mut query = 0u64;

    while state.iteration < config.iterations {
        let projected = state.ledger.guarantee_after(&worst_case, config.delta)?;
        if projected.epsilon > config.epsilon_target {
            state.stop_reason = Some(StopReason::Budget);
            break;
        }
        let before = generator.clone();
        let step = (|| -> Result<()> {
            let (latents, labels) =
                sample_latents(config.batch_size, config.noise_dim, weights.as_ref(), classes, &mut latent_rng)?;
            let fakes = latents
                .iter()
                .map(|c| generator.forward(&c.z, &c.label))
                .collect::<Result<Vec<_>>>()?;
            let fake_samples: Vec<Sample> = fakes
                .iter()
                .zip(&labels)
                .map(|(x, l)| Sample {
                    x: x.clone(),
                    label: l.map_or_else(Vec::new, |l| one_hot(l, classes)),
                })
                .collect();
            let (teacher_loss, perturbations) = ensemble.round(&fake_samples, config)?;

            let mut aggregated = Vec::with_capacity(fakes.len());
            let mut targets = Vec::with_capacity(fakes.len());
            for (j, x) in fakes.iter().enumerate() {
                let votes: Vec<Vec<f64>> = perturbations.iter().map(|p| p[j].clone()).collect();
                let proj = make_projection(d, k, derive_seed(config.seed, Stream::Projection, query))?;
                let agg = dp_grad_agg(
                    &votes,
                    &grid,
                    &proj,
                    &gnmax,
                    &mut state.ledger,
                    &format!("q{query}"),
                    &mut noise_rng,
                )?;
                query += 1;
                targets.push(x.iter().zip(&agg.gradient).map(|(a, b)| a + b).collect::<Vec<f64>>());
                aggregated.push(agg);
            }
            let generator_loss = generator_step(&mut generator, &mut gen_adam, &latents, &targets)?;

            let dims = (aggregated.len() * k) as f64;
            let passed: usize = aggregated.iter().map(|a| a.outcome.passed()).sum();
            let gap = aggregated.iter().map(|a| a.outcome.mean_vote_gap()).sum::<f64>() / aggregated.len() as f64;
            let mut guarantee = state.ledger.guarantee(config.delta)?;
            guarantee.epsilon = guarantee.epsilon.max(state.guarantee.epsilon);
            state.guarantee = guarantee;
            state.iteration += 1;
            state.metrics.push(IterationMetrics {
                iteration: state.iteration,
                generator_loss,
                teacher_loss,
                pass_rate: passed as f64 / dims,
                mean_vote_gap: gap,
                epsilon: state.guarantee.epsilon,
            });
            let record = IterationRecord {
                latents: &latents,
                fakes: &fakes,
                aggregated: &aggregated,
                targets: &targets,
            };
            observer.on_iteration(&state, &record, &generator)?;
            Ok(())
        })();
        if let Err(e) = step {
            if matches!(e, Error::Numeric(_)) {
                observer.on_abort(&state, &before, &e)?;
            }
            return Err(e);
        }
        if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
            observer.on_checkpoint(state.iteration, &generator)?;
        }
    }
    if state.stop_reason.is_none() {
        state.stop_reason = Some(StopReason::IterationCap);
    }
    let report = state.ledger.report(config.delta)?;
    Ok(TrainResult {
        generator,
        state,
        report,
    })
}

/// Records drawn from a trained generator, in scaled feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

/// Sample `count` records. Conditional generators need `class_ratios`
/// (one weight per class, summing to 1); labels are drawn from them.
pub fn generate(
    generator: &MlpParams,
    count: usize,
    class_ratios: Option<&[f64]>,
    seed: u64,
) -> Result<SyntheticBatch> {
    let classes = generator.label_dim();
    let weights = match (classes, class_ratios) {
        (0, None) => None,
        (0, Some(_)) => return param("unconditional generator takes no class ratios"),
        (_, None) => return param("conditional generator needs class ratios"),
        (c, Some(r)) => {
            if r.len() != c {
                return param(format!("{} class ratios for {c} classes", r.len()));
            }
            let total: f64 = r.iter().sum();
            if r.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return param("class ratios must be non-negative and sum to 1");
            }
            Some(WeightedIndex::new(r).map_err(|e| Error::Parameter(e.to_string()))?)
        }
    };
    let mut rng = stream_rng(seed, Stream::Generate, 0);
    let (latents, labels) = sample_latents(count, generator.input_dim(), weights.as_ref(), classes, &mut rng)?;
    let features = latents
        .iter()
        .map(|c| generator.forward(&c.z, &c.label))
        .collect::<Result<Vec<_>>>()?;
    let labels = weights.map(|_| labels.into_iter().map(|l| l.expect("conditional")).collect());
    Ok(SyntheticBatch { features, labels })
}
