//! Adam, single- and multi-task stages, stage chaining with optimizer reset,
//! subsampling and random restarts.
//!
//! A [`TrainingPlan`] is an ordered list of [`Stage`]s. Weights always carry
//! over between stages; the optimizer state is zeroed at each boundary when
//! `reset_optimizer_between_stages` is set. A stage with several tasks takes
//! one batch from each task in declaration order, round-robin, with the same
//! span loss for all of them.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate, DecodeOptions};
use crate::harness::metrics::{Metric, MetricReport};
use crate::model::{EncodedExample, ModelParams, SpanModel};
use crate::reformulation::{AnswerSchema, SpanExample};
use crate::span_decoder::DecodeMode;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to zero over the stage.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub subsample_n: Option<usize>,
    pub restarts: usize,
    /// Total optimizer steps of a stage; defaults to the sum over tasks of
    /// `epochs × batches per epoch`.
    pub max_steps: Option<usize>,
    /// Global-norm gradient clipping threshold.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    /// Evaluate on dev every this many epochs of a task; 0 disables.
    pub eval_every: usize,
    /// End the stage once the dev metric of every task reaches this value.
    pub stop_at_metric: Option<f64>,
    pub decode_mode: DecodeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 5,
            learning_rate: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            subsample_n: None,
            restarts: 1,
            max_steps: None,
            grad_clip: None,
            schedule: LrSchedule::Constant,
            eval_every: 1,
            stop_at_metric: None,
            decode_mode: DecodeMode::Independent,
        }
    }
}

/// Learning rates tried by a coarse sweep.
pub const LEARNING_RATE_GRID: [f64; 3] = [3e-4, 1e-3, 3e-3];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-stage overrides of [`RunConfig`] fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub subsample_n: Option<usize>,
    pub max_steps: Option<usize>,
    pub grad_clip: Option<f64>,
    pub schedule: Option<LrSchedule>,
    pub stop_at_metric: Option<f64>,
}

impl RunOverrides {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if self.subsample_n.is_some() {
            c.subsample_n = self.subsample_n;
        }
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
        if let Some(v) = self.schedule {
            c.schedule = v;
        }
        if self.stop_at_metric.is_some() {
            c.stop_at_metric = self.stop_at_metric;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub tasks: Vec<String>,
    #[serde(default)]
    pub overrides: RunOverrides,
}

impl Stage {
    pub fn new<S: Into<String>>(tasks: impl IntoIterator<Item = S>) -> Self {
        Self {
            tasks: tasks.into_iter().map(Into::into).collect(),
            overrides: RunOverrides::default(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub stages: Vec<Stage>,
    #[serde(default = "default_true")]
    pub reset_optimizer_between_stages: bool,
}

impl TrainingPlan {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self {
            stages,
            reset_optimizer_between_stages: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("training plan has no stages".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.tasks.is_empty() {
                return Err(Error::Config(format!("stage {i} has no tasks")));
            }
            let mut seen = std::collections::HashSet::new();
            for t in &stage.tasks {
                if !seen.insert(t) {
                    return Err(Error::Config(format!("task {t} repeated in stage {i}")));
                }
            }
        }
        Ok(())
    }
}

/// A named dataset with its dev split and scoring rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub train: Vec<SpanExample>,
    pub dev: Vec<SpanExample>,
    pub metric: Metric,
    pub schema: AnswerSchema,
    /// Overrides the run's epoch count for this task.
    pub epochs: Option<usize>,
}

pub type TaskRegistry = HashMap<String, Task>;

/// First and second Adam moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: &EncoderConfig) -> Self {
        Self {
            first_moment: ModelParams::zeros(config),
            second_moment: ModelParams::zeros(config),
            step: 0,
        }
    }

    pub fn is_zeroed(&self) -> bool {
        self.step == 0
            && self
                .first_moment
                .tensors()
                .iter()
                .chain(self.second_moment.tensors().iter())
                .all(|(_, _, t)| t.iter().all(|&v| v == 0.0))
    }
}

/// Bias-corrected Adam update of one tensor at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = beta1 * first[i] + (1.0 - beta1) * g;
        second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// One Adam step over every tensor. Fails without touching `params` when a
/// gradient is not finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    config: &RunConfig,
    learning_rate: f64,
) -> Result<()> {
    let named = grads.tensors();
    if let Some((name, _, _)) = named.iter().find(|(_, _, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(name.clone()));
    }
    let scale = match config.grad_clip {
        Some(max_norm) => {
            let norm = named
                .iter()
                .flat_map(|(_, _, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step;
    let grads_data: Vec<Vec<f64>> = named
        .iter()
        .map(|(_, _, g)| g.iter().map(|v| v * scale).collect())
        .collect();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads_data)
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut())
    {
        adam_update(p, g, m, v, t, learning_rate, config.beta1, config.beta2, config.epsilon);
    }
    Ok(())
}

/// splitmix64 finalizer; derives independent RNG streams from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `min(n, len)` distinct examples chosen without replacement, kept in their
/// original order.
pub fn subsample<T: Clone>(dataset: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= dataset.len() {
        return dataset.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| dataset[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub task: usize,
    pub indices: Vec<usize>,
    /// Zero-based epoch of `task` this batch belongs to.
    pub epoch: usize,
    /// True for the last batch of the task's epoch.
    pub ends_epoch: bool,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(len: usize, seed: u64) -> Self {
        let mut c = Self {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
    }
}

/// Endless round-robin batch stream: one batch per task in declaration
/// order. Each task reshuffles independently when its epoch runs out.
pub struct MultitaskBatcher {
    cursors: Vec<Cursor>,
    batch_size: usize,
    next_task: usize,
}

impl MultitaskBatcher {
    pub fn new(task_sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if task_sizes.is_empty() || task_sizes.contains(&0) || batch_size == 0 {
            return Err(Error::Config("multitask batching needs non-empty tasks and batch_size >= 1".into()));
        }
        Ok(Self {
            cursors: task_sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| Cursor::new(n, derive_seed(seed, i as u64)))
                .collect(),
            batch_size,
            next_task: 0,
        })
    }
}

impl Iterator for MultitaskBatcher {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let task = self.next_task;
        self.next_task = (self.next_task + 1) % self.cursors.len();
        let c = &mut self.cursors[task];
        let end = (c.pos + self.batch_size).min(c.order.len());
        let batch = Batch {
            task,
            indices: c.order[c.pos..end].to_vec(),
            epoch: c.epoch,
            ends_epoch: end == c.order.len(),
        };
        c.pos = end;
        if c.pos == c.order.len() {
            c.pos = 0;
            c.epoch += 1;
            c.shuffle();
        }
        Some(batch)
    }
}

pub fn multitask_batches(task_sizes: &[usize], batch_size: usize, seed: u64) -> Result<MultitaskBatcher> {
    MultitaskBatcher::new(task_sizes, batch_size, seed)
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub task: String,
    pub epoch: usize,
    pub step: usize,
    /// Mean per-example loss over the epoch.
    pub loss: f64,
    pub metric: Option<f64>,
    pub metric_name: Option<Metric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub steps: usize,
    pub records: Vec<EpochRecord>,
    /// Examples dropped because their gold span did not fit.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageBoundary {
    pub stage: usize,
    pub weights_hash_before: String,
    pub weights_hash_after: String,
    pub optimizer_zeroed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub stages: Vec<StageReport>,
    pub boundaries: Vec<StageBoundary>,
}

impl PlanReport {
    pub fn records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.stages.iter().flat_map(|s| s.records.iter())
    }
}

fn encode_all(model: &SpanModel, task: &Task, config: &RunConfig, stage: usize) -> Result<(Vec<EncodedExample>, usize)> {
    let train = match config.subsample_n {
        Some(n) => subsample(&task.train, n, derive_seed(config.seed, 1000 + stage as u64)),
        None => task.train.clone(),
    };
    let mut skipped = 0;
    let mut encoded = Vec::with_capacity(train.len());
    for ex in &train {
        match model.encode(ex) {
            Ok(e) => encoded.push(e),
            Err(err) => {
                log::warn!("task {}: skipping example: {err}", task.name);
                skipped += 1;
            }
        }
    }
    if encoded.is_empty() {
        return Err(Error::Config(format!("task {} has no usable training examples", task.name)));
    }
    Ok((encoded, skipped))
}

/// Trains `model` on one stage. A single task iterates plain shuffled epochs;
/// several tasks are cycled one batch at a time.
pub fn run_stage(
    model: &mut SpanModel,
    tasks: &[&Task],
    stage_index: usize,
    config: &RunConfig,
    state: &mut OptimizerState,
) -> Result<StageReport> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("stage has no tasks".into()));
    }
    let mut encoded = Vec::with_capacity(tasks.len());
    let mut skipped = 0;
    for task in tasks {
        let (e, s) = encode_all(model, task, config, stage_index)?;
        encoded.push(e);
        skipped += s;
    }
    let sizes: Vec<usize> = encoded.iter().map(Vec::len).collect();
    let batches_per_epoch: Vec<usize> = sizes.iter().map(|n| n.div_ceil(config.batch_size)).collect();
    let total_steps = config.max_steps.unwrap_or_else(|| {
        tasks
            .iter()
            .zip(&batches_per_epoch)
            .map(|(t, b)| t.epochs.unwrap_or(config.epochs) * b)
            .sum()
    });

    let mut batcher = MultitaskBatcher::new(&sizes, config.batch_size, derive_seed(config.seed, 2000 + stage_index as u64))?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3000 + stage_index as u64));
    let use_dropout = model.config.dropout > 0.0;
    let decode = DecodeOptions {
        mode: config.decode_mode,
        ..DecodeOptions::default()
    };

    let mut grads = ModelParams::zeros(&model.config);
    let mut epoch_loss = vec![(0.0, 0usize); tasks.len()];
    let mut latest_metric: Vec<Option<f64>> = vec![None; tasks.len()];
    let mut records = Vec::new();
    let mut step = 0;
    while step < total_steps {
        let batch = batcher.next().expect("endless");
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for &i in &batch.indices {
            let rng: Option<&mut dyn RngCore> = if use_dropout { Some(&mut dropout_rng) } else { None };
            batch_loss += model.accumulate_gradients(&encoded[batch.task][i], &mut grads, rng)?;
        }
        let lr = match config.schedule {
            LrSchedule::Constant => config.learning_rate,
            LrSchedule::LinearDecay => config.learning_rate * (1.0 - step as f64 / total_steps as f64),
        };
        adam_step(&mut model.params, &grads, state, config, lr)?;
        step += 1;

        let acc = &mut epoch_loss[batch.task];
        acc.0 += batch_loss;
        acc.1 += batch.indices.len();
        if batch.ends_epoch {
            let task = tasks[batch.task];
            let epoch = batch.epoch + 1;
            let due = config.eval_every > 0 && epoch % config.eval_every == 0 && !task.dev.is_empty();
            let metric = if due {
                Some(evaluate(model, &task.dev, task.metric, &task.schema, decode)?.value)
            } else {
                None
            };
            if metric.is_some() {
                latest_metric[batch.task] = metric;
            }
            let record = EpochRecord {
                stage: stage_index,
                task: task.name.clone(),
                epoch,
                step,
                loss: acc.0 / acc.1 as f64,
                metric,
                metric_name: metric.map(|_| task.metric),
            };
            log::info!(
                "stage {} task {} epoch {} step {} loss {:.4} metric {:?}",
                stage_index,
                record.task,
                epoch,
                step,
                record.loss,
                metric
            );
            records.push(record);
            *acc = (0.0, 0);
            if let Some(target) = config.stop_at_metric {
                if latest_metric.iter().all(|m| m.is_some_and(|v| v >= target)) {
                    break;
                }
            }
        }
    }
    Ok(StageReport {
        stage: stage_index,
        steps: step,
        records,
        skipped,
    })
}

fn resolve<'a>(registry: &'a TaskRegistry, names: &[String]) -> Result<Vec<&'a Task>> {
    names
        .iter()
        .map(|n| registry.get(n).ok_or_else(|| Error::UnknownTask(n.clone())))
        .collect()
}

/// Runs every stage in order on the same model.
pub fn run_plan(model: &mut SpanModel, plan: &TrainingPlan, registry: &TaskRegistry, base: &RunConfig) -> Result<PlanReport> {
    run_plan_with(model, plan, registry, base, &mut |_, _| Ok(()))
}

/// [`run_plan`] calling `on_stage_end(stage, model)` after each stage.
pub fn run_plan_with(
    model: &mut SpanModel,
    plan: &TrainingPlan,
    registry: &TaskRegistry,
    base: &RunConfig,
    on_stage_end: &mut dyn FnMut(usize, &SpanModel) -> Result<()>,
) -> Result<PlanReport> {
    plan.validate()?;
    for stage in &plan.stages {
        resolve(registry, &stage.tasks)?;
    }
    let mut state = OptimizerState::new(&model.config);
    let mut stages = Vec::with_capacity(plan.stages.len());
    let mut boundaries = Vec::new();
    for (i, stage) in plan.stages.iter().enumerate() {
        if i > 0 && plan.reset_optimizer_between_stages {
            let before = model.params.hash();
            state = OptimizerState::new(&model.config);
            boundaries.push(StageBoundary {
                stage: i,
                weights_hash_before: before,
                weights_hash_after: model.params.hash(),
                optimizer_zeroed: state.is_zeroed(),
            });
        }
        let config = stage.overrides.apply(base);
        let tasks = resolve(registry, &stage.tasks)?;
        stages.push(run_stage(model, &tasks, i, &config, &mut state)?);
        on_stage_end(i, model)?;
    }
    Ok(PlanReport { stages, boundaries })
}

/// Everything needed to build a fresh model for a given seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<SpanModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpanModel::new(self.config.clone(), self.vocab.clone(), self.max_len, &mut rng)
    }
}

pub struct RestartOutcome {
    pub best_seed: u64,
    pub best_metric: MetricReport,
    pub model: SpanModel,
    pub report: PlanReport,
    /// `(seed, dev metric)` for every run.
    pub runs: Vec<(u64, f64)>,
}

/// Task whose dev metric selects among restarts: the first task of the last stage.
pub fn selection_task<'a>(plan: &TrainingPlan, registry: &'a TaskRegistry) -> Result<&'a Task> {
    let name = plan
        .stages
        .last()
        .and_then(|s| s.tasks.first())
        .ok_or_else(|| Error::Config("training plan has no stages".into()))?;
    registry.get(name).ok_or_else(|| Error::UnknownTask(name.clone()))
}

/// Trains `restarts` times with seeds `seed, seed+1, ...` and keeps the run
/// with the best dev metric; ties go to the lowest seed.
pub fn random_restarts(
    spec: &ModelSpec,
    plan: &TrainingPlan,
    registry: &TaskRegistry,
    base: &RunConfig,
    restarts: usize,
) -> Result<RestartOutcome> {
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    let target = selection_task(plan, registry)?;
    let decode = DecodeOptions {
        mode: base.decode_mode,
        ..DecodeOptions::default()
    };
    let mut best: Option<RestartOutcome> = None;
    let mut runs = Vec::with_capacity(restarts);
    for k in 0..restarts {
        let seed = base.seed + k as u64;
        let config = RunConfig { seed, ..base.clone() };
        let mut model = spec.build(seed)?;
        let report = run_plan(&mut model, plan, registry, &config)?;
        let metric = evaluate(&model, &target.dev, target.metric, &target.schema, decode)?;
        runs.push((seed, metric.value));
        if best.as_ref().is_none_or(|b| metric.value > b.best_metric.value) {
            best = Some(RestartOutcome {
                best_seed: seed,
                best_metric: metric,
                model,
                report,
                runs: Vec::new(),
            });
        }
    }
    let mut out = best.expect("at least one run");
    out.runs = runs;
    Ok(out)
}
