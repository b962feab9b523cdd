//! Training-plan files.
//!
//! ```json
//! {
//!   "model": {"num_layers": 2, "hidden_dim": 32, "num_heads": 4, "ffn_dim": 64},
//!   "max_len": 64,
//!   "vocab": {"build": {"max_words": 5000}},
//!   "run": {"epochs": 5, "learning_rate": 0.001},
//!   "tasks": [{"name": "cue", "train": "cue/train.jsonl", "dev": "cue/dev.jsonl",
//!              "metric": "accuracy", "schema": {"labels": {"descriptions": ["positive", "negative"]}}}],
//!   "stages": [{"tasks": ["cue"]}]
//! }
//! ```
//!
//! Dataset and vocabulary paths are relative to the plan file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ScaleMode};
use crate::error::{Error, Result};
use crate::harness::dataset::load_dataset;
use crate::harness::metrics::Metric;
use crate::model::DEFAULT_MAX_LEN;
use crate::reformulation::AnswerSchema;
use crate::tokenizer::Vocabulary;
use crate::training::{ModelSpec, RunConfig, Stage, Task, TaskRegistry, TrainingPlan};

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Defaults to `max_len`.
    #[serde(default)]
    pub max_positions: Option<usize>,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_max_words() -> usize {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VocabSource {
    /// Newline-delimited token file.
    File(PathBuf),
    /// Frequency-built from every task's train and dev texts.
    Build {
        #[serde(default = "default_max_words")]
        max_words: usize,
        #[serde(default = "default_true")]
        lowercase: bool,
    },
}

impl Default for VocabSource {
    fn default() -> Self {
        VocabSource::Build {
            max_words: default_max_words(),
            lowercase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    pub metric: Metric,
    #[serde(default = "span_schema")]
    pub schema: AnswerSchema,
    #[serde(default)]
    pub epochs: Option<usize>,
}

fn span_schema() -> AnswerSchema {
    AnswerSchema::Span
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub model: ModelSection,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub vocab: VocabSource,
    #[serde(default)]
    pub run: RunConfig,
    pub tasks: Vec<TaskSpec>,
    pub stages: Vec<Stage>,
    #[serde(default = "default_true")]
    pub reset_optimizer_between_stages: bool,
}

/// A plan file with its datasets loaded and vocabulary resolved.
pub struct LoadedPlan {
    pub spec: ModelSpec,
    pub registry: TaskRegistry,
    pub plan: TrainingPlan,
    pub run: RunConfig,
}

/// Checks that a metric can be computed under a schema.
pub fn check_metric_schema(metric: Metric, schema: &AnswerSchema) -> Result<()> {
    let ok = match metric {
        Metric::ExactMatch => true,
        Metric::Accuracy | Metric::Matthews => matches!(schema, AnswerSchema::Labels(_)),
        Metric::PearsonSpearmanAvg => matches!(schema, AnswerSchema::Buckets(_)),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("metric {metric} does not fit schema {schema:?}")))
    }
}

impl PlanFile {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn training_plan(&self) -> TrainingPlan {
        TrainingPlan {
            stages: self.stages.clone(),
            reset_optimizer_between_stages: self.reset_optimizer_between_stages,
        }
    }

    /// Loads datasets and builds the vocabulary; relative paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<LoadedPlan> {
        let plan = self.training_plan();
        plan.validate()?;
        self.run.validate()?;
        let mut registry = TaskRegistry::new();
        for t in &self.tasks {
            check_metric_schema(t.metric, &t.schema)?;
            let task = Task {
                name: t.name.clone(),
                train: load_dataset(base_dir.join(&t.train))?,
                dev: match &t.dev {
                    Some(p) => load_dataset(base_dir.join(p))?,
                    None => Vec::new(),
                },
                metric: t.metric,
                schema: t.schema.clone(),
                epochs: t.epochs,
            };
            if registry.insert(t.name.clone(), task).is_some() {
                return Err(Error::Config(format!("task {} defined twice", t.name)));
            }
        }
        for stage in &plan.stages {
            for name in &stage.tasks {
                if !registry.contains_key(name) {
                    return Err(Error::UnknownTask(name.clone()));
                }
            }
        }

        let vocab = match &self.vocab {
            VocabSource::File(p) => Vocabulary::from_file(base_dir.join(p))?,
            VocabSource::Build { max_words, lowercase } => {
                // Sorted names keep the build order independent of hashing.
                let mut names: Vec<&String> = registry.keys().collect();
                names.sort();
                let texts = names.into_iter().flat_map(|n| {
                    let t = &registry[n];
                    t.train
                        .iter()
                        .chain(&t.dev)
                        .flat_map(|e| [e.source_text.as_str(), e.auxiliary_text.as_str()])
                });
                Vocabulary::build(texts, *max_words, *lowercase)
            }
        };
        let m = &self.model;
        let config = EncoderConfig {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            vocab_size: vocab.len(),
            max_positions: m.max_positions.unwrap_or(self.max_len),
            scale_mode: m.scale_mode,
            dropout: m.dropout,
            layer_norm_eps: m.layer_norm_eps,
            init_std: m.init_std,
        };
        config.validate()?;
        Ok(LoadedPlan {
            spec: ModelSpec {
                config,
                vocab,
                max_len: self.max_len,
            },
            registry,
            plan,
            run: self.run.clone(),
        })
    }
}

/// Reads and resolves a plan file.
pub fn load_plan(path: impl AsRef<Path>) -> Result<LoadedPlan> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    PlanFile::from_path(path)?.resolve(base)
}
