//! Dataset I/O, synthetic tasks, metrics, converters and plan files.

pub mod convert;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod plan;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, DatasetRecord};
pub use eval::{evaluate, predict, DecodeOptions};
pub use metrics::{compute_metric, Metric, MetricReport};
pub use synth::{generate_synthetic_suite, SynthKind, SynthOptions, SyntheticSuite};
