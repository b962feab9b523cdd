//! Span-extractive modeling for classification, regression and question answering.
//!
//! Every task is rewritten as a pair of texts: a *source* that contains the
//! answer and an *auxiliary* text that guides extraction. A small Transformer
//! encoder reads `[CLS] source [SEP] auxiliary` and a two-vector span head
//! picks start and end tokens inside the source.
//!
//! ```text
//! raw example ──reformulation──▶ SpanExample ──tokenizer──▶ ModelInput
//!     ──encoder──▶ X_sf ──span_decoder──▶ (start, end) ──reformulation──▶ label / value / answer
//! ```

pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod reformulation;
pub mod span_decoder;
pub mod tokenizer;
pub mod training;

pub use encoder::{EncoderConfig, EncoderParams, ScaleMode};
pub use error::{Error, Result};
pub use model::SpanModel;
pub use reformulation::{BucketSpec, LabelSet, SpanExample, TaskKind};
pub use span_decoder::{DecodeMode, SpanDistribution, SpanHead, SpanPrediction};
pub use tokenizer::{ModelInput, TokenSequence, Vocabulary};
pub use training::{RunConfig, Stage, TrainingPlan};

