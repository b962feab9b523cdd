use crate::error::Result;
use crate::harness::metrics::{compute_metric, Metric, MetricReport};
use crate::model::SpanModel;
use crate::reformulation::{AnswerSchema, SpanExample};
use crate::span_decoder::DecodeMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub max_span_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Independent,
            max_span_len: crate::span_decoder::DEFAULT_MAX_SPAN_LEN,
        }
    }
}

/// Extracted text for every example, in order.
pub fn predict(model: &SpanModel, examples: &[SpanExample], decode: DecodeOptions) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|e| {
            Ok(model
                .extract(&e.source_text, &e.auxiliary_text, decode.mode, decode.max_span_len)?
                .text)
        })
        .collect()
}

pub fn evaluate(
    model: &SpanModel,
    examples: &[SpanExample],
    metric: Metric,
    schema: &AnswerSchema,
    decode: DecodeOptions,
) -> Result<MetricReport> {
    let preds = predict(model, examples, decode)?;
    let golds: Vec<String> = examples.iter().map(|e| e.gold_text().to_string()).collect();
    compute_metric(&preds, &golds, metric, schema)
}
