//! Encoder plus span head, bundled with the vocabulary it was trained with.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, checkpoint, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::reformulation::SpanExample;
use crate::span_decoder::{self, DecodeMode, SpanHead, SpanPrediction};
use crate::tokenizer::{self, char_slice, ModelInput, TokenSequence, Vocabulary};

pub const DEFAULT_MAX_LEN: usize = 128;
const VOCAB_FILE: &str = "vocab.txt";

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: SpanHead,
}

impl ModelParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            encoder: EncoderParams::zeros(config),
            head: SpanHead::zeros(config.hidden_dim),
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = self.encoder.tensors();
        out.push(encoder::named("span_head.start".into(), &self.head.start));
        out.push(encoder::named("span_head.end".into(), &self.head.end));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.push(self.head.start.as_slice_mut().expect("contiguous"));
        out.push(self.head.end.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    /// SHA-256 over the little-endian bytes of every tensor in order.
    pub fn hash(&self) -> String {
        let (_, blob) = checkpoint::encode_tensors(&self.tensors());
        checkpoint::hex_digest(&blob)
    }
}

/// A tokenized example with gold start/end expressed as input positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub input: ModelInput,
    pub gold: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub text: String,
    pub char_span: Range<usize>,
    pub prediction: SpanPrediction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: EncoderConfig,
    max_len: usize,
    lowercase: bool,
    vocab_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanModel {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub params: ModelParams,
}

impl SpanModel {
    /// Fresh model; `config.vocab_size` is taken from `vocab`.
    pub fn new(mut config: EncoderConfig, vocab: Vocabulary, max_len: usize, rng: &mut dyn RngCore) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        if max_len > config.max_positions {
            return Err(Error::Config(format!(
                "max_len {max_len} exceeds max_positions {}",
                config.max_positions
            )));
        }
        let encoder = EncoderParams::init(&config, rng);
        let head = SpanHead::init(config.hidden_dim, config.init_std, rng);
        Ok(Self {
            config,
            vocab,
            max_len,
            params: ModelParams { encoder, head },
        })
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenizer::wordpiece_tokenize(text, &self.vocab)
    }

    pub fn encode_pair(&self, source: &TokenSequence, auxiliary: &TokenSequence) -> Result<ModelInput> {
        tokenizer::encode_pair(source, auxiliary, self.max_len, &self.vocab)
    }

    /// Tokenizes and aligns the gold span. Fails with [`Error::Unaligned`] or
    /// [`Error::InvalidExample`] when the gold span does not survive truncation.
    pub fn encode(&self, example: &SpanExample) -> Result<EncodedExample> {
        let source = self.tokenize(&example.source_text);
        let auxiliary = self.tokenize(&example.auxiliary_text);
        let (first, last) = tokenizer::align_char_span(example.gold_char_span.clone(), &source)?;
        let input = self.encode_pair(&source, &auxiliary)?;
        if last >= input.source_token_count {
            return Err(Error::InvalidExample(format!(
                "gold span ends at source token {last}, beyond the {} kept tokens",
                input.source_token_count
            )));
        }
        Ok(EncodedExample {
            input,
            gold: (first + 1, last + 1),
        })
    }

    /// Loss of one example; gradients are added into `grads`.
    pub fn accumulate_gradients(
        &self,
        example: &EncodedExample,
        grads: &mut ModelParams,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<f64> {
        let acts = encoder::forward_with(&example.input, &self.params.encoder, &self.config, Mode::Training { rng })?;
        let (loss, g) = span_decoder::span_loss_and_grad(
            &acts.output,
            &self.params.head,
            &example.input.source_mask,
            example.gold,
        )?;
        grads.head.start += &g.head.start;
        grads.head.end += &g.head.end;
        encoder::backward(&g.output, &acts, &self.params.encoder, &self.config, &mut grads.encoder)?;
        Ok(loss)
    }

    pub fn loss(&self, example: &EncodedExample) -> Result<f64> {
        let dist = self.distribution(&example.input)?;
        span_decoder::span_loss(&dist, example.gold)
    }

    pub fn encode_output(&self, input: &ModelInput) -> Result<Array2<f64>> {
        encoder::forward(input, &self.params.encoder, &self.config)
    }

    pub fn distribution(&self, input: &ModelInput) -> Result<span_decoder::SpanDistribution> {
        let out = self.encode_output(input)?;
        span_decoder::score_spans(&out, &self.params.head, &input.source_mask)
    }

    /// Extracts a span of `source_text`. When independent decoding yields
    /// `end < start`, the span is the single token at `start`.
    pub fn extract(&self, source_text: &str, auxiliary_text: &str, mode: DecodeMode, max_span_len: usize) -> Result<Extraction> {
        let source = self.tokenize(source_text);
        let auxiliary = self.tokenize(auxiliary_text);
        let input = self.encode_pair(&source, &auxiliary)?;
        let dist = self.distribution(&input)?;
        let prediction = span_decoder::decode(&dist, mode, max_span_len);
        let first = prediction.start - 1;
        let last = prediction.end.max(prediction.start) - 1;
        let char_span = source.char_span(first, last);
        Ok(Extraction {
            text: char_slice(source_text, char_span.clone()).to_string(),
            char_span,
            prediction,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let metadata = Metadata {
            config: self.config.clone(),
            max_len: self.max_len,
            lowercase: self.vocab.lowercase(),
            vocab_file: VOCAB_FILE.to_string(),
        };
        checkpoint::atomic_write(&dir.join(VOCAB_FILE), self.vocab.to_file_contents().as_bytes())?;
        checkpoint::write(dir, serde_json::to_value(metadata)?, &self.params.tensors())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, data) = checkpoint::read(dir)?;
        let meta: Metadata = serde_json::from_value(manifest.metadata.clone())?;
        meta.config.validate()?;
        let vocab = Vocabulary::from_tokens(
            fs::read_to_string(dir.join(&meta.vocab_file))?
                .lines()
                .map(str::to_string)
                .collect(),
        )?
        .with_lowercase(meta.lowercase);
        if vocab.len() != meta.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                meta.config.vocab_size
            )));
        }
        let mut params = ModelParams::zeros(&meta.config);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                manifest.tensors.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(data) {
            dst.copy_from_slice(&src);
        }
        Ok(Self {
            config: meta.config,
            vocab,
            max_len: meta.max_len,
            params,
        })
    }
}
