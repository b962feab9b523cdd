//! Central finite-difference check of every parameter tensor of the full
//! model (encoder plus span head) on one random example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ScaleMode};
use crate::error::{Error, Result};
use crate::model::{EncodedExample, ModelParams, SpanModel};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Plain words in the random vocabulary, on top of the special tokens.
    pub words: usize,
    /// Total input length p, including [CLS] and [SEP].
    pub seq_len: usize,
    pub source_len: usize,
    pub scale_mode: ScaleMode,
    /// Weights are drawn wider than the training init so attention and
    /// LayerNorm are far from their near-linear regime.
    pub init_std: f64,
    /// Finite-difference step. Steps near 1e-3 straddle ReLU kinks often
    /// enough to break the comparison.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            words: 20,
            seq_len: 10,
            source_len: 5,
            scale_mode: ScaleMode::ModelDim,
            init_std: 0.5,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub numel: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub relative_error: f64,
    pub max_abs_diff: f64,
    /// Both gradients are below the rounding noise of a central difference,
    /// so the relative error carries no information. This happens for
    /// tensors with an identically zero gradient, such as the last LayerNorm
    /// bias, which shifts every start and end logit equally.
    pub below_noise: bool,
    pub pass: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Norm of the rounding error of a central difference over `numel` entries.
fn noise_bound(loss: f64, step: f64, numel: usize) -> f64 {
    8.0 * f64::EPSILON * loss.abs().max(1.0) / step * (numel as f64).sqrt()
}

fn random_example(config: &GradcheckConfig, seed: u64) -> Result<(SpanModel, EncodedExample)> {
    if config.source_len == 0 || config.source_len + 2 > config.seq_len {
        return Err(Error::Config(format!(
            "source_len {} must be in 1..={}",
            config.source_len,
            config.seq_len.saturating_sub(2)
        )));
    }
    let mut tokens: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"].iter().map(|s| s.to_string()).collect();
    tokens.extend((0..config.words.max(1)).map(|i| format!("w{i}")));
    let vocab = Vocabulary::from_tokens(tokens)?;
    let mut enc = EncoderConfig::new(config.num_layers, config.hidden_dim, config.num_heads, config.ffn_dim, 0, config.seq_len);
    enc.scale_mode = config.scale_mode;
    enc.init_std = config.init_std;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SpanModel::new(enc, vocab, config.seq_len, &mut rng)?;
    let mut words = |n: usize| -> String {
        (0..n)
            .map(|_| format!("w{}", rng.random_range(0..config.words.max(1))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let source = model.tokenize(&words(config.source_len));
    let aux = model.tokenize(&words(config.seq_len - config.source_len - 2));
    let input = model.encode_pair(&source, &aux)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let a = rng.random_range(0..config.source_len);
    let b = rng.random_range(a..config.source_len);
    Ok((model, EncodedExample { input, gold: (a + 1, b + 1) }))
}

/// One result per tensor, in checkpoint order.
pub fn check_gradients(config: &GradcheckConfig, seed: u64) -> Result<Vec<TensorCheck>> {
    let (mut model, example) = random_example(config, seed)?;
    let mut analytic = ModelParams::zeros(&model.config);
    model.accumulate_gradients(&example, &mut analytic, None)?;
    let names: Vec<(String, usize)> = analytic.tensors().iter().map(|(n, _, t)| (n.clone(), t.len())).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, _, t)| t.to_vec()).collect();
    let h = config.step;
    let base_loss = model.loss(&example)?;

    let mut out = Vec::with_capacity(names.len());
    for (t, (name, numel)) in names.into_iter().enumerate() {
        let mut numeric = vec![0.0; numel];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = model.params.tensors_mut()[t][i];
            model.params.tensors_mut()[t][i] = original + h;
            let plus = model.loss(&example)?;
            model.params.tensors_mut()[t][i] = original - h;
            let minus = model.loss(&example)?;
            model.params.tensors_mut()[t][i] = original;
            *slot = (plus - minus) / (2.0 * h);
        }
        let a = &analytic[t];
        let relative_error = relative_error(a, &numeric);
        let max_abs_diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let below_noise = norm(a).max(norm(&numeric)) <= noise_bound(base_loss, h, numel);
        out.push(TensorCheck {
            tensor: name,
            numel,
            relative_error,
            max_abs_diff,
            below_noise,
            pass: relative_error <= config.tolerance || below_noise,
        });
    }
    Ok(out)
}
