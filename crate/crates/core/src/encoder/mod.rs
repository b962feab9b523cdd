//! Transformer encoder with hand-written reverse-mode gradients.
//!
//! Each layer computes
//!
//! ```text
//! A   = [h_1; ...; h_k] W_o,   h_j = softmax(X Wq_j (X Wk_j)^T / s) X Wv_j
//! H   = LayerNorm(A + X)
//! X'  = LayerNorm(max(0, H U) V + H)
//! ```
//!
//! with `s = sqrt(d)` (`ScaleMode::ModelDim`) or `sqrt(d / k)` (`ScaleMode::HeadDim`).
//! The per-head projections `Wq_j`, `Wk_j`, `Wv_j` are the `j`-th column blocks
//! of width `d / k` in the `query`, `key` and `value` matrices. Linear maps carry
//! no bias terms.

pub mod checkpoint;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::ModelInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Divide attention logits by `sqrt(d)`.
    #[default]
    ModelDim,
    /// Divide attention logits by `sqrt(d / k)`.
    HeadDim,
}

fn default_eps() -> f64 {
    1e-12
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    /// Inverted dropout on the attention and feedforward sublayer outputs.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

pub const NUM_SEGMENTS: usize = 2;

impl EncoderConfig {
    pub fn new(
        num_layers: usize,
        hidden_dim: usize,
        num_heads: usize,
        ffn_dim: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads,
            ffn_dim,
            vocab_size,
            max_positions,
            scale_mode: ScaleMode::default(),
            dropout: 0.0,
            layer_norm_eps: default_eps(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim < 2 {
            return bad(format!("hidden_dim {} < 2", self.hidden_dim));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return bad("ffn_dim, vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    fn attention_scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::ModelDim => (self.hidden_dim as f64).sqrt(),
            ScaleMode::HeadDim => (self.head_dim() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    pub attention_norm_gain: Array1<f64>,
    pub attention_norm_bias: Array1<f64>,
    /// `U`, d×f.
    pub ffn_in: Array2<f64>,
    /// `V`, f×d.
    pub ffn_out: Array2<f64>,
    pub ffn_norm_gain: Array1<f64>,
    pub ffn_norm_bias: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
            value: Array2::zeros((d, d)),
            output: Array2::zeros((d, d)),
            attention_norm_gain: Array1::zeros(d),
            attention_norm_bias: Array1::zeros(d),
            ffn_in: Array2::zeros((d, f)),
            ffn_out: Array2::zeros((f, d)),
            ffn_norm_gain: Array1::zeros(d),
            ffn_norm_bias: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub segment_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

/// Samples N(0, std²) truncated to ±2 std.
pub(crate) fn truncated_normal(rng: &mut dyn RngCore, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn random_matrix(rng: &mut dyn RngCore, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || truncated_normal(rng, std))
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            token_embeddings: Array2::zeros((config.vocab_size, d)),
            position_embeddings: Array2::zeros((config.max_positions, d)),
            segment_embeddings: Array2::zeros((NUM_SEGMENTS, d)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams::zeros(d, config.ffn_dim))
                .collect(),
        }
    }

    /// Truncated-normal weights, unit LayerNorm gains and zero biases.
    pub fn init(config: &EncoderConfig, rng: &mut dyn RngCore) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let std = config.init_std;
        let token_embeddings = random_matrix(rng, config.vocab_size, d, std);
        let position_embeddings = random_matrix(rng, config.max_positions, d, std);
        let segment_embeddings = random_matrix(rng, NUM_SEGMENTS, d, std);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                query: random_matrix(rng, d, d, std),
                key: random_matrix(rng, d, d, std),
                value: random_matrix(rng, d, d, std),
                output: random_matrix(rng, d, d, std),
                attention_norm_gain: Array1::ones(d),
                attention_norm_bias: Array1::zeros(d),
                ffn_in: random_matrix(rng, d, f, std),
                ffn_out: random_matrix(rng, f, d, std),
                ffn_norm_gain: Array1::ones(d),
                ffn_norm_bias: Array1::zeros(d),
            })
            .collect();
        Self {
            token_embeddings,
            position_embeddings,
            segment_embeddings,
            layers,
        }
    }

    /// `(name, shape, data)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        let m2 = named::<ndarray::Ix2>;
        let v = named::<ndarray::Ix1>;
        out.push(m2("embeddings.token".into(), &self.token_embeddings));
        out.push(m2("embeddings.position".into(), &self.position_embeddings));
        out.push(m2("embeddings.segment".into(), &self.segment_embeddings));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push(m2(p("attention.query"), &l.query));
            out.push(m2(p("attention.key"), &l.key));
            out.push(m2(p("attention.value"), &l.value));
            out.push(m2(p("attention.output"), &l.output));
            out.push(v(p("attention_norm.gain"), &l.attention_norm_gain));
            out.push(v(p("attention_norm.bias"), &l.attention_norm_bias));
            out.push(m2(p("ffn.in"), &l.ffn_in));
            out.push(m2(p("ffn.out"), &l.ffn_out));
            out.push(v(p("ffn_norm.gain"), &l.ffn_norm_gain));
            out.push(v(p("ffn_norm.bias"), &l.ffn_norm_bias));
        }
        out
    }

    /// Mutable views in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embeddings.as_slice_mut().expect("standard layout"),
            self.position_embeddings.as_slice_mut().expect("standard layout"),
            self.segment_embeddings.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.push(l.query.as_slice_mut().expect("standard layout"));
            out.push(l.key.as_slice_mut().expect("standard layout"));
            out.push(l.value.as_slice_mut().expect("standard layout"));
            out.push(l.output.as_slice_mut().expect("standard layout"));
            out.push(l.attention_norm_gain.as_slice_mut().expect("standard layout"));
            out.push(l.attention_norm_bias.as_slice_mut().expect("standard layout"));
            out.push(l.ffn_in.as_slice_mut().expect("standard layout"));
            out.push(l.ffn_out.as_slice_mut().expect("standard layout"));
            out.push(l.ffn_norm_gain.as_slice_mut().expect("standard layout"));
            out.push(l.ffn_norm_bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// `(name, shape, data)` view of a contiguous array.
pub(crate) fn named<D: ndarray::Dimension>(name: String, a: &ndarray::Array<f64, D>) -> (String, Vec<usize>, &[f64]) {
    (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
}

fn check_id(table: &'static str, id: usize, size: usize) -> Result<()> {
    if id >= size {
        return Err(Error::IdOutOfRange { table, id, size });
    }
    Ok(())
}

/// `X_0[t] = token[id_t] + position[pos_t] + segment[seg_t]`.
pub fn embed(input: &ModelInput, params: &EncoderParams) -> Result<Array2<f64>> {
    let d = params.token_embeddings.ncols();
    let p = input.len();
    let mut x = Array2::zeros((p, d));
    for t in 0..p {
        let (id, pos, seg) = (input.ids[t], input.position_ids[t], input.segment_ids[t]);
        check_id("token", id, params.token_embeddings.nrows())?;
        check_id("position", pos, params.position_embeddings.nrows())?;
        check_id("segment", seg, params.segment_embeddings.nrows())?;
        let mut row = x.row_mut(t);
        row += &params.token_embeddings.row(id);
        row += &params.position_embeddings.row(pos);
        row += &params.segment_embeddings.row(seg);
    }
    Ok(x)
}

fn softmax_rows_masked(scores: &mut Array2<f64>, key_mask: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (v, &keep) in row.iter().zip(key_mask) {
            if keep && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for (v, &keep) in row.iter_mut().zip(key_mask) {
            *v = if keep { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>, eps: f64) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + eps).sqrt();
        let scale = *s;
        row.mapv_inplace(|v| v * scale);
    }
    let out = &normalized * gain + bias;
    (out, NormCache { normalized, inv_std })
}

/// Returns dL/dx and accumulates dL/dgain, dL/dbias.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.normalized).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let g = dxhat.row(t);
        let xh = cache.normalized.row(t);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let inv = cache.inv_std[t];
        Zip::from(dx.row_mut(t))
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv * (gi - mean_g - xi * mean_gx));
    }
    dx
}

/// Forward-pass intermediates for one layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// `X_i`.
    pub input: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    /// Attention weights per head, each p×p.
    pub attention: Vec<Array2<f64>>,
    concat: Array2<f64>,
    attention_dropout: Option<Array2<f64>>,
    attention_norm: NormCache,
    /// `H_i`.
    pub hidden: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
    ffn_norm: NormCache,
}

/// Output of a forward pass plus, in training mode, the per-layer cache.
#[derive(Debug, Clone)]
pub struct Activations {
    /// `X_sf`, p×d.
    pub output: Array2<f64>,
    pub layers: Vec<LayerCache>,
    input: Option<ModelInput>,
}

impl Activations {
    pub fn is_cached(&self) -> bool {
        self.input.is_some()
    }
}

pub enum Mode<'a> {
    Inference,
    /// Keeps intermediates for [`backward`]; dropout draws from `rng` when given.
    Training { rng: Option<&'a mut dyn RngCore> },
}

fn dropout_mask(rng: &mut Option<&mut dyn RngCore>, rate: f64, shape: (usize, usize)) -> Option<Array2<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let rng = rng.as_mut()?;
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

struct AttentionOut {
    output: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    attention: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

fn attention_forward(x: ArrayView2<f64>, layer: &LayerParams, config: &EncoderConfig, key_mask: &[bool]) -> AttentionOut {
    let dh = config.head_dim();
    let scale = config.attention_scale();
    let query = x.dot(&layer.query);
    let key = x.dot(&layer.key);
    let value = x.dot(&layer.value);
    let mut concat = Array2::zeros(x.raw_dim());
    let mut attention = Vec::with_capacity(config.num_heads);
    for j in 0..config.num_heads {
        let cols = s![.., j * dh..(j + 1) * dh];
        let mut scores = query.slice(cols).dot(&key.slice(cols).t());
        scores.mapv_inplace(|v| v / scale);
        softmax_rows_masked(&mut scores, key_mask);
        concat.slice_mut(cols).assign(&scores.dot(&value.slice(cols)));
        attention.push(scores);
    }
    let output = concat.dot(&layer.output);
    AttentionOut {
        output,
        query,
        key,
        value,
        attention,
        concat,
    }
}

/// Multi-head self-attention `[h_1; ...; h_k] W_o` over all positions.
pub fn multi_head_attention(x: &Array2<f64>, layer: &LayerParams, config: &EncoderConfig) -> Array2<f64> {
    let mask = vec![true; x.nrows()];
    attention_forward(x.view(), layer, config, &mask).output
}

fn layer_forward(
    x: Array2<f64>,
    layer: &LayerParams,
    config: &EncoderConfig,
    key_mask: &[bool],
    rng: &mut Option<&mut dyn RngCore>,
) -> (Array2<f64>, LayerCache) {
    let att = attention_forward(x.view(), layer, config, key_mask);
    let attention_dropout = dropout_mask(rng, config.dropout, att.output.dim());
    let mut attended = att.output;
    if let Some(mask) = &attention_dropout {
        attended *= mask;
    }
    let (hidden, attention_norm) = layer_norm(
        &(attended + &x),
        &layer.attention_norm_gain,
        &layer.attention_norm_bias,
        config.layer_norm_eps,
    );
    let ffn_pre = hidden.dot(&layer.ffn_in);
    let ffn_act = ffn_pre.mapv(|v| v.max(0.0));
    let mut ffn = ffn_act.dot(&layer.ffn_out);
    let ffn_dropout = dropout_mask(rng, config.dropout, ffn.dim());
    if let Some(mask) = &ffn_dropout {
        ffn *= mask;
    }
    let (out, ffn_norm) = layer_norm(
        &(ffn + &hidden),
        &layer.ffn_norm_gain,
        &layer.ffn_norm_bias,
        config.layer_norm_eps,
    );
    let cache = LayerCache {
        input: x,
        query: att.query,
        key: att.key,
        value: att.value,
        attention: att.attention,
        concat: att.concat,
        attention_dropout,
        attention_norm,
        hidden,
        ffn_pre,
        ffn_act,
        ffn_dropout,
        ffn_norm,
    };
    (out, cache)
}

/// One encoder layer without dropout: `X_{i+1}` from `X_i`.
pub fn transformer_layer(x: &Array2<f64>, layer: &LayerParams, config: &EncoderConfig) -> Array2<f64> {
    let mask = vec![true; x.nrows()];
    layer_forward(x.clone(), layer, config, &mask, &mut None).0
}

/// Embedding followed by every layer. Inference mode never applies dropout.
pub fn forward_with(
    input: &ModelInput,
    params: &EncoderParams,
    config: &EncoderConfig,
    mode: Mode<'_>,
) -> Result<Activations> {
    if params.layers.len() != config.num_layers {
        return Err(Error::Shape(format!(
            "{} layers in params, {} in config",
            params.layers.len(),
            config.num_layers
        )));
    }
    let mut x = embed(input, params)?;
    let (training, mut rng) = match mode {
        Mode::Inference => (false, None),
        Mode::Training { rng } => (true, rng),
    };
    let mut caches = Vec::new();
    for layer in &params.layers {
        let (next, cache) = layer_forward(x, layer, config, &input.attention_mask, &mut rng);
        if training {
            caches.push(cache);
        }
        x = next;
    }
    Ok(Activations {
        output: x,
        layers: caches,
        input: training.then(|| input.clone()),
    })
}

/// `X_sf` for `input`.
pub fn forward(input: &ModelInput, params: &EncoderParams, config: &EncoderConfig) -> Result<Array2<f64>> {
    Ok(forward_with(input, params, config, Mode::Inference)?.output)
}

/// Accumulates into `grads` the gradient of a scalar loss whose derivative with
/// respect to `X_sf` is `grad_output`.
pub fn backward(
    grad_output: &Array2<f64>,
    activations: &Activations,
    params: &EncoderParams,
    config: &EncoderConfig,
    grads: &mut EncoderParams,
) -> Result<()> {
    let input = activations.input.as_ref().ok_or(Error::NoCache)?;
    if grad_output.dim() != activations.output.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs output {:?}",
            grad_output.dim(),
            activations.output.dim()
        )));
    }
    let dh = config.head_dim();
    let scale = config.attention_scale();
    let mut dx = grad_output.clone();
    for ((layer, cache), g) in params
        .layers
        .iter()
        .zip(&activations.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // Feedforward block.
        let d_ffn_sum = layer_norm_backward(
            &dx,
            &cache.ffn_norm,
            &layer.ffn_norm_gain,
            &mut g.ffn_norm_gain,
            &mut g.ffn_norm_bias,
        );
        let mut d_ffn = d_ffn_sum.clone();
        if let Some(mask) = &cache.ffn_dropout {
            d_ffn *= mask;
        }
        g.ffn_out += &cache.ffn_act.t().dot(&d_ffn);
        let mut d_pre = d_ffn.dot(&layer.ffn_out.t());
        Zip::from(&mut d_pre).and(&cache.ffn_pre).for_each(|dv, &z| {
            if z <= 0.0 {
                *dv = 0.0;
            }
        });
        g.ffn_in += &cache.hidden.t().dot(&d_pre);
        let d_hidden = d_ffn_sum + d_pre.dot(&layer.ffn_in.t());

        // Attention block.
        let d_att_sum = layer_norm_backward(
            &d_hidden,
            &cache.attention_norm,
            &layer.attention_norm_gain,
            &mut g.attention_norm_gain,
            &mut g.attention_norm_bias,
        );
        let mut d_att = d_att_sum.clone();
        if let Some(mask) = &cache.attention_dropout {
            d_att *= mask;
        }
        g.output += &cache.concat.t().dot(&d_att);
        let d_concat = d_att.dot(&layer.output.t());
        let mut d_query = Array2::zeros(cache.query.raw_dim());
        let mut d_key = Array2::zeros(cache.key.raw_dim());
        let mut d_value = Array2::zeros(cache.value.raw_dim());
        for (j, weights) in cache.attention.iter().enumerate() {
            let cols = s![.., j * dh..(j + 1) * dh];
            let d_head = d_concat.slice(cols);
            let d_weights = d_head.dot(&cache.value.slice(cols).t());
            d_value.slice_mut(cols).assign(&weights.t().dot(&d_head));
            let mut d_scores = weights * &d_weights;
            let row_dot = d_scores.sum_axis(Axis(1));
            Zip::from(d_scores.rows_mut())
                .and(weights.rows())
                .and(&row_dot)
                .for_each(|mut ds, w, &r| {
                    Zip::from(&mut ds).and(&w).for_each(|v, &wi| *v = (*v - wi * r) / scale);
                });
            d_query.slice_mut(cols).assign(&d_scores.dot(&cache.key.slice(cols)));
            d_key.slice_mut(cols).assign(&d_scores.t().dot(&cache.query.slice(cols)));
        }
        g.query += &cache.input.t().dot(&d_query);
        g.key += &cache.input.t().dot(&d_key);
        g.value += &cache.input.t().dot(&d_value);
        dx = d_att_sum
            + d_query.dot(&layer.query.t())
            + d_key.dot(&layer.key.t())
            + d_value.dot(&layer.value.t());
    }

    for t in 0..input.len() {
        let row = dx.row(t);
        let mut tok = grads.token_embeddings.row_mut(input.ids[t]);
        tok += &row;
        let mut pos = grads.position_embeddings.row_mut(input.position_ids[t]);
        pos += &row;
        let mut seg = grads.segment_embeddings.row_mut(input.segment_ids[t]);
        seg += &row;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(ids: &[usize], m: usize) -> ModelInput {
        let p = ids.len();
        ModelInput {
            ids: ids.to_vec(),
            segment_ids: (0..p).map(|t| usize::from(t > m + 1)).collect(),
            position_ids: (0..p).collect(),
            source_mask: (0..p).map(|t| (1..=m).contains(&t)).collect(),
            attention_mask: vec![true; p],
            source_token_count: m,
            auxiliary_token_count: p - m - 2,
        }
    }

    fn setup(layers: usize, d: usize, k: usize, f: usize, seed: u64) -> (EncoderConfig, EncoderParams) {
        let mut config = EncoderConfig::new(layers, d, k, f, 12, 16);
        config.init_std = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = EncoderParams::init(&config, &mut rng);
        for l in &mut params.layers {
            l.attention_norm_gain.mapv_inplace(|_| 1.0 + truncated_normal(&mut rng, 0.3));
            l.ffn_norm_bias.mapv_inplace(|_| truncated_normal(&mut rng, 0.3));
        }
        (config, params)
    }

    #[test]
    fn embedding_cases() {
        let config = EncoderConfig::new(0, 16, 2, 8, 12, 16);
        let mut params = EncoderParams::zeros(&config);
        let inp = input(&[2, 4, 5, 6, 3, 7, 8], 3);
        let x = embed(&inp, &params).unwrap();
        assert_eq!(x.dim(), (7, 16));
        assert!(x.iter().all(|&v| v == 0.0));

        for i in 0..12 {
            params.token_embeddings[[i, i]] = 1.0;
        }
        let x = embed(&inp, &params).unwrap();
        for (t, &id) in inp.ids.iter().enumerate() {
            assert_eq!(x[[t, id]], 1.0);
            assert_eq!(x.row(t).sum(), 1.0);
        }

        let bad = input(&[2, 40, 3], 1);
        assert!(matches!(embed(&bad, &params), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn single_position_attention() {
        let (config, params) = setup(1, 4, 2, 8, 1);
        let x = Array2::from_shape_vec((1, 4), vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let out = multi_head_attention(&x, &params.layers[0], &config);
        let expected = x.dot(&params.layers[0].value).dot(&params.layers[0].output);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let (config, params) = setup(1, 4, 2, 8, 2);
        let x = Array2::from_shape_fn((5, 4), |(_, c)| c as f64 * 0.7 - 1.0);
        let mask = vec![true; 5];
        let att = attention_forward(x.view(), &params.layers[0], &config, &mask);
        for w in &att.attention {
            assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
        for t in 1..5 {
            assert_eq!(att.output.row(t), att.output.row(0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for seed in 0..10 {
            let (config, params) = setup(2, 4, 2, 8, seed);
            let inp = input(&[2, 4, 5, 3, 7, 9], 2);
            let acts = forward_with(&inp, &params, &config, Mode::Training { rng: None }).unwrap();
            for layer in &acts.layers {
                for w in &layer.attention {
                    for row in w.rows() {
                        assert!((row.sum() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let x = Array2::from_shape_fn((4, 8), |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 1.3 - 2.0);
        let (y, cache) = layer_norm(&x, &Array1::ones(8), &Array1::zeros(8), 1e-12);
        for row in cache.normalized.rows() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
        assert_eq!(y, cache.normalized);

        let constant = Array2::from_elem((1, 8), 3.5);
        let (y, _) = layer_norm(&constant, &Array1::ones(8), &Array1::zeros(8), 1e-12);
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_preserves_shape() {
        let (config, params) = setup(1, 8, 2, 16, 3);
        let x = Array2::from_shape_fn((5, 8), |(r, c)| (r as f64 - c as f64) * 0.1);
        assert_eq!(transformer_layer(&x, &params.layers[0], &config).dim(), (5, 8));
    }

    #[test]
    fn zero_layers_is_embedding() {
        let (config, params) = setup(0, 16, 2, 8, 4);
        let inp = input(&[2, 4, 5, 6, 3, 7, 8], 3);
        assert_eq!(forward(&inp, &params, &config).unwrap(), embed(&inp, &params).unwrap());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let (config, params) = setup(2, 16, 2, 8, 5);
        let inp = input(&[2, 4, 5, 6, 3, 7, 8], 3);
        let a = forward(&inp, &params, &config).unwrap();
        let b = forward(&inp, &params, &config).unwrap();
        assert_eq!(a.dim(), (7, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn backward_requires_cache() {
        let (config, params) = setup(1, 4, 2, 8, 6);
        let inp = input(&[2, 4, 3, 7], 1);
        let acts = forward_with(&inp, &params, &config, Mode::Inference).unwrap();
        let mut grads = EncoderParams::zeros(&config);
        let up = Array2::zeros(acts.output.raw_dim());
        assert!(matches!(
            backward(&up, &acts, &params, &config, &mut grads),
            Err(Error::NoCache)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (config, params) = setup(2, 4, 2, 8, 7);
        let inp = input(&[2, 4, 3, 7], 1);
        let acts = forward_with(&inp, &params, &config, Mode::Training { rng: None }).unwrap();
        let mut grads = EncoderParams::zeros(&config);
        backward(&Array2::zeros(acts.output.raw_dim()), &acts, &params, &config, &mut grads).unwrap();
        assert!(grads.tensors().iter().all(|(_, _, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let (config, params) = setup(2, 8, 2, 8, 8);
        let inp = input(&[2, 4, 5, 3, 7], 2);
        let padded = inp.pad_to(9, 0);
        let a = forward(&inp, &params, &config).unwrap();
        let b = forward(&padded, &params, &config).unwrap();
        for t in 0..5 {
            for c in 0..8 {
                assert!((a[[t, c]] - b[[t, c]]).abs() < 1e-12);
            }
        }
    }

    /// Central differences of `loss = sum(W ∘ X_sf)` against the analytic gradient.
    fn gradient_check(config: &EncoderConfig, params: &EncoderParams, inp: &ModelInput, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acts = forward_with(inp, params, config, Mode::Training { rng: None }).unwrap();
        let weights = random_matrix(&mut rng, acts.output.nrows(), acts.output.ncols(), 1.0);
        let loss = |p: &EncoderParams| (&forward(inp, p, config).unwrap() * &weights).sum();
        let mut grads = EncoderParams::zeros(config);
        backward(&weights, &acts, params, config, &mut grads).unwrap();

        let h = 1e-5;
        let analytic = grads.tensors();
        let mut probe = params.clone();
        for (ti, (name, _, g)) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let orig = probe.tensors_mut()[ti][i];
                probe.tensors_mut()[ti][i] = orig + h;
                let up = loss(&probe);
                probe.tensors_mut()[ti][i] = orig - h;
                let down = loss(&probe);
                probe.tensors_mut()[ti][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let denom = numeric.abs().max(g[i].abs()).max(1e-3);
                assert!(
                    (numeric - g[i]).abs() / denom < 1e-5,
                    "{name}[{i}]: analytic {} numeric {numeric}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let (config, params) = setup(1, 8, 2, 16, 11);
        gradient_check(&config, &params, &input(&[2, 4, 5, 3, 7], 2), 11);
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (mut config, params) = setup(2, 8, 2, 8, 100 + seed);
            if seed % 2 == 1 {
                config.scale_mode = ScaleMode::HeadDim;
            }
            gradient_check(&config, &params, &input(&[2, 4, 5, 6, 3, 7, 8], 3), seed);
        }
    }

    #[test]
    fn padded_gradient_check() {
        let (config, params) = setup(2, 8, 2, 8, 42);
        gradient_check(&config, &params, &input(&[2, 4, 5, 3, 7], 2).pad_to(7, 0), 42);
    }

    #[test]
    fn dropout_gradient_check() {
        let (mut config, params) = setup(1, 8, 2, 8, 9);
        config.dropout = 0.3;
        let inp = input(&[2, 4, 5, 3, 7], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let acts = forward_with(&inp, &params, &config, Mode::Training { rng: Some(&mut rng) }).unwrap();
        let mut grads = EncoderParams::zeros(&config);
        let up = Array2::ones(acts.output.raw_dim());
        backward(&up, &acts, &params, &config, &mut grads).unwrap();

        // Replaying the same masks must reproduce the same forward value.
        let loss = |p: &EncoderParams| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            forward_with(&inp, p, &config, Mode::Training { rng: Some(&mut rng) }).unwrap().output.sum()
        };
        let h = 1e-5;
        let mut probe = params.clone();
        let g = grads.layers[0].ffn_in.as_slice().unwrap().to_vec();
        for (i, gi) in g.iter().enumerate() {
            let orig = probe.layers[0].ffn_in.as_slice().unwrap()[i];
            probe.layers[0].ffn_in.as_slice_mut().unwrap()[i] = orig + h;
            let up = loss(&probe);
            probe.layers[0].ffn_in.as_slice_mut().unwrap()[i] = orig - h;
            let down = loss(&probe);
            probe.layers[0].ffn_in.as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - gi).abs() / numeric.abs().max(gi.abs()).max(1e-3) < 1e-5);
        }
    }
}
