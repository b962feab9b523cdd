//! Start/end distributions over source tokens, the span loss, and decoding.

use ndarray::{Array1, Array2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoder::random_matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpanHead {
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl SpanHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            start: Array1::zeros(dim),
            end: Array1::zeros(dim),
        }
    }

    pub fn init(dim: usize, std: f64, rng: &mut dyn RngCore) -> Self {
        let m = random_matrix(rng, 2, dim, std);
        Self {
            start: m.row(0).to_owned(),
            end: m.row(1).to_owned(),
        }
    }
}

/// `p_start` and `p_end` over all `p` positions, zero outside the source.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistribution {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub source_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub log_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Independent argmax of start and end; `end < start` is possible.
    #[default]
    Independent,
    /// Best `start <= end < start + max_span_len` by summed log probability.
    Joint,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

pub const DEFAULT_MAX_SPAN_LEN: usize = 30;

/// Softmax over positions with `mask[i]`; others get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn score_spans(output: &Array2<f64>, head: &SpanHead, source_mask: &[bool]) -> Result<SpanDistribution> {
    if !source_mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    if source_mask.len() != output.nrows() {
        return Err(Error::Shape(format!(
            "mask of {} positions for {} rows",
            source_mask.len(),
            output.nrows()
        )));
    }
    let start_logits = output.dot(&head.start);
    let end_logits = output.dot(&head.end);
    Ok(SpanDistribution {
        start: masked_softmax(start_logits.as_slice().expect("contiguous"), source_mask),
        end: masked_softmax(end_logits.as_slice().expect("contiguous"), source_mask),
        source_mask: source_mask.to_vec(),
    })
}

/// `-log p_start(a*) - log p_end(b*)`.
pub fn span_loss(dist: &SpanDistribution, gold: (usize, usize)) -> Result<f64> {
    for idx in [gold.0, gold.1] {
        if !dist.source_mask.get(idx).copied().unwrap_or(false) {
            return Err(Error::GoldMasked(idx));
        }
    }
    Ok(-dist.start[gold.0].ln() - dist.end[gold.1].ln())
}

/// Gradients of [`span_loss`] with respect to `X_sf` and the head.
pub struct SpanLossGrad {
    pub output: Array2<f64>,
    pub head: SpanHead,
}

/// Loss and exact gradients for one example.
pub fn span_loss_and_grad(
    output: &Array2<f64>,
    head: &SpanHead,
    source_mask: &[bool],
    gold: (usize, usize),
) -> Result<(f64, SpanLossGrad)> {
    let dist = score_spans(output, head, source_mask)?;
    let loss = span_loss(&dist, gold)?;
    // d loss / d logits = p - onehot; masked positions have p = 0 and stay 0.
    let mut d_start = Array1::from(dist.start);
    let mut d_end = Array1::from(dist.end);
    d_start[gold.0] -= 1.0;
    d_end[gold.1] -= 1.0;
    let head_grad = SpanHead {
        start: output.t().dot(&d_start),
        end: output.t().dot(&d_end),
    };
    let d_out = outer(&d_start, &head.start) + outer(&d_end, &head.end);
    Ok((
        loss,
        SpanLossGrad {
            output: d_out,
            head: head_grad,
        },
    ))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn argmax_masked(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

pub fn decode(dist: &SpanDistribution, mode: DecodeMode, max_span_len: usize) -> SpanPrediction {
    let mask = &dist.source_mask;
    match mode {
        DecodeMode::Independent => {
            let start = argmax_masked(&dist.start, mask);
            let end = argmax_masked(&dist.end, mask);
            SpanPrediction {
                start,
                end,
                log_score: dist.start[start].ln() + dist.end[end].ln(),
            }
        }
        DecodeMode::Joint => {
            let width = max_span_len.max(1);
            let mut best: Option<SpanPrediction> = None;
            for a in (0..mask.len()).filter(|&a| mask[a]) {
                let la = dist.start[a].ln();
                for b in (a..mask.len().min(a + width)).filter(|&b| mask[b]) {
                    let score = la + dist.end[b].ln();
                    if best.is_none_or(|p| score > p.log_score) {
                        best = Some(SpanPrediction {
                            start: a,
                            end: b,
                            log_score: score,
                        });
                    }
                }
            }
            best.expect("distribution has at least one source position")
        }
    }
}
