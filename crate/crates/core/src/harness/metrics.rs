//! Evaluation metrics over extracted span text.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reformulation::{span_to_label, span_to_value, AnswerSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    Accuracy,
    Matthews,
    PearsonSpearmanAvg,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_match" => Ok(Self::ExactMatch),
            "accuracy" => Ok(Self::Accuracy),
            "matthews" => Ok(Self::Matthews),
            "pearson_spearman_avg" => Ok(Self::PearsonSpearmanAvg),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::ExactMatch => "exact_match",
            Self::Accuracy => "accuracy",
            Self::Matthews => "matthews",
            Self::PearsonSpearmanAvg => "pearson_spearman_avg",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    /// Predictions that mapped exactly onto a label or bucket.
    pub valid_predictions: usize,
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores extracted `preds` against gold span texts.
pub fn compute_metric(preds: &[String], golds: &[String], metric: Metric, schema: &AnswerSchema) -> Result<MetricReport> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let n = preds.len();
    let (value, valid) = match (metric, schema) {
        (Metric::ExactMatch, _) => {
            let hits = preds
                .iter()
                .zip(golds)
                .filter(|(p, g)| normalize_answer(p) == normalize_answer(g))
                .count();
            (ratio(hits, n), n)
        }
        (Metric::Accuracy | Metric::Matthews, AnswerSchema::Labels(labels)) => {
            let mapped: Vec<(usize, bool)> = preds.iter().map(|p| span_to_label(p, labels)).collect();
            let pred_idx: Vec<usize> = mapped.iter().map(|m| m.0).collect();
            let gold_idx: Vec<usize> = golds.iter().map(|g| span_to_label(g, labels).0).collect();
            let valid = mapped.iter().filter(|m| m.1).count();
            let value = if metric == Metric::Accuracy {
                accuracy(&pred_idx, &gold_idx)
            } else {
                matthews(&pred_idx, &gold_idx)
            };
            (value, valid)
        }
        (Metric::PearsonSpearmanAvg, AnswerSchema::Buckets(spec)) => {
            let mapped: Vec<(f64, bool)> = preds.iter().map(|p| span_to_value(p, spec)).collect();
            let pv: Vec<f64> = mapped.iter().map(|m| m.0).collect();
            let gv: Vec<f64> = golds.iter().map(|g| span_to_value(g, spec).0).collect();
            let valid = mapped.iter().filter(|m| m.1).count();
            ((pearson(&pv, &gv) + spearman(&pv, &gv)) / 2.0, valid)
        }
        (m, s) => {
            return Err(Error::Config(format!("metric {m} does not apply to schema {s:?}")));
        }
    };
    Ok(MetricReport {
        metric,
        value,
        n,
        valid_predictions: valid,
    })
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> f64 {
    ratio(preds.iter().zip(golds).filter(|(p, g)| p == g).count(), preds.len())
}

/// Multiclass Matthews correlation (reduces to the binary form for two
/// classes); 0 when the denominator vanishes.
pub fn matthews(preds: &[usize], golds: &[usize]) -> f64 {
    let mut confusion: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pred_totals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut gold_totals: BTreeMap<usize, f64> = BTreeMap::new();
    for (&p, &g) in preds.iter().zip(golds) {
        *confusion.entry((p, g)).or_default() += 1.0;
        *pred_totals.entry(p).or_default() += 1.0;
        *gold_totals.entry(g).or_default() += 1.0;
    }
    let s = preds.len() as f64;
    let c: f64 = confusion.iter().filter(|((p, g), _)| p == g).map(|(_, v)| v).sum();
    let classes: std::collections::BTreeSet<usize> =
        pred_totals.keys().chain(gold_totals.keys()).copied().collect();
    let pk = |k: &usize| pred_totals.get(k).copied().unwrap_or(0.0);
    let tk = |k: &usize| gold_totals.get(k).copied().unwrap_or(0.0);
    let cov_pt: f64 = classes.iter().map(|k| pk(k) * tk(k)).sum();
    let cov_pp: f64 = classes.iter().map(|k| pk(k) * pk(k)).sum();
    let cov_tt: f64 = classes.iter().map(|k| tk(k) * tk(k)).sum();
    let numerator = c * s - cov_pt;
    let denominator = ((s * s - cov_pp) * (s * s - cov_tt)).sqrt();
    if denominator == 0.0 {
        0.0
    } else {
        numerator / denominator
    }
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}
