//! Rewrites classification, regression and QA examples as span extraction,
//! and maps extracted spans back to labels and values.
//!
//! | task                  | source                                  | auxiliary  |
//! |-----------------------|-----------------------------------------|------------|
//! | single sentence       | `positive or negative?`                 | sentence   |
//! | sentence pair         | `sentence_a entailment, ..., or neutral?` | sentence_b |
//! | regression            | `sentence_a 0.0 0.25 ... 5.0`           | sentence_b |
//! | question answering    | context (optionally `... unanswerable`) | question   |

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{char_len, char_slice};

/// Token appended to QA contexts so that "no answer" is itself a span.
pub const UNANSWERABLE: &str = "unanswerable";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
    Qa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanExample {
    pub source_text: String,
    pub auxiliary_text: String,
    /// Half-open character range into `source_text`.
    pub gold_char_span: Range<usize>,
    pub task_kind: TaskKind,
    pub gold_label: Option<usize>,
    pub gold_value: Option<f64>,
}

impl SpanExample {
    pub fn validate(&self) -> Result<()> {
        let len = char_len(&self.source_text);
        let span = &self.gold_char_span;
        if span.start >= span.end || span.end > len {
            return Err(Error::InvalidExample(format!(
                "gold span {}..{} outside source of {len} chars",
                span.start, span.end
            )));
        }
        match self.task_kind {
            TaskKind::Classification if self.gold_label.is_none() => {
                Err(Error::InvalidExample("classification example without label".into()))
            }
            TaskKind::Regression if self.gold_value.is_none() => {
                Err(Error::InvalidExample("regression example without value".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn gold_text(&self) -> &str {
        char_slice(&self.source_text, self.gold_char_span.clone())
    }
}

/// Natural-language label descriptions rendered as an option list:
/// `a?`, `a or b?`, `a, b, or c?`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelSetRepr", into = "LabelSetRepr")]
pub struct LabelSet {
    descriptions: Vec<String>,
    conjunction: String,
    suffix: String,
}

#[derive(Serialize, Deserialize)]
struct LabelSetRepr {
    descriptions: Vec<String>,
    #[serde(default = "default_conjunction")]
    conjunction: String,
    #[serde(default = "default_suffix")]
    suffix: String,
}

fn default_conjunction() -> String {
    "or".into()
}

fn default_suffix() -> String {
    "?".into()
}

impl TryFrom<LabelSetRepr> for LabelSet {
    type Error = Error;

    fn try_from(r: LabelSetRepr) -> Result<Self> {
        LabelSet::with_template(r.descriptions, r.conjunction, r.suffix)
    }
}

impl From<LabelSet> for LabelSetRepr {
    fn from(l: LabelSet) -> Self {
        LabelSetRepr {
            descriptions: l.descriptions,
            conjunction: l.conjunction,
            suffix: l.suffix,
        }
    }
}

impl LabelSet {
    pub fn new<S: Into<String>>(descriptions: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_template(
            descriptions.into_iter().map(Into::into).collect(),
            default_conjunction(),
            default_suffix(),
        )
    }

    pub fn with_template(descriptions: Vec<String>, conjunction: String, suffix: String) -> Result<Self> {
        if descriptions.is_empty() {
            return Err(Error::LabelSet("no labels".into()));
        }
        for (i, a) in descriptions.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(Error::LabelSet(format!("label {i} is blank")));
            }
            for (j, b) in descriptions.iter().enumerate() {
                if i != j && b.contains(a.as_str()) {
                    return Err(Error::LabelSet(format!("{a:?} is contained in {b:?}")));
                }
            }
        }
        Ok(Self {
            descriptions,
            conjunction,
            suffix,
        })
    }

    pub fn descriptions(&self) -> &[String] {
        &self.descriptions
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    /// Renders the option list and the character range of every label in it.
    pub fn render(&self) -> (String, Vec<Range<usize>>) {
        let k = self.descriptions.len();
        let mut out = String::new();
        let mut ranges = Vec::with_capacity(k);
        for (i, desc) in self.descriptions.iter().enumerate() {
            if i > 0 {
                if k > 2 {
                    out.push(',');
                }
                out.push(' ');
                if i == k - 1 {
                    out.push_str(&self.conjunction);
                    out.push(' ');
                }
            }
            let start = char_len(&out);
            out.push_str(desc);
            ranges.push(start..start + char_len(desc));
        }
        out.push_str(&self.suffix);
        (out, ranges)
    }
}

/// Evenly spaced regression buckets over `[min_value, max_value]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BucketSpecRepr", into = "BucketSpecRepr")]
pub struct BucketSpec {
    min_value: f64,
    max_value: f64,
    bucket_count: usize,
    rendered: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BucketSpecRepr {
    min_value: f64,
    max_value: f64,
    bucket_count: usize,
}

impl TryFrom<BucketSpecRepr> for BucketSpec {
    type Error = Error;

    fn try_from(r: BucketSpecRepr) -> Result<Self> {
        BucketSpec::new(r.min_value, r.max_value, r.bucket_count)
    }
}

impl From<BucketSpec> for BucketSpecRepr {
    fn from(b: BucketSpec) -> Self {
        BucketSpecRepr {
            min_value: b.min_value,
            max_value: b.max_value,
            bucket_count: b.bucket_count,
        }
    }
}

impl BucketSpec {
    pub fn new(min_value: f64, max_value: f64, bucket_count: usize) -> Result<Self> {
        if !(min_value.is_finite() && max_value.is_finite() && min_value < max_value) {
            return Err(Error::BucketSpec(format!("bad range [{min_value}, {max_value}]")));
        }
        if !(2..=64).contains(&bucket_count) {
            return Err(Error::BucketSpec(format!("bucket count {bucket_count} outside [2, 64]")));
        }
        let centers: Vec<f64> = (0..bucket_count)
            .map(|i| min_value + i as f64 * (max_value - min_value) / (bucket_count - 1) as f64)
            .collect();
        let rendered = render_distinct(&centers)
            .ok_or_else(|| Error::BucketSpec("bucket values do not render distinctly".into()))?;
        Ok(Self {
            min_value,
            max_value,
            bucket_count,
            rendered,
        })
    }

    /// Similarity-score default: `[0, 5]` in steps of 0.25.
    pub fn sts_default() -> Self {
        Self::new(0.0, 5.0, 21).expect("valid")
    }

    pub fn min_value(&self) -> f64 {
        self.min_value
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn bucket_count(&self) -> usize {
        self.bucket_count
    }

    pub fn width(&self) -> f64 {
        (self.max_value - self.min_value) / (self.bucket_count - 1) as f64
    }

    pub fn center(&self, index: usize) -> f64 {
        self.min_value + index as f64 * self.width()
    }

    pub fn rendered(&self) -> &[String] {
        &self.rendered
    }
}

/// Fewest decimals (at least one, trailing zeros trimmed) that keep every
/// rendering distinct and within 1% of a bucket width of its value.
fn render_distinct(values: &[f64]) -> Option<Vec<String>> {
    let width = (values[values.len() - 1] - values[0]) / (values.len() - 1) as f64;
    (1..=12).find_map(|digits| {
        let strings: Vec<String> = values
            .iter()
            .map(|v| {
                let s = format!("{:.*}", digits, v + 0.0);
                let trimmed = s.trim_end_matches('0');
                let s = if trimmed.ends_with('.') {
                    format!("{trimmed}0")
                } else {
                    trimmed.to_string()
                };
                if s == "-0.0" {
                    "0.0".to_string()
                } else {
                    s
                }
            })
            .collect();
        let unique: HashSet<&String> = strings.iter().collect();
        let faithful = strings
            .iter()
            .zip(values)
            .all(|(s, v)| s.parse::<f64>().is_ok_and(|p| (p - v).abs() <= width / 100.0));
        (faithful && unique.len() == strings.len()).then_some(strings)
    })
}

/// Appends `suffix` to `base` with a single space and returns the char offset
/// where `suffix` begins.
fn append_with_space(base: &str, suffix: &str) -> (String, usize) {
    if base.is_empty() {
        return (suffix.to_string(), 0);
    }
    let start = char_len(base) + 1;
    (format!("{base} {suffix}"), start)
}

/// Classification as extraction of the gold label's description.
///
/// Without `text_b` the source is only the option list and `text_a` becomes the
/// auxiliary text; with `text_b` the options follow `text_a` in the source and
/// `text_b` is auxiliary.
pub fn classify_to_span(
    text_a: &str,
    text_b: Option<&str>,
    labels: &LabelSet,
    gold: usize,
) -> Result<SpanExample> {
    if gold >= labels.len() {
        return Err(Error::InvalidExample(format!(
            "gold label {gold} out of range for {} labels",
            labels.len()
        )));
    }
    let (options, ranges) = labels.render();
    let (source, offset, auxiliary) = match text_b {
        None => (options.clone(), 0, text_a.to_string()),
        Some(b) => {
            let (s, off) = append_with_space(text_a, &options);
            (s, off, b.to_string())
        }
    };
    // The gold occurrence must be the first one inside the option list.
    let desc = &labels.descriptions()[gold];
    let gold_range = ranges[gold].clone();
    let first = options.find(desc.as_str()).map(|b| options[..b].chars().count());
    if first != Some(gold_range.start) {
        return Err(Error::InvalidExample(format!(
            "label {desc:?} occurs ambiguously in option list {options:?}"
        )));
    }
    Ok(SpanExample {
        source_text: source,
        auxiliary_text: auxiliary,
        gold_char_span: gold_range.start + offset..gold_range.end + offset,
        task_kind: TaskKind::Classification,
        gold_label: Some(gold),
        gold_value: None,
    })
}

/// Regression as extraction of the nearest rendered bucket value.
pub fn regress_to_span(
    text_a: &str,
    text_b: Option<&str>,
    spec: &BucketSpec,
    gold_value: f64,
) -> Result<SpanExample> {
    if !gold_value.is_finite() {
        return Err(Error::InvalidExample(format!("non-finite gold value {gold_value}")));
    }
    let clamped = gold_value.clamp(spec.min_value, spec.max_value);
    if clamped != gold_value {
        log::warn!("gold value {gold_value} clamped to {clamped}");
    }
    let bucket = value_to_bucket(clamped, spec);
    let buckets = spec.rendered.join(" ");
    let (source, offset) = append_with_space(text_a, &buckets);
    let start = offset
        + spec.rendered[..bucket]
            .iter()
            .map(|s| char_len(s) + 1)
            .sum::<usize>();
    let end = start + char_len(&spec.rendered[bucket]);
    Ok(SpanExample {
        source_text: source,
        auxiliary_text: text_b.unwrap_or_default().to_string(),
        gold_char_span: start..end,
        task_kind: TaskKind::Regression,
        gold_label: None,
        gold_value: Some(clamped),
    })
}

/// Question answering: context is the source, question the auxiliary text.
/// With `mark_unanswerable` the context gains a trailing `unanswerable` token
/// that serves as the gold span when `answer` is `None`.
pub fn qa_to_span(
    context: &str,
    question: &str,
    answer: Option<Range<usize>>,
    mark_unanswerable: bool,
) -> Result<SpanExample> {
    let (source, marker_start) = if mark_unanswerable {
        append_with_space(context, UNANSWERABLE)
    } else {
        (context.to_string(), 0)
    };
    let gold = match answer {
        Some(r) => {
            if r.start >= r.end || r.end > char_len(context) {
                return Err(Error::InvalidExample(format!(
                    "answer span {}..{} not within context",
                    r.start, r.end
                )));
            }
            r
        }
        None if mark_unanswerable => marker_start..marker_start + UNANSWERABLE.len(),
        None => {
            return Err(Error::InvalidExample(
                "no answer given and unanswerable marking disabled".into(),
            ))
        }
    };
    Ok(SpanExample {
        source_text: source,
        auxiliary_text: question.to_string(),
        gold_char_span: gold,
        task_kind: TaskKind::Qa,
        gold_label: None,
        gold_value: None,
    })
}

/// Like [`qa_to_span`] but locates the answer by text; the first occurrence wins.
pub fn qa_answer_text_to_span(
    context: &str,
    question: &str,
    answer_text: Option<&str>,
    mark_unanswerable: bool,
) -> Result<SpanExample> {
    let range = match answer_text {
        Some(text) => {
            let byte = context.find(text).ok_or_else(|| {
                Error::InvalidExample(format!("answer {text:?} not found in context"))
            })?;
            let start = context[..byte].chars().count();
            Some(start..start + char_len(text))
        }
        None => None,
    };
    qa_to_span(context, question, range, mark_unanswerable)
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn word_set(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Maps extracted text to a label: exact match is valid, otherwise the label
/// with the largest word overlap (lowest index on ties) is returned as invalid.
pub fn span_to_label(extracted: &str, labels: &LabelSet) -> (usize, bool) {
    let norm = normalize_whitespace(extracted);
    if let Some(i) = labels
        .descriptions
        .iter()
        .position(|d| normalize_whitespace(d) == norm)
    {
        return (i, true);
    }
    let words = word_set(extracted);
    let mut best = (0, 0);
    for (i, d) in labels.descriptions.iter().enumerate() {
        let overlap = word_set(d).intersection(&words).count();
        if overlap > best.1 {
            best = (i, overlap);
        }
    }
    (best.0, false)
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = (prev + usize::from(ca != *cb)).min(row[j] + 1).min(cur + 1);
            prev = cur;
        }
    }
    row[b.len()]
}

/// Maps extracted text to a bucket center: an exact rendered bucket is valid,
/// otherwise the bucket at the smallest edit distance is returned as invalid.
pub fn span_to_value(extracted: &str, spec: &BucketSpec) -> (f64, bool) {
    let norm = normalize_whitespace(extracted);
    if let Some(i) = spec.rendered.iter().position(|r| *r == norm) {
        return (spec.center(i), true);
    }
    let best = spec
        .rendered
        .iter()
        .enumerate()
        .min_by_key(|(i, r)| (levenshtein(&norm, r), *i))
        .map(|(i, _)| i)
        .unwrap_or(0);
    (spec.center(best), false)
}

/// Index of the nearest bucket center; exact midpoints go to the lower index.
pub fn value_to_bucket(v: f64, spec: &BucketSpec) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for i in 0..spec.bucket_count {
        let dist = (v - spec.center(i)).abs();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

/// How extracted text is interpreted for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSchema {
    Span,
    Labels(LabelSet),
    Buckets(BucketSpec),
}
