//! Converters from public GLUE TSV and SQuAD JSON layouts to span examples.
//!
//! GLUE files are tab separated without quoting. Columns are named by header
//! text, or by zero-based index when the file has no header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reformulation::{
    classify_to_span, qa_answer_text_to_span, qa_to_span, regress_to_span, BucketSpec, LabelSet, SpanExample, TaskKind,
};
use crate::tokenizer::{char_len, char_slice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum ConvertConfig {
    GlueTsv(TsvConfig),
    SquadJson(SquadConfig),
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvConfig {
    /// `classification` or `regression`.
    pub task_kind: TaskKind,
    pub text_a: String,
    #[serde(default)]
    pub text_b: Option<String>,
    pub label: String,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Label descriptions for classification.
    #[serde(default)]
    pub labels: Option<LabelSet>,
    /// Raw label strings in the same order as `labels`; defaults to "0", "1", ...
    #[serde(default)]
    pub label_values: Option<Vec<String>>,
    /// Buckets for regression.
    #[serde(default)]
    pub buckets: Option<BucketSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquadConfig {
    /// Keep unanswerable questions, pointing them at an appended marker.
    #[serde(default)]
    pub mark_unanswerable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Converted {
    pub examples: Vec<SpanExample>,
    /// Records left out, e.g. unanswerable questions when not marked.
    pub skipped: usize,
}

pub fn convert(config: &ConvertConfig, text: &str, path: &Path) -> Result<Converted> {
    match config {
        ConvertConfig::GlueTsv(c) => convert_tsv(c, text, path),
        ConvertConfig::SquadJson(c) => convert_squad(c, text),
    }
}

pub fn convert_file(config: &ConvertConfig, path: impl AsRef<Path>) -> Result<Converted> {
    let path = path.as_ref();
    convert(config, &std::fs::read_to_string(path)?, path)
}

fn column_index(name: &str, header: Option<&[&str]>) -> Result<usize> {
    if let Some(h) = header {
        if let Some(i) = h.iter().position(|c| c.trim() == name) {
            return Ok(i);
        }
    }
    name.parse()
        .map_err(|_| Error::Config(format!("column {name:?} not found")))
}

pub fn convert_tsv(config: &TsvConfig, text: &str, path: &Path) -> Result<Converted> {
    let at = |line: usize, message: String| Error::Dataset {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header: Option<Vec<&str>> = if config.has_header {
        lines.next().map(|(_, l)| l.split('\t').collect())
    } else {
        None
    };
    let a = column_index(&config.text_a, header.as_deref())?;
    let b = config
        .text_b
        .as_deref()
        .map(|n| column_index(n, header.as_deref()))
        .transpose()?;
    let y = column_index(&config.label, header.as_deref())?;

    let labels = match config.task_kind {
        TaskKind::Classification => Some(
            config
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config("classification conversion needs `labels`".into()))?,
        ),
        TaskKind::Regression => None,
        TaskKind::Qa => return Err(Error::Config("use squad_json for question answering".into())),
    };
    let label_values: Vec<String> = match (&config.label_values, labels) {
        (Some(v), Some(l)) if v.len() != l.len() => {
            return Err(Error::Config(format!("{} label_values for {} labels", v.len(), l.len())))
        }
        (Some(v), _) => v.clone(),
        (None, Some(l)) => (0..l.len()).map(|i| i.to_string()).collect(),
        (None, None) => Vec::new(),
    };
    let buckets = config.buckets.clone().unwrap_or_else(BucketSpec::sts_default);

    let mut examples = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let get = |c: usize| {
            cols.get(c)
                .map(|s| s.trim())
                .ok_or_else(|| at(i + 1, format!("missing column {c}")))
        };
        let text_a = get(a)?;
        let text_b = b.map(get).transpose()?;
        let raw = get(y)?;
        let ex = match labels {
            Some(l) => {
                let gold = label_values
                    .iter()
                    .position(|v| v == raw)
                    .ok_or_else(|| at(i + 1, format!("unknown label {raw:?}")))?;
                classify_to_span(text_a, text_b, l, gold)
            }
            None => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| at(i + 1, format!("label {raw:?} is not a number")))?;
                regress_to_span(text_a, text_b, &buckets, v)
            }
        }
        .map_err(|e| at(i + 1, e.to_string()))?;
        examples.push(ex);
    }
    Ok(Converted { examples, skipped: 0 })
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQuestion>,
}

#[derive(Deserialize)]
struct SquadQuestion {
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
    #[serde(default)]
    is_impossible: bool,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// The first listed answer is used. When its offset does not point at its
/// text, the first occurrence of the text is used instead.
pub fn convert_squad(config: &SquadConfig, text: &str) -> Result<Converted> {
    let file: SquadFile = serde_json::from_str(text)?;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for p in file.data.iter().flat_map(|a| &a.paragraphs) {
        for q in &p.qas {
            let answer = if q.is_impossible { None } else { q.answers.first() };
            let ex = match answer {
                None if !config.mark_unanswerable => {
                    skipped += 1;
                    continue;
                }
                None => qa_to_span(&p.context, &q.question, None, true)?,
                Some(ans) => {
                    let range = ans.answer_start..ans.answer_start + char_len(&ans.text);
                    if range.end <= char_len(&p.context) && char_slice(&p.context, range.clone()) == ans.text {
                        qa_to_span(&p.context, &q.question, Some(range), config.mark_unanswerable)?
                    } else {
                        log::warn!("answer offset {} does not match {:?}; searching by text", ans.answer_start, ans.text);
                        match qa_answer_text_to_span(&p.context, &q.question, Some(&ans.text), config.mark_unanswerable) {
                            Ok(ex) => ex,
                            Err(e) => {
                                log::warn!("skipping question {:?}: {e}", q.question);
                                skipped += 1;
                                continue;
                            }
                        }
                    }
                }
            };
            examples.push(ex);
        }
    }
    Ok(Converted { examples, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SST: &str = include_str!("../../tests/fixtures/sst2.tsv");
    const STS: &str = include_str!("../../tests/fixtures/stsb.tsv");
    const RTE: &str = include_str!("../../tests/fixtures/rte.tsv");
    const SQUAD: &str = include_str!("../../tests/fixtures/squad.json");

    fn cfg(json: &str) -> ConvertConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn sst_tsv() {
        let c = cfg(r#"{"format":"glue_tsv","task_kind":"classification","text_a":"sentence","label":"label",
            "labels":{"descriptions":["negative","positive"]}}"#);
        let out = convert(&c, SST, Path::new("sst2.tsv")).unwrap();
        assert_eq!(out.examples.len(), 9);
        let first = &out.examples[0];
        assert_eq!(first.source_text, "negative or positive?");
        assert_eq!(first.auxiliary_text, "hide new secretions from the parental units");
        assert_eq!(first.gold_text(), "negative");
        assert_eq!(out.examples[2].gold_text(), "positive");
    }

    #[test]
    fn rte_tsv_with_named_labels() {
        let c = cfg(r#"{"format":"glue_tsv","task_kind":"classification","text_a":"sentence1","text_b":"sentence2",
            "label":"label","labels":{"descriptions":["yes","no"]},"label_values":["entailment","not_entailment"]}"#);
        let out = convert(&c, RTE, Path::new("rte.tsv")).unwrap();
        assert_eq!(out.examples.len(), 9);
        let e = &out.examples[0];
        assert_eq!(e.source_text, "No Weapons of Mass Destruction Found in Iraq Yet. yes or no?");
        assert_eq!(e.auxiliary_text, "Weapons of Mass Destruction Found in Iraq.");
        assert_eq!(e.gold_text(), "no");
        assert_eq!(out.examples[1].gold_label, Some(0));
    }

    #[test]
    fn stsb_tsv() {
        let c = cfg(r#"{"format":"glue_tsv","task_kind":"regression","text_a":"sentence1","text_b":"sentence2","label":"score"}"#);
        let out = convert(&c, STS, Path::new("stsb.tsv")).unwrap();
        assert_eq!(out.examples.len(), 9);
        assert_eq!(out.examples[0].gold_text(), "5.0");
        assert_eq!(out.examples[1].gold_text(), "3.75");
        assert_eq!(out.examples[6].gold_text(), "0.5");
    }

    #[test]
    fn headerless_columns_by_index() {
        let text = "x\t1\tgood movie\ny\t0\tbad movie\n";
        let c = cfg(r#"{"format":"glue_tsv","task_kind":"classification","text_a":"2","label":"1","has_header":false,
            "labels":{"descriptions":["wrong","fine"]}}"#);
        let out = convert(&c, text, Path::new("cola.tsv")).unwrap();
        assert_eq!(out.examples[0].gold_text(), "fine");
        assert_eq!(out.examples[1].auxiliary_text, "bad movie");
    }

    #[test]
    fn bad_label_reports_line() {
        let text = "sentence\tlabel\nfine\t1\nodd\t7\n";
        let c = cfg(r#"{"format":"glue_tsv","task_kind":"classification","text_a":"sentence","label":"label",
            "labels":{"descriptions":["negative","positive"]}}"#);
        assert!(matches!(convert(&c, text, Path::new("t.tsv")), Err(Error::Dataset { line: 3, .. })));
        let missing = cfg(r#"{"format":"glue_tsv","task_kind":"classification","text_a":"nope","label":"label",
            "labels":{"descriptions":["a","b"]}}"#);
        assert!(matches!(convert(&missing, text, Path::new("t.tsv")), Err(Error::Config(_))));
    }

    #[test]
    fn squad_json() {
        let plain = convert(&cfg(r#"{"format":"squad_json"}"#), SQUAD, Path::new("s.json")).unwrap();
        assert_eq!(plain.examples.len(), 4);
        assert_eq!(plain.skipped, 1);
        let golds: Vec<&str> = plain.examples.iter().map(|e| e.gold_text()).collect();
        assert_eq!(golds, ["France", "10th and 11th centuries", "Zürich", "7 o'clock"]);
        assert_eq!(plain.examples[0].auxiliary_text, "In what country is Normandy located?");

        let marked = convert(&cfg(r#"{"format":"squad_json","mark_unanswerable":true}"#), SQUAD, Path::new("s.json")).unwrap();
        assert_eq!(marked.examples.len(), 5);
        assert_eq!(marked.examples[2].gold_text(), "unanswerable");
        assert!(marked.examples[2].source_text.ends_with(" unanswerable"));
    }

    #[test]
    fn unknown_config_fields_rejected() {
        assert!(serde_json::from_str::<ConvertConfig>(r#"{"format":"squad_json","mark":true}"#).is_err());
        assert!(serde_json::from_str::<ConvertConfig>(r#"{"format":"csv"}"#).is_err());
    }
}
