//! JSONL dataset files, one `SpanExample` per line:
//!
//! ```json
//! {"task_kind":"classification","source":"positive or negative?","auxiliary":"...","gold_span":[12,20],"label":1}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::atomic_write;
use crate::error::{Error, Result};
use crate::reformulation::{SpanExample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub task_kind: TaskKind,
    pub source: String,
    pub auxiliary: String,
    pub gold_span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl From<&SpanExample> for DatasetRecord {
    fn from(e: &SpanExample) -> Self {
        Self {
            task_kind: e.task_kind,
            source: e.source_text.clone(),
            auxiliary: e.auxiliary_text.clone(),
            gold_span: [e.gold_char_span.start, e.gold_char_span.end],
            label: e.gold_label,
            value: e.gold_value,
        }
    }
}

impl TryFrom<DatasetRecord> for SpanExample {
    type Error = Error;

    fn try_from(r: DatasetRecord) -> Result<Self> {
        let example = SpanExample {
            source_text: r.source,
            auxiliary_text: r.auxiliary,
            gold_char_span: r.gold_span[0]..r.gold_span[1],
            task_kind: r.task_kind,
            gold_label: r.label,
            gold_value: r.value,
        };
        example.validate()?;
        Ok(example)
    }
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<SpanExample>> {
    let at = |line: usize, message: String| Error::Dataset {
        path: path.to_path_buf(),
        line,
        message,
    };
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let record: DatasetRecord = serde_json::from_str(line).map_err(|e| at(i + 1, e.to_string()))?;
            SpanExample::try_from(record).map_err(|e| at(i + 1, e.to_string()))
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SpanExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_dataset(&text, path)
}

pub fn serialize_dataset(examples: &[SpanExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&DatasetRecord::from(e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[SpanExample]) -> Result<()> {
    atomic_write(path.as_ref(), serialize_dataset(examples)?.as_bytes())
}
