//! JSONL datasets and predictions.
//!
//! Dataset lines are `{"id", "tokens", "intent"}` or `{"id", "tokens",
//! "spans": [{"start", "end", "label"}]}`; unknown keys are ignored and
//! blank lines skipped. Prediction lines carry `id` plus `spans` (with
//! scores) or `intent`, so a gold dataset file also reads as predictions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spanret_core::decoder::Candidate;
use spanret_core::{Dataset, Example, LabeledSpan, Task, Utterance};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct ExampleLine {
    id: String,
    tokens: Vec<String>,
    #[serde(default)]
    intent: Option<String>,
    #[serde(default)]
    spans: Option<Vec<SpanRecord>>,
}

#[derive(Serialize)]
struct ExampleOut<'a> {
    id: &'a str,
    tokens: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    intent: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<SpanRecord>>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty())
}

fn parse_example(line: &str, task: Option<Task>) -> std::result::Result<Example, String> {
    let raw: ExampleLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let utterance = Utterance::new(raw.id, raw.tokens).map_err(|e| e.to_string())?;
    let example = match (raw.intent, raw.spans) {
        (Some(_), Some(_)) => return Err("line has both \"intent\" and \"spans\"".into()),
        (Some(label), None) => Example::intent(utterance, label),
        (None, Some(spans)) => {
            Example::slots(utterance, spans.into_iter().map(|s| LabeledSpan::new(s.start, s.end, s.label)).collect())
        }
        (None, None) => return Err("line needs \"intent\" or \"spans\"".into()),
    }
    .map_err(|e| e.to_string())?;
    match task {
        Some(t) if t != example.task() => Err(format!("expected a {t} example, found a {} example", example.task())),
        _ => Ok(example),
    }
}

/// Reads a dataset; with `task` set every line must be of that task.
pub fn load_jsonl(path: &Path, task: Option<Task>) -> Result<Dataset> {
    let text = read(path)?;
    let mut examples = Vec::new();
    for (line_no, line) in lines(&text) {
        let example = parse_example(line, task).map_err(|reason| CliError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        })?;
        examples.push(example);
    }
    if let Some(t) = task.or_else(|| examples.first().map(Example::task)) {
        if let Some((i, _)) = examples.iter().enumerate().find(|(_, e)| e.task() != t) {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "file mixes intent and slot examples".into(),
            });
        }
    }
    Ok(Dataset::new(examples))
}

/// The serialized form of one example, without a trailing newline.
pub fn example_line(example: &Example) -> String {
    let spans = (example.task() == Task::Slot).then(|| {
        example
            .slot_spans()
            .iter()
            .map(|s| SpanRecord { start: s.start, end: s.end, label: s.label.clone(), score: None })
            .collect()
    });
    let out =
        ExampleOut { id: example.id(), tokens: example.utterance().tokens(), intent: example.intent_label(), spans };
    serde_json::to_string(&out).expect("examples serialize")
}

pub fn dataset_to_string(data: &Dataset) -> String {
    data.examples().iter().map(|e| example_line(e) + "\n").collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    write_text(path, &dataset_to_string(data))
}

/// One predicted line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<SpanRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl PredictionRecord {
    pub fn slots(id: &str, spans: &[Candidate]) -> Self {
        let spans = spans
            .iter()
            .map(|c| SpanRecord { start: c.start, end: c.end, label: c.label.clone(), score: Some(c.score) })
            .collect();
        Self { id: id.into(), spans: Some(spans), intent: None, score: None }
    }

    pub fn intent(id: &str, label: &str, score: f64) -> Self {
        Self { id: id.into(), spans: None, intent: Some(label.into()), score: Some(score) }
    }
}

pub fn predictions_to_string(records: &[PredictionRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("predictions serialize") + "\n").collect()
}

/// Reads predictions keyed by id. Duplicate ids are an error.
pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, PredictionRecord>> {
    let text = read(path)?;
    let mut out = BTreeMap::new();
    for (line_no, line) in lines(&text) {
        let err = |reason: String| CliError::Parse { path: path.to_path_buf(), line: line_no, reason };
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.spans.is_none() && rec.intent.is_none() {
            return Err(err("prediction needs \"spans\" or \"intent\"".into()));
        }
        let id = rec.id.clone();
        if out.insert(id.clone(), rec).is_some() {
            return Err(err(format!("duplicate id {id:?}")));
        }
    }
    Ok(out)
}

/// Extra string field of every line, keyed by id (for metadata such as
/// an intent's category).
pub fn load_field(path: &Path, field: &str) -> Result<BTreeMap<String, String>> {
    let text = read(path)?;
    let mut out = BTreeMap::new();
    for (line_no, line) in lines(&text) {
        let err = |reason: String| CliError::Parse { path: path.to_path_buf(), line: line_no, reason };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let id = value.get("id").and_then(|v| v.as_str()).ok_or_else(|| err("missing \"id\"".into()))?;
        let v = value.get(field).and_then(|v| v.as_str()).ok_or_else(|| err(format!("missing string {field:?}")))?;
        out.insert(id.to_string(), v.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_both_tasks() {
        let f = tmp("{\"id\":\"u1\",\"tokens\":[\"set\",\"alarm\"],\"intent\":\"alarm_set\",\"extra\":3}\n");
        let d = load_jsonl(f.path(), None).unwrap();
        assert_eq!(d.examples()[0].intent_label(), Some("alarm_set"));
        assert_eq!(d.examples()[0].utterance().len(), 2);

        let f = tmp("\n{\"id\":\"u2\",\"tokens\":[\"at\",\"7\",\"pm\"],\"spans\":[{\"start\":1,\"end\":3,\"label\":\"time\"}]}\n");
        let d = load_jsonl(f.path(), Some(Task::Slot)).unwrap();
        let ex = &d.examples()[0];
        assert_eq!(ex.utterance().tokens()[ex.slot_spans()[0].start..ex.slot_spans()[0].end], ["7", "pm"]);
    }

    #[test]
    fn errors_name_line_and_example() {
        let f = tmp("{\"id\":\"a\",\"tokens\":[\"x\"],\"intent\":\"i\"}\n{bad json\n");
        let err = load_jsonl(f.path(), None).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        let f = tmp("{\"id\":\"u3\",\"tokens\":[\"a\",\"b\",\"c\"],\"spans\":[{\"start\":0,\"end\":2,\"label\":\"A\"},{\"start\":1,\"end\":3,\"label\":\"B\"}]}\n");
        let err = load_jsonl(f.path(), None).unwrap_err().to_string();
        assert!(err.contains("u3") && err.contains(":1:"), "{err}");

        let f = tmp("{\"id\":\"u4\",\"tokens\":[\"a\"],\"spans\":[{\"start\":0,\"end\":2,\"label\":\"A\"}]}\n");
        assert!(load_jsonl(f.path(), None).is_err());

        let f = tmp("{\"id\":\"u5\",\"tokens\":[\"a\"],\"intent\":\"x\"}\n");
        assert!(load_jsonl(f.path(), Some(Task::Slot)).is_err());
    }

    #[test]
    fn round_trip() {
        let f = tmp(concat!(
            "{\"id\":\"a\",\"tokens\":[\"x\",\"y\"],\"spans\":[{\"start\":0,\"end\":1,\"label\":\"L\"}]}\n",
            "{\"id\":\"b\",\"tokens\":[\"z\"],\"spans\":[]}\n",
        ));
        let d = load_jsonl(f.path(), None).unwrap();
        let again = tmp(&dataset_to_string(&d));
        assert_eq!(load_jsonl(again.path(), None).unwrap(), d);
    }

    #[test]
    fn gold_files_read_as_predictions() {
        let f = tmp("{\"id\":\"a\",\"tokens\":[\"x\"],\"spans\":[{\"start\":0,\"end\":1,\"label\":\"L\"}]}\n");
        let p = load_predictions(f.path()).unwrap();
        assert_eq!(p["a"].spans.as_ref().unwrap()[0].label, "L");
        let dup = tmp("{\"id\":\"a\",\"intent\":\"x\"}\n{\"id\":\"a\",\"intent\":\"y\"}\n");
        assert!(load_predictions(dup.path()).unwrap_err().to_string().contains(":2:"));
    }
}
