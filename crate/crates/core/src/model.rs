//! Utterances, labeled spans, examples and datasets.
//!
//! Spans are token-indexed half-open intervals `[start, end)`. All types
//! validate on construction, so an [`Example`] with overlapping or
//! out-of-range spans cannot exist.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Slot,
    Intent,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Slot => "slot",
            Task::Intent => "intent",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slot" => Ok(Task::Slot),
            "intent" => Ok(Task::Intent),
            other => Err(Error::InvalidConfig { reason: format!("unknown task {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    id: String,
    tokens: Vec<String>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance { id });
        }
        if let Some(index) = tokens.iter().position(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::BadToken { id, index });
        }
        Ok(Self { id, tokens })
    }

    /// Splits `text` on whitespace.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self> {
        Self::new(id, text.split_whitespace().map(String::from).collect())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self { start, end, label: label.into() }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &LabeledSpan) -> bool {
        spans_overlap((self.start, self.end), (other.start, other.end))
    }
}

#[inline]
pub fn spans_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Annotation {
    Intent(String),
    /// Sorted by start; pairwise non-overlapping.
    Slots(Vec<LabeledSpan>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    utterance: Utterance,
    annotation: Annotation,
}

impl Example {
    pub fn intent(utterance: Utterance, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if label.is_empty() {
            return Err(Error::EmptyLabel { id: utterance.id.clone() });
        }
        Ok(Self { utterance, annotation: Annotation::Intent(label) })
    }

    pub fn slots(utterance: Utterance, mut spans: Vec<LabeledSpan>) -> Result<Self> {
        let n = utterance.len();
        let id = || utterance.id.clone();
        for s in &spans {
            if s.start >= s.end || s.end > n {
                return Err(Error::SpanOutOfRange { id: id(), start: s.start, end: s.end, len: n });
            }
            if s.label.is_empty() {
                return Err(Error::EmptyLabel { id: id() });
            }
        }
        spans.sort_by_key(|s| (s.start, s.end));
        for w in spans.windows(2) {
            if w[0].overlaps(&w[1]) {
                return Err(Error::OverlappingSpans {
                    id: id(),
                    a_start: w[0].start,
                    a_end: w[0].end,
                    b_start: w[1].start,
                    b_end: w[1].end,
                });
            }
        }
        Ok(Self { utterance, annotation: Annotation::Slots(spans) })
    }

    pub fn utterance(&self) -> &Utterance {
        &self.utterance
    }

    pub fn id(&self) -> &str {
        self.utterance.id()
    }

    pub fn annotation(&self) -> &Annotation {
        &self.annotation
    }

    pub fn task(&self) -> Task {
        match self.annotation {
            Annotation::Intent(_) => Task::Intent,
            Annotation::Slots(_) => Task::Slot,
        }
    }

    pub fn intent_label(&self) -> Option<&str> {
        match &self.annotation {
            Annotation::Intent(l) => Some(l),
            Annotation::Slots(_) => None,
        }
    }

    /// Labeled spans; an intent example yields its whole utterance.
    pub fn spans(&self) -> Vec<LabeledSpan> {
        match &self.annotation {
            Annotation::Intent(l) => alloc::vec![LabeledSpan::new(0, self.utterance.len(), l.clone())],
            Annotation::Slots(s) => s.clone(),
        }
    }

    pub fn slot_spans(&self) -> &[LabeledSpan] {
        match &self.annotation {
            Annotation::Intent(_) => &[],
            Annotation::Slots(s) => s,
        }
    }

    /// Label occurrences in this example.
    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        match &self.annotation {
            Annotation::Intent(l) => {
                out.insert(l.as_str(), 1);
            }
            Annotation::Slots(spans) => {
                for s in spans {
                    *out.entry(s.label.as_str()).or_insert(0) += 1;
                }
            }
        }
        out
    }
}

/// A labeled occurrence: example index plus span bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanRef {
    pub example: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    examples: Vec<Example>,
    labels: BTreeSet<String>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        let labels =
            examples.iter().flat_map(|e| e.label_counts().into_keys().map(String::from).collect::<Vec<_>>()).collect();
        Self { examples, labels }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_set(&self) -> &BTreeSet<String> {
        &self.labels
    }

    /// The common task of all examples, or `None` when empty or mixed.
    pub fn task(&self) -> Option<Task> {
        let first = self.examples.first()?.task();
        self.examples.iter().all(|e| e.task() == first).then_some(first)
    }

    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.examples {
            for (l, c) in e.label_counts() {
                *out.entry(String::from(l)).or_insert(0) += c;
            }
        }
        out
    }

    /// All labeled occurrences grouped by label, in dataset order.
    pub fn instances_by_label(&self) -> BTreeMap<String, Vec<SpanRef>> {
        let mut out: BTreeMap<String, Vec<SpanRef>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            for s in e.spans() {
                out.entry(s.label).or_default().push(SpanRef { example: i, start: s.start, end: s.end });
            }
        }
        out
    }

    /// Concatenation of `self` and `other`, in that order.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut ex = self.examples.clone();
        ex.extend(other.examples.iter().cloned());
        Dataset::new(ex)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.examples[i].clone()).collect())
    }
}

impl FromIterator<Example> for Dataset {
    fn from_iter<I: IntoIterator<Item = Example>>(iter: I) -> Self {
        Dataset::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitDiagnostic {
    /// A target label has fewer than `k` annotated instances.
    Shortfall { label: String, count: usize, k: usize },
    /// A target label never occurs in the source domain.
    UnseenInSource { label: String },
    /// A label occurs in both domains; allowed, reported for information.
    SharedLabel { label: String },
}

impl fmt::Display for SplitDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitDiagnostic::Shortfall { label, count, k } => {
                write!(f, "label {label:?}: {count} instances, below k={k}")
            }
            SplitDiagnostic::UnseenInSource { label } => write!(f, "label {label:?} unseen in source"),
            SplitDiagnostic::SharedLabel { label } => write!(f, "label {label:?} shared by source and target"),
        }
    }
}

impl FewShotSplit {
    /// Per-label shortfalls against `k`, plus unseen/shared label notes.
    pub fn validate(&self) -> Vec<SplitDiagnostic> {
        let mut out = Vec::new();
        let source = self.source.label_set();
        for (label, count) in self.target_train.label_counts() {
            if count < self.k {
                out.push(SplitDiagnostic::Shortfall { label: label.clone(), count, k: self.k });
            }
            if source.is_empty() {
                continue;
            }
            if source.contains(&label) {
                out.push(SplitDiagnostic::SharedLabel { label });
            } else {
                out.push(SplitDiagnostic::UnseenInSource { label });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn utt(id: &str, text: &str) -> Utterance {
        Utterance::from_text(id, text).unwrap()
    }

    #[test]
    fn rejects_overlap_and_names_example() {
        let err = Example::slots(utt("u3", "a b c"), vec![LabeledSpan::new(0, 2, "A"), LabeledSpan::new(1, 3, "B")])
            .unwrap_err();
        assert!(matches!(err, Error::OverlappingSpans { ref id, .. } if id == "u3"));
        assert!(err.to_string().contains("u3"));
    }

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(matches!(
            Example::slots(utt("u", "a b"), vec![LabeledSpan::new(1, 3, "A")]),
            Err(Error::SpanOutOfRange { .. })
        ));
        assert!(matches!(
            Example::slots(utt("u", "a b"), vec![LabeledSpan::new(1, 1, "A")]),
            Err(Error::SpanOutOfRange { .. })
        ));
        assert!(Utterance::new("e", vec![]).is_err());
        assert!(Utterance::new("e", vec!["a b".to_string()]).is_err());
    }

    #[test]
    fn adjacent_spans_are_not_overlapping() {
        let ex =
            Example::slots(utt("u", "a b c"), vec![LabeledSpan::new(1, 3, "B"), LabeledSpan::new(0, 1, "A")]).unwrap();
        assert_eq!(ex.slot_spans()[0].label, "A");
    }

    #[test]
    fn intent_example_spans_whole_utterance() {
        let ex = Example::intent(utt("u1", "set alarm"), "alarm_set").unwrap();
        assert_eq!(ex.spans(), vec![LabeledSpan::new(0, 2, "alarm_set")]);
    }

    fn per_label(id_prefix: &str, label: &str, n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                Example::slots(utt(&format!("{id_prefix}{i}"), "x y"), vec![LabeledSpan::new(0, 1, label)]).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_diagnostics() {
        let mut tgt = per_label("a", "A", 5);
        tgt.extend(per_label("b", "B", 5));
        tgt.extend(per_label("c", "C", 5));
        let split = FewShotSplit {
            source: Dataset::default(),
            target_train: Dataset::new(tgt),
            target_test: Dataset::default(),
            k: 5,
        };
        assert!(split.validate().is_empty());

        let split = FewShotSplit {
            source: Dataset::new(per_label("s", "A", 3)),
            target_train: Dataset::new(per_label("t", "A", 2)),
            target_test: Dataset::default(),
            k: 5,
        };
        let d = split.validate();
        assert!(d.contains(&SplitDiagnostic::Shortfall { label: "A".into(), count: 2, k: 5 }));
        assert!(d.contains(&SplitDiagnostic::SharedLabel { label: "A".into() }));
    }

    #[test]
    fn label_set_is_union() {
        let mut ex = per_label("a", "A", 2);
        ex.push(Example::intent(utt("i", "hi"), "greet").unwrap());
        let ds = Dataset::new(ex);
        let labels: Vec<&str> = ds.label_set().iter().map(String::as_str).collect();
        assert_eq!(labels, ["A", "greet"]);
        assert_eq!(ds.task(), None);
    }
}
