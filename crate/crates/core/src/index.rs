//! Exact dense retrieval over labeled spans or utterances.
//!
//! Vectors are stored contiguously and searched by linear scan. Raw
//! dot-product top-1 is available for completeness, but decoding ranks by
//! the normalized score so that thresholding and ranking agree.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingVector, Encoder};
use crate::math::dot;
use crate::model::{Dataset, Task};
use crate::objective::embed_instances;
use crate::{Error, Result};

/// Where an index entry came from: example id and span bounds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub example_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub vector: EmbeddingVector,
    pub label: String,
    pub provenance: Provenance,
}

/// Borrowed view of one stored entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryRef<'a> {
    pub position: usize,
    pub vector: &'a [f64],
    pub label: &'a str,
    pub provenance: &'a Provenance,
}

/// What the entries represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IndexKind {
    /// Labeled spans of support examples.
    Slot,
    /// Whole support utterances.
    Intent,
    /// Per-label mean prototypes for the given task.
    Proto(Task),
}

impl IndexKind {
    pub fn task(self) -> Task {
        match self {
            IndexKind::Slot => Task::Slot,
            IndexKind::Intent => Task::Intent,
            IndexKind::Proto(t) => t,
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Slot => IndexKind::Slot,
            Task::Intent => IndexKind::Intent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::Slot => "slot",
            IndexKind::Intent => "intent",
            IndexKind::Proto(Task::Slot) => "proto:slot",
            IndexKind::Proto(Task::Intent) => "proto:intent",
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slot" => Ok(IndexKind::Slot),
            "intent" => Ok(IndexKind::Intent),
            "proto:slot" => Ok(IndexKind::Proto(Task::Slot)),
            "proto:intent" => Ok(IndexKind::Proto(Task::Intent)),
            other => Err(Error::InvalidConfig { reason: format!("unknown index kind {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    kind: IndexKind,
    dim: usize,
    data: Vec<f64>,
    /// Squared L2 norms.
    norms: Vec<f64>,
    labels: Vec<String>,
    provenance: Vec<Provenance>,
}

impl RetrievalIndex {
    pub fn new(kind: IndexKind, dim: usize) -> Self {
        Self { kind, dim, data: Vec::new(), norms: Vec::new(), labels: Vec::new(), provenance: Vec::new() }
    }

    pub fn from_entries(kind: IndexKind, dim: usize, entries: impl IntoIterator<Item = IndexEntry>) -> Result<Self> {
        let mut index = Self::new(kind, dim);
        for e in entries {
            index.push(e)?;
        }
        Ok(index)
    }

    pub fn push(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.vector.dim() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, actual: entry.vector.dim() });
        }
        if entry.vector.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "index vector".into() });
        }
        self.norms.push(dot(entry.vector.as_slice(), entry.vector.as_slice()));
        self.data.extend_from_slice(entry.vector.as_slice());
        self.labels.push(entry.label);
        self.provenance.push(entry.provenance);
        Ok(())
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entry(&self, position: usize) -> EntryRef<'_> {
        EntryRef {
            position,
            vector: &self.data[position * self.dim..(position + 1) * self.dim],
            label: &self.labels[position],
            provenance: &self.provenance[position],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = EntryRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.entry(i))
    }

    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for l in &self.labels {
            *out.entry(l.as_str()).or_insert(0) += 1;
        }
        out
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, actual: q.len() });
        }
        Ok(())
    }

    /// Entry with the largest dot product; ties keep the earliest entry.
    pub fn query_top1(&self, q: &[f64]) -> Result<(EntryRef<'_>, f64)> {
        self.check_query(q)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in self.data.chunks_exact(self.dim).enumerate() {
            let s = dot(q, v);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok((self.entry(best.0), best.1))
    }

    /// Entry with the largest normalized score; ties keep the earliest entry.
    pub fn query_top1_normalized(&self, q: &[f64]) -> Result<(EntryRef<'_>, f64)> {
        self.check_query(q)?;
        let qn = dot(q, q);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in self.data.chunks_exact(self.dim).enumerate() {
            let s = normalized_from_parts(dot(q, v), qn, self.norms[i]);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok((self.entry(best.0), best.1))
    }
}

/// Support-set construction variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "variant")]
pub enum SupportSetSpec {
    /// Source and target examples.
    All,
    /// Source and target, subsampled to `k` entries per label.
    Balance { k: usize },
    /// Target examples only.
    Tgt,
}

impl SupportSetSpec {
    pub fn parse(variant: &str, k: Option<usize>) -> Result<Self> {
        match variant {
            "all" => Ok(SupportSetSpec::All),
            "tgt" => Ok(SupportSetSpec::Tgt),
            "balance" => match k {
                Some(k) if k > 0 => Ok(SupportSetSpec::Balance { k }),
                _ => Err(Error::InvalidConfig { reason: "balance variant needs a positive k".into() }),
            },
            other => Err(Error::InvalidConfig { reason: format!("unknown support variant {other:?}") }),
        }
    }
}

/// Builds an index over the support set. Slot indexes hold one entry per
/// labeled span, intent indexes one per utterance. Entries keep source-then-
/// target dataset order; `Balance` keeps a seeded subset of `k` per label.
pub fn build_index<E: Encoder>(
    encoder: &E,
    source: Option<&Dataset>,
    target: &Dataset,
    spec: SupportSetSpec,
    task: Task,
    seed: u64,
) -> Result<RetrievalIndex> {
    let mut pools: Vec<&Dataset> = Vec::new();
    if !matches!(spec, SupportSetSpec::Tgt) {
        pools.extend(source);
    }
    pools.push(target);

    let mut entries = Vec::new();
    for data in pools {
        if let Some(t) = data.task() {
            if t != task {
                return Err(Error::TaskMismatch { expected: task.as_str(), actual: t.as_str() });
            }
        }
        for (span, label, vector) in embed_instances(encoder, data, task)? {
            let provenance = Provenance {
                example_id: String::from(data.examples()[span.example].id()),
                start: span.start,
                end: span.end,
            };
            entries.push(IndexEntry { vector, label, provenance });
        }
    }

    if let SupportSetSpec::Balance { k } = spec {
        let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_label.entry(e.label.clone()).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = alloc::vec![false; entries.len()];
        for positions in by_label.values() {
            if positions.len() <= k {
                positions.iter().for_each(|&p| keep[p] = true);
            } else {
                for s in sample_indices(&mut rng, positions.len(), k) {
                    keep[positions[s]] = true;
                }
            }
        }
        let mut flags = keep.into_iter();
        entries.retain(|_| flags.next().unwrap_or(false));
    }

    if entries.is_empty() {
        return Err(Error::EmptySupport);
    }
    RetrievalIndex::from_entries(IndexKind::for_task(task), encoder.embedding_dim(task), entries)
}

/// `(cos + 1) / 2` from the dot product and both squared norms. Taking one
/// square root of the product keeps identical vectors at exactly 1.
fn normalized_from_parts(dot: f64, q_sq: f64, v_sq: f64) -> f64 {
    if q_sq == 0.0 || v_sq == 0.0 {
        log::warn!("zero-norm vector in normalized score; scoring 0");
        return 0.0;
    }
    ((dot / libm::sqrt(q_sq * v_sq)).clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Cosine similarity mapped affinely onto `[0, 1]`. A zero vector scores 0.
pub fn normalize_score(q: &[f64], v: &[f64]) -> f64 {
    normalized_from_parts(dot(q, v), dot(q, q), dot(v, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(v: &[f64], label: &str, i: usize) -> IndexEntry {
        IndexEntry {
            vector: EmbeddingVector::new(v.to_vec()).unwrap(),
            label: label.into(),
            provenance: Provenance { example_id: format!("e{i}"), start: 0, end: 1 },
        }
    }

    #[test]
    fn top1_examples() {
        let idx = RetrievalIndex::from_entries(
            IndexKind::Slot,
            2,
            vec![entry(&[1.0, 0.0], "A", 0), entry(&[0.0, 1.0], "B", 1)],
        )
        .unwrap();
        assert_eq!(idx.query_top1(&[0.9, 0.1]).unwrap().0.label, "A");
        assert_eq!(idx.query_top1(&[0.0, 1.0]).unwrap().0.label, "B");
        assert!(matches!(idx.query_top1(&[1.0]), Err(Error::DimMismatch { .. })));
        let empty = RetrievalIndex::new(IndexKind::Slot, 2);
        assert!(matches!(empty.query_top1(&[1.0, 0.0]), Err(Error::EmptyIndex)));
    }

    #[test]
    fn ties_keep_insertion_order() {
        let idx = RetrievalIndex::from_entries(
            IndexKind::Slot,
            2,
            vec![entry(&[1.0, 0.0], "A", 0), entry(&[1.0, 0.0], "B", 1)],
        )
        .unwrap();
        assert_eq!(idx.query_top1(&[1.0, 0.0]).unwrap().0.position, 0);
        assert_eq!(idx.query_top1_normalized(&[1.0, 0.0]).unwrap().0.position, 0);
    }

    #[test]
    fn normalized_score_examples() {
        assert_eq!(normalize_score(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(normalize_score(&[1.0, 0.0], &[0.0, 3.0]), 0.5);
        assert_eq!(normalize_score(&[1.0, 0.0], &[-2.0, 0.0]), 0.0);
        assert_eq!(normalize_score(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn dim_mismatch_on_push() {
        let mut idx = RetrievalIndex::new(IndexKind::Intent, 3);
        assert!(idx.push(entry(&[1.0], "A", 0)).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [IndexKind::Slot, IndexKind::Intent, IndexKind::Proto(Task::Slot), IndexKind::Proto(Task::Intent)] {
            assert_eq!(k.as_str().parse::<IndexKind>().unwrap(), k);
        }
        assert!(SupportSetSpec::parse("bogus", None).is_err());
        assert!(SupportSetSpec::parse("balance", None).is_err());
    }
}
