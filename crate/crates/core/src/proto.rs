//! Prototypical-network baseline: one mean embedding per label.
//!
//! Prototypes are scored exactly like index entries, so the same decoder
//! runs on top of either candidate source.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{EmbeddingVector, Encoder};
use crate::index::{normalize_score, IndexEntry, IndexKind, Provenance, RetrievalIndex};
use crate::model::{Dataset, Task};
use crate::objective::embed_instances;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: EmbeddingVector,
    pub count: usize,
}

/// Label to prototype, iterated in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    task: Task,
    dim: usize,
    prototypes: BTreeMap<String, Prototype>,
}

impl PrototypeTable {
    /// Averages pre-computed `(label, vector)` pairs per label.
    pub fn from_vectors<'a>(
        task: Task,
        dim: usize,
        vectors: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    ) -> Result<Self> {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for (label, v) in vectors {
            if v.len() != dim {
                return Err(Error::DimMismatch { expected: dim, actual: v.len() });
            }
            let slot = sums.entry(String::from(label)).or_insert_with(|| (alloc::vec![0.0; dim], 0));
            for (s, x) in slot.0.iter_mut().zip(v) {
                *s += x;
            }
            slot.1 += 1;
        }
        let prototypes = sums
            .into_iter()
            .map(|(label, (sum, count))| {
                let mean = sum.into_iter().map(|s| s / count as f64).collect();
                (label, Prototype { vector: EmbeddingVector::from_vec_unchecked(mean), count })
            })
            .collect();
        Ok(Self { task, dim, prototypes })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Prototype> {
        self.prototypes.get(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Prototype)> {
        self.prototypes.iter().map(|(l, p)| (l.as_str(), p))
    }

    /// The prototypes as an index (label order), usable wherever a retrieval
    /// index is. Provenance records `proto:<label>` and the member count.
    pub fn to_index(&self) -> Result<RetrievalIndex> {
        RetrievalIndex::from_entries(
            IndexKind::Proto(self.task),
            self.dim,
            self.prototypes.iter().map(|(label, p)| IndexEntry {
                vector: p.vector.clone(),
                label: label.clone(),
                provenance: Provenance { example_id: format!("proto:{label}"), start: 0, end: p.count },
            }),
        )
    }

    /// Rebuilds a table from an index written by [`PrototypeTable::to_index`].
    pub fn from_index(index: &RetrievalIndex) -> Result<Self> {
        let IndexKind::Proto(task) = index.kind() else {
            return Err(Error::InvalidConfig { reason: format!("expected a prototype index, got {}", index.kind()) });
        };
        let prototypes = index
            .entries()
            .map(|e| {
                let vector = EmbeddingVector::new(e.vector.to_vec())?;
                Ok((String::from(e.label), Prototype { vector, count: e.provenance.end }))
            })
            .collect::<Result<_>>()?;
        Ok(Self { task, dim: index.dim(), prototypes })
    }
}

/// Mean support embedding per label. Labels without support instances cannot
/// occur here; they are simply absent from the table.
pub fn build_prototypes<E: Encoder>(support: &Dataset, encoder: &E, task: Task) -> Result<PrototypeTable> {
    let instances = embed_instances(encoder, support, task)?;
    for label in support.label_set() {
        if !instances.iter().any(|(_, l, _)| l == label) {
            log::warn!("label {label:?} has no support instances; excluded from prototypes");
        }
    }
    PrototypeTable::from_vectors(
        task,
        encoder.embedding_dim(task),
        instances.iter().map(|(_, l, v)| (l.as_str(), v.as_slice())),
    )
}

/// Label of the prototype with the highest normalized score; ties keep the
/// lexicographically smallest label.
pub fn proto_predict(query: &[f64], table: &PrototypeTable) -> Result<(String, f64)> {
    if table.is_empty() {
        return Err(Error::EmptyPrototypes);
    }
    if query.len() != table.dim {
        return Err(Error::DimMismatch { expected: table.dim, actual: query.len() });
    }
    let mut best: Option<(&str, f64)> = None;
    for (label, p) in table.iter() {
        let s = normalize_score(query, p.vector.as_slice());
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    let (label, score) = best.expect("table is non-empty");
    Ok((String::from(label), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::dot;
    use alloc::vec;

    fn table(items: &[(&str, &[f64])]) -> PrototypeTable {
        PrototypeTable::from_vectors(Task::Intent, 2, items.iter().copied()).unwrap()
    }

    #[test]
    fn prototype_is_mean() {
        let t = table(&[("a", &[1.0, 2.0]), ("b", &[3.0, -1.0]), ("b", &[-3.0, 1.0])]);
        assert_eq!(t.get("a").unwrap().vector.as_slice(), &[1.0, 2.0]);
        assert_eq!(t.get("b").unwrap().vector.as_slice(), &[0.0, 0.0]);
        assert_eq!(t.get("b").unwrap().count, 2);
    }

    #[test]
    fn prototype_dot_is_mean_of_member_dots() {
        let members: [&[f64]; 3] = [&[0.3, -1.2], &[2.0, 0.5], &[-0.7, 0.9]];
        let t = table(&members.iter().map(|m| ("a", *m)).collect::<Vec<_>>());
        let q = [1.7, -0.4];
        let via_proto = dot(&q, t.get("a").unwrap().vector.as_slice());
        let via_members = members.iter().map(|m| dot(&q, m)).sum::<f64>() / 3.0;
        assert!((via_proto - via_members).abs() < 1e-12);
    }

    #[test]
    fn predict_examples() {
        let t = table(&[("b", &[0.0, 1.0]), ("a", &[1.0, 0.0])]);
        assert_eq!(proto_predict(&[0.0, 2.0], &t).unwrap().0, "b");
        // Equidistant: lexicographically smallest label.
        assert_eq!(proto_predict(&[1.0, 1.0], &t).unwrap().0, "a");
        let idx = t.to_index().unwrap();
        for q in [[0.3, 0.9], [1.0, -0.2], [-1.0, 0.1]] {
            let (label, score) = proto_predict(&q, &t).unwrap();
            let (hit, s) = idx.query_top1_normalized(&q).unwrap();
            assert_eq!(label, hit.label);
            assert_eq!(score, s);
        }
        let empty = PrototypeTable::from_vectors(Task::Intent, 2, vec![]).unwrap();
        assert!(matches!(proto_predict(&[1.0, 0.0], &empty), Err(Error::EmptyPrototypes)));
    }

    #[test]
    fn index_round_trip() {
        let t = table(&[("x", &[1.0, 0.5]), ("y", &[0.0, -2.0]), ("y", &[1.0, 0.0])]);
        assert_eq!(PrototypeTable::from_index(&t.to_index().unwrap()).unwrap(), t);
    }
}
