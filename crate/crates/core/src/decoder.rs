//! Slot decoding from span retrieval results.
//!
//! Pipeline: enumerate every span up to `max_span_len` tokens, retrieve its
//! best labeled entry, keep candidates above a threshold (relaxed stepwise
//! when nothing survives), beam-search the non-overlapping subset with the
//! highest average score, then merge adjacent same-label spans whose scores
//! are within `merge_threshold`.
//!
//! The decoding objective is the average score over *maximal*
//! non-overlapping subsets of the kept candidates; [`brute_force_decode`]
//! enumerates that objective exactly and serves as the test oracle.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoder::{embed_span, Encoder};
use crate::index::RetrievalIndex;
use crate::model::{spans_overlap, LabeledSpan, Task, Utterance};
use crate::{Error, Result};

/// Largest input [`brute_force_decode`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub start: usize,
    pub end: usize,
    pub label: String,
    /// Normalized retrieval score in `[0, 1]`.
    pub score: f64,
    /// Position of the retrieved index entry.
    pub entry: usize,
}

impl Candidate {
    pub fn new(start: usize, end: usize, label: impl Into<String>, score: f64) -> Self {
        Self { start, end, label: label.into(), score, entry: 0 }
    }

    fn bounds(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn overlaps(&self, other: &Candidate) -> bool {
        spans_overlap(self.bounds(), other.bounds())
    }

    pub fn to_labeled_span(&self) -> LabeledSpan {
        LabeledSpan::new(self.start, self.end, self.label.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Longest span enumerated, in tokens (`m`).
    pub max_span_len: usize,
    /// Initial filter threshold (`tau`).
    pub threshold: f64,
    /// Amount the threshold drops per relaxation step.
    pub dyn_decrement: f64,
    /// Maximum number of relaxation steps.
    pub dyn_steps: usize,
    pub beam_size: usize,
    /// Merge threshold (`lambda`): 0 never merges, 1 always merges.
    pub merge_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_span_len: 7,
            threshold: 0.9,
            dyn_decrement: 0.05,
            dyn_steps: 10,
            beam_size: 10,
            merge_threshold: 0.99,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::InvalidConfig { reason: reason.into() });
        if self.max_span_len == 0 {
            return bad("max_span_len must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.merge_threshold) {
            return bad("merge_threshold must lie in [0, 1]");
        }
        if !(self.dyn_decrement > 0.0 && self.dyn_decrement.is_finite()) {
            return bad("dyn_decrement must be positive");
        }
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1");
        }
        Ok(())
    }

    /// Lowest threshold the relaxation schedule reaches.
    pub fn floor_threshold(&self) -> f64 {
        self.threshold - self.dyn_steps as f64 * self.dyn_decrement
    }
}

/// All `[start, end)` with `1 <= end - start <= m`, ordered by start then length.
pub fn enumerate_spans(n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in 0..n {
        for len in 1..=m.min(n - start) {
            out.push((start, start + len));
        }
    }
    out
}

/// One candidate per enumerated span, carrying the label and normalized
/// score of its best-matching index entry.
pub fn retrieve_candidates<E: Encoder>(
    utterance: &Utterance,
    index: &RetrievalIndex,
    encoder: &E,
    max_span_len: usize,
) -> Result<Vec<Candidate>> {
    if index.kind().task() != Task::Slot {
        return Err(Error::TaskMismatch { expected: "slot", actual: index.kind().task().as_str() });
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let ctx = encoder.contextual(utterance);
    enumerate_spans(utterance.len(), max_span_len)
        .into_iter()
        .map(|(start, end)| {
            let z = embed_span(&ctx, start, end)?;
            let (hit, score) = index.query_top1_normalized(z.as_slice())?;
            Ok(Candidate { start, end, label: String::from(hit.label), score, entry: hit.position })
        })
        .collect()
}

/// Keeps candidates scoring at least the current threshold, lowering it by
/// `decrement` up to `steps` times while nothing survives. Returns the kept
/// candidates and the threshold that produced them.
pub fn filter_dynamic(candidates: &[Candidate], threshold: f64, decrement: f64, steps: usize) -> (Vec<Candidate>, f64) {
    for step in 0..=steps {
        let current = threshold - step as f64 * decrement;
        let kept: Vec<Candidate> = candidates.iter().filter(|c| c.score >= current).cloned().collect();
        if !kept.is_empty() {
            return (kept, current);
        }
    }
    (Vec::new(), threshold - steps as f64 * decrement)
}

/// Processing order: score descending, then earlier start, then shorter.
fn processing_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)).then((a.end - a.start).cmp(&(b.end - b.start)))
}

fn span_order(a: &Candidate, b: &Candidate) -> Ordering {
    (a.start, a.end).cmp(&(b.start, b.end)).then_with(|| a.label.cmp(&b.label))
}

/// Average score with the sum taken in span order, so equal sets always
/// produce bit-identical averages. `None` for the empty set.
pub fn set_average(spans: &[Candidate]) -> Option<f64> {
    if spans.is_empty() {
        return None;
    }
    let mut sorted: Vec<&Candidate> = spans.iter().collect();
    sorted.sort_by(|a, b| span_order(a, b));
    Some(sorted.iter().map(|c| c.score).sum::<f64>() / sorted.len() as f64)
}

/// Final ranking of decoded sets: higher average, then more spans, then the
/// lexicographically earliest span list. `Less` means `a` is preferred.
fn compare_sets(a: &[Candidate], b: &[Candidate]) -> Ordering {
    let avg = |s: &[Candidate]| set_average(s).unwrap_or(f64::NEG_INFINITY);
    avg(b).total_cmp(&avg(a)).then(b.len().cmp(&a.len())).then_with(|| {
        let key = |s: &[Candidate]| {
            let mut v: Vec<(usize, usize)> = s.iter().map(Candidate::bounds).collect();
            v.sort();
            v
        };
        key(a).cmp(&key(b))
    })
}

#[derive(Debug, Clone)]
struct BeamState {
    /// Positions in the processing order.
    chosen: Vec<usize>,
    sum: f64,
}

impl BeamState {
    fn average(&self) -> f64 {
        if self.chosen.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.sum / self.chosen.len() as f64
        }
    }
}

/// Beam search over the kept candidates for the non-overlapping set with the
/// highest average score. Each final beam state is completed greedily with
/// every remaining candidate that fits, so the result is maximal.
pub fn beam_decode(kept: &[Candidate], beam_size: usize) -> Vec<Candidate> {
    let beam_size = beam_size.max(1);
    let mut order: Vec<Candidate> = kept.to_vec();
    order.sort_by(processing_order);

    let bounds_of = |s: &BeamState| {
        let mut v: Vec<(usize, usize)> = s.chosen.iter().map(|&i| order[i].bounds()).collect();
        v.sort();
        v
    };

    let mut beam = alloc::vec![BeamState { chosen: Vec::new(), sum: 0.0 }];
    for (i, cand) in order.iter().enumerate() {
        let mut next = Vec::with_capacity(beam.len() * 2);
        for state in &beam {
            if state.chosen.iter().all(|&j| !order[j].overlaps(cand)) {
                let mut chosen = state.chosen.clone();
                chosen.push(i);
                next.push(BeamState { chosen, sum: state.sum + cand.score });
            }
            next.push(state.clone());
        }
        if next.len() > beam_size {
            next.sort_by(|a, b| b.average().total_cmp(&a.average()).then_with(|| bounds_of(a).cmp(&bounds_of(b))));
            next.truncate(beam_size);
        }
        beam = next;
    }

    beam.iter()
        .map(|state| {
            let mut set: Vec<Candidate> = state.chosen.iter().map(|&i| order[i].clone()).collect();
            for cand in &order {
                if set.iter().all(|c| !c.overlaps(cand)) {
                    set.push(cand.clone());
                }
            }
            set.sort_by(span_order);
            set
        })
        .min_by(|a, b| compare_sets(a, b))
        .unwrap_or_default()
}

/// Exhaustive search over all maximal non-overlapping subsets.
pub fn brute_force_decode(kept: &[Candidate]) -> Result<Vec<Candidate>> {
    let n = kept.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManyCandidates { limit: BRUTE_FORCE_LIMIT, actual: n });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let conflicts: Vec<u32> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && kept[i].overlaps(&kept[j])).fold(0u32, |m, j| m | (1 << j)))
        .collect();
    let mut best: Option<Vec<Candidate>> = None;
    for mask in 1u32..(1u32 << n) {
        let members = (0..n).filter(|&i| mask & (1 << i) != 0);
        if members.clone().any(|i| conflicts[i] & mask != 0) {
            continue;
        }
        let maximal = (0..n).filter(|&j| mask & (1 << j) == 0).all(|j| conflicts[j] & mask != 0);
        if !maximal {
            continue;
        }
        let mut set: Vec<Candidate> = members.map(|i| kept[i].clone()).collect();
        set.sort_by(span_order);
        if best.as_ref().is_none_or(|b| compare_sets(&set, b) == Ordering::Less) {
            best = Some(set);
        }
    }
    Ok(best.unwrap_or_default())
}

fn within_merge_range(a: f64, b: f64, lambda: f64) -> bool {
    let diff = libm::fabs(a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0));
    if lambda >= 1.0 {
        diff <= 1.0
    } else {
        diff < lambda
    }
}

/// Fuses adjacent spans `[i, j)` and `[j, k)` that share a label and whose
/// scores differ by less than `lambda`, until no pair qualifies. The merged
/// span keeps the higher score (and that span's entry).
pub fn merge_spans(decoded: &[Candidate], lambda: f64) -> Vec<Candidate> {
    let mut spans: Vec<Candidate> = decoded.to_vec();
    spans.sort_by(span_order);
    loop {
        let mut changed = false;
        let mut i = 0;
        while i + 1 < spans.len() {
            let (a, b) = (&spans[i], &spans[i + 1]);
            if a.end == b.start && a.label == b.label && within_merge_range(a.score, b.score, lambda) {
                let right = spans.remove(i + 1);
                let left = &mut spans[i];
                left.end = right.end;
                if right.score > left.score {
                    left.score = right.score;
                    left.entry = right.entry;
                }
                changed = true;
            } else {
                i += 1;
            }
        }
        if !changed {
            return spans;
        }
    }
}

/// Runs the full slot pipeline on one utterance and returns spans in order.
pub fn decode<E: Encoder>(
    utterance: &Utterance,
    index: &RetrievalIndex,
    encoder: &E,
    config: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    config.validate()?;
    let candidates = retrieve_candidates(utterance, index, encoder, config.max_span_len)?;
    Ok(decode_candidates(&candidates, config))
}

/// Filtering, beam search and merging over precomputed candidates.
pub fn decode_candidates(candidates: &[Candidate], config: &DecodeConfig) -> Vec<Candidate> {
    let (kept, _) = filter_dynamic(candidates, config.threshold, config.dyn_decrement, config.dyn_steps);
    if kept.is_empty() {
        return Vec::new();
    }
    let decoded = beam_decode(&kept, config.beam_size);
    merge_spans(&decoded, config.merge_threshold)
}

/// Intent prediction: label of the most similar support utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentPrediction {
    pub label: String,
    pub score: f64,
    pub entry: usize,
}

pub fn predict_intent<E: Encoder>(
    utterance: &Utterance,
    index: &RetrievalIndex,
    encoder: &E,
) -> Result<IntentPrediction> {
    if index.kind().task() != Task::Intent {
        return Err(Error::TaskMismatch { expected: "intent", actual: index.kind().task().as_str() });
    }
    let z = crate::encoder::embed_utterance(&encoder.contextual(utterance));
    let (hit, score) = index.query_top1_normalized(z.as_slice())?;
    Ok(IntentPrediction { label: String::from(hit.label), score, entry: hit.position })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn c(start: usize, end: usize, label: &str, score: f64) -> Candidate {
        Candidate::new(start, end, label, score)
    }

    fn bounds(set: &[Candidate]) -> Vec<(usize, usize)> {
        set.iter().map(|c| (c.start, c.end)).collect()
    }

    #[test]
    fn enumerate_examples() {
        assert_eq!(enumerate_spans(3, 2), vec![(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(enumerate_spans(4, 9).len(), 10);
        assert_eq!(enumerate_spans(1, 7), vec![(0, 1)]);
    }

    #[test]
    fn filter_examples() {
        let (kept, t) = filter_dynamic(&[c(0, 1, "A", 0.9), c(1, 2, "A", 0.3)], 0.8, 0.05, 10);
        assert_eq!(bounds(&kept), vec![(0, 1)]);
        assert_eq!(t, 0.8);

        let all = [c(0, 1, "A", 0.41), c(1, 2, "B", 0.41)];
        let (kept, t) = filter_dynamic(&all, 0.9, 0.05, 10);
        assert_eq!(kept.len(), 2);
        assert!((t - 0.40).abs() < 1e-12);

        let (kept, t) = filter_dynamic(&[c(0, 1, "A", 0.0)], 0.9, 0.05, 10);
        assert!(kept.is_empty());
        assert!((t - 0.40).abs() < 1e-12);
    }

    #[test]
    fn beam_prefers_whole_span() {
        let kept = [c(0, 3, "A", 0.9), c(0, 1, "B", 0.95), c(2, 3, "C", 0.8)];
        assert_eq!(bounds(&beam_decode(&kept, 4)), vec![(0, 3)]);
        assert_eq!(bounds(&brute_force_decode(&kept).unwrap()), vec![(0, 3)]);
    }

    #[test]
    fn beam_small_cases() {
        assert_eq!(bounds(&beam_decode(&[c(1, 2, "A", 0.5)], 1)), vec![(1, 2)]);
        let two = [c(0, 1, "A", 0.9), c(3, 5, "B", 0.2)];
        assert_eq!(bounds(&beam_decode(&two, 1)), vec![(0, 1), (3, 5)]);
        assert!(beam_decode(&[], 3).is_empty());
    }

    #[test]
    fn brute_force_cases() {
        assert!(brute_force_decode(&[]).unwrap().is_empty());
        let clash = [c(0, 3, "A", 0.5), c(1, 2, "B", 0.7), c(2, 4, "C", 0.6)];
        // {B, C} overlap? [1,2) and [2,4) do not; {A} vs {B,C}: 0.5 vs 0.65.
        assert_eq!(bounds(&brute_force_decode(&clash).unwrap()), vec![(1, 2), (2, 4)]);
        let nested = [c(0, 4, "A", 0.5), c(1, 3, "B", 0.7), c(0, 2, "C", 0.6)];
        assert_eq!(bounds(&brute_force_decode(&nested).unwrap()), vec![(1, 3)]);
        let many: Vec<Candidate> = (0..21).map(|i| c(i, i + 1, "A", 0.5)).collect();
        assert!(matches!(brute_force_decode(&many), Err(Error::TooManyCandidates { .. })));
    }

    #[test]
    fn merge_examples() {
        let pair = [c(0, 2, "loc", 0.90), c(2, 4, "loc", 0.895)];
        let merged = merge_spans(&pair, 0.01);
        assert_eq!(bounds(&merged), vec![(0, 4)]);
        assert_eq!(merged[0].score, 0.90);
        assert_eq!(merge_spans(&pair, 0.0), pair.to_vec());
        let extreme = [c(0, 1, "x", 0.0), c(1, 2, "x", 1.0), c(2, 3, "y", 0.5)];
        assert_eq!(bounds(&merge_spans(&extreme, 1.0)), vec![(0, 2), (2, 3)]);
        // Different labels and gaps never merge.
        let apart = [c(0, 1, "x", 0.5), c(2, 3, "x", 0.5)];
        assert_eq!(merge_spans(&apart, 1.0).len(), 2);
    }

    #[test]
    fn merge_chains_to_fixpoint() {
        let chain = [c(0, 1, "x", 0.5), c(1, 2, "x", 0.52), c(2, 3, "x", 0.54)];
        let once = merge_spans(&chain, 0.03);
        assert_eq!(bounds(&once), vec![(0, 3)]);
        assert_eq!(merge_spans(&once, 0.03), once);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        assert!(DecodeConfig { beam_size: 0, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { threshold: 1.5, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { dyn_decrement: 0.0, ..Default::default() }.validate().is_err());
        assert!((DecodeConfig::default().floor_threshold() - 0.4).abs() < 1e-12);
    }
}
