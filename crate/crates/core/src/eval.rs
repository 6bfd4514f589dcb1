//! Metrics and the few-shot experiment protocol.
//!
//! * exact-match span F1 (micro-averaged, conlleval convention)
//! * intent accuracy, macro-averaged over target / source / all labels
//! * greedy K-shot support construction with pruning
//! * episodic evaluation over seeded support/query samples
//! * threshold sweep on a development domain

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_candidates, predict_intent, retrieve_candidates, DecodeConfig};
use crate::encoder::Encoder;
use crate::index::{build_index, RetrievalIndex, SupportSetSpec};
use crate::math::{derive_seed, mean, std_dev};
use crate::model::{Dataset, LabeledSpan, Task};
use crate::proto::build_prototypes;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanF1Report {
    pub true_positives: usize,
    pub predicted_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SpanF1Report {
    pub fn from_counts(true_positives: usize, predicted_count: usize, gold_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, predicted_count);
        let recall = ratio(true_positives, gold_count);
        // 2PR/(P+R) reduced to counts, so F1 is a single rounding of a ratio.
        let f1 = ratio(2 * true_positives, predicted_count + gold_count);
        Self { true_positives, predicted_count, gold_count, precision, recall, f1 }
    }
}

/// Exact `(start, end, label)` matching, micro-averaged over all examples.
pub fn span_f1(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>]) -> Result<SpanF1Report> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&LabeledSpan> = g.iter().collect();
        let p: BTreeSet<&LabeledSpan> = p.iter().collect();
        tp += g.intersection(&p).count();
        np += p.len();
        ng += g.len();
    }
    Ok(SpanF1Report::from_counts(tp, np, ng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAccuracy {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Macro accuracy over target labels; absent when none occur.
    pub tgt: Option<f64>,
    /// Macro accuracy over source labels; absent when none occur.
    pub src: Option<f64>,
    /// Macro accuracy over every gold label.
    pub avg: f64,
    pub per_label: BTreeMap<String, LabelAccuracy>,
}

/// Per-intent accuracy, macro-averaged over the target labels, the source
/// labels, and all labels. Gold labels must belong to one of the two sets.
pub fn intent_accuracy(
    gold: &[String],
    pred: &[String],
    target_labels: &BTreeSet<String>,
    source_labels: &BTreeSet<String>,
) -> Result<AccuracyReport> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    let mut per_label: BTreeMap<String, LabelAccuracy> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        if !target_labels.contains(g) && !source_labels.contains(g) {
            return Err(Error::UnknownLabel { label: g.clone() });
        }
        let acc = per_label.entry(g.clone()).or_insert(LabelAccuracy { correct: 0, total: 0 });
        acc.total += 1;
        acc.correct += usize::from(g == p);
    }
    let macro_over = |keep: &dyn Fn(&str) -> bool| {
        let accs: Vec<f64> =
            per_label.iter().filter(|(l, _)| keep(l)).map(|(_, a)| a.correct as f64 / a.total as f64).collect();
        (!accs.is_empty()).then(|| mean(&accs))
    };
    Ok(AccuracyReport {
        tgt: macro_over(&|l| target_labels.contains(l)),
        src: macro_over(&|l| !target_labels.contains(l)),
        avg: macro_over(&|_| true).unwrap_or(0.0),
        per_label,
    })
}

/// Greedy support selection: repeatedly take the example covering the most
/// still-deficient labels (ties: fewest surplus instances, then a seeded
/// order), then drop every example whose removal keeps all labels at `k` or
/// more. Returns example indices in dataset order.
pub fn kshot_support_indices(data: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidConfig { reason: "k must be positive".into() });
    }
    let totals = data.label_counts();
    let unreachable: Vec<String> = totals.iter().filter(|(_, &c)| c < k).map(|(l, _)| l.clone()).collect();
    if !unreachable.is_empty() {
        return Err(Error::Unreachable { k, labels: unreachable });
    }
    let counts: Vec<BTreeMap<&str, usize>> = data.examples().iter().map(|e| e.label_counts()).collect();
    let mut rank: Vec<usize> = (0..data.len()).collect();
    rank.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut order_of = alloc::vec![0; data.len()];
    for (pos, &i) in rank.iter().enumerate() {
        order_of[i] = pos;
    }

    let mut have: BTreeMap<&str, usize> = totals.keys().map(|l| (l.as_str(), 0)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut used = alloc::vec![false; data.len()];
    while have.values().any(|&c| c < k) {
        let mut best: Option<(usize, (usize, usize, usize))> = None;
        for (i, ex_counts) in counts.iter().enumerate() {
            if used[i] {
                continue;
            }
            let mut covered = 0;
            let mut useful = 0;
            let mut total = 0;
            for (l, &c) in ex_counts {
                let need = k.saturating_sub(have[l]);
                total += c;
                if need > 0 {
                    covered += 1;
                    useful += c.min(need);
                }
            }
            if covered == 0 {
                continue;
            }
            // Larger is better: covered, then fewer surplus, then earlier seeded rank.
            let key = (covered, usize::MAX - (total - useful), usize::MAX - order_of[i]);
            if best.is_none_or(|(_, b)| key > b) {
                best = Some((i, key));
            }
        }
        let (i, _) = best.expect("every deficient label has unused instances");
        used[i] = true;
        chosen.push(i);
        for (l, &c) in &counts[i] {
            *have.get_mut(l).expect("label counted") += c;
        }
    }

    for &i in chosen.iter().rev() {
        let removable = counts[i].iter().all(|(l, &c)| have[l] - c >= k);
        if removable {
            used[i] = false;
            for (l, &c) in &counts[i] {
                *have.get_mut(l).expect("label counted") -= c;
            }
        }
    }
    Ok((0..data.len()).filter(|&i| used[i]).collect())
}

/// Minimal-by-pruning subset where every label has at least `k` instances.
pub fn build_kshot_support(data: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    Ok(data.subset(&kshot_support_indices(data, k, seed)?))
}

/// Where slot candidates and intent neighbours come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Nearest labeled span or utterance.
    Retrieval,
    /// Nearest per-label mean prototype.
    Proto,
}

/// An encoder plus everything needed to turn a support set into predictions.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a, E> {
    pub encoder: &'a E,
    pub task: Task,
    pub mode: InferenceMode,
    pub decode: DecodeConfig,
}

/// Slot spans or an intent label for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Slots(Vec<LabeledSpan>),
    Intent(String),
}

impl<'a, E: Encoder> Evaluator<'a, E> {
    pub fn new(encoder: &'a E, task: Task, mode: InferenceMode, decode: DecodeConfig) -> Self {
        Self { encoder, task, mode, decode }
    }

    pub fn support_index(&self, support: &Dataset) -> Result<RetrievalIndex> {
        match self.mode {
            InferenceMode::Retrieval => build_index(self.encoder, None, support, SupportSetSpec::Tgt, self.task, 0),
            InferenceMode::Proto => build_prototypes(support, self.encoder, self.task)?.to_index(),
        }
    }

    pub fn predict_all(&self, index: &RetrievalIndex, queries: &Dataset) -> Result<Vec<Prediction>> {
        queries
            .examples()
            .iter()
            .map(|ex| match self.task {
                Task::Slot => {
                    let cands = retrieve_candidates(ex.utterance(), index, self.encoder, self.decode.max_span_len)?;
                    let spans = decode_candidates(&cands, &self.decode).iter().map(|c| c.to_labeled_span()).collect();
                    Ok(Prediction::Slots(spans))
                }
                Task::Intent => Ok(Prediction::Intent(predict_intent(ex.utterance(), index, self.encoder)?.label)),
            })
            .collect()
    }

    /// Slot F1, or macro intent accuracy over the query labels.
    pub fn score(&self, index: &RetrievalIndex, queries: &Dataset) -> Result<f64> {
        let preds = self.predict_all(index, queries)?;
        score_predictions(self.task, queries, &preds)
    }
}

pub fn score_predictions(task: Task, queries: &Dataset, preds: &[Prediction]) -> Result<f64> {
    match task {
        Task::Slot => {
            let gold: Vec<Vec<LabeledSpan>> = queries.examples().iter().map(|e| e.slot_spans().to_vec()).collect();
            let pred: Vec<Vec<LabeledSpan>> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Slots(s) => s.clone(),
                    Prediction::Intent(_) => Vec::new(),
                })
                .collect();
            Ok(span_f1(&gold, &pred)?.f1)
        }
        Task::Intent => {
            let gold: Vec<String> =
                queries.examples().iter().map(|e| String::from(e.intent_label().unwrap_or_default())).collect();
            let pred: Vec<String> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Intent(l) => l.clone(),
                    Prediction::Slots(_) => String::new(),
                })
                .collect();
            Ok(intent_accuracy(&gold, &pred, queries.label_set(), &BTreeSet::new())?.avg)
        }
    }
}

/// Fixed development protocol: a seeded K-shot support drawn from the dev
/// domain, every remaining example as a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevProtocol {
    pub k: usize,
    pub seed: u64,
}

/// Splits `data` into a K-shot support and the remaining queries.
pub fn support_query_split(data: &Dataset, k: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let support = kshot_support_indices(data, k, seed)?;
    let chosen: BTreeSet<usize> = support.iter().copied().collect();
    let rest: Vec<usize> = (0..data.len()).filter(|i| !chosen.contains(i)).collect();
    if rest.is_empty() {
        return Err(Error::InsufficientData { reason: "no queries left after support selection".into() });
    }
    Ok((data.subset(&support), data.subset(&rest)))
}

/// Dev metric of `encoder` under `protocol`.
pub fn dev_metric<E: Encoder>(
    encoder: &E,
    dev: &Dataset,
    task: Task,
    protocol: DevProtocol,
    mode: InferenceMode,
    decode: DecodeConfig,
) -> Result<f64> {
    let (support, queries) = support_query_split(dev, protocol.k, protocol.seed)?;
    let ev = Evaluator::new(encoder, task, mode, decode);
    ev.score(&ev.support_index(&support)?, &queries)
}

/// Sweeps the slot threshold over `grid` on the dev split of `protocol` and
/// returns `decode` with the best one. Intent decoding has no threshold, so
/// intent configs come back unchanged.
pub fn tune_threshold<E: Encoder>(
    encoder: &E,
    dev: &Dataset,
    task: Task,
    protocol: DevProtocol,
    mode: InferenceMode,
    decode: DecodeConfig,
    grid: &[f64],
) -> Result<(DecodeConfig, Option<SweepReport>)> {
    if task == Task::Intent {
        return Ok((decode, None));
    }
    let (support, queries) = support_query_split(dev, protocol.k, protocol.seed)?;
    let ev = Evaluator::new(encoder, task, mode, decode);
    let report = sweep_threshold(&ev, &ev.support_index(&support)?, &queries, grid)?;
    Ok((DecodeConfig { threshold: report.best_threshold, ..decode }, Some(report)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_episodes: usize,
    pub queries_per_episode: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { n_episodes: 100, queries_per_episode: 10, k: 5, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub seed: u64,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub per_episode: Vec<EpisodeResult>,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

/// Sampled support/query episodes, each scored independently.
pub fn run_episodes<E: Encoder>(
    data: &Dataset,
    spec: &EpisodeSpec,
    evaluator: &Evaluator<'_, E>,
) -> Result<EpisodeReport> {
    if spec.n_episodes == 0 || spec.queries_per_episode == 0 {
        return Err(Error::InvalidConfig { reason: "episode and query counts must be positive".into() });
    }
    let mut per_episode = Vec::with_capacity(spec.n_episodes);
    for episode in 0..spec.n_episodes {
        let seed = derive_seed(spec.seed, episode as u64);
        let support = kshot_support_indices(data, spec.k, seed)?;
        let in_support: BTreeSet<usize> = support.iter().copied().collect();
        let mut pool: Vec<usize> = (0..data.len()).filter(|i| !in_support.contains(i)).collect();
        if pool.len() < spec.queries_per_episode {
            return Err(Error::InsufficientData {
                reason: format!(
                    "episode {episode}: {} examples left for {} queries",
                    pool.len(),
                    spec.queries_per_episode
                ),
            });
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)));
        pool.truncate(spec.queries_per_episode);
        pool.sort_unstable();

        let support_set = data.subset(&support);
        let queries = data.subset(&pool);
        let index = evaluator.support_index(&support_set)?;
        let metric = evaluator.score(&index, &queries)?;
        per_episode.push(EpisodeResult {
            episode,
            seed,
            support_ids: support_set.examples().iter().map(|e| String::from(e.id())).collect(),
            query_ids: queries.examples().iter().map(|e| String::from(e.id())).collect(),
            metric,
        });
    }
    let metrics: Vec<f64> = per_episode.iter().map(|e| e.metric).collect();
    Ok(EpisodeReport { mean: mean(&metrics), std: std_dev(&metrics), per_episode, seed: spec.seed })
}

/// `lo, lo + step, ...` up to `hi` (inclusive, with a small tolerance).
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if step.is_nan() || step <= 0.0 || hi < lo {
        return alloc::vec![lo];
    }
    let n = libm::floor((hi - lo) / step + 1e-9) as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<(f64, f64)>,
    pub best_threshold: f64,
    pub best_metric: f64,
}

/// Evaluates every threshold in `grid` on `queries`; the first best wins.
pub fn sweep_threshold<E: Encoder>(
    evaluator: &Evaluator<'_, E>,
    index: &RetrievalIndex,
    queries: &Dataset,
    grid: &[f64],
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig { reason: "empty threshold grid".into() });
    }
    // Candidates do not depend on the threshold; retrieve once.
    let cands = queries
        .examples()
        .iter()
        .map(|ex| retrieve_candidates(ex.utterance(), index, evaluator.encoder, evaluator.decode.max_span_len))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<LabeledSpan>> = queries.examples().iter().map(|e| e.slot_spans().to_vec()).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        let config = DecodeConfig { threshold: t, ..evaluator.decode };
        config.validate()?;
        let pred: Vec<Vec<LabeledSpan>> =
            cands.iter().map(|c| decode_candidates(c, &config).iter().map(|c| c.to_labeled_span()).collect()).collect();
        rows.push((t, span_f1(&gold, &pred)?.f1));
    }
    let (best_threshold, best_metric) =
        rows.iter().copied().fold((rows[0].0, f64::NEG_INFINITY), |b, r| if r.1 > b.1 { r } else { b });
    Ok(SweepReport { rows, best_threshold, best_metric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Example, Utterance};
    use alloc::vec;

    fn s(start: usize, end: usize, label: &str) -> LabeledSpan {
        LabeledSpan::new(start, end, label)
    }

    #[test]
    fn f1_examples() {
        let r = span_f1(&[vec![s(0, 2, "A"), s(3, 4, "B")]], &[vec![s(0, 2, "A")]]).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.5));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let gold = vec![vec![s(0, 1, "A")], vec![s(1, 3, "B")]];
        assert_eq!(span_f1(&gold, &gold).unwrap().f1, 1.0);
        assert_eq!(span_f1(&gold, &[vec![s(0, 1, "B")], vec![]]).unwrap().f1, 0.0);
        assert!(span_f1(&gold, &[]).is_err());
    }

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|l| String::from(*l)).collect()
    }

    #[test]
    fn accuracy_examples() {
        let gold: Vec<String> = ["a", "b", "x"].iter().map(|s| String::from(*s)).collect();
        let all = intent_accuracy(&gold, &gold, &set(&["a", "b"]), &set(&["x"])).unwrap();
        assert_eq!((all.tgt, all.src, all.avg), (Some(1.0), Some(1.0), 1.0));

        let pred: Vec<String> = ["a", "a", "x"].iter().map(|s| String::from(*s)).collect();
        let r = intent_accuracy(&gold, &pred, &set(&["a", "b"]), &set(&["x"])).unwrap();
        assert_eq!(r.tgt, Some(0.5));
        assert!((r.avg - 2.0 / 3.0).abs() < 1e-15);

        let r = intent_accuracy(&gold, &gold, &set(&[]), &set(&["a", "b", "x"])).unwrap();
        assert_eq!(r.tgt, None);
        assert!(matches!(intent_accuracy(&gold, &gold, &set(&["a"]), &set(&["b"])), Err(Error::UnknownLabel { .. })));
    }

    fn one_label_each(labels: &[&str]) -> Dataset {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Example::slots(Utterance::from_text(format!("u{i}"), "p q").unwrap(), vec![s(0, 1, l)]).unwrap()
            })
            .collect()
    }

    #[test]
    fn kshot_two_labels() {
        let data = one_label_each(&["A", "B", "A", "B", "A", "B", "A"]);
        let support = build_kshot_support(&data, 2, 0).unwrap();
        assert_eq!(support.len(), 4);
        assert!(support.label_counts().values().all(|&c| c == 2));
    }

    #[test]
    fn kshot_single_full_cover() {
        let mut ex: Vec<Example> = one_label_each(&["A", "B"]).into_examples();
        ex.push(
            Example::slots(Utterance::from_text("full", "a b c").unwrap(), vec![s(0, 1, "A"), s(1, 2, "B")]).unwrap(),
        );
        let support = build_kshot_support(&Dataset::new(ex), 1, 5).unwrap();
        assert_eq!(support.len(), 1);
        assert_eq!(support.examples()[0].id(), "full");
    }

    #[test]
    fn kshot_unreachable() {
        let data = one_label_each(&["A", "A", "B"]);
        let err = build_kshot_support(&data, 2, 0).unwrap_err();
        assert_eq!(err, Error::Unreachable { k: 2, labels: vec!["B".into()] });
    }

    #[test]
    fn grid_matches_default_sweep() {
        let g = threshold_grid(0.85, 0.97, 0.05);
        assert_eq!(g.len(), 3);
        assert!((g[2] - 0.95).abs() < 1e-12);
    }
}
