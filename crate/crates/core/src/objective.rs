//! Batch-softmax metric objective.
//!
//! A batch holds `B` sampled spans for each of `N` labels. Every span in
//! turn acts as the query: its dot products against the whole batch form a
//! `B x N` similarity matrix, each label column is reduced to one score
//! (mean, max excluding the query itself, or min-max), and the reduced
//! scores feed a softmax cross-entropy against the query's own label.
//!
//! Gradients are exact: the trainable encoder is linear in its table, so
//! the chain rule runs through the mixing weights directly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingVector, Encoder, EncoderParams, ParamRow};
use crate::math::{dot, log_sum_exp, softmax};
use crate::model::{Dataset, SpanRef, Task};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionKind {
    Mean,
    Max,
    MinMax,
}

impl ReductionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReductionKind::Mean => "mean",
            ReductionKind::Max => "max",
            ReductionKind::MinMax => "minmax",
        }
    }
}

impl fmt::Display for ReductionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReductionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ReductionKind::Mean),
            "max" => Ok(ReductionKind::Max),
            "minmax" | "min-max" => Ok(ReductionKind::MinMax),
            other => Err(Error::InvalidConfig { reason: format!("unknown reduction {other:?}") }),
        }
    }
}

/// `B x N` scores of one query: `get(j, i)` is the similarity to sample `j` of label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    samples: usize,
    labels: usize,
    scores: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let samples = rows.len();
        let labels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != labels) {
            return Err(Error::InvalidConfig { reason: "ragged similarity matrix".into() });
        }
        Ok(Self { samples, labels, scores: rows.concat() })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn get(&self, sample: usize, label: usize) -> f64 {
        self.scores[sample * self.labels + label]
    }

    pub fn set(&mut self, sample: usize, label: usize, value: f64) {
        self.scores[sample * self.labels + label] = value;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.scores.chunks(self.labels.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Similarity of `query` to every batch embedding; `batch[i][j]` is sample `j` of label `i`.
pub fn similarity_matrix<V: AsRef<[f64]>>(query: &[f64], batch: &[Vec<V>]) -> Result<SimilarityMatrix> {
    let labels = batch.len();
    let samples = batch.first().map_or(0, Vec::len);
    let mut scores = vec![0.0; samples * labels];
    for (i, column) in batch.iter().enumerate() {
        if column.len() != samples {
            return Err(Error::InvalidConfig { reason: "batch columns differ in size".into() });
        }
        for (j, z) in column.iter().enumerate() {
            let z = z.as_ref();
            if z.len() != query.len() {
                return Err(Error::DimMismatch { expected: query.len(), actual: z.len() });
            }
            scores[j * labels + i] = dot(query, z);
        }
    }
    Ok(SimilarityMatrix { samples, labels, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedScores {
    pub scores: Vec<f64>,
    /// Per label column, the `(sample, weight)` cells the score is built from.
    pub routing: Vec<Vec<(usize, f64)>>,
}

/// First index of the extreme value; `better(a, b)` is true when `a` beats `b`.
fn pick(column: impl Iterator<Item = (usize, f64)>, better: impl Fn(f64, f64) -> bool) -> Option<(usize, f64)> {
    column.fold(None, |best, (j, v)| match best {
        Some((_, bv)) if !better(v, bv) => best,
        _ => Some((j, v)),
    })
}

/// Reduces each label column of `matrix` to one score for the query at
/// `(query_label, query_sample)`. Ties go to the lowest sample index.
pub fn reduce(
    matrix: &SimilarityMatrix,
    kind: ReductionKind,
    query_label: usize,
    query_sample: usize,
) -> Result<ReducedScores> {
    let b = matrix.samples;
    if b == 0 {
        return Err(Error::EmptyReduction { per_class: 0 });
    }
    if kind == ReductionKind::Max && b < 2 {
        return Err(Error::EmptyReduction { per_class: b });
    }
    let mut scores = Vec::with_capacity(matrix.labels);
    let mut routing = Vec::with_capacity(matrix.labels);
    for i in 0..matrix.labels {
        let cells = (0..b).map(|j| (j, matrix.get(j, i)));
        let (score, route) = match kind {
            ReductionKind::Mean => {
                let w = 1.0 / b as f64;
                let s = cells.map(|(_, v)| v).sum::<f64>() * w;
                (s, (0..b).map(|j| (j, w)).collect())
            }
            ReductionKind::Max => {
                let (j, v) = if i == query_label {
                    pick(cells.filter(|&(j, _)| j != query_sample), |a, c| a > c)
                } else {
                    pick(cells, |a, c| a > c)
                }
                .expect("column has at least one eligible cell");
                (v, vec![(j, 1.0)])
            }
            ReductionKind::MinMax => {
                let (j, v) = if i == query_label { pick(cells, |a, c| a < c) } else { pick(cells, |a, c| a > c) }
                    .expect("column is non-empty");
                (v, vec![(j, 1.0)])
            }
        };
        scores.push(score);
        routing.push(route);
    }
    Ok(ReducedScores { scores, routing })
}

/// Cross-entropy of `softmax(reduced)` against `gold`, and its gradient with
/// respect to the reduced scores (`softmax - onehot`).
pub fn batch_softmax_loss(reduced: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if gold >= reduced.len() {
        return Err(Error::GoldOutOfRange { gold, classes: reduced.len() });
    }
    if reduced.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "reduced score".into() });
    }
    let loss = log_sum_exp(reduced) - reduced[gold];
    let mut grad = softmax(reduced);
    grad[gold] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// `spans[i][j]` is sample `j` of `labels[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub task: Task,
    pub labels: Vec<String>,
    pub spans: Vec<Vec<SpanRef>>,
}

impl TrainBatch {
    pub fn per_class(&self) -> usize {
        self.spans.first().map_or(0, Vec::len)
    }
}

/// Samples `per_class` spans for each label: without replacement when the
/// label has enough instances, uniformly with replacement otherwise.
pub fn sample_batch<R: Rng>(
    data: &Dataset,
    task: Task,
    labels: &[String],
    per_class: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let by_label = data.instances_by_label();
    sample_from_instances(&by_label, task, labels, per_class, rng)
}

fn sample_from_instances<R: Rng>(
    by_label: &BTreeMap<String, Vec<SpanRef>>,
    task: Task,
    labels: &[String],
    per_class: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let mut spans = Vec::with_capacity(labels.len());
    for label in labels {
        let pool = by_label
            .get(label)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::EmptyLabelClass { label: label.clone() })?;
        let column: Vec<SpanRef> = if pool.len() >= per_class {
            sample_indices(rng, pool.len(), per_class).into_iter().map(|k| pool[k]).collect()
        } else {
            (0..per_class).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        spans.push(column);
    }
    Ok(TrainBatch { task, labels: labels.to_vec(), spans })
}

/// A batch embedding together with the parameter rows it is a linear function of.
struct Embedded {
    z: Vec<f64>,
    /// `(row, weight, half)`: `z[half*d..(half+1)*d] += weight * row`.
    terms: Vec<(ParamRow, f64, usize)>,
}

fn embed_ref(params: &EncoderParams, data: &Dataset, task: Task, span: SpanRef) -> Result<Embedded> {
    let utterance = data.examples()[span.example].utterance();
    let rows = params.token_rows(utterance);
    let ctx = params.contextual(utterance);
    let mut terms = Vec::new();
    let z = match task {
        Task::Slot => {
            let z = crate::encoder::embed_span(&ctx, span.start, span.end)?;
            for (half, pos) in [(0, span.start), (1, span.end - 1)] {
                for (row, w) in EncoderParams::mixing_terms(&rows, pos) {
                    terms.push((row, w, half));
                }
            }
            z
        }
        Task::Intent => {
            let n = rows.len() as f64;
            for pos in 0..rows.len() {
                for (row, w) in EncoderParams::mixing_terms(&rows, pos) {
                    terms.push((row, w / n, 0));
                }
            }
            crate::encoder::embed_utterance(&ctx)
        }
    };
    Ok(Embedded { z: z.into_vec(), terms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean loss over all `N * B` queries.
    pub loss: f64,
    /// Gradient laid out like [`EncoderParams::get`].
    pub grad: Vec<f64>,
}

/// Mean batch-softmax loss over every span acting once as the query, and its
/// exact gradient with respect to all encoder parameters.
pub fn batch_loss_and_grads(
    params: &EncoderParams,
    data: &Dataset,
    batch: &TrainBatch,
    kind: ReductionKind,
) -> Result<BatchLoss> {
    let n_labels = batch.labels.len();
    let b = batch.per_class();
    if n_labels == 0 || b == 0 {
        return Err(Error::InvalidConfig { reason: "empty training batch".into() });
    }
    let embedded: Vec<Vec<Embedded>> = batch
        .spans
        .iter()
        .map(|col| col.iter().map(|&s| embed_ref(params, data, batch.task, s)).collect())
        .collect::<Result<_>>()?;
    let zs: Vec<Vec<&[f64]>> = embedded.iter().map(|col| col.iter().map(|e| e.z.as_slice()).collect()).collect();
    let width = embedded[0][0].z.len();
    let mut dz = vec![vec![vec![0.0; width]; b]; n_labels];
    let scale = 1.0 / (n_labels * b) as f64;
    let mut total = 0.0;

    for i in 0..n_labels {
        for j in 0..b {
            let query = zs[i][j];
            let matrix = similarity_matrix(query, &zs)?;
            let reduced = reduce(&matrix, kind, i, j)?;
            let (loss, g) = batch_softmax_loss(&reduced.scores, i)?;
            total += loss;
            for (col, route) in reduced.routing.iter().enumerate() {
                for &(row, w) in route {
                    let c = scale * g[col] * w;
                    if c == 0.0 {
                        continue;
                    }
                    let member = zs[col][row];
                    for k in 0..width {
                        dz[i][j][k] += c * member[k];
                        dz[col][row][k] += c * query[k];
                    }
                }
            }
        }
    }

    let d = params.dim();
    let mut grad = vec![0.0; params.len()];
    for (col, dcol) in embedded.iter().zip(&dz) {
        for (emb, dvec) in col.iter().zip(dcol) {
            for &(row, w, half) in &emb.terms {
                let base = params.flat_index(row, 0);
                for k in 0..d {
                    grad[base + k] += w * dvec[half * d + k];
                }
            }
        }
    }
    Ok(BatchLoss { loss: total * scale, grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub reduction: ReductionKind,
    pub per_class_batch: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Steps between dev evaluations.
    pub eval_interval: usize,
    /// Dev evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reduction: ReductionKind::Max,
            per_class_batch: 5,
            learning_rate: 2.0,
            max_steps: 1500,
            eval_interval: 50,
            early_stop_patience: 6,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class_batch < 2 {
            return Err(Error::InvalidConfig { reason: "per-class batch size must be at least 2".into() });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig { reason: "learning rate must be finite and non-negative".into() });
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig { reason: "eval interval must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Batch loss; absent for the step-0 evaluation.
    pub loss: Option<f64>,
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<LogRecord>,
    pub best_step: usize,
    pub best_dev_metric: Option<f64>,
    pub steps_run: usize,
}

/// Plain gradient descent on `source`. When `dev_metric` is given it is
/// evaluated before training and every `eval_interval` steps; the parameters
/// of the best evaluation are returned (ties keep the earliest).
pub fn train<F>(
    config: &TrainConfig,
    source: &Dataset,
    task: Task,
    initial: EncoderParams,
    mut dev_metric: Option<F>,
) -> Result<TrainOutcome>
where
    F: FnMut(&EncoderParams) -> Result<f64>,
{
    config.validate()?;
    let by_label = source.instances_by_label();
    let labels: Vec<String> = by_label.keys().cloned().collect();
    if labels.is_empty() {
        return Err(Error::EmptyLabelClass { label: String::from("<none>") });
    }
    if let Some(t) = source.task() {
        if t != task {
            return Err(Error::TaskMismatch { expected: task.as_str(), actual: t.as_str() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial;
    let mut log = Vec::new();

    let mut best = match dev_metric.as_mut() {
        Some(f) => {
            let m = f(&params)?;
            log.push(LogRecord { step: 0, loss: None, dev_metric: Some(m) });
            Some((m, 0, params.clone()))
        }
        None => None,
    };
    let mut stale = 0;
    let mut steps_run = 0;

    for step in 1..=config.max_steps {
        let batch = sample_from_instances(&by_label, task, &labels, config.per_class_batch, &mut rng)?;
        let BatchLoss { loss, grad } = batch_loss_and_grads(&params, source, &batch, config.reduction)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        params.apply_update(&grad, config.learning_rate);
        steps_run = step;

        let mut record = LogRecord { step, loss: Some(loss), dev_metric: None };
        if let (Some(f), Some((best_m, best_step, best_params))) = (dev_metric.as_mut(), best.as_mut()) {
            if step % config.eval_interval == 0 || step == config.max_steps {
                let m = f(&params)?;
                record.dev_metric = Some(m);
                if m > *best_m {
                    *best_m = m;
                    *best_step = step;
                    *best_params = params.clone();
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        log.push(record);
        if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
            log::debug!("early stop at step {step}");
            break;
        }
    }

    Ok(match best {
        Some((m, step, p)) => TrainOutcome { params: p, log, best_step: step, best_dev_metric: Some(m), steps_run },
        None => TrainOutcome { params, log, best_step: steps_run, best_dev_metric: None, steps_run },
    })
}

/// Embeds every labeled occurrence of `data` with `encoder`.
pub fn embed_instances<E: Encoder>(
    encoder: &E,
    data: &Dataset,
    task: Task,
) -> Result<Vec<(SpanRef, String, EmbeddingVector)>> {
    let mut out = Vec::new();
    for (i, ex) in data.examples().iter().enumerate() {
        let ctx = encoder.contextual(ex.utterance());
        for s in ex.spans() {
            let z = crate::encoder::embed_for_task(&ctx, task, s.start, s.end)?;
            out.push((SpanRef { example: i, start: s.start, end: s.end }, s.label, z));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Example, LabeledSpan, Utterance};

    fn matrix(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn similarity_matrix_example() {
        let batch = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![-1.0, 0.0], vec![0.0, -1.0]]];
        let m = similarity_matrix(&[1.0, 0.0], &batch).unwrap();
        assert_eq!(m.rows(), vec![vec![1.0, -1.0], vec![0.0, 0.0]]);
        let zero = similarity_matrix(&[0.0, 0.0], &batch).unwrap();
        assert!(zero.rows().iter().flatten().all(|&v| v == 0.0));
        let single = similarity_matrix(&[2.0, 3.0], &[vec![vec![4.0, -1.0]]]).unwrap();
        assert_eq!(single.get(0, 0), 5.0);
        assert!(similarity_matrix(&[1.0], &batch).is_err());
    }

    #[test]
    fn reductions_follow_definitions() {
        // Column 0 is the query's label; the query sits at sample 0.
        let m = matrix(&[&[1.0, -1.0], &[0.0, 0.0]]);
        assert_eq!(reduce(&m, ReductionKind::Max, 0, 0).unwrap().scores[0], 0.0);
        assert_eq!(reduce(&m, ReductionKind::Mean, 0, 0).unwrap().scores[0], 0.5);
        assert_eq!(reduce(&m, ReductionKind::MinMax, 0, 0).unwrap().scores, vec![0.0, 0.0]);
    }

    #[test]
    fn max_needs_two_samples() {
        let m = matrix(&[&[1.0, 2.0]]);
        assert!(matches!(reduce(&m, ReductionKind::Max, 0, 0), Err(Error::EmptyReduction { per_class: 1 })));
        assert!(reduce(&m, ReductionKind::Mean, 0, 0).is_ok());
    }

    #[test]
    fn max_ties_pick_lowest_sample() {
        let m = matrix(&[&[0.5, 2.0], &[3.0, 2.0], &[3.0, 1.0]]);
        let r = reduce(&m, ReductionKind::Max, 0, 0).unwrap();
        assert_eq!(r.routing, vec![vec![(1, 1.0)], vec![(0, 1.0)]]);
    }

    #[test]
    fn softmax_loss_examples() {
        let (l, g) = batch_softmax_loss(&[0.0, 0.0], 0).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        let (l, _) = batch_softmax_loss(&[10.0, 0.0], 0).unwrap();
        assert!((l - libm::log1p(libm::exp(-10.0))).abs() < 1e-15);
        assert!((l - 4.5399e-5).abs() < 1e-8);
        assert!(batch_softmax_loss(&[0.0], 1).is_err());
        assert!(batch_softmax_loss(&[f64::NAN, 0.0], 0).is_err());
    }

    fn slot_data() -> Dataset {
        let mut ex = Vec::new();
        for (i, (text, label)) in
            [("a x", "A"), ("b x", "B"), ("a y", "A"), ("c x", "C"), ("b z", "B")].iter().enumerate()
        {
            let u = Utterance::from_text(format!("e{i}"), text).unwrap();
            ex.push(Example::slots(u, vec![LabeledSpan::new(0, 1, *label)]).unwrap());
        }
        Dataset::new(ex)
    }

    #[test]
    fn sampling_rules() {
        let data = slot_data();
        let labels: Vec<String> = data.label_set().iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&data, Task::Slot, &labels, 2, &mut rng).unwrap();
        // "A" has exactly 2 instances: a permutation of them.
        let mut a: Vec<usize> = batch.spans[0].iter().map(|s| s.example).collect();
        a.sort();
        assert_eq!(a, vec![0, 2]);
        // "C" has one instance: repeated.
        assert!(batch.spans[2].iter().all(|s| s.example == 3));
        let again = sample_batch(&data, Task::Slot, &labels, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(batch, again);
        let missing = sample_batch(&data, Task::Slot, &[String::from("Z")], 2, &mut rng);
        assert!(matches!(missing, Err(Error::EmptyLabelClass { .. })));
    }

    #[test]
    fn identical_embeddings_give_uniform_loss() {
        let data = slot_data();
        let params = EncoderParams::zeros(16, 4).unwrap();
        let labels: Vec<String> = vec!["A".into(), "B".into()];
        let batch = sample_batch(&data, Task::Slot, &labels, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for kind in [ReductionKind::Mean, ReductionKind::Max, ReductionKind::MinMax] {
            let out = batch_loss_and_grads(&params, &data, &batch, kind).unwrap();
            assert!((out.loss - core::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = slot_data();
        let init = EncoderParams::random(32, 4, 0.3, 5).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, max_steps: 5, per_class_batch: 2, ..TrainConfig::default() };
        let out = train::<fn(&EncoderParams) -> Result<f64>>(&cfg, &data, Task::Slot, init.clone(), None).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.log.len(), 5);
    }

    #[test]
    fn reduction_parses() {
        assert_eq!("min-max".parse::<ReductionKind>().unwrap(), ReductionKind::MinMax);
        assert!("median".parse::<ReductionKind>().is_err());
    }
}
