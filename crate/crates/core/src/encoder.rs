//! Token, span and utterance encoders.
//!
//! Two encoders share the [`Encoder`] surface:
//!
//! * [`EncoderParams`]: a trainable hashed embedding table followed by a
//!   fixed 3-token mixer `c_i = (e_{i-1} + 2 e_i + e_{i+1}) / 4`. The output is
//!   linear in the table, which keeps gradients exact and cheap.
//! * [`DeterministicEncoder`]: the same mixer over a fixed pseudo-random
//!   projection of each hashed token. It is the frozen baseline and the
//!   starting point for fine-tuning.
//!
//! A span is the concatenation of its first and last contextual vectors
//! (dim `2d`); an utterance is the mean of its contextual vectors (dim `d`).

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{dot, mix64};
use crate::model::{Task, Utterance};
use crate::{Error, Result};

pub const DEFAULT_VOCAB_BUCKETS: usize = 4096;
pub const DEFAULT_DIM: usize = 32;

/// Weights of the previous, current and next token in the mixer.
pub const MIX_WEIGHTS: [f64; 3] = [0.25, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimMismatch { expected: 1, actual: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "embedding entry".into() });
        }
        Ok(Self(values))
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Dot-product similarity.
    pub fn similarity(&self, other: &EmbeddingVector) -> Result<f64> {
        similarity(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Dot product of equal-length vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(dot(a, b))
}

/// FNV-1a over the UTF-8 bytes, finished with a SplitMix64 avalanche.
pub fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

/// Hash bucket of `token` among `buckets` (stable across runs and platforms).
pub fn token_id(token: &str, buckets: usize) -> usize {
    debug_assert!(buckets >= 2);
    (token_hash(token) % buckets as u64) as usize
}

pub trait Encoder {
    /// Width `d` of contextual token vectors.
    fn dim(&self) -> usize;

    /// One contextual vector per token.
    fn contextual(&self, utterance: &Utterance) -> Vec<EmbeddingVector>;

    /// Width of the embeddings compared for `task`.
    fn embedding_dim(&self, task: Task) -> usize {
        match task {
            Task::Slot => 2 * self.dim(),
            Task::Intent => self.dim(),
        }
    }
}

impl<E: Encoder + ?Sized> Encoder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn contextual(&self, utterance: &Utterance) -> Vec<EmbeddingVector> {
        (**self).contextual(utterance)
    }
}

/// Concatenation of the first and last contextual vectors of `[start, end)`.
pub fn embed_span(contextual: &[EmbeddingVector], start: usize, end: usize) -> Result<EmbeddingVector> {
    if start >= end || end > contextual.len() {
        return Err(Error::InvalidSpan { start, end, len: contextual.len() });
    }
    let mut out = Vec::with_capacity(2 * contextual[start].dim());
    out.extend_from_slice(contextual[start].as_slice());
    out.extend_from_slice(contextual[end - 1].as_slice());
    Ok(EmbeddingVector(out))
}

/// Mean of the contextual vectors.
pub fn embed_utterance(contextual: &[EmbeddingVector]) -> EmbeddingVector {
    let d = contextual.first().map_or(0, EmbeddingVector::dim);
    let mut out = vec![0.0; d];
    for c in contextual {
        for (o, v) in out.iter_mut().zip(c.as_slice()) {
            *o += v;
        }
    }
    let n = contextual.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    EmbeddingVector(out)
}

/// Embedding of `[start, end)` for `task`: span embedding for slots, utterance
/// embedding (the bounds are ignored) for intents.
pub fn embed_for_task(contextual: &[EmbeddingVector], task: Task, start: usize, end: usize) -> Result<EmbeddingVector> {
    match task {
        Task::Slot => embed_span(contextual, start, end),
        Task::Intent => Ok(embed_utterance(contextual)),
    }
}

/// A parameter row of [`EncoderParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRow {
    Table(usize),
    Padding,
}

/// Trainable encoder: hashed embedding table plus boundary padding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    vocab_buckets: usize,
    dim: usize,
    table: Vec<f64>,
    padding: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(vocab_buckets: usize, dim: usize) -> Result<Self> {
        Self::from_parts(vocab_buckets, dim, vec![0.0; vocab_buckets * dim], vec![0.0; dim])
    }

    /// Table entries uniform in `[-scale, scale)`; padding starts at zero.
    pub fn random(vocab_buckets: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab_buckets * dim).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        Self::from_parts(vocab_buckets, dim, table, vec![0.0; dim])
    }

    pub fn from_parts(vocab_buckets: usize, dim: usize, table: Vec<f64>, padding: Vec<f64>) -> Result<Self> {
        if vocab_buckets < 2 {
            return Err(Error::InvalidConfig { reason: "vocab_buckets must be at least 2".into() });
        }
        if dim == 0 {
            return Err(Error::InvalidConfig { reason: "dim must be positive".into() });
        }
        if table.len() != vocab_buckets * dim {
            return Err(Error::DimMismatch { expected: vocab_buckets * dim, actual: table.len() });
        }
        if padding.len() != dim {
            return Err(Error::DimMismatch { expected: dim, actual: padding.len() });
        }
        if table.iter().chain(&padding).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "encoder parameter".into() });
        }
        Ok(Self { vocab_buckets, dim, table, padding })
    }

    pub fn vocab_buckets(&self) -> usize {
        self.vocab_buckets
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn padding(&self) -> &[f64] {
        &self.padding
    }

    pub fn row(&self, row: ParamRow) -> &[f64] {
        match row {
            ParamRow::Table(i) => &self.table[i * self.dim..(i + 1) * self.dim],
            ParamRow::Padding => &self.padding,
        }
    }

    pub fn row_mut(&mut self, row: ParamRow) -> &mut [f64] {
        match row {
            ParamRow::Table(i) => &mut self.table[i * self.dim..(i + 1) * self.dim],
            ParamRow::Padding => &mut self.padding,
        }
    }

    /// Total number of scalar parameters (table followed by padding).
    pub fn len(&self) -> usize {
        self.table.len() + self.padding.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view index of `row[k]`, matching [`EncoderParams::get`].
    pub fn flat_index(&self, row: ParamRow, k: usize) -> usize {
        match row {
            ParamRow::Table(i) => i * self.dim + k,
            ParamRow::Padding => self.table.len() + k,
        }
    }

    pub fn get(&self, flat: usize) -> f64 {
        if flat < self.table.len() {
            self.table[flat]
        } else {
            self.padding[flat - self.table.len()]
        }
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        let t = self.table.len();
        if flat < t {
            self.table[flat] = value;
        } else {
            self.padding[flat - t] = value;
        }
    }

    /// `self -= step * grad`, where `grad` is laid out like [`EncoderParams::get`].
    pub fn apply_update(&mut self, grad: &[f64], step: f64) {
        let t = self.table.len();
        for (p, g) in self.table.iter_mut().zip(&grad[..t]) {
            *p -= step * g;
        }
        for (p, g) in self.padding.iter_mut().zip(&grad[t..]) {
            *p -= step * g;
        }
    }

    pub fn token_rows(&self, utterance: &Utterance) -> Vec<usize> {
        utterance.tokens().iter().map(|t| token_id(t, self.vocab_buckets)).collect()
    }

    /// The `(row, weight)` terms whose sum is the contextual vector at `pos`.
    pub fn mixing_terms(rows: &[usize], pos: usize) -> [(ParamRow, f64); 3] {
        let prev = if pos == 0 { ParamRow::Padding } else { ParamRow::Table(rows[pos - 1]) };
        let next = if pos + 1 >= rows.len() { ParamRow::Padding } else { ParamRow::Table(rows[pos + 1]) };
        [(prev, MIX_WEIGHTS[0]), (ParamRow::Table(rows[pos]), MIX_WEIGHTS[1]), (next, MIX_WEIGHTS[2])]
    }
}

impl Encoder for EncoderParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn contextual(&self, utterance: &Utterance) -> Vec<EmbeddingVector> {
        let rows = self.token_rows(utterance);
        (0..rows.len())
            .map(|pos| {
                let mut c = vec![0.0; self.dim];
                for (row, w) in Self::mixing_terms(&rows, pos) {
                    for (o, v) in c.iter_mut().zip(self.row(row)) {
                        *o += w * v;
                    }
                }
                EmbeddingVector(c)
            })
            .collect()
    }
}

const FROZEN_PROJECTION_SEED: u64 = 0x5EED_F00D_CAFE_0001;

/// Half-width of the frozen projection entries.
pub const FROZEN_SCALE: f64 = 0.5;

/// Untrained encoder: the three-token mixer over a fixed pseudo-random
/// projection of each hash bucket, zero beyond the boundaries. Fine-tuning
/// starts from [`DeterministicEncoder::to_params`], so a trained model at step
/// 0 encodes exactly like this one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeterministicEncoder {
    vocab_buckets: usize,
    dim: usize,
}

impl DeterministicEncoder {
    pub fn new(vocab_buckets: usize, dim: usize) -> Result<Self> {
        if vocab_buckets < 2 {
            return Err(Error::InvalidConfig { reason: "vocab_buckets must be at least 2".into() });
        }
        if dim == 0 {
            return Err(Error::InvalidConfig { reason: "dim must be positive".into() });
        }
        Ok(Self { vocab_buckets, dim })
    }

    pub fn vocab_buckets(&self) -> usize {
        self.vocab_buckets
    }

    /// Projection of one bucket, entries in `[-FROZEN_SCALE, FROZEN_SCALE)`.
    fn project(&self, bucket: usize, out: &mut [f64], weight: f64) {
        let mut state = mix64(bucket as u64 ^ FROZEN_PROJECTION_SEED);
        for o in out.iter_mut() {
            state = mix64(state);
            let unit = (state >> 11) as f64 / (1u64 << 53) as f64;
            *o += weight * (FROZEN_SCALE * (2.0 * unit - 1.0));
        }
    }

    /// The projection as a trainable table with zero padding.
    pub fn to_params(&self) -> EncoderParams {
        let mut table = vec![0.0; self.vocab_buckets * self.dim];
        for (b, row) in table.chunks_mut(self.dim).enumerate() {
            self.project(b, row, 1.0);
        }
        EncoderParams::from_parts(self.vocab_buckets, self.dim, table, vec![0.0; self.dim])
            .expect("projection entries are finite")
    }
}

impl Encoder for DeterministicEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn contextual(&self, utterance: &Utterance) -> Vec<EmbeddingVector> {
        let rows: Vec<usize> = utterance.tokens().iter().map(|t| token_id(t, self.vocab_buckets)).collect();
        (0..rows.len())
            .map(|pos| {
                let mut c = vec![0.0; self.dim];
                for (row, w) in EncoderParams::mixing_terms(&rows, pos) {
                    if let ParamRow::Table(b) = row {
                        self.project(b, &mut c, w);
                    }
                }
                EmbeddingVector(c)
            })
            .collect()
    }
}

/// Either encoder kind, as stored in a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelEncoder {
    Trainable(EncoderParams),
    Frozen(DeterministicEncoder),
}

impl ModelEncoder {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelEncoder::Trainable(_) => "toy",
            ModelEncoder::Frozen(_) => "frozen",
        }
    }
}

impl Encoder for ModelEncoder {
    fn dim(&self) -> usize {
        match self {
            ModelEncoder::Trainable(p) => p.dim(),
            ModelEncoder::Frozen(f) => f.dim(),
        }
    }

    fn contextual(&self, utterance: &Utterance) -> Vec<EmbeddingVector> {
        match self {
            ModelEncoder::Trainable(p) => p.contextual(utterance),
            ModelEncoder::Frozen(f) => f.contextual(utterance),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::String;

    fn utt(text: &str) -> Utterance {
        Utterance::from_text("u", text).unwrap()
    }

    #[test]
    fn token_id_is_stable_and_in_range() {
        assert_eq!(token_id("alarm", 4096), token_id("alarm", 4096));
        assert!(token_id("a", 7) < 7);
        // Frozen value guards against accidental hash changes.
        assert_eq!(token_hash(""), mix64(0xcbf2_9ce4_8422_2325));
    }

    #[test]
    fn token_id_spreads_over_buckets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 256];
        for i in 0..10_000 {
            let len = rng.gen_range(1..10);
            let tok: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            counts[token_id(&format!("{tok}{i}"), 256)] += 1;
        }
        let max = *counts.iter().max().unwrap();
        assert!(max < 500, "bucket holds {max} of 10000");
    }

    #[test]
    fn single_token_uses_padding_on_both_sides() {
        let mut p = EncoderParams::random(16, 3, 1.0, 4).unwrap();
        p.row_mut(ParamRow::Padding).copy_from_slice(&[1.0, -2.0, 0.5]);
        let u = utt("hello");
        let c = p.contextual(&u);
        let e = p.row(ParamRow::Table(token_id("hello", 16))).to_vec();
        for (k, (ek, pk)) in e.iter().zip(p.padding()).enumerate() {
            let expected = (2.0 * ek + 2.0 * pk) / 4.0;
            assert!((c[0].as_slice()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_table_gives_zero_outputs() {
        let p = EncoderParams::zeros(8, 4).unwrap();
        for c in p.contextual(&utt("a b c d")) {
            assert!(c.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn contextual_is_linear_in_each_row() {
        // Perturbing one table entry moves c_i by exactly (weight * eps) for each use.
        let p = EncoderParams::random(64, 4, 0.5, 9).unwrap();
        let u = utt("x y z");
        let rows = p.token_rows(&u);
        let base = p.contextual(&u);
        let eps = 1e-3;
        let target = ParamRow::Table(rows[1]);
        let mut q = p.clone();
        q.row_mut(target)[2] += eps;
        let moved = q.contextual(&u);
        for pos in 0..3 {
            let w: f64 =
                EncoderParams::mixing_terms(&rows, pos).iter().filter(|(r, _)| *r == target).map(|(_, w)| w).sum();
            let delta = (moved[pos].as_slice()[2] - base[pos].as_slice()[2]) / eps;
            assert!((delta - w).abs() < 1e-9, "pos {pos}: {delta} vs {w}");
        }
    }

    #[test]
    fn span_embedding_concatenates_ends() {
        let ctx: Vec<EmbeddingVector> =
            (0..4).map(|i| EmbeddingVector::new(vec![i as f64, -(i as f64)]).unwrap()).collect();
        assert_eq!(embed_span(&ctx, 1, 3).unwrap().as_slice(), &[1.0, -1.0, 2.0, -2.0]);
        assert_eq!(embed_span(&ctx, 0, 1).unwrap().as_slice(), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(embed_span(&ctx, 2, 3).unwrap().dim(), 4);
        assert!(matches!(embed_span(&ctx, 2, 2), Err(Error::InvalidSpan { .. })));
        assert!(matches!(embed_span(&ctx, 3, 5), Err(Error::InvalidSpan { .. })));
    }

    #[test]
    fn utterance_embedding_is_mean() {
        let v = EmbeddingVector::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(embed_utterance(&[v.clone(), v.clone(), v.clone()]), v);
        let u = EmbeddingVector::new(vec![1.5, -3.0]).unwrap();
        let neg = EmbeddingVector::new(vec![-1.5, 3.0]).unwrap();
        assert_eq!(embed_utterance(&[u, neg]).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[2.0, 3.0], &[4.0, -1.0]).unwrap(), 5.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn frozen_encoder_context_features() {
        let enc = DeterministicEncoder::new(4096, 16).unwrap();
        let a = enc.contextual(&utt("book a table"));
        assert_eq!(a, enc.contextual(&utt("book a table")));
        // Same token with the same neighbours in another utterance.
        let b = enc.contextual(&utt("please book a table now"));
        assert_eq!(a[1], b[2]);
        // Changing a neighbour changes the vector.
        let c = enc.contextual(&utt("book the table"));
        assert_ne!(a[0], c[0]);
        assert_eq!(a[1].dim(), 16);
    }

    #[test]
    fn frozen_encoder_matches_its_parameter_table() {
        let enc = DeterministicEncoder::new(64, 6).unwrap();
        let p = enc.to_params();
        for text in ["a", "book a table", "x y z w v"] {
            assert_eq!(enc.contextual(&utt(text)), p.contextual(&utt(text)));
        }
    }

    #[test]
    fn frozen_neighbour_sensitivity_over_many_tokens() {
        let enc = DeterministicEncoder::new(4096, 8).unwrap();
        let base = enc.contextual(&utt("anchor left"))[0].clone();
        let mut same = 0;
        for i in 0..20_000 {
            let v = enc.contextual(&Utterance::from_text("u", &format!("anchor tok{i}")).unwrap())[0].clone();
            if v == base {
                same += 1;
            }
        }
        assert!((same as f64) / 20_000.0 < 1e-3, "{same} collisions");
        assert_eq!(base.dim(), 8);
    }
}
