//! Versioned little-endian binary containers for models and indexes.
//!
//! Model: `SPRM`, version u32, kind u8 (0 frozen, 1 trainable), V u64, d u64,
//! then for trainable models the `V x d` table and the `d` padding values as
//! f64 bit patterns. A frozen model is a pure function of `(V, d)`.
//!
//! Index: `SPRI`, version u32, kind u8 (0 slot, 1 intent, 2 slot prototypes,
//! 3 intent prototypes), dim u64, count u64, then per entry the vector,
//! label, example id (u32 length + UTF-8), start u64 and end u64.

use std::fs;
use std::path::Path;

use spanret_core::encoder::{DeterministicEncoder, EmbeddingVector, Encoder, EncoderParams, ModelEncoder};
use spanret_core::index::{IndexEntry, IndexKind, Provenance, RetrievalIndex};
use spanret_core::Task;

use crate::error::{CliError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SPRM";
pub const INDEX_MAGIC: &[u8; 4] = b"SPRI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic header: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
}

type FResult<T> = std::result::Result<T, FormatError>;

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 4], kind: u8) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.0.push(kind);
        w
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u32).to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        let left = self.bytes.len() - self.at;
        if n > left {
            return Err(FormatError::Truncated { offset: self.at, needed: n - left });
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn header(bytes: &'a [u8], magic: &'static [u8; 4]) -> FResult<(Self, u8)> {
        let mut r = Reader { bytes, at: 0 };
        let expected = std::str::from_utf8(magic).expect("ascii magic");
        if r.take(4).map_err(|_| FormatError::BadMagic { expected })? != magic {
            return Err(FormatError::BadMagic { expected });
        }
        let found = r.u32()?;
        if found != FORMAT_VERSION {
            return Err(FormatError::Version { found });
        }
        let kind = r.take(1)?[0];
        Ok((r, kind))
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> FResult<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| FormatError::Invalid(format!("size {v} does not fit")))
    }

    fn f64s(&mut self, n: usize) -> FResult<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Invalid("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes")))).collect())
    }

    fn str(&mut self) -> FResult<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Invalid("label is not UTF-8".into()))
    }

    fn finish(self) -> FResult<()> {
        match self.bytes.len() - self.at {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

pub fn encode_model(model: &ModelEncoder) -> Vec<u8> {
    match model {
        ModelEncoder::Frozen(f) => {
            let mut w = Writer::header(MODEL_MAGIC, 0);
            w.u64(f.vocab_buckets());
            w.u64(f.dim());
            w.0
        }
        ModelEncoder::Trainable(p) => {
            let mut w = Writer::header(MODEL_MAGIC, 1);
            w.u64(p.vocab_buckets());
            w.u64(p.dim());
            w.f64s(p.table());
            w.f64s(p.padding());
            w.0
        }
    }
}

pub fn decode_model(bytes: &[u8]) -> FResult<ModelEncoder> {
    let (mut r, kind) = Reader::header(bytes, MODEL_MAGIC)?;
    let vocab = r.u64()?;
    let dim = r.u64()?;
    let invalid = |e: spanret_core::Error| FormatError::Invalid(e.to_string());
    let model = match kind {
        0 => ModelEncoder::Frozen(DeterministicEncoder::new(vocab, dim).map_err(invalid)?),
        1 => {
            let cells = vocab.checked_mul(dim).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
            let table = r.f64s(cells)?;
            let padding = r.f64s(dim)?;
            ModelEncoder::Trainable(EncoderParams::from_parts(vocab, dim, table, padding).map_err(invalid)?)
        }
        k => return Err(FormatError::Invalid(format!("unknown encoder kind {k}"))),
    };
    r.finish()?;
    Ok(model)
}

fn kind_code(kind: IndexKind) -> u8 {
    match kind {
        IndexKind::Slot => 0,
        IndexKind::Intent => 1,
        IndexKind::Proto(Task::Slot) => 2,
        IndexKind::Proto(Task::Intent) => 3,
    }
}

pub fn encode_index(index: &RetrievalIndex) -> Vec<u8> {
    let mut w = Writer::header(INDEX_MAGIC, kind_code(index.kind()));
    w.u64(index.dim());
    w.u64(index.len());
    for e in index.entries() {
        w.f64s(e.vector);
        w.str(e.label);
        w.str(&e.provenance.example_id);
        w.u64(e.provenance.start);
        w.u64(e.provenance.end);
    }
    w.0
}

pub fn decode_index(bytes: &[u8]) -> FResult<RetrievalIndex> {
    let (mut r, code) = Reader::header(bytes, INDEX_MAGIC)?;
    let kind = match code {
        0 => IndexKind::Slot,
        1 => IndexKind::Intent,
        2 => IndexKind::Proto(Task::Slot),
        3 => IndexKind::Proto(Task::Intent),
        k => return Err(FormatError::Invalid(format!("unknown index kind {k}"))),
    };
    let dim = r.u64()?;
    let count = r.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let vector = EmbeddingVector::new(r.f64s(dim)?).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let label = r.str()?;
        let example_id = r.str()?;
        let start = r.u64()?;
        let end = r.u64()?;
        entries.push(IndexEntry { vector, label, provenance: Provenance { example_id, start, end } });
    }
    r.finish()?;
    RetrievalIndex::from_entries(kind, dim, entries).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelEncoder> {
    decode_model(&read_bytes(path)?).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    decode_index(&read_bytes(path)?).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn save_model(path: &Path, model: &ModelEncoder) -> Result<()> {
    write_bytes(path, &encode_model(model))
}

pub fn save_index(path: &Path, index: &RetrievalIndex) -> Result<()> {
    write_bytes(path, &encode_index(index))
}
