//! Retrieval-based few-shot intent classification and slot filling.
//!
//! Spans (or whole utterances) are embedded by an [`encoder::Encoder`],
//! trained with a batch-softmax metric objective ([`objective`]), stored in
//! an exact dot-product [`index::RetrievalIndex`], and decoded into
//! non-overlapping labeled spans by threshold filtering, beam search and
//! span merging ([`decoder`]).
//!
//! The crate is `no_std` and only needs `alloc`. File formats, JSONL
//! ingestion and the command-line driver live in the `spanret` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod index;
pub mod math;
pub mod model;
pub mod objective;
pub mod proto;
pub mod synth;

pub use error::{Error, Result};
pub use model::{Annotation, Dataset, Example, LabeledSpan, Task, Utterance};
