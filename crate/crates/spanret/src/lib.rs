//! File formats, JSONL ingestion and the `spanret` command-line driver for
//! retrieval-based few-shot intent classification and slot filling.
//!
//! The algorithms live in `spanret-core`; this crate adds what needs `std`:
//! reading and writing datasets and predictions, the binary model and index
//! containers, BIO conversion, and the subcommands that wire them together.

pub mod bio;
mod cli;
pub mod error;
pub mod format;
pub mod jsonl;

pub use cli::run;
