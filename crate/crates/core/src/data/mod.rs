//! Event logs to model-ready batches.
//!
//! ```text
//! ingest → k_core_filter → build_sequences → {train,eval}_examples → batchify
//! ```

mod batch;
mod ingest;
mod sequences;
pub mod store;
pub mod synthetic;

pub use batch::{batchify, make_batch, Batch, Width};
pub use ingest::{ingest, parse_events, Event, EventLog, Format};
pub use sequences::{build_sequences, k_core_filter, DatasetStats, Example, SequenceDataset, Split, UserSequence};

/// ingest + 5-core + sequences in one call.
pub fn prepare(path: impl AsRef<std::path::Path>, format: &Format, k: usize) -> crate::Result<SequenceDataset> {
    let log = ingest(path, format)?;
    build_sequences(&k_core_filter(&log, k)?)
}
