//! Typed tabular evidence, frozen splits, and the synthetic planted-subgroup
//! generator.

mod split;
mod synthetic;
mod table;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use split::{make_split, thaw_split, verify_split, SplitSpec};
pub use synthetic::{generate_synthetic, synthetic_manifest, SyntheticConfig, SyntheticFeature};
pub use table::{load_table, read_table, Column, EvidenceTable};

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[source] csv::Error),
    #[error("json error: {0}")]
    Json(#[source] serde_json::Error),
    #[error("column `{0}` row {1}: value does not match the declared type")]
    TypeMismatch(String, usize),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row key column `{0}` missing")]
    MissingRowKey(String),
    #[error("duplicate row key `{0}`")]
    DuplicateRowKey(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("column `{0}` length differs from the row count")]
    LengthMismatch(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("split key `{0}` does not match the table")]
    KeyMismatch(String),
    #[error("split invariant violated: {0}")]
    SplitInvariant(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// Evidence bound to a frozen split.
///
/// The training partition is materialized up front and handed out freely.
/// The holdout partition is materialized on request only, and every request
/// is counted so tests can assert that discovery never touched it.
#[derive(Debug, Clone)]
pub struct Evidence {
    table: EvidenceTable,
    split: SplitSpec,
    train: EvidenceTable,
    test_rows: Vec<usize>,
    holdout_reads: Arc<AtomicUsize>,
}

impl Evidence {
    pub fn new(table: EvidenceTable, split: SplitSpec) -> Result<Evidence, EvidenceError> {
        verify_split(&split, &table)?;
        let (train_rows, test_rows) = split.row_indices(&table)?;
        let train = table.take(&train_rows);
        Ok(Evidence {
            table,
            split,
            train,
            test_rows,
            holdout_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn train(&self) -> &EvidenceTable {
        &self.train
    }

    /// Holdout partition. Counted access.
    pub fn holdout(&self) -> EvidenceTable {
        self.holdout_reads.fetch_add(1, Ordering::SeqCst);
        self.table.take(&self.test_rows)
    }

    pub fn holdout_reads(&self) -> usize {
        self.holdout_reads.load(Ordering::SeqCst)
    }

    pub fn holdout_counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.holdout_reads)
    }
}
