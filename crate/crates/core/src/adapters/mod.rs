//! Scenario objectives and replay metrics: the clinical bad-outcome
//! contrast family and the blocked connectivity family.

mod clinical;
mod connectivity;
mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::EvidenceTable;
use crate::manifest::AdapterConfig;
use crate::rule::{Rule, RuleError};

pub use clinical::{arr_metrics, clinical_effect_support, ArrMetrics, ClinicalData};
pub use connectivity::{
    blocked_contrast, connectivity_metrics, ensemble_auprc, strong_threshold, ConnectivityData, ConnectivityMetrics,
    FocusMode, RuleReplay,
};
pub use metrics::{average_precision, direction_consistency, gap, usable_support, wald_se};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("rule covers no scorable rows")]
    EmptySubgroup,
    #[error("one arm has no covered rows")]
    EmptyArm,
    #[error("comparison side is empty")]
    EmptyComparison,
    #[error("invalid for scoring: {0}")]
    InvalidForScoring(String),
    #[error("no rule is valid on the holdout")]
    NoValidRule,
    #[error("labels contain a single class")]
    SingleClassLabels,
    #[error("column `{0}` missing from the table")]
    MissingColumn(String),
    #[error("column `{0}` row {1}: expected 0 or 1")]
    NotBinary(String, usize),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

impl AdapterError {
    /// Covered set too small or degenerate to score, as opposed to a
    /// malformed table.
    pub fn is_low_support(&self) -> bool {
        matches!(
            self,
            AdapterError::EmptySubgroup
                | AdapterError::EmptyArm
                | AdapterError::EmptyComparison
                | AdapterError::InvalidForScoring(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockingStatus {
    Blocked,
    Unblocked,
}

/// Effect and support objectives with discovery-visible diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSupport {
    pub effect: f64,
    pub support: usize,
    pub coverage: f64,
    pub diagnostics: BTreeMap<String, f64>,
    pub blocking_status: Option<BlockingStatus>,
}

/// Evaluation columns extracted once per table, so repeated scoring only
/// needs a coverage mask.
#[derive(Debug, Clone)]
pub enum Scorer {
    Clinical(ClinicalData),
    Connectivity(ConnectivityData),
}

impl Scorer {
    pub fn prepare(cfg: &AdapterConfig, table: &EvidenceTable) -> Result<Scorer, AdapterError> {
        Ok(match cfg {
            AdapterConfig::ClinicalTrial(c) => Scorer::Clinical(ClinicalData::prepare(c, table)?),
            AdapterConfig::Connectivity(c) => Scorer::Connectivity(ConnectivityData::prepare(c, table)?),
        })
    }

    pub fn score_mask(&self, mask: &[bool]) -> Result<EffectSupport, AdapterError> {
        match self {
            Scorer::Clinical(d) => d.effect_support(mask),
            Scorer::Connectivity(d) => d.blocked_contrast(mask),
        }
    }

    pub fn score(&self, rule: &Rule, table: &EvidenceTable) -> Result<EffectSupport, AdapterError> {
        self.score_mask(&rule.mask(table)?)
    }

    pub fn n_rows(&self) -> usize {
        match self {
            Scorer::Clinical(d) => d.n_rows(),
            Scorer::Connectivity(d) => d.n_rows(),
        }
    }
}
