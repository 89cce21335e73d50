use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{usable_support, wald_se};
use super::{AdapterError, EffectSupport};
use crate::evidence::EvidenceTable;
use crate::manifest::ClinicalConfig;
use crate::rule::Rule;

fn binary_column(table: &EvidenceTable, name: &str) -> Result<Vec<Option<bool>>, AdapterError> {
    let col = table
        .column(name)
        .ok_or_else(|| AdapterError::MissingColumn(name.to_string()))?;
    (0..table.n_rows())
        .map(|r| {
            if col.is_missing(r) {
                return Ok(None);
            }
            match col.numeric(r) {
                Some(x) if x == 0.0 => Ok(Some(false)),
                Some(x) if x == 1.0 => Ok(Some(true)),
                _ => Err(AdapterError::NotBinary(name.to_string(), r)),
            }
        })
        .collect()
}

/// Arm and bad-outcome indicators. Rows missing either are never counted.
#[derive(Debug, Clone)]
pub struct ClinicalData {
    treated: Vec<Option<bool>>,
    bad: Vec<Option<bool>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ArmCounts {
    covered: usize,
    n0: usize,
    bad0: usize,
    n1: usize,
    bad1: usize,
}

impl ClinicalData {
    pub fn prepare(cfg: &ClinicalConfig, table: &EvidenceTable) -> Result<ClinicalData, AdapterError> {
        Ok(ClinicalData {
            treated: binary_column(table, &cfg.treatment_column)?,
            bad: binary_column(table, &cfg.bad_outcome_column)?,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.treated.len()
    }

    fn counts(&self, mask: &[bool]) -> ArmCounts {
        let mut c = ArmCounts::default();
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            c.covered += 1;
            if let (Some(t), Some(b)) = (self.treated[r], self.bad[r]) {
                if t {
                    c.n1 += 1;
                    c.bad1 += b as usize;
                } else {
                    c.n0 += 1;
                    c.bad0 += b as usize;
                }
            }
        }
        c
    }

    /// Control minus treated bad-outcome rate over covered rows; support is
    /// the smaller covered arm.
    pub fn effect_support(&self, mask: &[bool]) -> Result<EffectSupport, AdapterError> {
        let c = self.counts(mask);
        if c.n0 + c.n1 == 0 {
            return Err(AdapterError::EmptySubgroup);
        }
        if c.n0 == 0 || c.n1 == 0 {
            return Err(AdapterError::EmptyArm);
        }
        let p0 = c.bad0 as f64 / c.n0 as f64;
        let p1 = c.bad1 as f64 / c.n1 as f64;
        let coverage = c.covered as f64 / self.n_rows() as f64;
        let diagnostics = BTreeMap::from([
            ("coverage".to_string(), coverage),
            ("n_control".to_string(), c.n0 as f64),
            ("n_treated".to_string(), c.n1 as f64),
            ("bad_rate_control".to_string(), p0),
            ("bad_rate_treated".to_string(), p1),
        ]);
        Ok(EffectSupport {
            effect: p0 - p1,
            support: c.n0.min(c.n1),
            coverage,
            diagnostics,
            blocking_status: None,
        })
    }
}

pub fn clinical_effect_support(
    rule: &Rule,
    table: &EvidenceTable,
    cfg: &ClinicalConfig,
) -> Result<EffectSupport, AdapterError> {
    ClinicalData::prepare(cfg, table)?.effect_support(&rule.mask(table)?)
}

/// Holdout replay metrics for one clinical rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrMetrics {
    pub arr_bad: f64,
    pub parr: f64,
    pub usable: bool,
    pub coverage: f64,
    pub n_control: usize,
    pub n_treated: usize,
    pub bad_rate_control: f64,
    pub bad_rate_treated: f64,
    pub wald_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn arr_metrics(rule: &Rule, holdout: &EvidenceTable, cfg: &ClinicalConfig) -> Result<ArrMetrics, AdapterError> {
    let es = clinical_effect_support(rule, holdout, cfg)?;
    let n0 = es.diagnostics["n_control"] as usize;
    let n1 = es.diagnostics["n_treated"] as usize;
    let p0 = es.diagnostics["bad_rate_control"];
    let p1 = es.diagnostics["bad_rate_treated"];
    let se = wald_se(p0, n0, p1, n1);
    Ok(ArrMetrics {
        arr_bad: es.effect,
        parr: es.effect * es.coverage,
        usable: usable_support(es.coverage, n0.min(n1)),
        coverage: es.coverage,
        n_control: n0,
        n_treated: n1,
        bad_rate_control: p0,
        bad_rate_treated: p1,
        wald_se: se,
        ci_low: es.effect - 1.959963984540054 * se,
        ci_high: es.effect + 1.959963984540054 * se,
    })
}
