use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FeatureCatalog;
use crate::digest::digest_of;
use crate::evidence::EvidenceTable;
use crate::manifest::VariableKind;

/// Quantile of an ascending slice by linear interpolation between order
/// statistics: position `p * (n - 1)`, blended between its floor and ceil.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Predeclared discovery grid: per-feature threshold values (numeric) and
/// observed levels (categorical, boolean). Built on the training partition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub numeric: BTreeMap<String, Vec<f64>>,
    pub levels: BTreeMap<String, Vec<String>>,
}

impl ThresholdGrid {
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    pub fn has_feature(&self, name: &str) -> bool {
        self.numeric.contains_key(name) || self.levels.contains_key(name)
    }

    pub fn thresholds(&self, name: &str) -> &[f64] {
        self.numeric.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn feature_levels(&self, name: &str) -> &[String] {
        self.levels.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Neighbouring grid value `step` positions away from `value`, if any.
    pub fn step(&self, name: &str, value: f64, step: i64) -> Option<f64> {
        let g = self.thresholds(name);
        let i = g.iter().position(|&x| x == value)? as i64 + step;
        (i >= 0 && (i as usize) < g.len()).then(|| g[i as usize])
    }

    /// Features with a non-empty grid, sorted by name.
    pub fn features(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .numeric
            .keys()
            .chain(self.levels.keys())
            .map(String::as_str)
            .collect();
        v.sort_unstable();
        v
    }
}

/// Builds the grid for every catalog feature present on `train`.
///
/// Numeric grids hold the quantiles at `k / (count + 1)` for
/// `k = 1..=count`, deduplicated and strictly below the maximum. Constant or
/// empty features get no grid and are logged; they drop out of the search
/// vocabulary.
pub fn build_threshold_grid(train: &EvidenceTable, catalog: &FeatureCatalog, count: usize) -> ThresholdGrid {
    let mut grid = ThresholdGrid::default();
    for f in catalog.iter() {
        let Some(col) = train.column(&f.name) else {
            continue;
        };
        match f.kind {
            VariableKind::Numeric => {
                let mut xs: Vec<f64> = (0..train.n_rows()).filter_map(|r| col.numeric(r)).collect();
                xs.sort_by(f64::total_cmp);
                let Some(&max) = xs.last() else {
                    log::info!("feature `{}` has no observed values; excluded", f.name);
                    continue;
                };
                let mut vals: Vec<f64> = (1..=count)
                    .map(|k| quantile(&xs, k as f64 / (count + 1) as f64))
                    .map(|v| if v == 0.0 { 0.0 } else { v })
                    .filter(|&v| v < max)
                    .collect();
                vals.dedup();
                if vals.is_empty() {
                    log::info!("feature `{}` is constant on the training partition; excluded", f.name);
                } else {
                    grid.numeric.insert(f.name.clone(), vals);
                }
            }
            VariableKind::Categorical | VariableKind::Boolean => {
                let mut levels: Vec<String> = (0..train.n_rows())
                    .filter_map(|r| col.level(r).map(str::to_string))
                    .collect();
                levels.sort();
                levels.dedup();
                if levels.len() < 2 {
                    log::info!("feature `{}` has fewer than two levels; excluded", f.name);
                } else {
                    grid.levels.insert(f.name.clone(), levels);
                }
            }
        }
    }
    grid
}
