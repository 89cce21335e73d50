use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvidenceError, EvidenceTable};
use crate::digest::{derive_seed, pretty_json};

/// Frozen train/holdout lineage, keyed by row key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub split_key: String,
    pub train_keys: Vec<String>,
    pub test_keys: Vec<String>,
    pub group_column: Option<String>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn check_disjoint(&self) -> Result<(), EvidenceError> {
        let train: BTreeSet<&str> = self.train_keys.iter().map(String::as_str).collect();
        if train.len() != self.train_keys.len() {
            return Err(EvidenceError::SplitInvariant("duplicate train key".into()));
        }
        let mut test = BTreeSet::new();
        for k in &self.test_keys {
            if train.contains(k.as_str()) {
                return Err(EvidenceError::SplitInvariant(format!("key `{k}` in both partitions")));
            }
            if !test.insert(k.as_str()) {
                return Err(EvidenceError::SplitInvariant("duplicate test key".into()));
            }
        }
        Ok(())
    }

    /// Row indices of (train, test) in `table`, each in table order.
    pub fn row_indices(&self, table: &EvidenceTable) -> Result<(Vec<usize>, Vec<usize>), EvidenceError> {
        let index = table.key_index();
        let lookup = |keys: &[String]| -> Result<Vec<usize>, EvidenceError> {
            let mut rows = keys
                .iter()
                .map(|k| index.get(k.as_str()).copied().ok_or_else(|| EvidenceError::KeyMismatch(k.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            rows.sort_unstable();
            Ok(rows)
        };
        Ok((lookup(&self.train_keys)?, lookup(&self.test_keys)?))
    }

    pub fn freeze(&self, path: &Path) -> Result<(), EvidenceError> {
        std::fs::write(path, pretty_json(self)).map_err(|e| EvidenceError::Io(path.display().to_string(), e))
    }
}

/// Reads a frozen split and checks it against `table`: disjoint partitions,
/// full key coverage, and group exclusivity when a group column is named.
pub fn thaw_split(path: &Path, table: &EvidenceTable) -> Result<SplitSpec, EvidenceError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvidenceError::Io(path.display().to_string(), e))?;
    let spec: SplitSpec = serde_json::from_str(&text).map_err(EvidenceError::Json)?;
    verify_split(&spec, table)?;
    Ok(spec)
}

pub fn verify_split(spec: &SplitSpec, table: &EvidenceTable) -> Result<(), EvidenceError> {
    spec.check_disjoint()?;
    if spec.split_key != table.row_key() {
        return Err(EvidenceError::SplitInvariant(format!(
            "split key `{}` is not the table row key",
            spec.split_key
        )));
    }
    let (train, test) = spec.row_indices(table)?;
    if train.len() + test.len() != table.n_rows() {
        let covered: BTreeSet<&str> = spec.train_keys.iter().chain(&spec.test_keys).map(String::as_str).collect();
        let missing = table.keys().iter().find(|k| !covered.contains(k.as_str())).cloned().unwrap_or_default();
        return Err(EvidenceError::KeyMismatch(missing));
    }
    if let Some(g) = &spec.group_column {
        let labels = group_labels(table, g)?;
        let train_groups: BTreeSet<&str> = train.iter().map(|&r| labels[r].as_str()).collect();
        if let Some(&r) = test.iter().find(|&&r| train_groups.contains(labels[r].as_str())) {
            return Err(EvidenceError::SplitInvariant(format!("group `{}` in both partitions", labels[r])));
        }
    }
    Ok(())
}

/// Group label per row; rows with a missing label become singleton groups.
fn group_labels(table: &EvidenceTable, column: &str) -> Result<Vec<String>, EvidenceError> {
    let col = table.require(column)?;
    Ok((0..table.n_rows())
        .map(|r| {
            if col.is_missing(r) {
                format!("\u{0}{}", table.keys()[r])
            } else {
                col.render(r)
            }
        })
        .collect())
}

fn stratum_label(table: &EvidenceTable, columns: &[String], row: usize) -> Result<String, EvidenceError> {
    let mut parts = Vec::with_capacity(columns.len());
    for c in columns {
        let col = table.require(c)?;
        parts.push(if col.is_missing(row) { "\u{0}".to_string() } else { col.render(row) });
    }
    Ok(parts.join("\u{1}"))
}

/// Seeded train/holdout split.
///
/// Keys (or group labels) are sorted, then shuffled with a seeded ChaCha
/// stream, so assignment never depends on file order. The holdout target is
/// `round(n * holdout_fraction)` rows. Grouped splits add whole groups while
/// that moves the holdout closer to the target. Stratified splits allocate
/// the target across strata by largest remainder. When both a group column
/// and strata are given, grouping wins and stratification is dropped.
pub fn make_split(
    table: &EvidenceTable,
    holdout_fraction: f64,
    seed: u64,
    group_column: Option<&str>,
    stratify_columns: &[String],
) -> Result<SplitSpec, EvidenceError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(EvidenceError::DegenerateSplit(format!("holdout fraction {holdout_fraction}")));
    }
    let n = table.n_rows();
    let target = (n as f64 * holdout_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    let keys = table.keys();

    let mut test_rows: Vec<usize> = Vec::new();
    if let Some(g) = group_column {
        if !stratify_columns.is_empty() {
            log::warn!("group column `{g}` set together with strata; stratification is best-effort and dropped");
        }
        let labels = group_labels(table, g)?;
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (r, l) in labels.iter().enumerate() {
            groups.entry(l.as_str()).or_default().push(r);
        }
        let mut order: Vec<&str> = groups.keys().copied().collect();
        order.shuffle(&mut rng);
        let mut size = 0usize;
        for g in order {
            let rows = &groups[g];
            let with = (size + rows.len()).abs_diff(target);
            if with < size.abs_diff(target) {
                size += rows.len();
                test_rows.extend(rows);
            }
        }
    } else if !stratify_columns.is_empty() {
        let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for r in 0..n {
            strata.entry(stratum_label(table, stratify_columns, r)?).or_default().push(r);
        }
        let quotas: Vec<f64> = strata.values().map(|rows| rows.len() as f64 * holdout_fraction).collect();
        let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = alloc.iter().sum();
        let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
        by_remainder.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in by_remainder.iter().take(target.saturating_sub(assigned)) {
            alloc[i] += 1;
        }
        for (rows, take) in strata.values().zip(alloc) {
            let mut rows: Vec<usize> = rows.clone();
            rows.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
            rows.shuffle(&mut rng);
            test_rows.extend(rows.into_iter().take(take));
        }
    } else {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
        rows.shuffle(&mut rng);
        test_rows.extend(rows.into_iter().take(target));
    }

    if test_rows.is_empty() || test_rows.len() == n {
        return Err(EvidenceError::DegenerateSplit(format!(
            "{} of {} rows in holdout",
            test_rows.len(),
            n
        )));
    }
    let test: BTreeSet<usize> = test_rows.into_iter().collect();
    let mut train_keys: Vec<String> = (0..n).filter(|r| !test.contains(r)).map(|r| keys[r].clone()).collect();
    let mut test_keys: Vec<String> = test.iter().map(|&r| keys[r].clone()).collect();
    train_keys.sort();
    test_keys.sort();
    Ok(SplitSpec {
        split_key: table.row_key().to_string(),
        train_keys,
        test_keys,
        group_column: group_column.map(str::to_string),
        holdout_fraction,
        seed,
    })
}
