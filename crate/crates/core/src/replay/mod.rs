//! Post-discovery evaluation of frozen rules on the holdout partition,
//! Best-1 selection, and paired-split aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    arr_metrics, connectivity_metrics, direction_consistency, ensemble_auprc, AdapterError, ConnectivityMetrics,
};
use crate::evidence::EvidenceTable;
use crate::manifest::{AdapterConfig, RunManifest};
use crate::report::{export_ranking, Proposition};
use crate::rule::{FittedPlan, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptyRuleList,
    Unmaterializable,
    MissingColumns,
    EmptyArm,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::EmptyRuleList => "empty_rule_list",
            SkipReason::Unmaterializable => "unmaterializable",
            SkipReason::MissingColumns => "missing_columns",
            SkipReason::EmptyArm => "empty_arm",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of one replay cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub task: String,
    pub split_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub method: String,
    pub task: String,
    pub split_id: String,
    /// Position in the export ranking; 0 is the Best-1 rule.
    pub rank: usize,
    pub rules: Vec<String>,
    pub train_effect: Option<f64>,
    pub holdout_effect: Option<f64>,
    pub valid_on_holdout: bool,
    pub metrics: BTreeMap<String, f64>,
    pub skipped: Option<SkipReason>,
    pub detail: Option<String>,
}

impl ReplayRecord {
    fn new(cell: &Cell, rank: usize, rules: Vec<String>, train_effect: Option<f64>) -> ReplayRecord {
        ReplayRecord {
            method: cell.method.clone(),
            task: cell.task.clone(),
            split_id: cell.split_id.clone(),
            rank,
            rules,
            train_effect,
            holdout_effect: None,
            valid_on_holdout: false,
            metrics: BTreeMap::new(),
            skipped: None,
            detail: None,
        }
    }

    fn skip(mut self, reason: SkipReason, detail: String) -> ReplayRecord {
        self.skipped = Some(reason);
        self.detail = Some(detail);
        self
    }

    /// Record for a cell whose method exported nothing.
    pub fn empty(cell: &Cell) -> ReplayRecord {
        ReplayRecord::new(cell, 0, Vec::new(), None).skip(SkipReason::EmptyRuleList, "no exported rule".into())
    }

    pub fn cell(&self) -> Cell {
        Cell {
            method: self.method.clone(),
            task: self.task.clone(),
            split_id: self.split_id.clone(),
        }
    }
}

/// First proposition in the export ranking. Never reads the holdout.
pub fn best1(props: &[Proposition]) -> Result<&Proposition, SkipReason> {
    export_ranking(props)
        .first()
        .map(|&i| &props[i])
        .ok_or(SkipReason::EmptyRuleList)
}

/// Propositions in export-ranking order.
pub fn ranked(props: &[Proposition]) -> Vec<&Proposition> {
    export_ranking(props).into_iter().map(|i| &props[i]).collect()
}

/// Recomputes derived columns on `holdout` from stored train-side plans.
pub fn rematerialize(holdout: &EvidenceTable, plans: &[FittedPlan]) -> Result<EvidenceTable, String> {
    let mut t = holdout.clone();
    for p in plans {
        if t.has_column(&p.output) {
            continue;
        }
        t = p.extend(&t).map_err(|e| format!("{}: {e}", p.output))?;
    }
    Ok(t)
}

fn missing_raw(rule: &Rule, plans: &[FittedPlan], holdout: &EvidenceTable) -> Vec<String> {
    rule.features()
        .into_iter()
        .filter(|f| !holdout.has_column(f) && !plans.iter().any(|p| p.output == *f))
        .map(str::to_string)
        .collect()
}

fn clinical_record(rec: ReplayRecord, rule: &Rule, table: &EvidenceTable, manifest: &RunManifest) -> ReplayRecord {
    let AdapterConfig::ClinicalTrial(cfg) = &manifest.adapter else {
        unreachable!("caller dispatches on the adapter")
    };
    let mut rec = rec;
    match arr_metrics(rule, table, cfg) {
        Ok(m) => {
            rec.valid_on_holdout = true;
            rec.holdout_effect = Some(m.arr_bad);
            rec.metrics = BTreeMap::from([
                ("arr_bad".to_string(), m.arr_bad),
                ("parr".to_string(), m.parr),
                ("usable".to_string(), if m.usable { 1.0 } else { 0.0 }),
                ("coverage".to_string(), m.coverage),
                ("n_control".to_string(), m.n_control as f64),
                ("n_treated".to_string(), m.n_treated as f64),
                ("bad_rate_control".to_string(), m.bad_rate_control),
                ("bad_rate_treated".to_string(), m.bad_rate_treated),
                ("wald_se".to_string(), m.wald_se),
            ]);
            rec
        }
        Err(e @ AdapterError::MissingColumn(_)) => rec.skip(SkipReason::MissingColumns, e.to_string()),
        Err(AdapterError::Rule(e)) => rec.skip(SkipReason::Unmaterializable, e.to_string()),
        Err(e) => rec.skip(SkipReason::EmptyArm, e.to_string()),
    }
}

fn connectivity_fields(rec: &mut ReplayRecord, m: &ConnectivityMetrics) {
    rec.valid_on_holdout = m.valid_rule_rate > 0.0;
    rec.holdout_effect = m.test_contrast_mean.or(Some(m.delta_conn_mean));
    rec.metrics = BTreeMap::from([
        ("delta_conn".to_string(), m.delta_conn_mean),
        ("delta_conn_median".to_string(), m.delta_conn_median),
        ("pos_rate90".to_string(), m.pos_rate90),
        ("delta_pos_rate90".to_string(), m.delta_pos_rate90),
        ("usable".to_string(), m.usable_rate),
        ("valid_rule_rate".to_string(), m.valid_rule_rate),
        ("tau".to_string(), m.tau),
    ]);
    if let Some(g) = m.gap {
        rec.metrics.insert("gap".into(), g);
    }
}

/// Replays one frozen rule, rematerializing derived features first.
/// Invalidity is reported in the record, never thrown.
pub fn replay_rule(
    cell: &Cell,
    rank: usize,
    rule: &Rule,
    plans: &[FittedPlan],
    train_effect: Option<f64>,
    holdout: &EvidenceTable,
    manifest: &RunManifest,
) -> ReplayRecord {
    let rec = ReplayRecord::new(cell, rank, vec![rule.to_string()], train_effect);
    let missing = missing_raw(rule, plans, holdout);
    if !missing.is_empty() {
        return rec.skip(SkipReason::MissingColumns, missing.join(","));
    }
    let table = match rematerialize(holdout, plans) {
        Ok(t) => t,
        Err(e) => return rec.skip(SkipReason::Unmaterializable, e),
    };
    match &manifest.adapter {
        AdapterConfig::ClinicalTrial(_) => clinical_record(rec, rule, &table, manifest),
        AdapterConfig::Connectivity(cfg) => {
            let mut rec = rec;
            match connectivity_metrics(&[(rule.clone(), train_effect)], &table, cfg, 1) {
                Ok(m) if m.valid_rule_rate > 0.0 => {
                    connectivity_fields(&mut rec, &m);
                    rec
                }
                Ok(m) => {
                    let why = m.rules[0].invalid_reason.clone().unwrap_or_default();
                    rec.skip(SkipReason::EmptyArm, why)
                }
                Err(e @ AdapterError::MissingColumn(_)) => rec.skip(SkipReason::MissingColumns, e.to_string()),
                Err(e) => rec.skip(SkipReason::EmptyArm, e.to_string()),
            }
        }
    }
}

/// Replays the top `k` ranked rules jointly (connectivity protocol). Rules
/// whose features cannot be rematerialized count as invalid.
pub fn replay_top_k(
    cell: &Cell,
    props: &[&Proposition],
    k: usize,
    holdout: &EvidenceTable,
    manifest: &RunManifest,
) -> ReplayRecord {
    let AdapterConfig::Connectivity(cfg) = &manifest.adapter else {
        panic!("top-k replay needs the connectivity adapter");
    };
    let top = &props[..props.len().min(k)];
    let mut rec = ReplayRecord::new(
        cell,
        0,
        top.iter().map(|p| p.rule.text.clone()).collect(),
        top.first().map(|p| p.evidence.effect),
    );
    if top.is_empty() {
        return rec.skip(SkipReason::EmptyRuleList, "no exported rule".into());
    }
    let mut table = holdout.clone();
    for p in top {
        for plan in &p.evidence.plans {
            if let Ok(t) = rematerialize(&table, std::slice::from_ref(plan)) {
                table = t;
            }
        }
    }
    let rules: Vec<(Rule, Option<f64>)> = top
        .iter()
        .filter_map(|p| p.parse_rule(manifest).map(|r| (r, Some(p.evidence.effect))))
        .collect();
    match connectivity_metrics(&rules, &table, cfg, k) {
        Ok(m) => {
            connectivity_fields(&mut rec, &m);
            if let Some(label) = &cfg.label_column {
                if let Ok((ap, _)) = ensemble_auprc(&rules, &table, label) {
                    rec.metrics.insert("auprc".into(), ap);
                }
            }
            rec
        }
        Err(e @ AdapterError::MissingColumn(_)) => rec.skip(SkipReason::MissingColumns, e.to_string()),
        Err(AdapterError::NoValidRule) => rec.skip(SkipReason::Unmaterializable, "no rule valid on holdout".into()),
        Err(e) => rec.skip(SkipReason::EmptyArm, e.to_string()),
    }
}

/// Arithmetic split-seed schedule; an explicit list overrides it.
pub fn seed_schedule(base: u64, step: u64, count: usize, explicit: Option<&[u64]>) -> Vec<u64> {
    match explicit {
        Some(list) => list.to_vec(),
        None => (0..count as u64).map(|b| base + b * step).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("paired-split violation: missing {missing:?}, unexpected {unexpected:?}")]
pub struct PairingViolation {
    pub missing: Vec<Cell>,
    pub unexpected: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub method: String,
    pub task: String,
    pub split_id: String,
    pub rank: usize,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub task: String,
    pub records: usize,
    pub used: usize,
    pub skipped: usize,
    /// Mean of each metric over used records.
    pub means: BTreeMap<String, f64>,
    /// Percent of nonmissing (train, holdout) sign pairs that agree.
    pub d_cons: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub tasks: usize,
    /// Task means averaged with equal task weight.
    pub means: BTreeMap<String, f64>,
    pub d_cons: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub total: usize,
    pub used: usize,
    pub cells: Vec<CellSummary>,
    pub methods: Vec<MethodSummary>,
    pub skipped: Vec<SkippedEntry>,
}

/// Expected split ids per task, read off the records themselves.
pub fn observed_splits(records: &[ReplayRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        out.entry(r.task.clone()).or_default().insert(r.split_id.clone());
    }
    out
}

/// Every method must cover exactly the expected split ids of every task.
pub fn check_pairing(
    records: &[ReplayRecord],
    expected: &BTreeMap<String, BTreeSet<String>>,
) -> Result<(), PairingViolation> {
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    let present: BTreeSet<Cell> = records.iter().map(ReplayRecord::cell).collect();
    let mut missing = Vec::new();
    for m in &methods {
        for (task, splits) in expected {
            for s in splits {
                let c = Cell {
                    method: m.to_string(),
                    task: task.clone(),
                    split_id: s.clone(),
                };
                if !present.contains(&c) {
                    missing.push(c);
                }
            }
        }
    }
    let unexpected: Vec<Cell> = present
        .iter()
        .filter(|c| !expected.get(&c.task).is_some_and(|s| s.contains(&c.split_id)))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(PairingViolation { missing, unexpected });
    }
    Ok(())
}

/// Checks pairing, then summarizes.
pub fn paired_aggregate(
    records: &[ReplayRecord],
    expected: &BTreeMap<String, BTreeSet<String>>,
) -> Result<AggregateSummary, PairingViolation> {
    check_pairing(records, expected)?;
    Ok(summarize(records))
}

/// Averages used records per (method, task) and across tasks with equal
/// weight. Skipped records are listed, not imputed.
pub fn summarize(records: &[ReplayRecord]) -> AggregateSummary {

    let mut sorted: Vec<&ReplayRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.method, &a.task, &a.split_id, a.rank).cmp(&(&b.method, &b.task, &b.split_id, b.rank))
    });
    let mut groups: BTreeMap<(String, String), Vec<&ReplayRecord>> = BTreeMap::new();
    for r in &sorted {
        groups.entry((r.method.clone(), r.task.clone())).or_default().push(r);
    }

    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for ((method, task), rs) in &groups {
        let used: Vec<&&ReplayRecord> = rs.iter().filter(|r| r.skipped.is_none()).collect();
        for r in rs.iter().filter(|r| r.skipped.is_some()) {
            skipped.push(SkippedEntry {
                method: r.method.clone(),
                task: r.task.clone(),
                split_id: r.split_id.clone(),
                rank: r.rank,
                reason: r.skipped.expect("filtered"),
                detail: r.detail.clone().unwrap_or_default(),
            });
        }
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &used {
            for (k, v) in &r.metrics {
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let pairs: Vec<(Option<f64>, Option<f64>)> = rs.iter().map(|r| (r.train_effect, r.holdout_effect)).collect();
        cells.push(CellSummary {
            method: method.clone(),
            task: task.clone(),
            records: rs.len(),
            used: used.len(),
            skipped: rs.len() - used.len(),
            means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            d_cons: direction_consistency(&pairs),
        });
    }

    let mut by_method: BTreeMap<&str, Vec<&CellSummary>> = BTreeMap::new();
    for c in &cells {
        by_method.entry(c.method.as_str()).or_default().push(c);
    }
    let methods = by_method
        .into_iter()
        .map(|(m, cs)| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for c in &cs {
                for (k, v) in &c.means {
                    let e = sums.entry(k.clone()).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            let dc: Vec<f64> = cs.iter().filter_map(|c| c.d_cons).collect();
            MethodSummary {
                method: m.to_string(),
                tasks: cs.len(),
                means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
                d_cons: (!dc.is_empty()).then(|| dc.iter().sum::<f64>() / dc.len() as f64),
            }
        })
        .collect();

    AggregateSummary {
        total: records.len(),
        used: records.len() - skipped.len(),
        cells,
        methods,
        skipped,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Replay records as CSV with one column per metric key seen.
pub fn write_records_csv(path: &Path, records: &[ReplayRecord]) -> Result<(), csv::Error> {
    let keys: BTreeSet<&str> = records.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "method", "task", "split_id", "rank", "rules", "train_effect", "holdout_effect", "valid_on_holdout", "skipped",
    ];
    header.extend(keys.iter());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.method.clone(),
            r.task.clone(),
            r.split_id.clone(),
            r.rank.to_string(),
            r.rules.join(" | "),
            opt(r.train_effect),
            opt(r.holdout_effect),
            r.valid_on_holdout.to_string(),
            r.skipped.map(|s| s.as_str().to_string()).unwrap_or_default(),
        ];
        row.extend(keys.iter().map(|k| opt(r.metrics.get(*k).copied())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, s: &AggregateSummary) -> Result<(), csv::Error> {
    let keys: BTreeSet<&str> = s.cells.iter().flat_map(|c| c.means.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method", "task", "records", "used", "skipped", "d_cons"];
    header.extend(keys.iter());
    w.write_record(&header)?;
    for c in &s.cells {
        let mut row = vec![
            c.method.clone(),
            c.task.clone(),
            c.records.to_string(),
            c.used.to_string(),
            c.skipped.to_string(),
            opt(c.d_cons),
        ];
        row.extend(keys.iter().map(|k| opt(c.means.get(*k).copied())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_skipped_csv(path: &Path, s: &AggregateSummary) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "task", "split_id", "rank", "reason", "detail"])?;
    for e in &s.skipped {
        w.write_record([
            e.method.as_str(),
            e.task.as_str(),
            e.split_id.as_str(),
            &e.rank.to_string(),
            e.reason.as_str(),
            e.detail.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::fixtures::clinical_manifest;
    use crate::report::tests::{cand, ratio_plan, record_for};
    use crate::rule::parse_rule;
    use proptest::prelude::*;

    fn rec(method: &str, task: &str, split: &str, effects: (f64, f64)) -> ReplayRecord {
        let cell = Cell {
            method: method.into(),
            task: task.into(),
            split_id: split.into(),
        };
        let mut r = ReplayRecord::new(&cell, 0, vec!["a>1".into()], Some(effects.0));
        r.holdout_effect = Some(effects.1);
        r.valid_on_holdout = true;
        r.metrics.insert("arr_bad".into(), effects.1);
        r
    }

    #[test]
    fn best1_takes_ranking_head() {
        let props = vec![
            record_for(&cand("bmi>27.5", 0.1, 40), &[]),
            record_for(&cand("glucose>6.1", 0.3, 40), &[]),
        ];
        assert_eq!(best1(&props).unwrap().rule.text, "glucose>6.1");
        let rev: Vec<Proposition> = props.iter().rev().cloned().collect();
        assert_eq!(best1(&rev).unwrap().rule.text, "glucose>6.1");
        assert_eq!(best1(&[]).unwrap_err(), SkipReason::EmptyRuleList);
    }

    #[test]
    fn schedule() {
        assert_eq!(seed_schedule(58, 10, 3, None), vec![58, 68, 78]);
        assert_eq!(seed_schedule(9, 10, 1, None), vec![9]);
        assert_eq!(seed_schedule(58, 10, 3, Some(&[1, 5])), vec![1, 5]);
        let s = seed_schedule(58, 10, 50, None);
        assert_eq!((s[0], s[49]), (58, 548));
    }

    #[test]
    fn complete_pairs_aggregate() {
        let mut records = Vec::new();
        for m in ["a", "b"] {
            for s in ["1", "2", "3"] {
                records.push(rec(m, "t", s, (0.1, 0.2)));
            }
        }
        let sum = paired_aggregate(&records, &observed_splits(&records)).unwrap();
        assert_eq!(sum.cells.len(), 2);
        assert!(sum.cells.iter().all(|c| c.used == 3));
        assert_eq!(sum.used + sum.skipped.len(), sum.total);
    }

    #[test]
    fn missing_split_is_a_violation() {
        let records = vec![rec("a", "t", "1", (0.1, 0.1)), rec("a", "t", "3", (0.1, 0.1)), rec("b", "t", "1", (0.1, 0.1)), rec("b", "t", "2", (0.1, 0.1)), rec("b", "t", "3", (0.1, 0.1))];
        let err = paired_aggregate(&records, &observed_splits(&records)).unwrap_err();
        assert_eq!(err.missing.len(), 1);
        assert_eq!(err.missing[0].method, "a");
        assert_eq!(err.missing[0].split_id, "2");
    }

    #[test]
    fn d_cons_and_task_weights() {
        let records = vec![
            rec("a", "t1", "1", (0.1, 0.2)),
            rec("a", "t1", "2", (0.1, -0.2)),
            rec("a", "t1", "3", (-0.1, -0.2)),
            rec("a", "t2", "1", (0.1, 1.0)),
            rec("a", "t2", "2", (0.1, 1.0)),
            rec("a", "t2", "3", (0.1, 1.0)),
        ];
        let sum = paired_aggregate(&records, &observed_splits(&records)).unwrap();
        assert!((sum.cells[0].d_cons.unwrap() - 200.0 / 3.0).abs() < 1e-9);
        // t1 mean -0.2/3, t2 mean 1.0; equal weight
        let want = (-0.2 / 3.0 + 1.0) / 2.0;
        assert!((sum.methods[0].means["arr_bad"] - want).abs() < 1e-12);
    }

    #[test]
    fn skipped_records_are_listed_not_imputed() {
        let cell = Cell {
            method: "a".into(),
            task: "t".into(),
            split_id: "2".into(),
        };
        let records = vec![rec("a", "t", "1", (0.1, 0.4)), ReplayRecord::empty(&cell)];
        let sum = paired_aggregate(&records, &observed_splits(&records)).unwrap();
        assert_eq!(sum.skipped.len(), 1);
        assert_eq!(sum.skipped[0].reason, SkipReason::EmptyRuleList);
        assert_eq!(sum.cells[0].means["arr_bad"], 0.4);
        assert_eq!(sum.used + sum.skipped.len(), sum.total);
    }

    fn holdout() -> EvidenceTable {
        use crate::evidence::Column;
        let n = 40;
        let num = |f: &dyn Fn(usize) -> f64| Column::Numeric((0..n).map(|i| Some(f(i))).collect());
        EvidenceTable::new(
            "row_id",
            (0..n).map(|i| format!("r{i}")).collect(),
            vec![
                ("bmi".into(), num(&|i| 20.0 + i as f64 / 2.0)),
                ("glucose".into(), num(&|i| 5.0 + (i % 7) as f64 / 2.0)),
                ("treatment".into(), num(&|i| (i % 2) as f64)),
                ("bad_outcome".into(), num(&|i| ((i % 3) == 0) as u8 as f64)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn replay_raw_virtual_and_missing() {
        let m = clinical_manifest();
        let cell = Cell {
            method: "m".into(),
            task: "t".into(),
            split_id: "s".into(),
        };
        let h = holdout();
        let raw = replay_rule(&cell, 0, &parse_rule("bmi>27.5", 3).unwrap(), &[], Some(0.1), &h, &m);
        assert!(raw.valid_on_holdout && raw.skipped.is_none());
        assert_eq!(raw.holdout_effect, Some(raw.metrics["arr_bad"]));

        let plan = ratio_plan("glucose", "bmi");
        let rule = parse_rule(&format!("{}>0.2", plan.output), 3).unwrap();
        let virt = replay_rule(&cell, 0, &rule, &[plan], None, &h, &m);
        assert!(virt.valid_on_holdout, "{:?}", virt.detail);

        let rule = parse_rule("glucose_m1>1", 3).unwrap();
        let gone = replay_rule(&cell, 0, &rule, &[], None, &h, &m);
        assert_eq!(gone.skipped, Some(SkipReason::MissingColumns));

        let plan = ratio_plan("glucose_m1", "bmi");
        let rule = parse_rule(&format!("{}>0.2", plan.output), 3).unwrap();
        let bad = replay_rule(&cell, 0, &rule, &[plan], None, &h, &m);
        assert_eq!(bad.skipped, Some(SkipReason::Unmaterializable));
    }

    proptest! {
        #[test]
        fn accounting_is_total(skips in prop::collection::vec(any::<bool>(), 1..12)) {
            let records: Vec<ReplayRecord> = skips
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let cell = Cell { method: "m".into(), task: "t".into(), split_id: i.to_string() };
                    if s { ReplayRecord::empty(&cell) } else { rec("m", "t", &i.to_string(), (0.1, 0.1)) }
                })
                .collect();
            let sum = paired_aggregate(&records, &observed_splits(&records)).unwrap();
            prop_assert_eq!(sum.used + sum.skipped.len(), sum.total);
            prop_assert_eq!(sum.skipped.len(), skips.iter().filter(|s| **s).count());
        }
    }
}
