use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, gap, usable_support};
use super::{AdapterError, BlockingStatus, EffectSupport};
use crate::evidence::{Column, EvidenceTable};
use crate::manifest::{ConnectivityConfig, ThresholdMode};
use crate::rule::{quantile, Rule};

fn label_ids(col: &Column, n: usize) -> (Vec<Option<usize>>, usize) {
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    for r in 0..n {
        if !col.is_missing(r) {
            let next = ids.len();
            ids.entry(col.render(r)).or_insert(next);
        }
    }
    let out = (0..n)
        .map(|r| (!col.is_missing(r)).then(|| ids[&col.render(r)]))
        .collect();
    (out, ids.len())
}

/// Score, block and group columns of a connectivity table.
#[derive(Debug, Clone)]
pub struct ConnectivityData {
    score: Vec<Option<f64>>,
    block: Option<(Vec<Option<usize>>, usize)>,
    group: Option<(Vec<Option<usize>>, usize)>,
    min_group_coverage: usize,
    min_group_coverage_ratio: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

impl ConnectivityData {
    pub fn prepare(cfg: &ConnectivityConfig, table: &EvidenceTable) -> Result<ConnectivityData, AdapterError> {
        let n = table.n_rows();
        let col = |name: &str| {
            table
                .column(name)
                .ok_or_else(|| AdapterError::MissingColumn(name.to_string()))
        };
        let score_col = col(&cfg.score_column)?;
        let score = (0..n)
            .map(|r| {
                if score_col.is_missing(r) {
                    Ok(None)
                } else {
                    score_col
                        .numeric(r)
                        .map(Some)
                        .ok_or_else(|| AdapterError::NotBinary(cfg.score_column.clone(), r))
                }
            })
            .collect::<Result<_, _>>()?;
        let block = match &cfg.block_column {
            Some(b) => Some(label_ids(col(b)?, n)),
            None => None,
        };
        let group = match &cfg.group_column {
            Some(g) => Some(label_ids(col(g)?, n)),
            None => None,
        };
        Ok(ConnectivityData {
            score,
            block,
            group,
            min_group_coverage: cfg.min_group_coverage,
            min_group_coverage_ratio: cfg.min_group_coverage_ratio,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.score.len()
    }

    /// Selected-minus-comparison score contrast, weighted over blocks that
    /// hold both sides by the selected count in each block. Falls back to
    /// the plain mean difference when no block is comparable. Support is the
    /// selected count, gated by group coverage when a group column is set.
    pub fn blocked_contrast(&self, mask: &[bool]) -> Result<EffectSupport, AdapterError> {
        let n = self.n_rows();
        let selected: Vec<usize> = (0..n).filter(|&r| mask[r] && self.score[r].is_some()).collect();
        let comparison: Vec<usize> = (0..n).filter(|&r| !mask[r] && self.score[r].is_some()).collect();
        if selected.is_empty() {
            return Err(AdapterError::EmptySubgroup);
        }
        let s = |r: usize| self.score[r].expect("filtered to present scores");
        let sel_scores: Vec<f64> = selected.iter().map(|&r| s(r)).collect();

        let mut covered_groups = 0usize;
        if let Some((ids, total)) = &self.group {
            let mut seen = vec![false; *total];
            for &r in &selected {
                if let Some(g) = ids[r] {
                    seen[g] = true;
                }
            }
            covered_groups = seen.iter().filter(|&&x| x).count();
            let ratio = if *total == 0 { 0.0 } else { covered_groups as f64 / *total as f64 };
            if covered_groups < self.min_group_coverage || ratio < self.min_group_coverage_ratio {
                return Err(AdapterError::InvalidForScoring(format!(
                    "covers {covered_groups} of {total} groups"
                )));
            }
        }

        let mut blocked: Option<(f64, usize)> = None;
        if let Some((ids, total)) = &self.block {
            let mut sel = vec![(0.0, 0usize); *total];
            let mut cmp = vec![(0.0, 0usize); *total];
            for &r in &selected {
                if let Some(b) = ids[r] {
                    sel[b].0 += s(r);
                    sel[b].1 += 1;
                }
            }
            for &r in &comparison {
                if let Some(b) = ids[r] {
                    cmp[b].0 += s(r);
                    cmp[b].1 += 1;
                }
            }
            let usable: Vec<usize> = (0..*total).filter(|&b| sel[b].1 > 0 && cmp[b].1 > 0).collect();
            let weight_total: usize = usable.iter().map(|&b| sel[b].1).sum();
            if weight_total > 0 {
                let effect = usable
                    .iter()
                    .map(|&b| {
                        let w = sel[b].1 as f64 / weight_total as f64;
                        w * (sel[b].0 / sel[b].1 as f64 - cmp[b].0 / cmp[b].1 as f64)
                    })
                    .sum();
                blocked = Some((effect, usable.len()));
            } else {
                log::debug!("no block holds both selected and comparison rows; using the unblocked contrast");
            }
        }

        let (effect, status, blocks_used) = match blocked {
            Some((e, k)) => (e, BlockingStatus::Blocked, k),
            None => {
                if comparison.is_empty() {
                    return Err(AdapterError::EmptyComparison);
                }
                let cmp_scores: Vec<f64> = comparison.iter().map(|&r| s(r)).collect();
                (mean(&sel_scores) - mean(&cmp_scores), BlockingStatus::Unblocked, 0)
            }
        };
        let coverage = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        let diagnostics = BTreeMap::from([
            ("coverage".to_string(), coverage),
            ("n_selected".to_string(), selected.len() as f64),
            ("n_comparison".to_string(), comparison.len() as f64),
            ("blocks_used".to_string(), blocks_used as f64),
            ("covered_groups".to_string(), covered_groups as f64),
        ]);
        Ok(EffectSupport {
            effect,
            support: selected.len(),
            coverage,
            diagnostics,
            blocking_status: Some(status),
        })
    }
}

pub fn blocked_contrast(
    rule: &Rule,
    table: &EvidenceTable,
    cfg: &ConnectivityConfig,
) -> Result<EffectSupport, AdapterError> {
    ConnectivityData::prepare(cfg, table)?.blocked_contrast(&rule.mask(table)?)
}

/// Strong-response threshold: fixed, a percentile of holdout scores, or in
/// auto mode 90 when the holdout scale reaches 90 and the 90th percentile
/// otherwise.
pub fn strong_threshold(mode: ThresholdMode, scores: &[f64]) -> f64 {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let pct = |p: f64| if v.is_empty() { f64::INFINITY } else { quantile(&v, p) };
    match mode {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Percentile(p) => pct(p / 100.0),
        ThresholdMode::Auto => {
            if v.last().is_some_and(|&m| m >= 90.0) {
                90.0
            } else {
                pct(0.9)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FocusMode {
    #[serde(rename = "support_ge_0.02")]
    SupportGe002,
    #[serde(rename = "all")]
    All,
}

/// Holdout replay of one ranked rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReplay {
    pub rule: String,
    pub valid: bool,
    pub invalid_reason: Option<String>,
    pub n_selected: usize,
    pub support_ratio: f64,
    pub delta_conn: f64,
    pub delta_conn_median: f64,
    pub pos_rate90: f64,
    pub background_pos_rate90: f64,
    pub delta_pos_rate90: f64,
    pub usable: bool,
    pub train_effect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMetrics {
    pub tau: f64,
    pub rules: Vec<RuleReplay>,
    pub focus_mode: FocusMode,
    pub n_focus: usize,
    pub delta_conn_mean: f64,
    pub delta_conn_median: f64,
    pub pos_rate90: f64,
    pub delta_pos_rate90: f64,
    pub usable_rate: f64,
    pub valid_rule_rate: f64,
    pub train_contrast_mean: Option<f64>,
    pub test_contrast_mean: Option<f64>,
    pub gap: Option<f64>,
}

/// Replays the first `k` ranked rules on the holdout. Rules that cannot be
/// evaluated or select an empty side are invalid but still count in the
/// valid-rule-rate denominator.
pub fn connectivity_metrics(
    ranked: &[(Rule, Option<f64>)],
    holdout: &EvidenceTable,
    cfg: &ConnectivityConfig,
    k: usize,
) -> Result<ConnectivityMetrics, AdapterError> {
    let score_col = holdout
        .column(&cfg.score_column)
        .ok_or_else(|| AdapterError::MissingColumn(cfg.score_column.clone()))?;
    let n = holdout.n_rows();
    let scores: Vec<Option<f64>> = (0..n).map(|r| score_col.numeric(r)).collect();
    let present: Vec<f64> = scores.iter().flatten().copied().collect();
    let tau = strong_threshold(cfg.strong_threshold_mode, &present);
    let strong = |xs: &[f64]| xs.iter().filter(|&&x| x >= tau).count() as f64 / xs.len() as f64;

    let top = &ranked[..ranked.len().min(k)];
    let mut replays = Vec::with_capacity(top.len());
    for (rule, train_effect) in top {
        let mut rep = RuleReplay {
            rule: rule.to_string(),
            valid: false,
            invalid_reason: None,
            n_selected: 0,
            support_ratio: 0.0,
            delta_conn: f64::NAN,
            delta_conn_median: f64::NAN,
            pos_rate90: f64::NAN,
            background_pos_rate90: f64::NAN,
            delta_pos_rate90: f64::NAN,
            usable: false,
            train_effect: *train_effect,
        };
        match rule.mask(holdout) {
            Err(_) => rep.invalid_reason = Some("unmaterializable".into()),
            Ok(mask) => {
                let sel: Vec<f64> = (0..n).filter(|&r| mask[r]).filter_map(|r| scores[r]).collect();
                let bg: Vec<f64> = (0..n).filter(|&r| !mask[r]).filter_map(|r| scores[r]).collect();
                rep.n_selected = sel.len();
                rep.support_ratio = sel.len() as f64 / n as f64;
                if sel.is_empty() {
                    rep.invalid_reason = Some("empty_subgroup".into());
                } else if bg.is_empty() {
                    rep.invalid_reason = Some("empty_comparison".into());
                } else {
                    rep.valid = true;
                    rep.delta_conn = mean(&sel) - mean(&bg);
                    rep.delta_conn_median = median(&sel) - median(&bg);
                    rep.pos_rate90 = strong(&sel);
                    rep.background_pos_rate90 = strong(&bg);
                    rep.delta_pos_rate90 = rep.pos_rate90 - rep.background_pos_rate90;
                    let coverage = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
                    rep.usable = usable_support(coverage, sel.len());
                }
            }
        }
        replays.push(rep);
    }

    let valid: Vec<&RuleReplay> = replays.iter().filter(|r| r.valid).collect();
    if valid.is_empty() {
        return Err(AdapterError::NoValidRule);
    }
    let supported: Vec<&RuleReplay> = valid.iter().copied().filter(|r| r.support_ratio >= 0.02).collect();
    let needed = 5usize.max(top.len().div_ceil(2));
    let (focus_mode, focus) = if supported.len() >= needed {
        (FocusMode::SupportGe002, supported)
    } else {
        (FocusMode::All, valid.clone())
    };
    let avg = |f: &dyn Fn(&RuleReplay) -> f64| focus.iter().map(|r| f(r)).sum::<f64>() / focus.len() as f64;

    let paired: Vec<(f64, f64)> = focus
        .iter()
        .filter_map(|r| r.train_effect.map(|t| (t, r.delta_conn)))
        .collect();
    let (train_mean, test_mean) = if paired.is_empty() {
        (None, None)
    } else {
        let m = paired.len() as f64;
        (
            Some(paired.iter().map(|p| p.0).sum::<f64>() / m),
            Some(paired.iter().map(|p| p.1).sum::<f64>() / m),
        )
    };
    Ok(ConnectivityMetrics {
        tau,
        focus_mode,
        n_focus: focus.len(),
        delta_conn_mean: avg(&|r| r.delta_conn),
        delta_conn_median: avg(&|r| r.delta_conn_median),
        pos_rate90: avg(&|r| r.pos_rate90),
        delta_pos_rate90: avg(&|r| r.delta_pos_rate90),
        usable_rate: avg(&|r| r.usable as u8 as f64),
        valid_rule_rate: valid.len() as f64 / top.len() as f64,
        gap: train_mean.zip(test_mean).map(|(a, b)| gap(a, b)),
        train_contrast_mean: train_mean,
        test_contrast_mean: test_mean,
        rules: replays,
    })
}

/// Rule-ensemble retrieval score and its average precision. Each covering
/// rule adds its positive discovery-side contrast, or one vote when the
/// contrast is unknown. Rows with a missing label are skipped.
pub fn ensemble_auprc(
    rules: &[(Rule, Option<f64>)],
    holdout: &EvidenceTable,
    label_column: &str,
) -> Result<(f64, Vec<f64>), AdapterError> {
    let col = holdout
        .column(label_column)
        .ok_or_else(|| AdapterError::MissingColumn(label_column.to_string()))?;
    let n = holdout.n_rows();
    let mut scores = vec![0.0; n];
    for (rule, contrast) in rules {
        let Ok(mask) = rule.mask(holdout) else { continue };
        let vote = contrast.map(|c| c.max(0.0)).unwrap_or(1.0);
        for r in 0..n {
            if mask[r] {
                scores[r] += vote;
            }
        }
    }
    let mut s = Vec::new();
    let mut labels = Vec::new();
    for r in 0..n {
        if let Some(x) = col.numeric(r) {
            if x != 0.0 && x != 1.0 {
                return Err(AdapterError::NotBinary(label_column.to_string(), r));
            }
            s.push(scores[r]);
            labels.push(x == 1.0);
        }
    }
    Ok((average_precision(&s, &labels)?, scores))
}
