use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::digest::sha256_hex;
use crate::evidence::{Column, EvidenceTable};
use crate::manifest::RunManifest;
use crate::rule::Rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum CardVariant {
    /// Endpoint rate inside the rule minus the partition base rate;
    /// support is the covered count.
    Rate,
    /// Treated minus control good-outcome rate inside the rule, where the
    /// endpoint marks a bad outcome; support is the smaller arm.
    Benefit { treatment_column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardConfig {
    pub endpoint: String,
    pub variant: CardVariant,
    pub top_k: usize,
    pub min_effect: f64,
    pub min_support: usize,
}

impl CardConfig {
    pub fn new(endpoint: &str, variant: CardVariant, min_support: usize) -> CardConfig {
        CardConfig {
            endpoint: endpoint.to_string(),
            variant,
            top_k: 5,
            min_effect: 0.0,
            min_support,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeCard {
    pub card_id: String,
    pub rule: String,
    pub semantic_key: String,
    pub consequence: String,
    pub val_effect: f64,
    pub val_support: usize,
    pub score: f64,
    pub source_digests: Vec<String>,
}

fn binary(col: &Column, row: usize) -> Option<bool> {
    col.numeric(row).and_then(|v| match v {
        0.0 => Some(false),
        1.0 => Some(true),
        _ => None,
    })
}

/// (effect, support) on the validation table, or `None` when the rule
/// cannot be evaluated there.
fn val_contrast(rule: &Rule, table: &EvidenceTable, cfg: &CardConfig) -> Option<(f64, usize)> {
    let y = table.column(&cfg.endpoint)?;
    let mask = rule.mask(table).ok()?;
    match &cfg.variant {
        CardVariant::Rate => {
            let (mut n, mut pos, mut all, mut all_pos) = (0usize, 0usize, 0usize, 0usize);
            for (r, &m) in mask.iter().enumerate() {
                let Some(v) = binary(y, r) else { continue };
                all += 1;
                all_pos += v as usize;
                if m {
                    n += 1;
                    pos += v as usize;
                }
            }
            (n > 0).then(|| (pos as f64 / n as f64 - all_pos as f64 / all as f64, n))
        }
        CardVariant::Benefit { treatment_column } => {
            let t = table.column(treatment_column)?;
            let mut n = [0usize; 2];
            let mut good = [0usize; 2];
            for (r, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let (Some(arm), Some(bad)) = (binary(t, r), binary(y, r)) else { continue };
                n[arm as usize] += 1;
                good[arm as usize] += !bad as usize;
            }
            let support = n[0].min(n[1]);
            (support > 0).then(|| (good[1] as f64 / n[1] as f64 - good[0] as f64 / n[0] as f64, support))
        }
    }
}

fn consequence(effect: f64, endpoint: &str, variant: &CardVariant) -> String {
    let size = match effect.abs() {
        x if x >= 0.2 => "large",
        x if x >= 0.05 => "moderate",
        _ => "small",
    };
    match variant {
        CardVariant::Rate => {
            let dir = if effect >= 0.0 { "higher" } else { "lower" };
            format!("{size} {dir} {endpoint} rate than the partition base rate ({effect:+.4})")
        }
        CardVariant::Benefit { .. } => {
            let dir = if effect >= 0.0 { "benefit" } else { "harm" };
            format!("{size} treatment {dir} on {endpoint} within the subgroup ({effect:+.4})")
        }
    }
}

/// Scores each distinct rule on the validation table and keeps the top
/// `top_k` by effect times square-root support, ties by canonical key.
///
/// `pool` pairs each rule with the digest of the evidence it came from;
/// duplicates by canonical key merge their digests. Rules touching a
/// forbidden or evaluation-only feature are dropped.
pub fn build_cards(
    pool: &[(Rule, String)],
    validation: &EvidenceTable,
    cfg: &CardConfig,
    manifest: &RunManifest,
) -> Result<Vec<KnowledgeCard>, ReportError> {
    let mut unique: BTreeMap<String, (&Rule, Vec<String>)> = BTreeMap::new();
    for (rule, digest) in pool {
        let e = unique.entry(rule.canonical_key()).or_insert((rule, Vec::new()));
        if !e.1.contains(digest) {
            e.1.push(digest.clone());
        }
    }
    let mut cards: Vec<KnowledgeCard> = unique
        .into_iter()
        .filter(|(_, (r, _))| r.features().iter().all(|f| !manifest.is_leaky(f)))
        .filter_map(|(key, (rule, mut digests))| {
            let (effect, support) = val_contrast(rule, validation, cfg)?;
            if effect < cfg.min_effect || support < cfg.min_support {
                return None;
            }
            digests.sort();
            Some(KnowledgeCard {
                card_id: sha256_hex(&key)[..12].to_string(),
                rule: rule.to_string(),
                semantic_key: key,
                consequence: consequence(effect, &cfg.endpoint, &cfg.variant),
                val_effect: effect,
                val_support: support,
                score: effect * (support as f64).sqrt(),
                source_digests: digests,
            })
        })
        .collect();
    cards.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.semantic_key.cmp(&b.semantic_key)));
    cards.truncate(cfg.top_k);
    if cards.is_empty() {
        return Err(ReportError::NoSurvivingCards);
    }
    Ok(cards)
}
