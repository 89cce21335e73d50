use std::fmt;

use serde::{Deserialize, Serialize};

use super::{FeatureCatalog, LiteralForm, Rule, ThresholdGrid};
use crate::manifest::{RunManifest, VariableKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    Type,
    Length,
    Grid,
    ForbiddenField,
    DuplicateLiteral,
    Window,
    UnknownFeature,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::Type => "type",
            InvalidReason::Length => "length",
            InvalidReason::Grid => "grid",
            InvalidReason::ForbiddenField => "forbidden_field",
            InvalidReason::DuplicateLiteral => "duplicate_literal",
            InvalidReason::Window => "window",
            InvalidReason::UnknownFeature => "unknown_feature",
        }
    }
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Failed checks, sorted and deduplicated; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub reasons: Vec<InvalidReason>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.reasons.is_empty()
    }

    pub fn has(&self, r: InvalidReason) -> bool {
        self.reasons.contains(&r)
    }
}

/// Checks a rule against the manifest, feature catalog and grid.
///
/// A feature is forbidden when the manifest flags or token-blocks it, when
/// it is an evaluation column or the row key, or when any input of its
/// construction is. Never mutates the rule.
pub fn validate_rule(
    rule: &Rule,
    manifest: &RunManifest,
    catalog: &FeatureCatalog,
    grid: &ThresholdGrid,
) -> ValidityReport {
    let mut reasons = Vec::new();
    if rule.is_empty() || rule.len() > manifest.control_bounds.max_rule_len {
        reasons.push(InvalidReason::Length);
    }
    if rule.has_duplicate() {
        reasons.push(InvalidReason::DuplicateLiteral);
    }
    for lit in rule.literals() {
        if manifest.is_leaky(&lit.feature) {
            reasons.push(InvalidReason::ForbiddenField);
            continue;
        }
        let Some(f) = catalog.get(&lit.feature) else {
            reasons.push(InvalidReason::UnknownFeature);
            continue;
        };
        if let Some(p) = &f.provenance {
            if p.inputs.iter().any(|i| manifest.is_leaky(i)) {
                reasons.push(InvalidReason::ForbiddenField);
            }
            if let Some(w) = &p.window {
                let admissible = p
                    .inputs
                    .iter()
                    .all(|i| manifest.variable(i).is_some_and(|v| v.windows.contains(w)));
                if !admissible {
                    reasons.push(InvalidReason::Window);
                }
            }
        }
        match &lit.form {
            LiteralForm::Threshold { value, .. } => {
                if f.kind != VariableKind::Numeric {
                    reasons.push(InvalidReason::Type);
                } else if !grid.thresholds(&f.name).contains(value) {
                    reasons.push(InvalidReason::Grid);
                }
            }
            LiteralForm::Membership(levels) => {
                if f.kind == VariableKind::Numeric {
                    reasons.push(InvalidReason::Type);
                } else {
                    let known = grid.feature_levels(&f.name);
                    if levels.is_empty() || levels.iter().any(|l| !known.contains(l)) {
                        reasons.push(InvalidReason::Grid);
                    }
                }
            }
            LiteralForm::Missingness(_) => {
                if !f.missing_allowed {
                    reasons.push(InvalidReason::Type);
                }
            }
        }
    }
    reasons.sort();
    reasons.dedup();
    ValidityReport { reasons }
}
