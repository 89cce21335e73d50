use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grid::quantile;
use crate::evidence::{Column, EvidenceTable};
use crate::manifest::{RunManifest, VariableKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("malformed feature plan `{0}`")]
    Syntax(String),
    #[error("plan cannot be materialized: {0}")]
    UnmaterializablePlan(String),
    #[error("plan input `{0}` is forbidden or evaluation-only")]
    ForbiddenInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOp {
    Ratio,
    Difference,
    ThresholdComposite,
    Bin,
    FamilySum,
    WindowMean,
    WindowDelta,
    WindowCount,
    LastMinusFirst,
}

impl PlanOp {
    pub const ALL: [PlanOp; 9] = [
        PlanOp::Ratio,
        PlanOp::Difference,
        PlanOp::ThresholdComposite,
        PlanOp::Bin,
        PlanOp::FamilySum,
        PlanOp::WindowMean,
        PlanOp::WindowDelta,
        PlanOp::WindowCount,
        PlanOp::LastMinusFirst,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlanOp::Ratio => "ratio",
            PlanOp::Difference => "difference",
            PlanOp::ThresholdComposite => "threshold_composite",
            PlanOp::Bin => "bin",
            PlanOp::FamilySum => "family_sum",
            PlanOp::WindowMean => "window_mean",
            PlanOp::WindowDelta => "window_delta",
            PlanOp::WindowCount => "window_count",
            PlanOp::LastMinusFirst => "last_minus_first",
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            PlanOp::WindowMean | PlanOp::WindowDelta | PlanOp::WindowCount | PlanOp::LastMinusFirst
        )
    }

    pub fn origin(self) -> FeatureOrigin {
        if self.is_dynamic() {
            FeatureOrigin::Dynamic
        } else {
            FeatureOrigin::Virtual
        }
    }
}

/// A requested derived feature: `op(in1,in2;arg)`.
///
/// `arg` is the bin count for `bin`, the family for `family_sum` with no
/// explicit inputs, and the window tag for every dynamic operator. Dynamic
/// plans without explicit inputs use every numeric schema variable that
/// admits the window, ordered by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FeaturePlan {
    pub op: PlanOp,
    pub inputs: Vec<String>,
    pub arg: Option<String>,
}

impl From<FeaturePlan> for String {
    fn from(p: FeaturePlan) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for FeaturePlan {
    type Error = PlanError;
    fn try_from(s: String) -> Result<FeaturePlan, PlanError> {
        FeaturePlan::parse(&s)
    }
}

impl fmt::Display for FeaturePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}", self.op.as_str(), self.inputs.join(","))?;
        if let Some(a) = &self.arg {
            write!(f, ";{a}")?;
        }
        f.write_str(")")
    }
}

impl FeaturePlan {
    pub fn parse(text: &str) -> Result<FeaturePlan, PlanError> {
        let bad = || PlanError::Syntax(text.to_string());
        let t = text.trim();
        let open = t.find('(').ok_or_else(bad)?;
        if !t.ends_with(')') {
            return Err(bad());
        }
        let op = PlanOp::ALL
            .into_iter()
            .find(|o| o.as_str() == t[..open].trim())
            .ok_or_else(bad)?;
        let body = &t[open + 1..t.len() - 1];
        let (ins, arg) = match body.split_once(';') {
            Some((i, a)) => (i, Some(a.trim().to_string())),
            None => (body, None),
        };
        let inputs: Vec<String> = if ins.trim().is_empty() {
            Vec::new()
        } else {
            ins.split(',').map(|s| s.trim().to_string()).collect()
        };
        if inputs.iter().any(|i| !crate::manifest::is_identifier(i)) {
            return Err(bad());
        }
        if let Some(a) = &arg {
            if !crate::manifest::is_identifier(a) && a.parse::<usize>().is_err() {
                return Err(bad());
            }
        }
        Ok(FeaturePlan { op, inputs, arg })
    }

    /// Identifier of the materialized column.
    pub fn output_name(&self) -> String {
        let mut parts = vec![self.op.as_str().to_string()];
        parts.extend(self.inputs.iter().cloned());
        parts.extend(self.arg.iter().cloned());
        parts.join("__")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    Raw,
    Virtual,
    Dynamic,
}

/// Construction record of a derived feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan: FeaturePlan,
    pub inputs: Vec<String>,
    pub window: Option<String>,
    pub fit_partition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub name: String,
    pub kind: VariableKind,
    pub family: String,
    pub origin: FeatureOrigin,
    pub windows: Vec<String>,
    pub missing_allowed: bool,
    pub provenance: Option<Provenance>,
}

/// Features a rule may mention: rule-visible schema variables plus any
/// materialized derived features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    features: BTreeMap<String, FeatureRef>,
}

impl FeatureCatalog {
    pub fn from_manifest(manifest: &RunManifest) -> FeatureCatalog {
        let features = manifest
            .schema
            .iter()
            .filter(|v| !manifest.is_leaky(&v.name))
            .map(|v| {
                (
                    v.name.clone(),
                    FeatureRef {
                        name: v.name.clone(),
                        kind: v.kind,
                        family: v.family.clone(),
                        origin: FeatureOrigin::Raw,
                        windows: v.windows.clone(),
                        missing_allowed: v.missing_allowed,
                        provenance: None,
                    },
                )
            })
            .collect();
        FeatureCatalog { features }
    }

    pub fn get(&self, name: &str) -> Option<&FeatureRef> {
        self.features.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureRef> {
        self.features.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn add_fitted(&mut self, fitted: &FittedPlan) {
        self.features.insert(fitted.output.clone(), fitted.feature_ref());
    }

    pub fn remove(&mut self, name: &str) {
        self.features.remove(name);
    }
}

/// Statistics fit on the training partition and reused verbatim on replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitParams {
    None,
    Medians(Vec<f64>),
    Edges(Vec<f64>),
    Standardize(Vec<(f64, f64)>),
    PooledMedian(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPlan {
    pub plan: FeaturePlan,
    pub output: String,
    pub kind: VariableKind,
    pub family: String,
    pub inputs: Vec<String>,
    pub window: Option<String>,
    pub params: FitParams,
    pub fit_partition: String,
}

impl FittedPlan {
    pub fn feature_ref(&self) -> FeatureRef {
        FeatureRef {
            name: self.output.clone(),
            kind: self.kind,
            family: self.family.clone(),
            origin: self.plan.op.origin(),
            windows: self.window.iter().cloned().collect(),
            missing_allowed: true,
            provenance: Some(Provenance {
                plan: self.plan.clone(),
                inputs: self.inputs.clone(),
                window: self.window.clone(),
                fit_partition: self.fit_partition.clone(),
            }),
        }
    }

    fn input_columns<'t>(&self, table: &'t EvidenceTable) -> Result<Vec<&'t Column>, PlanError> {
        self.inputs
            .iter()
            .map(|i| {
                table
                    .column(i)
                    .ok_or_else(|| PlanError::UnmaterializablePlan(format!("input `{i}` absent")))
            })
            .collect()
    }

    /// Computes the derived column on `table` from stored parameters only.
    pub fn apply(&self, table: &EvidenceTable) -> Result<Column, PlanError> {
        let cols = self.input_columns(table)?;
        let n = table.n_rows();
        let values = |r: usize| -> Vec<Option<f64>> { cols.iter().map(|c| c.numeric(r)).collect() };
        let all = |v: &[Option<f64>]| -> Option<Vec<f64>> { v.iter().copied().collect() };
        let numeric = |f: &dyn Fn(Vec<Option<f64>>) -> Option<f64>| -> Column {
            Column::Numeric((0..n).map(|r| f(values(r)).filter(|x| x.is_finite())).collect())
        };
        Ok(match (&self.plan.op, &self.params) {
            (PlanOp::Ratio, _) => numeric(&|v| match (v[0], v[1]) {
                (Some(a), Some(b)) if b != 0.0 => Some(a / b),
                _ => None,
            }),
            (PlanOp::Difference, _) => numeric(&|v| Some(v[0]? - v[1]?)),
            (PlanOp::ThresholdComposite, FitParams::Medians(m)) => numeric(&|v| {
                let xs = all(&v)?;
                Some(xs.iter().zip(m).filter(|(x, med)| x > med).count() as f64)
            }),
            (PlanOp::Bin, FitParams::Edges(edges)) => Column::Categorical(
                (0..n)
                    .map(|r| values(r)[0].map(|x| format!("b{}", edges.iter().filter(|&&e| x > e).count())))
                    .collect(),
            ),
            (PlanOp::FamilySum, FitParams::Standardize(stats)) => numeric(&|v| {
                let xs = all(&v)?;
                Some(xs.iter().zip(stats).map(|(x, (mu, sd))| (x - mu) / sd).sum())
            }),
            (PlanOp::WindowMean, _) => numeric(&|v| {
                let xs: Vec<f64> = v.into_iter().flatten().collect();
                (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
            }),
            (PlanOp::WindowDelta, _) => numeric(&|v| Some(v[v.len() - 1]? - v[0]?)),
            (PlanOp::WindowCount, FitParams::PooledMedian(m)) => numeric(&|v| {
                let xs: Vec<f64> = v.into_iter().flatten().collect();
                (!xs.is_empty()).then(|| xs.iter().filter(|&&x| x > *m).count() as f64)
            }),
            (PlanOp::LastMinusFirst, _) => numeric(&|v| {
                let xs: Vec<f64> = v.into_iter().flatten().collect();
                (xs.len() >= 2).then(|| xs[xs.len() - 1] - xs[0])
            }),
            _ => return Err(PlanError::UnmaterializablePlan("fit parameters do not match operator".into())),
        })
    }

    /// `table` with the derived column appended.
    pub fn extend(&self, table: &EvidenceTable) -> Result<EvidenceTable, PlanError> {
        let col = self.apply(table)?;
        table
            .with_column(&self.output, col)
            .map_err(|e| PlanError::UnmaterializablePlan(e.to_string()))
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    Some(quantile(&xs, 0.5))
}

/// Resolves, checks and fits `plan` on the training table.
///
/// Inputs must be numeric or boolean schema variables that are neither
/// forbidden nor evaluation-only; dynamic inputs must admit the plan window.
/// Every fitted statistic comes from `train` alone.
pub fn materialize_plan(
    plan: &FeaturePlan,
    manifest: &RunManifest,
    train: &EvidenceTable,
    fit_partition: &str,
) -> Result<FittedPlan, PlanError> {
    let unmat = |m: String| PlanError::UnmaterializablePlan(m);
    for i in &plan.inputs {
        if manifest.is_leaky(i) {
            return Err(PlanError::ForbiddenInput(i.clone()));
        }
    }
    if let Some(a) = &plan.arg {
        if manifest.is_leaky(a) {
            return Err(PlanError::ForbiddenInput(a.clone()));
        }
    }
    let numeric_visible = |name: &str| {
        manifest
            .variable(name)
            .is_some_and(|v| v.kind != VariableKind::Categorical && !manifest.is_leaky(name))
    };

    let op = plan.op;
    let window = if op.is_dynamic() {
        let w = plan
            .arg
            .clone()
            .ok_or_else(|| unmat(format!("{} needs a window", op.as_str())))?;
        Some(w)
    } else {
        None
    };

    let inputs: Vec<String> = if !plan.inputs.is_empty() {
        plan.inputs.clone()
    } else if let Some(w) = &window {
        manifest
            .schema
            .iter()
            .filter(|v| v.windows.contains(w) && numeric_visible(&v.name))
            .map(|v| v.name.clone())
            .collect()
    } else if op == PlanOp::FamilySum {
        let fam = plan.arg.as_deref().unwrap_or_default();
        manifest
            .schema
            .iter()
            .filter(|v| v.family == fam && numeric_visible(&v.name))
            .map(|v| v.name.clone())
            .collect()
    } else {
        Vec::new()
    };

    let arity_ok = match op {
        PlanOp::Ratio | PlanOp::Difference => inputs.len() == 2,
        PlanOp::Bin => inputs.len() == 1,
        PlanOp::ThresholdComposite => inputs.len() >= 2,
        PlanOp::WindowDelta | PlanOp::LastMinusFirst => inputs.len() >= 2,
        PlanOp::FamilySum | PlanOp::WindowMean | PlanOp::WindowCount => !inputs.is_empty(),
    };
    if !arity_ok {
        return Err(unmat(format!("{} has no admissible input set", plan)));
    }
    for i in &inputs {
        let spec = manifest
            .variable(i)
            .ok_or_else(|| unmat(format!("input `{i}` is not a schema variable")))?;
        if spec.kind == VariableKind::Categorical {
            return Err(unmat(format!("input `{i}` is categorical")));
        }
        if let Some(w) = &window {
            if !spec.windows.contains(w) {
                return Err(unmat(format!("input `{i}` does not admit window `{w}`")));
            }
        }
        if !train.has_column(i) {
            return Err(unmat(format!("input `{i}` absent from the training table")));
        }
    }

    let train_values = |name: &str| -> Vec<f64> {
        let c = train.column(name).expect("checked above");
        (0..train.n_rows()).filter_map(|r| c.numeric(r)).collect()
    };
    let params = match op {
        PlanOp::ThresholdComposite => FitParams::Medians(
            inputs
                .iter()
                .map(|i| median(train_values(i)).ok_or_else(|| unmat(format!("input `{i}` has no values"))))
                .collect::<Result<_, _>>()?,
        ),
        PlanOp::Bin => {
            let bins: usize = plan
                .arg
                .as_deref()
                .and_then(|a| a.parse().ok())
                .filter(|b| (2..=10).contains(b))
                .ok_or_else(|| unmat("bin count must be 2..=10".into()))?;
            let mut xs = train_values(&inputs[0]);
            if xs.is_empty() {
                return Err(unmat("bin input has no values".into()));
            }
            xs.sort_by(f64::total_cmp);
            let mut edges: Vec<f64> = (1..bins).map(|k| quantile(&xs, k as f64 / bins as f64)).collect();
            edges.dedup();
            FitParams::Edges(edges)
        }
        PlanOp::FamilySum => FitParams::Standardize(
            inputs
                .iter()
                .map(|i| {
                    let xs = train_values(i);
                    if xs.is_empty() {
                        return Err(unmat(format!("input `{i}` has no values")));
                    }
                    let n = xs.len() as f64;
                    let mu = xs.iter().sum::<f64>() / n;
                    let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
                    Ok((mu, if sd > 0.0 { sd } else { 1.0 }))
                })
                .collect::<Result<_, _>>()?,
        ),
        PlanOp::WindowCount => {
            let pooled: Vec<f64> = inputs.iter().flat_map(|i| train_values(i)).collect();
            FitParams::PooledMedian(median(pooled).ok_or_else(|| unmat("window has no values".into()))?)
        }
        _ => FitParams::None,
    };

    let kind = if op == PlanOp::Bin {
        VariableKind::Categorical
    } else {
        VariableKind::Numeric
    };
    let family = manifest
        .variable(&inputs[0])
        .map(|v| v.family.clone())
        .unwrap_or_default();
    let fitted = FittedPlan {
        output: plan.output_name(),
        plan: plan.clone(),
        kind,
        family,
        inputs,
        window,
        params,
        fit_partition: fit_partition.to_string(),
    };
    if manifest.variable(&fitted.output).is_some() || train.has_column(&fitted.output) {
        return Err(unmat(format!("output `{}` collides with an existing column", fitted.output)));
    }
    fitted.apply(train)?;
    Ok(fitted)
}
