//! Bounded conjunction rules: literals, text form, canonical keys,
//! evaluation, validity checks, threshold grids and derived features.

mod features;
mod grid;
mod validity;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{Column, EvidenceTable};

pub use features::{
    materialize_plan, FeatureCatalog, FeatureOrigin, FeaturePlan, FeatureRef, FitParams, FittedPlan, PlanError,
    PlanOp, Provenance,
};
pub use grid::{build_threshold_grid, quantile, ThresholdGrid};
pub use validity::{validate_rule, InvalidReason, ValidityReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("rule has {len} literals, limit is {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("feature `{0}` is not materialized on this table")]
    UnmaterializedFeature(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    pub fn parse(s: &str) -> Option<Comparator> {
        match s {
            "<" => Some(Comparator::Lt),
            "<=" => Some(Comparator::Le),
            ">" => Some(Comparator::Gt),
            ">=" => Some(Comparator::Ge),
            _ => None,
        }
    }

    pub fn holds(self, x: f64, tau: f64) -> bool {
        match self {
            Comparator::Lt => x < tau,
            Comparator::Le => x <= tau,
            Comparator::Gt => x > tau,
            Comparator::Ge => x >= tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LiteralForm {
    Threshold { cmp: Comparator, value: f64 },
    Membership(BTreeSet<String>),
    Missingness(bool),
}

impl LiteralForm {
    /// Sort tag used by canonical ordering and duplicate detection.
    pub fn tag(&self) -> u8 {
        match self {
            LiteralForm::Threshold { .. } => 0,
            LiteralForm::Membership(_) => 1,
            LiteralForm::Missingness(_) => 2,
        }
    }
}

/// Shortest decimal that round-trips; `-0` prints as `0`.
pub fn render_number(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Literal {
    pub feature: String,
    pub form: LiteralForm,
}

impl Literal {
    pub fn threshold(feature: &str, cmp: Comparator, value: f64) -> Literal {
        Literal {
            feature: feature.to_string(),
            form: LiteralForm::Threshold {
                cmp,
                value: if value == 0.0 { 0.0 } else { value },
            },
        }
    }

    pub fn membership<I, S>(feature: &str, levels: I) -> Literal
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Literal {
            feature: feature.to_string(),
            form: LiteralForm::Membership(levels.into_iter().map(Into::into).collect()),
        }
    }

    pub fn missing(feature: &str, flag: bool) -> Literal {
        Literal {
            feature: feature.to_string(),
            form: LiteralForm::Missingness(flag),
        }
    }

    pub fn value_render(&self) -> String {
        match &self.form {
            LiteralForm::Threshold { cmp, value } => format!("{}{}", cmp.as_str(), render_number(*value)),
            LiteralForm::Membership(levels) => {
                format!("{{{}}}", levels.iter().cloned().collect::<Vec<_>>().join(","))
            }
            LiteralForm::Missingness(b) => b.to_string(),
        }
    }

    /// Canonical text; also the literal key used by grounding plans.
    pub fn key(&self) -> String {
        self.to_string()
    }

    fn sort_key(&self) -> (&str, u8, String) {
        (&self.feature, self.form.tag(), self.value_render())
    }

    /// Truth of the literal for `row`. Missing cells make every literal
    /// false except a missingness literal.
    pub fn holds(&self, col: &Column, row: usize) -> bool {
        match &self.form {
            LiteralForm::Missingness(flag) => col.is_missing(row) == *flag,
            LiteralForm::Threshold { cmp, value } => match col {
                Column::Numeric(v) => v[row].is_some_and(|x| cmp.holds(x, *value)),
                _ => false,
            },
            LiteralForm::Membership(levels) => col.level(row).is_some_and(|l| levels.contains(l)),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.form {
            LiteralForm::Threshold { .. } => write!(f, "{}{}", self.feature, self.value_render()),
            LiteralForm::Membership(_) => write!(f, "{} IN {}", self.feature, self.value_render()),
            LiteralForm::Missingness(b) => write!(f, "MISSING({})={}", self.feature, b),
        }
    }
}

/// Conjunction of literals, kept in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Rule {
    literals: Vec<Literal>,
}

impl From<Rule> for String {
    fn from(r: Rule) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Rule {
    type Error = RuleError;
    fn try_from(s: String) -> Result<Rule, RuleError> {
        parse_rule(&s, usize::MAX)
    }
}

impl Rule {
    pub fn new(mut literals: Vec<Literal>) -> Rule {
        literals.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Rule { literals }
    }

    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    pub fn len(&self) -> usize {
        self.literals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.literals.is_empty()
    }

    /// Sorted, deduplicated feature names.
    pub fn features(&self) -> BTreeSet<&str> {
        self.literals.iter().map(|l| l.feature.as_str()).collect()
    }

    /// Feature-name set as one string; the diversity unit.
    pub fn feature_set_key(&self) -> String {
        self.features().into_iter().collect::<Vec<_>>().join("&")
    }

    pub fn canonical_key(&self) -> String {
        canonical_key(self)
    }

    pub fn has_duplicate(&self) -> bool {
        self.literals
            .windows(2)
            .any(|w| w[0].feature == w[1].feature && w[0].form.tag() == w[1].form.tag())
    }

    pub fn with_literal(&self, lit: Literal) -> Rule {
        let mut lits = self.literals.clone();
        lits.push(lit);
        Rule::new(lits)
    }

    pub fn without(&self, idx: usize) -> Rule {
        let mut lits = self.literals.clone();
        lits.remove(idx);
        Rule::new(lits)
    }

    pub fn replace(&self, idx: usize, lit: Literal) -> Rule {
        let mut lits = self.literals.clone();
        lits[idx] = lit;
        Rule::new(lits)
    }

    fn resolve<'t>(&self, table: &'t EvidenceTable) -> Result<Vec<&'t Column>, RuleError> {
        self.literals
            .iter()
            .map(|l| {
                table
                    .column(&l.feature)
                    .ok_or_else(|| RuleError::UnmaterializedFeature(l.feature.clone()))
            })
            .collect()
    }

    pub fn evaluate(&self, table: &EvidenceTable, row: usize) -> Result<bool, RuleError> {
        let cols = self.resolve(table)?;
        Ok(self.literals.iter().zip(&cols).all(|(l, c)| l.holds(c, row)))
    }

    /// Coverage mask over every row of `table`.
    pub fn mask(&self, table: &EvidenceTable) -> Result<Vec<bool>, RuleError> {
        let cols = self.resolve(table)?;
        Ok((0..table.n_rows())
            .map(|r| self.literals.iter().zip(&cols).all(|(l, c)| l.holds(c, r)))
            .collect())
    }

    /// Indices of covered rows.
    pub fn covered(&self, table: &EvidenceTable) -> Result<Vec<usize>, RuleError> {
        Ok(self
            .mask(table)?
            .into_iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect())
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.literals.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Literals in canonical order, joined by `&`.
pub fn canonical_key(rule: &Rule) -> String {
    rule.literals.iter().map(Literal::key).collect::<Vec<_>>().join("&")
}

pub fn render_rule(rule: &Rule) -> String {
    rule.to_string()
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, RuleError> {
        Err(RuleError::Syntax {
            pos: self.pos,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), RuleError> {
        self.skip_ws();
        if self.eat(token) {
            Ok(())
        } else {
            self.err(format!("expected `{token}`"))
        }
    }

    fn ident(&mut self) -> Result<String, RuleError> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|&(i, c)| {
                let ok = c.is_ascii_alphanumeric() || c == '_' || (i > 0 && c == '.');
                !ok || (i == 0 && c.is_ascii_digit())
            })
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if end == 0 {
            return self.err("expected feature name");
        }
        self.pos += end;
        Ok(rest[..end].to_string())
    }

    fn clause(&mut self) -> Result<Literal, RuleError> {
        self.skip_ws();
        if self.rest().starts_with("MISSING(") {
            self.pos += "MISSING(".len();
            let name = self.ident()?;
            self.expect(")")?;
            self.expect("=")?;
            self.skip_ws();
            let flag = if self.eat("true") {
                true
            } else if self.eat("false") {
                false
            } else {
                return self.err("expected `true` or `false`");
            };
            return Ok(Literal::missing(&name, flag));
        }
        let name = self.ident()?;
        self.skip_ws();
        for op in ["<=", ">=", "<", ">"] {
            if self.eat(op) {
                self.skip_ws();
                let start = self.pos;
                let rest = self.rest();
                let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
                let token = &rest[..end];
                return match token.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        self.pos += end;
                        Ok(Literal::threshold(&name, Comparator::parse(op).unwrap(), v))
                    }
                    _ => {
                        self.pos = start;
                        self.err(format!("`{token}` is not a finite number"))
                    }
                };
            }
        }
        let before = self.pos;
        if self.eat("IN") && self.rest().starts_with(|c: char| c.is_whitespace() || c == '{') {
            self.expect("{")?;
            let close = match self.rest().find('}') {
                Some(i) => i,
                None => return self.err("unclosed `{`"),
            };
            let body = &self.rest()[..close];
            let mut levels = BTreeSet::new();
            for part in body.split(',') {
                let level = part.trim();
                if level.is_empty() || level.contains('{') {
                    return self.err("empty or malformed category level");
                }
                levels.insert(level.to_string());
            }
            self.pos += close + 1;
            return Ok(Literal::membership(&name, levels));
        }
        self.pos = before;
        self.err("expected comparator or `IN`")
    }
}

/// Parses `clause (AND clause)*`. Clauses are `name op value`,
/// `name IN {a,b}` or `MISSING(name)=true|false`; `op` is one of
/// `<`, `<=`, `>`, `>=`. Whitespace around tokens is ignored.
pub fn parse_rule(text: &str, max_len: usize) -> Result<Rule, RuleError> {
    let mut p = Parser { s: text, pos: 0 };
    let mut lits = vec![p.clause()?];
    loop {
        p.skip_ws();
        if p.rest().is_empty() {
            break;
        }
        let at = p.pos;
        if !p.eat("AND") {
            return p.err("expected `AND`");
        }
        if p.rest().is_empty() {
            return p.err("expected clause after `AND`");
        }
        if !p.rest().starts_with(char::is_whitespace) {
            p.pos = at;
            return p.err("expected `AND`");
        }
        lits.push(p.clause()?);
    }
    if lits.len() > max_len {
        return Err(RuleError::LengthExceeded {
            len: lits.len(),
            max: max_len,
        });
    }
    Ok(Rule::new(lits))
}

/// Parses a single literal key.
pub fn parse_literal(text: &str) -> Result<Literal, RuleError> {
    let rule = parse_rule(text, 1)?;
    Ok(rule.literals[0].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> EvidenceTable {
        EvidenceTable::new(
            "row_id",
            vec!["a".into(), "b".into()],
            vec![
                ("bmi".into(), Column::Numeric(vec![Some(30.0), None])),
                ("glucose".into(), Column::Numeric(vec![Some(7.0), Some(7.0)])),
                ("stage".into(), Column::Categorical(vec![Some("II".into()), None])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn parses_two_literals_and_length_limit() {
        let r = parse_rule("bmi>27.5 AND glucose>=6.1", 3).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.to_string(), "bmi>27.5 AND glucose>=6.1");
        assert_eq!(
            parse_rule("a>1 AND b>2 AND c>3 AND d>4", 3),
            Err(RuleError::LengthExceeded { len: 4, max: 3 })
        );
    }

    #[test]
    fn whitespace_and_forms() {
        let r = parse_rule("  stage IN { II , I }  AND   MISSING( bmi )= true AND x <= -0 ", 3).unwrap();
        assert_eq!(r.to_string(), "MISSING(bmi)=true AND stage IN {I,II} AND x<=0");
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_rule("bmi>27.5 AND", 3) {
            Err(RuleError::Syntax { pos, .. }) => assert_eq!(pos, 12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_rule("bmi=>2", 3), Err(RuleError::Syntax { pos: 3, .. })));
        assert!(matches!(parse_rule("bmi>abc", 3), Err(RuleError::Syntax { pos: 4, .. })));
        assert!(matches!(parse_rule("bmi>NaN", 3), Err(RuleError::Syntax { .. })));
        assert!(matches!(parse_rule("a>1 ANDb>2", 3), Err(RuleError::Syntax { .. })));
        assert!(matches!(parse_rule("", 3), Err(RuleError::Syntax { pos: 0, .. })));
    }

    #[test]
    fn canonical_keys() {
        let k = |t: &str| parse_rule(t, 3).unwrap().canonical_key();
        assert_eq!(k("b>2 AND a>1"), k("a>1 AND b>2"));
        assert_eq!(k("a>1.0"), k("a>1"));
        assert_ne!(k("a>1"), k("a>=1"));
        assert_eq!(k("a>1.50 AND s IN {y,x}"), "a>1.5&s IN {x,y}");
    }

    #[test]
    fn evaluation_with_missing_cells() {
        let t = table();
        let r = parse_rule("bmi>27.5 AND glucose>=6.1", 3).unwrap();
        assert_eq!(r.evaluate(&t, 0), Ok(true));
        assert_eq!(parse_rule("bmi>27.5", 3).unwrap().evaluate(&t, 1), Ok(false));
        assert_eq!(parse_rule("MISSING(bmi)=true", 3).unwrap().evaluate(&t, 1), Ok(true));
        assert_eq!(parse_rule("stage IN {II}", 3).unwrap().mask(&t), Ok(vec![true, false]));
        assert_eq!(
            parse_rule("hdl>1", 3).unwrap().evaluate(&t, 0),
            Err(RuleError::UnmaterializedFeature("hdl".into()))
        );
    }

    #[test]
    fn serde_uses_rule_text() {
        let r = parse_rule("b>2 AND a>1", 3).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, "\"a>1 AND b>2\"");
        assert_eq!(serde_json::from_str::<Rule>(&s).unwrap(), r);
    }

    fn arb_literal() -> impl Strategy<Value = String> {
        let name = prop::sample::select(vec!["a", "b", "c", "x_1", "f.v"]);
        prop_oneof![
            (name.clone(), prop::sample::select(vec!["<", "<=", ">", ">="]), -1000i32..1000, 0u8..3)
                .prop_map(|(n, op, v, scale)| {
                    let v = v as f64 / 10f64.powi(scale as i32);
                    let text = if scale == 0 { format!("{v:.1}") } else { format!("{v}") };
                    format!("{n} {op} {text}")
                }),
            (name.clone(), prop::collection::btree_set("[a-z]{1,3}", 1..4))
                .prop_map(|(n, ls)| format!("{n} IN {{{}}}", ls.into_iter().collect::<Vec<_>>().join(" , "))),
            (name, any::<bool>()).prop_map(|(n, b)| format!("MISSING({n})={b}")),
        ]
    }

    proptest! {
        #[test]
        fn render_is_idempotent(lits in prop::collection::vec(arb_literal(), 1..4)) {
            let text = lits.join("  AND ");
            let once = render_rule(&parse_rule(&text, 3).unwrap());
            let twice = render_rule(&parse_rule(&once, 3).unwrap());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn key_is_order_invariant(lits in prop::collection::vec(arb_literal(), 1..4), rot in 0usize..4) {
            let mut other = lits.clone();
            let len = other.len();
            other.rotate_left(rot % len);
            let a = parse_rule(&lits.join(" AND "), 3).unwrap();
            let b = parse_rule(&other.join(" AND "), 3).unwrap();
            prop_assert_eq!(a.canonical_key(), b.canonical_key());
        }
    }
}
