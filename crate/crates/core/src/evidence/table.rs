use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use crate::manifest::{VariableKind, VariableSpec};

use super::EvidenceError;

/// One typed column; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Boolean(Vec<Option<bool>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
            Column::Boolean(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> VariableKind {
        match self {
            Column::Numeric(_) => VariableKind::Numeric,
            Column::Categorical(_) => VariableKind::Categorical,
            Column::Boolean(_) => VariableKind::Boolean,
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            Column::Numeric(v) => v[row].is_none(),
            Column::Categorical(v) => v[row].is_none(),
            Column::Boolean(v) => v[row].is_none(),
        }
    }

    pub fn numeric(&self, row: usize) -> Option<f64> {
        match self {
            Column::Numeric(v) => v[row],
            Column::Boolean(v) => v[row].map(|b| if b { 1.0 } else { 0.0 }),
            Column::Categorical(_) => None,
        }
    }

    /// Level label used by membership literals; booleans render as
    /// `true`/`false`.
    pub fn level(&self, row: usize) -> Option<&str> {
        match self {
            Column::Categorical(v) => v[row].as_deref(),
            Column::Boolean(v) => v[row].map(|b| if b { "true" } else { "false" }),
            Column::Numeric(_) => None,
        }
    }

    /// Cell rendered as CSV text; missing is the empty string.
    pub fn render(&self, row: usize) -> String {
        match self {
            Column::Numeric(v) => v[row].map(|x| format!("{x}")).unwrap_or_default(),
            Column::Categorical(v) => v[row].clone().unwrap_or_default(),
            Column::Boolean(v) => v[row].map(|b| b.to_string()).unwrap_or_default(),
        }
    }

    /// Column restricted to `rows`, in that order.
    pub fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
            Column::Boolean(v) => Column::Boolean(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Immutable evidence table. Columns are shared, so deriving a table with
/// one extra column is cheap.
#[derive(Debug, Clone)]
pub struct EvidenceTable {
    row_key: String,
    keys: Arc<Vec<String>>,
    names: Vec<String>,
    columns: Vec<Arc<Column>>,
    index: BTreeMap<String, usize>,
}

impl EvidenceTable {
    pub fn new(
        row_key: &str,
        keys: Vec<String>,
        columns: Vec<(String, Column)>,
    ) -> Result<EvidenceTable, EvidenceError> {
        let mut seen = BTreeSet::new();
        for k in &keys {
            if !seen.insert(k.as_str()) {
                return Err(EvidenceError::DuplicateRowKey(k.clone()));
            }
        }
        let mut t = EvidenceTable {
            row_key: row_key.to_string(),
            keys: Arc::new(keys),
            names: Vec::new(),
            columns: Vec::new(),
            index: BTreeMap::new(),
        };
        for (name, col) in columns {
            t.push(name, Arc::new(col))?;
        }
        Ok(t)
    }

    fn push(&mut self, name: String, col: Arc<Column>) -> Result<(), EvidenceError> {
        if col.len() != self.keys.len() {
            return Err(EvidenceError::LengthMismatch(name));
        }
        if name == self.row_key || self.index.contains_key(&name) {
            return Err(EvidenceError::DuplicateColumn(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.columns.push(col);
        Ok(())
    }

    /// New table sharing every existing column plus `col`.
    pub fn with_column(&self, name: &str, col: Column) -> Result<EvidenceTable, EvidenceError> {
        let mut t = self.clone();
        t.push(name.to_string(), Arc::new(col))?;
        Ok(t)
    }

    /// Table restricted to `rows` (keys and columns reordered alike).
    pub fn take(&self, rows: &[usize]) -> EvidenceTable {
        let keys = rows.iter().map(|&r| self.keys[r].clone()).collect();
        let columns = self
            .names
            .iter()
            .zip(&self.columns)
            .map(|(n, c)| (n.clone(), c.take(rows)))
            .collect();
        EvidenceTable::new(&self.row_key, keys, columns).expect("subset of a valid table")
    }

    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn row_key(&self) -> &str {
        &self.row_key
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.index.get(name).map(|&i| self.columns[i].as_ref())
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn require(&self, name: &str) -> Result<&Column, EvidenceError> {
        self.column(name)
            .ok_or_else(|| EvidenceError::UnknownColumn(name.to_string()))
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).collect()
    }

    /// Row indices keyed by row key.
    pub fn key_index(&self) -> BTreeMap<&str, usize> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvidenceError> {
        let mut w = csv::Writer::from_path(path).map_err(EvidenceError::Csv)?;
        let mut header = vec![self.row_key.clone()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(EvidenceError::Csv)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![self.keys[r].clone()];
            rec.extend(self.columns.iter().map(|c| c.render(r)));
            w.write_record(&rec).map_err(EvidenceError::Csv)?;
        }
        w.flush().map_err(|e| EvidenceError::Io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Reads a CSV evidence file. Schema columns are typed per their spec;
/// `evaluation_columns` are typed numeric when every present cell parses as
/// a number and categorical otherwise. Schema variables may be absent from
/// the file; any other extra column is an error.
pub fn load_table(
    path: &Path,
    schema: &[VariableSpec],
    row_key: &str,
    evaluation_columns: &[&str],
) -> Result<EvidenceTable, EvidenceError> {
    let file =
        std::fs::File::open(path).map_err(|e| EvidenceError::Io(path.display().to_string(), e))?;
    read_table(file, schema, row_key, evaluation_columns)
}

pub fn read_table<R: Read>(
    reader: R,
    schema: &[VariableSpec],
    row_key: &str,
    evaluation_columns: &[&str],
) -> Result<EvidenceTable, EvidenceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(EvidenceError::Csv)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let key_pos = header
        .iter()
        .position(|h| h == row_key)
        .ok_or_else(|| EvidenceError::MissingRowKey(row_key.to_string()))?;
    for h in &header {
        let known = h == row_key
            || schema.iter().any(|v| &v.name == h)
            || evaluation_columns.contains(&h.as_str());
        if !known {
            return Err(EvidenceError::UnknownColumn(h.clone()));
        }
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(EvidenceError::Csv)?;
        for (i, cell) in rec.iter().enumerate() {
            raw[i].push(cell.trim().to_string());
        }
    }

    let keys = std::mem::take(&mut raw[key_pos]);
    if let Some(row) = keys.iter().position(|k| k.is_empty()) {
        return Err(EvidenceError::TypeMismatch(row_key.to_string(), row));
    }
    let mut columns = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if i == key_pos {
            continue;
        }
        let cells = &raw[i];
        let col = match schema.iter().find(|v| &v.name == name) {
            Some(spec) => typed_column(name, spec.kind, cells)?,
            None => {
                let numeric = cells.iter().all(|c| c.is_empty() || c.parse::<f64>().is_ok());
                let kind = if numeric { VariableKind::Numeric } else { VariableKind::Categorical };
                typed_column(name, kind, cells)?
            }
        };
        columns.push((name.clone(), col));
    }
    EvidenceTable::new(row_key, keys, columns)
}

fn typed_column(name: &str, kind: VariableKind, cells: &[String]) -> Result<Column, EvidenceError> {
    let mismatch = |row| EvidenceError::TypeMismatch(name.to_string(), row);
    Ok(match kind {
        VariableKind::Numeric => Column::Numeric(
            cells
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    if c.is_empty() {
                        return Ok(None);
                    }
                    match c.parse::<f64>() {
                        Ok(x) if x.is_finite() => Ok(Some(x)),
                        _ => Err(mismatch(r)),
                    }
                })
                .collect::<Result<_, _>>()?,
        ),
        VariableKind::Boolean => Column::Boolean(
            cells
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        parse_bool(c).map(Some).ok_or_else(|| mismatch(r))
                    }
                })
                .collect::<Result<_, _>>()?,
        ),
        VariableKind::Categorical => Column::Categorical(
            cells
                .iter()
                .map(|c| if c.is_empty() { None } else { Some(c.clone()) })
                .collect(),
        ),
    })
}
