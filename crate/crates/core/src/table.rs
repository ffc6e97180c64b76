//! Flat comma-separated numeric tables with a schema tag.
//!
//! Layout: a `# schema: <tag>` line, optional `# key: value` metadata lines,
//! one header line, then one row per record.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("expected schema `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub schema: String,
    pub meta: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(schema: &str, columns: &[&str]) -> Self {
        Self {
            schema: schema.to_string(),
            meta: BTreeMap::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Result<usize, TableError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TableError::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, TableError> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Serializes with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# schema: {}", self.schema);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TableError> {
        let mut schema = None;
        let mut meta = BTreeMap::new();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if columns.is_some() {
                    continue;
                }
                if let Some((k, v)) = rest.split_once(':') {
                    let (k, v) = (k.trim(), v.trim());
                    if k == "schema" {
                        schema = Some(v.to_string());
                    } else {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            match &columns {
                None => columns = Some(line.split(',').map(|c| c.trim().to_string()).collect()),
                Some(cols) => {
                    let row: Vec<f64> = line
                        .split(',')
                        .map(|c| c.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| TableError::Parse {
                            line: ln + 1,
                            msg: e.to_string(),
                        })?;
                    if row.len() != cols.len() {
                        return Err(TableError::Parse {
                            line: ln + 1,
                            msg: format!("{} fields, header has {}", row.len(), cols.len()),
                        });
                    }
                    rows.push(row);
                }
            }
        }
        let columns = columns.ok_or(TableError::Parse {
            line: 0,
            msg: "no header line".into(),
        })?;
        Ok(Self {
            schema: schema.unwrap_or_default(),
            meta,
            columns,
            rows,
        })
    }

    pub fn expect_schema(&self, expected: &str) -> Result<(), TableError> {
        if self.schema != expected {
            return Err(TableError::Schema {
                expected: expected.to_string(),
                found: self.schema.clone(),
            });
        }
        Ok(())
    }
}
