use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use attnshift::predictors::MISSING;

/// A header-indexed TSV held as strings.
pub struct Tsv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    index: HashMap<String, usize>,
    source: String,
}

impl Tsv {
    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let source = path.display().to_string();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| anyhow!("{source}: empty file"))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != header.len() {
                bail!(
                    "{source}: row {} has {} fields, header has {}",
                    k + 2,
                    row.len(),
                    header.len()
                );
            }
            rows.push(row);
        }
        let index = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.clone(), i))
            .collect();
        Ok(Tsv {
            header,
            rows,
            index,
            source,
        })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| anyhow!("{}: no column `{name}`", self.source))
    }

    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }

    /// Numeric column; `NA` and empty fields are missing.
    pub fn numbers(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(k, r)| match r[c].as_str() {
                "" | MISSING => Ok(None),
                s => s.parse::<f64>().map(Some).with_context(|| {
                    format!(
                        "{}: row {}, column `{name}`: not a number: {s:?}",
                        self.source,
                        k + 2
                    )
                }),
            })
            .collect()
    }
}
