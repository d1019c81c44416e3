use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Measure;
use crate::error::{Error, Result};
use crate::formulations::Formulation;

/// Marker written for undefined values.
pub const MISSING: &str = "NA";

const LEAD_COLUMNS: [&str; 9] = [
    "doc_id",
    "word_index",
    "sentence_id",
    "sentence_pos",
    "sentence_len",
    "word",
    "token_start",
    "token_end",
    "surprisal",
];

/// One corpus word. Indices are 1-based except the token span, which is a
/// half-open range of document token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct WordRow {
    pub doc_id: String,
    pub word_index: usize,
    pub sentence_id: usize,
    pub sentence_pos: usize,
    pub sentence_len: usize,
    pub word: String,
    pub token_start: usize,
    pub token_end: usize,
    pub surprisal: Option<f64>,
    /// One entry per table column, in column order.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorTable {
    columns: Vec<(Formulation, Measure)>,
    rows: Vec<WordRow>,
}

pub fn column_name(f: Formulation, m: Measure) -> String {
    format!("attn_{}_{}", f.tag(), m.tag())
}

fn parse_column(name: &str) -> Option<(Formulation, Measure)> {
    let rest = name.strip_prefix("attn_")?;
    let (f, m) = rest.rsplit_once('_')?;
    Some((f.parse().ok()?, m.parse().ok()?))
}

impl PredictorTable {
    pub fn new(columns: Vec<(Formulation, Measure)>) -> Self {
        PredictorTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[(Formulation, Measure)] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        LEAD_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.columns.iter().map(|&(f, m)| column_name(f, m)))
            .collect()
    }

    pub fn column_index(&self, f: Formulation, m: Measure) -> Option<usize> {
        self.columns.iter().position(|&c| c == (f, m))
    }

    pub fn rows(&self) -> &[WordRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: WordRow) -> Result<()> {
        if row.values.len() != self.columns.len() {
            return Err(Error::shape(
                "PredictorTable::push",
                format!(
                    "row has {} values for {} columns",
                    row.values.len(),
                    self.columns.len()
                ),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: PredictorTable) -> Result<()> {
        if other.columns != self.columns {
            return Err(Error::InvalidInput(
                "cannot merge tables with different columns".into(),
            ));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    /// Values of one column, in row order.
    pub fn column(&self, f: Formulation, m: Measure) -> Option<Vec<Option<f64>>> {
        let k = self.column_index(f, m)?;
        Some(self.rows.iter().map(|r| r.values[k]).collect())
    }

    /// Every defined value is finite and nonnegative, and NAE lies in `[0, 1]`.
    /// Sums of several tokens' NAE can exceed 1, so the NAE bound only applies to
    /// single-token words.
    pub fn check_invariants(&self) -> Result<()> {
        for row in &self.rows {
            for (&(f, m), v) in self.columns.iter().zip(&row.values) {
                let Some(v) = *v else { continue };
                let single = row.token_end - row.token_start == 1;
                if !v.is_finite() || v < 0.0 || (m == Measure::Nae && single && v > 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "{} = {v} for word {} of {}",
                        column_name(f, m),
                        row.word_index,
                        row.doc_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.column_names().join("\t"))?;
        for r in &self.rows {
            write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.doc_id,
                r.word_index,
                r.sentence_id,
                r.sentence_pos,
                r.sentence_len,
                r.word,
                r.token_start,
                r.token_end,
                fmt_value(r.surprisal)
            )?;
            for v in &r.values {
                write!(out, "\t{}", fmt_value(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("table text is UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_tsv(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_tsv<R: BufRead>(input: R, source: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Table {
            path: source.to_string(),
            detail: format!("line {line}: {detail}"),
        };
        let mut lines = input.lines();
        let header = match lines.next() {
            Some(h) => h.map_err(|e| Error::io(source, e))?,
            None => return Err(bad(1, "empty file".into())),
        };
        let names: Vec<&str> = header.split('\t').collect();
        if names.len() < LEAD_COLUMNS.len() || names[..LEAD_COLUMNS.len()] != LEAD_COLUMNS {
            return Err(bad(
                1,
                format!("header must start with {}", LEAD_COLUMNS.join(", ")),
            ));
        }
        let columns = names[LEAD_COLUMNS.len()..]
            .iter()
            .map(|n| {
                parse_column(n)
                    .ok_or_else(|| bad(1, format!("unrecognised predictor column `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = PredictorTable::new(columns);
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != names.len() {
                return Err(bad(
                    lineno,
                    format!("{} fields, expected {}", f.len(), names.len()),
                ));
            }
            let int = |i: usize| {
                f[i].parse::<usize>()
                    .map_err(|_| bad(lineno, format!("`{}` is not an integer", f[i])))
            };
            let values = f[LEAD_COLUMNS.len()..]
                .iter()
                .map(|s| parse_value(s).map_err(|d| bad(lineno, d)))
                .collect::<Result<Vec<_>>>()?;
            table.rows.push(WordRow {
                doc_id: f[0].to_string(),
                word_index: int(1)?,
                sentence_id: int(2)?,
                sentence_pos: int(3)?,
                sentence_len: int(4)?,
                word: f[5].to_string(),
                token_start: int(6)?,
                token_end: int(7)?,
                surprisal: parse_value(f[8]).map_err(|d| bad(lineno, d))?,
                values,
            });
        }
        Ok(table)
    }
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => MISSING.to_string(),
    }
}

fn parse_value(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == MISSING {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("`{s}` is neither a number nor {MISSING}"))
}
