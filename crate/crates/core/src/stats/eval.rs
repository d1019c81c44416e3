//! Joins reading times to a predictor table and compares regression models.
//!
//! Each predictor-of-interest set is added to the same baseline. Both models are
//! fit on one partition of the data and compared on another: ΔLL on both, and a
//! paired permutation test on the evaluation rows' squared errors.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{center_scale, delta_ll, effect_size_per_sd, fit_ols, paired_permutation_test};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::predictors::{PredictorTable, WordRow};

/// One fixation-duration (or self-paced reading) observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RtRecord {
    pub subject: String,
    pub doc_id: String,
    pub word_index: usize,
    pub duration_ms: f64,
}

/// Reads a TSV with a header containing `subject`, `doc_id`, `word_index` and a
/// duration column named `duration_ms`, `duration` or `rt`. Other columns are
/// ignored.
pub fn read_rt_table(path: impl AsRef<Path>) -> Result<Vec<RtRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_rt_table(BufReader::new(file), &path.display().to_string())
}

pub fn parse_rt_table<R: BufRead>(input: R, source: &str) -> Result<Vec<RtRecord>> {
    let bad = |detail: String| Error::Table {
        path: source.to_string(),
        detail,
    };
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io(source, e))?;
    let names: Vec<&str> = header.split('\t').collect();
    let find = |options: &[&str]| {
        names
            .iter()
            .position(|n| options.contains(n))
            .ok_or_else(|| bad(format!("header lacks a `{}` column", options[0])))
    };
    let (s, d, w, t) = (
        find(&["subject"])?,
        find(&["doc_id"])?,
        find(&["word_index"])?,
        find(&["duration_ms", "duration", "rt"])?,
    );
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != names.len() {
            return Err(bad(format!(
                "line {}: {} fields, expected {}",
                k + 2,
                f.len(),
                names.len()
            )));
        }
        let word_index = f[w]
            .parse()
            .map_err(|_| bad(format!("line {}: bad word_index `{}`", k + 2, f[w])))?;
        let duration_ms: f64 = f[t]
            .parse()
            .map_err(|_| bad(format!("line {}: bad duration `{}`", k + 2, f[t])))?;
        out.push(RtRecord {
            subject: f[s].to_string(),
            doc_id: f[d].to_string(),
            word_index,
            duration_ms,
        });
    }
    Ok(out)
}

/// Which rows the models are fit on and which they are compared on, keyed by
/// `(subject number + sentence id) mod 4`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Partition {
    /// Fit and compare on every row.
    #[default]
    All,
    /// Fit on keys 0 and 1, compare on key 2.
    Exploratory,
    /// Fit on keys 0 and 1, compare on key 3.
    HeldOut,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Partition::All),
            "exploratory" => Ok(Partition::Exploratory),
            "heldout" | "held-out" => Ok(Partition::HeldOut),
            _ => Err(Error::InvalidInput(format!(
                "unknown partition `{s}` (expected all, exploratory or heldout)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Filters {
    pub drop_sentence_initial: bool,
    pub drop_sentence_final: bool,
    /// Inclusive duration bounds in milliseconds.
    pub duration_ms: Option<(f64, f64)>,
}

impl Default for Filters {
    fn default() -> Self {
        Filters {
            drop_sentence_initial: true,
            drop_sentence_final: true,
            duration_ms: Some((100.0, 3000.0)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalSpec {
    /// Columns in every model. Besides predictor-table columns, `word_len`
    /// (characters), `word_index` and `sentence_pos` are available.
    pub baseline: Vec<String>,
    /// Each entry is one full model's predictors of interest.
    pub interest: Vec<Vec<String>>,
    /// Also include the values of the `lags` preceding words for every predictor
    /// of interest. Baseline columns are never lagged.
    pub lags: usize,
    pub filters: Filters,
    pub partition: Partition,
    /// Divide predictors by their standard deviation after centering.
    pub scale: bool,
    /// Center the log response within subject (then add back the grand mean).
    pub center_subjects: bool,
    pub n_permutations: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            baseline: vec!["word_len".into(), "word_index".into(), "surprisal".into()],
            interest: Vec::new(),
            lags: 0,
            filters: Filters::default(),
            partition: Partition::All,
            scale: true,
            center_subjects: true,
            n_permutations: 10_000,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

impl EvalSpec {
    fn validate(&self) -> Result<()> {
        if self.interest.is_empty() || self.interest.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput(
                "every model needs at least one predictor of interest".into(),
            ));
        }
        for set in &self.interest {
            if let Some(c) = set.iter().find(|c| self.baseline.contains(c)) {
                return Err(Error::InvalidInput(format!(
                    "`{c}` is both a baseline and an interest column"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// The model's interest columns joined with `+`.
    pub model: String,
    pub predictor: String,
    pub n_fit: usize,
    pub n_eval: usize,
    pub delta_ll_fit: f64,
    pub delta_ll_eval: f64,
    pub p_value: f64,
    /// Coefficient and standard error of the unlagged column.
    pub beta: f64,
    pub std_error: f64,
    /// Predicted change in duration (ms) for one standard deviation more of this
    /// predictor, summed over its lagged copies.
    pub effect_ms_per_sd: f64,
    pub ridge: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub n_records: usize,
    pub n_unmatched: usize,
    pub n_filtered: usize,
    pub n_incomplete: usize,
    pub n_fit: usize,
    pub n_eval: usize,
}

impl EvalReport {
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "model\tpredictor\tn_fit\tn_eval\tdelta_ll_fit\tdelta_ll_eval\tp_value\tbeta\tstd_error\teffect_ms_per_sd\tridge"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.model,
                r.predictor,
                r.n_fit,
                r.n_eval,
                r.delta_ll_fit,
                r.delta_ll_eval,
                r.p_value,
                r.beta,
                r.std_error,
                r.effect_ms_per_sd,
                r.ridge
            )?;
        }
        Ok(())
    }
}

fn base_value(row: &WordRow, table: &PredictorTable, column: &str) -> Result<Option<f64>> {
    Ok(match column {
        "surprisal" => row.surprisal,
        "word_len" => Some(row.word.chars().count() as f64),
        "word_index" => Some(row.word_index as f64),
        "sentence_pos" => Some(row.sentence_pos as f64),
        other => {
            let k = table
                .column_names()
                .iter()
                .skip(9)
                .position(|n| n == other)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("predictor table has no column `{other}`"))
                })?;
            row.values[k]
        }
    })
}

fn lag_name(column: &str, lag: usize) -> String {
    if lag == 0 {
        column.to_string()
    } else {
        format!("{column}@lag{lag}")
    }
}

/// Subject number for partitioning: the subject id itself when every id is
/// numeric, otherwise each id's rank among the sorted distinct ids. Mixing the
/// two could give two subjects the same number.
fn subject_numbers(records: &[RtRecord]) -> HashMap<String, u64> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.subject.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let numeric: Option<Vec<u64>> = ids.iter().map(|s| s.parse::<u64>().ok()).collect();
    match numeric {
        Some(nums) => ids.iter().map(|s| s.to_string()).zip(nums).collect(),
        None => ids
            .iter()
            .enumerate()
            .map(|(k, s)| (s.to_string(), k as u64))
            .collect(),
    }
}

pub fn evaluate(
    table: &PredictorTable,
    records: &[RtRecord],
    spec: &EvalSpec,
) -> Result<EvalReport> {
    spec.validate()?;
    let mut report = EvalReport {
        n_records: records.len(),
        ..Default::default()
    };

    let mut columns: Vec<String> = spec.baseline.clone();
    for set in &spec.interest {
        for c in set {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let n_baseline = spec.baseline.len();
    let depth = |c: usize| if c < n_baseline { 0 } else { spec.lags };
    // (column, lag) for every design column, baseline first.
    let slots: Vec<(usize, usize)> = (0..columns.len())
        .flat_map(|c| (0..=depth(c)).map(move |l| (c, l)))
        .collect();
    let index: HashMap<(&str, usize), &WordRow> = table
        .rows()
        .iter()
        .map(|r| ((r.doc_id.as_str(), r.word_index), r))
        .collect();
    let subjects = subject_numbers(records);

    // Rows with every lagged value present: (subject, log duration, partition key, values).
    let mut rows: Vec<(&str, f64, u64, Vec<f64>)> = Vec::new();
    let mut matched = 0;
    for rec in records {
        let Some(word) = index.get(&(rec.doc_id.as_str(), rec.word_index)) else {
            report.n_unmatched += 1;
            continue;
        };
        matched += 1;
        let f = &spec.filters;
        let out_of_bounds = f
            .duration_ms
            .is_some_and(|(lo, hi)| !(lo..=hi).contains(&rec.duration_ms));
        if (f.drop_sentence_initial && word.sentence_pos == 1)
            || (f.drop_sentence_final && word.sentence_pos == word.sentence_len)
            || out_of_bounds
            || !(rec.duration_ms > 0.0)
        {
            report.n_filtered += 1;
            continue;
        }
        let mut values = Vec::with_capacity(slots.len());
        let mut complete = true;
        for &(c, lag) in &slots {
            let source = if lag == 0 {
                Some(*word)
            } else {
                word.word_index
                    .checked_sub(lag)
                    .and_then(|w| index.get(&(rec.doc_id.as_str(), w)).copied())
            };
            match source
                .map(|r| base_value(r, table, &columns[c]))
                .transpose()?
                .flatten()
            {
                Some(v) if v.is_finite() => values.push(v),
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            report.n_incomplete += 1;
            continue;
        }
        let key = (subjects[&rec.subject] + word.sentence_id as u64) % 4;
        rows.push((rec.subject.as_str(), rec.duration_ms.ln(), key, values));
    }
    if matched == 0 {
        return Err(Error::InvalidInput(
            "no reading-time record matches a predictor-table word".into(),
        ));
    }

    if spec.center_subjects && !rows.is_empty() {
        let grand = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
        for r in &rows {
            let e = sums.entry(r.0).or_default();
            e.0 += r.1;
            e.1 += 1;
        }
        for r in &mut rows {
            let (s, n) = sums[r.0];
            r.1 = r.1 - s / n as f64 + grand;
        }
    }

    let (fit_keys, eval_keys): (&[u64], &[u64]) = match spec.partition {
        Partition::All => (&[0, 1, 2, 3], &[0, 1, 2, 3]),
        Partition::Exploratory => (&[0, 1], &[2]),
        Partition::HeldOut => (&[0, 1], &[3]),
    };
    let fit_rows: Vec<_> = rows.iter().filter(|r| fit_keys.contains(&r.2)).collect();
    let eval_rows: Vec<_> = rows.iter().filter(|r| eval_keys.contains(&r.2)).collect();
    report.n_fit = fit_rows.len();
    report.n_eval = eval_rows.len();
    if fit_rows.is_empty() || eval_rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "partition leaves {} fitting and {} evaluation rows",
            fit_rows.len(),
            eval_rows.len()
        )));
    }

    // Center (and scale) with fitting-set statistics; apply the same transform to
    // the evaluation rows.
    let mut fit_cols = Vec::with_capacity(slots.len());
    let mut eval_cols = Vec::with_capacity(slots.len());
    let mut sds = Vec::with_capacity(slots.len());
    for (k, &(c, lag)) in slots.iter().enumerate() {
        let raw: Vec<f64> = fit_rows.iter().map(|r| r.3[k]).collect();
        let name = lag_name(&columns[c], lag);
        let (col, mean, sd) = center_scale(&raw, spec.scale)
            .map_err(|e| Error::InvalidInput(format!("column `{name}`: {e}")))?;
        let div = if spec.scale { sd } else { 1.0 };
        fit_cols.push(col);
        eval_cols.push(
            eval_rows
                .iter()
                .map(|r| (r.3[k] - mean) / div)
                .collect::<Vec<f64>>(),
        );
        sds.push(if spec.scale { 1.0 } else { sd });
    }
    let fit_y: Vec<f64> = fit_rows.iter().map(|r| r.1).collect();
    let eval_y: Vec<f64> = eval_rows.iter().map(|r| r.1).collect();

    let select = |names: &[String]| -> (Vec<String>, Vec<usize>) {
        let mut out_names = Vec::new();
        let mut idx = Vec::new();
        for n in names {
            let c = columns
                .iter()
                .position(|x| x == n)
                .expect("column collected above");
            for (k, _) in slots.iter().enumerate().filter(|(_, s)| s.0 == c) {
                out_names.push(lag_name(n, slots[k].1));
                idx.push(k);
            }
        }
        (out_names, idx)
    };
    let pick =
        |cols: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&k| cols[k].clone()).collect::<Vec<_>>();

    let (base_names, base_idx) = select(&spec.baseline);
    let baseline = fit_ols(&fit_y, &base_names, &pick(&fit_cols, &base_idx))?;
    let (base_eval_err, base_eval_ll) = baseline.evaluate(&eval_y, &pick(&eval_cols, &base_idx))?;

    for set in &spec.interest {
        let mut names = spec.baseline.clone();
        names.extend(set.iter().cloned());
        let (full_names, full_idx) = select(&names);
        debug_assert_eq!(full_names.len(), full_idx.len());
        let full = fit_ols(&fit_y, &full_names, &pick(&fit_cols, &full_idx))?;
        let (full_eval_err, full_eval_ll) = full.evaluate(&eval_y, &pick(&eval_cols, &full_idx))?;
        let test = paired_permutation_test(
            &base_eval_err,
            &full_eval_err,
            spec.n_permutations,
            spec.seed,
            spec.exec,
        )?;
        let dll_fit = delta_ll(&baseline, &full)?;
        let intercept = full.coefficients[0];
        for c in set {
            let (beta, std_error) = full
                .coefficient(c)
                .expect("interest column is in the model");
            // Coefficient k + 1 (after the intercept) belongs to design slot full_idx[k].
            let ci = columns.iter().position(|x| x == c).expect("known column");
            let beta_sd: f64 = full_idx
                .iter()
                .enumerate()
                .filter(|(_, &slot)| slots[slot].0 == ci)
                .map(|(k, &slot)| full.coefficients[k + 1] * sds[slot])
                .sum();
            report.rows.push(ReportRow {
                model: set.join("+"),
                predictor: c.clone(),
                n_fit: fit_y.len(),
                n_eval: eval_y.len(),
                delta_ll_fit: dll_fit,
                delta_ll_eval: full_eval_ll - base_eval_ll,
                p_value: test.p_value,
                beta,
                std_error,
                effect_ms_per_sd: effect_size_per_sd(intercept, beta_sd),
                ridge: full.ridge || baseline.ridge,
            });
        }
    }
    Ok(report)
}
