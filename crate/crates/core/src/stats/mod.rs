//! Regression and hypothesis-testing tools for evaluating predictors against
//! reading times.
//!
//! Models are ordinary least squares on a log-duration response; a by-subject
//! random intercept is approximated by centering the response within subject
//! (see [`eval`]).

pub mod eval;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Ridge penalty used when the normal equations are numerically singular but the
/// design passed the rank check.
pub const RIDGE_LAMBDA: f64 = 1e-8;

/// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

pub const MIN_PERMUTATIONS: usize = 1000;

const PERMUTATION_CHUNK: usize = 256;

/// `x − mean(x)`, optionally divided by the sample standard deviation.
/// Returns the transformed column with `(mean, sd)`.
pub fn center_scale(x: &[f64], scale: bool) -> Result<(Vec<f64>, f64, f64)> {
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 values to center, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::InvalidInput(format!(
            "column is constant (every value is {mean}); cannot center or scale"
        )));
    }
    let div = if scale { sd } else { 1.0 };
    Ok((x.iter().map(|v| (v - mean) / div).collect(), mean, sd))
}

#[derive(Clone, Debug)]
pub struct OlsFit {
    /// `"(intercept)"` followed by the predictor names.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub rss: f64,
    /// Maximum-likelihood residual variance `RSS / n`.
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub squared_errors: Vec<f64>,
    pub n: usize,
    /// Whether the ridge fallback was needed.
    pub ridge: bool,
}

impl OlsFit {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let k = self.names.iter().position(|n| n == name)?;
        Some((self.coefficients[k], self.std_errors[k]))
    }

    /// Prediction for one row of predictor values (without the intercept).
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(row)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }

    /// Squared errors and Gaussian log-likelihood on new data, using the fitted
    /// coefficients and residual variance.
    pub fn evaluate(&self, y: &[f64], columns: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        check_columns(y, columns, self.names.len() - 1)?;
        let errs: Vec<f64> = (0..y.len())
            .map(|i| {
                let row: Vec<f64> = columns.iter().map(|c| c[i]).collect();
                (y[i] - self.predict(&row)).powi(2)
            })
            .collect();
        let ll = errs
            .iter()
            .map(|e| -0.5 * ((2.0 * std::f64::consts::PI * self.sigma2).ln() + e / self.sigma2))
            .sum();
        Ok((errs, ll))
    }
}

fn check_columns(y: &[f64], columns: &[Vec<f64>], expect: usize) -> Result<()> {
    if columns.len() != expect {
        return Err(Error::shape(
            "ols",
            format!("{} columns, expected {expect}", columns.len()),
        ));
    }
    if let Some(c) = columns.iter().find(|c| c.len() != y.len()) {
        return Err(Error::shape(
            "ols",
            format!("column of length {} for {} responses", c.len(), y.len()),
        ));
    }
    if y.iter()
        .chain(columns.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput(
            "regression data contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// Least squares with an intercept.
///
/// Exactly collinear designs are rejected with the offending column; a design that
/// passes that check but still defeats the Cholesky factorisation is solved with a
/// tiny ridge penalty instead, and `ridge` is set.
pub fn fit_ols(y: &[f64], names: &[String], columns: &[Vec<f64>]) -> Result<OlsFit> {
    if names.len() != columns.len() {
        return Err(Error::shape(
            "fit_ols",
            format!("{} names for {} columns", names.len(), columns.len()),
        ));
    }
    check_columns(y, columns, columns.len())?;
    let (n, p) = (y.len(), columns.len() + 1);
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "{n} observations cannot support {p} coefficients"
        )));
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    check_rank(&x, names)?;

    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let (beta, inverse, ridge) = match xtx.clone().cholesky() {
        Some(ch) => (ch.solve(&xty), ch.inverse(), false),
        None => {
            log::warn!("normal equations are singular; using ridge penalty {RIDGE_LAMBDA}");
            let ch = (xtx + DMatrix::identity(p, p) * RIDGE_LAMBDA)
                .cholesky()
                .ok_or_else(|| {
                    Error::RankDeficient(
                        "normal equations stay singular under the ridge penalty".into(),
                    )
                })?;
            (ch.solve(&xty), ch.inverse(), true)
        }
    };
    let residuals = &yv - &x * &beta;
    let squared_errors: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    let rss: f64 = squared_errors.iter().sum();
    let sigma2 = rss / n as f64;
    let log_likelihood = -(n as f64) / 2.0 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let s2_unbiased = rss / (n - p) as f64;
    let std_errors = (0..p)
        .map(|j| (inverse[(j, j)] * s2_unbiased).sqrt())
        .collect();
    Ok(OlsFit {
        names: std::iter::once("(intercept)".to_string())
            .chain(names.iter().cloned())
            .collect(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        rss,
        sigma2,
        log_likelihood,
        squared_errors,
        n,
        ridge,
    })
}

fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    if sv.min() > RANK_TOLERANCE * max {
        return Ok(());
    }
    // Name the first column that adds nothing beyond the ones before it.
    for j in 1..x.ncols() {
        let sub = x.columns(0, j + 1).into_owned();
        let s = sub.svd(false, false).singular_values;
        if s.min() <= RANK_TOLERANCE * s.max() {
            return Err(Error::RankDeficient(format!(
                "column `{}` is a linear combination of earlier columns",
                names[j - 1]
            )));
        }
    }
    Err(Error::RankDeficient("design matrix is singular".into()))
}

/// `LL_full − LL_baseline` on the same rows.
pub fn delta_ll(baseline: &OlsFit, full: &OlsFit) -> Result<f64> {
    if baseline.n != full.n {
        return Err(Error::InvalidInput(format!(
            "models were fit on {} and {} rows",
            baseline.n, full.n
        )));
    }
    Ok(full.log_likelihood - baseline.log_likelihood)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationResult {
    pub p_value: f64,
    /// Mean of `baseline − full` squared errors.
    pub observed: f64,
    pub n_permutations: usize,
}

/// Two-sided paired permutation test on per-item squared errors.
///
/// Each permutation flips the sign of every per-item difference independently.
/// Permutations are split into fixed-size chunks, each seeded from `seed` and its
/// chunk index, so the result does not depend on the thread count. Differences
/// are sorted first, which makes the result independent of item order too.
pub fn paired_permutation_test(
    err_baseline: &[f64],
    err_full: &[f64],
    n_permutations: usize,
    seed: u64,
    exec: Execution,
) -> Result<PermutationResult> {
    if err_baseline.len() != err_full.len() || err_baseline.is_empty() {
        return Err(Error::InvalidInput(format!(
            "paired test needs equal nonzero lengths, got {} and {}",
            err_baseline.len(),
            err_full.len()
        )));
    }
    if n_permutations < MIN_PERMUTATIONS {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_PERMUTATIONS} permutations, got {n_permutations}"
        )));
    }
    let mut diffs: Vec<f64> = err_baseline
        .iter()
        .zip(err_full)
        .map(|(b, f)| b - f)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput("squared errors must be finite".into()));
    }
    diffs.sort_by(f64::total_cmp);
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(PermutationResult {
            p_value: 1.0,
            observed,
            n_permutations,
        });
    }
    // Sign flips of the observed vector itself must count as "at least as
    // extreme" despite summation-order rounding.
    let threshold = observed.abs() * (1.0 - 1e-12);
    let n_chunks = n_permutations.div_ceil(PERMUTATION_CHUNK);
    let counts = par::map_range(exec, n_chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let todo = PERMUTATION_CHUNK.min(n_permutations - c * PERMUTATION_CHUNK);
        let mut hits = 0usize;
        for _ in 0..todo {
            let mut sum = 0.0;
            for block in diffs.chunks(64) {
                let bits: u64 = rng.random();
                for (k, d) in block.iter().enumerate() {
                    sum += if bits >> k & 1 == 1 { *d } else { -*d };
                }
            }
            if (sum / n).abs() >= threshold {
                hits += 1;
            }
        }
        hits
    });
    let extreme: usize = counts.iter().sum();
    Ok(PermutationResult {
        p_value: (1 + extreme) as f64 / (1 + n_permutations) as f64,
        observed,
        n_permutations,
    })
}

/// Predicted change in duration (in the response's original units) when a
/// predictor rises by one standard deviation from the mean of all predictors,
/// for a model of log duration: `exp(ŷ + βσ) − exp(ŷ)`.
pub fn effect_size_per_sd(log_prediction_at_mean: f64, beta_times_sd: f64) -> f64 {
    (log_prediction_at_mean + beta_times_sd).exp() - log_prediction_at_mean.exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Deletion {
    /// Each pair uses the rows where both values are present.
    #[default]
    Pairwise,
    /// Only rows where every column is present.
    CompleteCase,
}

/// Pearson correlation matrix with missing values removed. Entries involving a
/// constant column, or fewer than two usable rows, are `None`.
pub fn pearson_corr(
    columns: &[Vec<Option<f64>>],
    deletion: Deletion,
) -> Result<Vec<Vec<Option<f64>>>> {
    let k = columns.len();
    let rows = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::shape("pearson_corr", "columns differ in length"));
    }
    let complete: Vec<bool> = (0..rows)
        .map(|i| columns.iter().all(|c| c[i].is_some_and(f64::is_finite)))
        .collect();
    let mut out = vec![vec![None; k]; k];
    for a in 0..k {
        for b in a..k {
            let pairs: Vec<(f64, f64)> = (0..rows)
                .filter(|&i| deletion == Deletion::Pairwise || complete[i])
                .filter_map(|i| Some((columns[a][i]?, columns[b][i]?)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            let r = correlation(&pairs);
            out[a][b] = r;
            out[b][a] = r;
        }
    }
    Ok(out)
}

fn correlation(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStat {
    pub label: String,
    /// Number of non-missing values.
    pub count: usize,
    pub mean: Option<f64>,
}

/// Count and mean of the non-missing values per label, in order of first
/// appearance.
pub fn grouped_mean(labels: &[String], values: &[Option<f64>]) -> Result<Vec<GroupStat>> {
    if labels.len() != values.len() {
        return Err(Error::shape(
            "grouped_mean",
            format!("{} labels for {} values", labels.len(), values.len()),
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: std::collections::HashMap<&str, (usize, f64)> = std::collections::HashMap::new();
    for (label, v) in labels.iter().zip(values) {
        let entry = acc.entry(label.as_str()).or_insert_with(|| {
            order.push(label.clone());
            (0, 0.0)
        });
        if let Some(x) = v.filter(|x| x.is_finite()) {
            entry.0 += 1;
            entry.1 += x;
        }
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let (count, sum) = acc[label.as_str()];
            GroupStat {
                mean: (count > 0).then(|| sum / count as f64),
                label,
                count,
            }
        })
        .collect())
}

/// Kolmogorov–Smirnov distance between a sample and the uniform distribution on
/// `[0, 1]`.
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn names(k: &[&str]) -> Vec<String> {
        k.iter().map(|s| s.to_string()).collect()
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn centering_examples() {
        let (c, mean, sd) = center_scale(&[1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(c, vec![-1.0, 0.0, 1.0]);
        assert_eq!((mean, sd), (2.0, 1.0));
        let (s, _, _) = center_scale(&[10.0, 20.0, 30.0], true).unwrap();
        assert_eq!(s, vec![-1.0, 0.0, 1.0]);
        assert!(center_scale(&[4.0, 4.0, 4.0], true).is_err());
        assert!(center_scale(&[4.0], true).is_err());
    }

    #[test]
    fn recovers_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normals(&mut rng, 500);
        let y: Vec<f64> = x
            .iter()
            .map(|v| 2.0 * v + 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let fit = fit_ols(&y, &names(&["x"]), &[x]).unwrap();
        let (b, se) = fit.coefficient("x").unwrap();
        assert!((b - 2.0).abs() < 0.01);
        assert!(se > 0.0 && se < 0.01);
        assert!(!fit.ridge);
    }

    #[test]
    fn exact_fit_matches_hand_solution() {
        let x = vec![-1.0, 0.0, 1.0, 2.0];
        let r = [0.5, -0.5, -0.5, 0.5];
        let y: Vec<f64> = x.iter().zip(r).map(|(x, r)| 1.0 + 2.0 * x + r).collect();
        // Closed-form simple regression.
        let fit = fit_ols(&y, &names(&["x"]), std::slice::from_ref(&x)).unwrap();
        let n = 4.0;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icept = (sy - slope * sx) / n;
        assert!((fit.coefficients[1] - slope).abs() < 1e-12);
        assert!((fit.coefficients[0] - icept).abs() < 1e-12);
        let sigma2 = fit.rss / n;
        let ll = -n / 2.0 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
        assert!((fit.log_likelihood - ll).abs() < 1e-12);
        let (errs, _) = fit.evaluate(&y, &[x]).unwrap();
        for (a, b) in errs.iter().zip(&fit.squared_errors) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_duplicate_columns_and_tiny_samples() {
        let x = vec![1.0, 2.0, 3.0, 5.0, 8.0];
        let y = vec![1.0, 0.0, 1.0, 0.0, 2.0];
        let err = fit_ols(&y, &names(&["a", "b"]), &[x.clone(), x.clone()]).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        assert!(fit_ols(&y[..2], &names(&["a"]), &[x[..2].to_vec()]).is_err());
        assert!(fit_ols(&y, &names(&["a"]), &[vec![1.0; 5]]).is_err());
        assert!(fit_ols(&y, &names(&["a"]), &[vec![1.0, f64::NAN, 2.0, 3.0, 4.0]]).is_err());
    }

    #[test]
    fn nested_models_never_lose_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = normals(&mut rng, 60);
            let b = normals(&mut rng, 60);
            let y = normals(&mut rng, 60);
            let base = fit_ols(&y, &names(&["a"]), std::slice::from_ref(&a)).unwrap();
            let full = fit_ols(&y, &names(&["a", "b"]), &[a.clone(), b]).unwrap();
            assert!(delta_ll(&base, &full).unwrap() >= -1e-9);
            assert_eq!(delta_ll(&base, &base).unwrap(), 0.0);
        }
        let y = normals(&mut rng, 10);
        let short = fit_ols(&y[..5], &[], &[]).unwrap();
        let long = fit_ols(&y, &[], &[]).unwrap();
        assert!(delta_ll(&short, &long).is_err());
    }

    #[test]
    fn delta_ll_grows_with_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normals(&mut rng, 400);
        let noise = normals(&mut rng, 400);
        let mut last = f64::NEG_INFINITY;
        for strength in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let y: Vec<f64> = x
                .iter()
                .zip(&noise)
                .map(|(x, e)| strength * x + e)
                .collect();
            let base = fit_ols(&y, &[], &[]).unwrap();
            let full = fit_ols(&y, &names(&["x"]), std::slice::from_ref(&x)).unwrap();
            let d = delta_ll(&base, &full).unwrap();
            assert!(d > last, "{strength}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn permutation_test_examples() {
        let e = vec![0.3; 50];
        let r = paired_permutation_test(&e, &e, 1000, 0, Execution::Parallel).unwrap();
        assert_eq!(r.p_value, 1.0);
        let base: Vec<f64> = (0..100).map(|k| 1.0 + k as f64 * 0.01).collect();
        let full: Vec<f64> = base.iter().map(|b| b - 0.2).collect();
        let r = paired_permutation_test(&base, &full, 10_000, 0, Execution::Parallel).unwrap();
        assert!(r.p_value <= 0.001, "{}", r.p_value);
        assert!((r.observed - 0.2).abs() < 1e-12);
        assert!(paired_permutation_test(&base, &full, 999, 0, Execution::Parallel).is_err());
        assert!(paired_permutation_test(&base, &full[1..], 1000, 0, Execution::Parallel).is_err());
    }

    #[test]
    fn permutation_test_is_deterministic_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = normals(&mut rng, 150).iter().map(|v| v * v).collect();
        let b: Vec<f64> = normals(&mut rng, 150).iter().map(|v| v * v).collect();
        let one = paired_permutation_test(&a, &b, 2000, 9, Execution::Parallel).unwrap();
        let two = paired_permutation_test(&a, &b, 2000, 9, Execution::Sequential).unwrap();
        assert_eq!(one, two);
        let (mut ra, mut rb) = (a.clone(), b.clone());
        ra.reverse();
        rb.reverse();
        ra.swap(0, 70);
        rb.swap(0, 70);
        assert_eq!(
            paired_permutation_test(&ra, &rb, 2000, 9, Execution::Parallel)
                .unwrap()
                .p_value,
            one.p_value
        );
        let other = paired_permutation_test(&a, &b, 2000, 10, Execution::Parallel).unwrap();
        assert!(one.p_value > 0.0 && other.p_value > 0.0);
    }

    #[test]
    fn effect_size_examples() {
        assert_eq!(effect_size_per_sd(300f64.ln(), 0.0), 0.0);
        let e = effect_size_per_sd(300f64.ln(), 0.01);
        assert!((e - 300.0 * (0.01f64.exp() - 1.0)).abs() < 1e-9);
        assert!((e - 3.015).abs() < 1e-3);
        // Doubling βσ more than doubles the millisecond effect.
        assert!(effect_size_per_sd(300f64.ln(), 0.02) > 2.0 * e);
    }

    #[test]
    fn effect_size_ignores_predictor_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normals(&mut rng, 300);
        let y: Vec<f64> = x
            .iter()
            .map(|v| 5.5 + 0.05 * v + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let effect = |scale: f64| {
            let col: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let (c, _, sd) = center_scale(&col, false).unwrap();
            let fit = fit_ols(&y, &names(&["x"]), &[c]).unwrap();
            effect_size_per_sd(fit.coefficients[0], fit.coefficients[1] * sd)
        };
        assert!((effect(1.0) - effect(1000.0)).abs() < 1e-9);
    }

    #[test]
    fn correlation_examples() {
        let x: Vec<Option<f64>> = (0..20).map(|k| Some(k as f64 * 0.7 - 3.0)).collect();
        let neg: Vec<Option<f64>> = x.iter().map(|v| v.map(|a| -a)).collect();
        let flat = vec![Some(1.0); 20];
        let m = pearson_corr(&[x.clone(), neg, flat], Deletion::Pairwise).unwrap();
        assert!((m[0][0].unwrap() - 1.0).abs() < 1e-12);
        assert!((m[0][1].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m[0][2], None);
        assert_eq!(m[2][2], None);
    }

    #[test]
    fn correlation_deletion_modes() {
        let a = vec![Some(1.0), Some(2.0), Some(3.0), None, Some(5.0)];
        let b = vec![Some(2.0), Some(1.0), None, Some(4.0), Some(3.0)];
        let c = vec![Some(1.0), Some(3.0), Some(2.0), Some(5.0), Some(4.0)];
        let pw = pearson_corr(&[a.clone(), b.clone(), c.clone()], Deletion::Pairwise).unwrap();
        let cc = pearson_corr(&[a, b, c], Deletion::CompleteCase).unwrap();
        // a and c share 4 rows pairwise but only 3 complete rows.
        assert_ne!(pw[0][2], cc[0][2]);
        assert_eq!(pw[0][1], cc[0][1]);
    }

    #[test]
    fn random_columns_are_nearly_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Option<f64>> = normals(&mut rng, 10_000).into_iter().map(Some).collect();
        let b: Vec<Option<f64>> = normals(&mut rng, 10_000).into_iter().map(Some).collect();
        let m = pearson_corr(&[a, b], Deletion::Pairwise).unwrap();
        assert!(m[0][1].unwrap().abs() < 0.05);
    }

    #[test]
    fn complete_case_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = normals(&mut rng, 200);
        let cols: Vec<Vec<Option<f64>>> = (0..5)
            .map(|k| {
                base.iter()
                    .enumerate()
                    .map(|(i, b)| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        ((i + k) % 17 != 0).then_some(b * k as f64 * 0.3 + noise)
                    })
                    .collect()
            })
            .collect();
        let m = pearson_corr(&cols, Deletion::CompleteCase).unwrap();
        let dm = DMatrix::from_fn(5, 5, |i, j| m[i][j].unwrap());
        let eig = dm.symmetric_eigen().eigenvalues;
        assert!(eig.min() > -1e-8);
    }

    #[test]
    fn grouped_mean_examples() {
        let labels = names(&["a", "a", "b", "c"]);
        let g = grouped_mean(&labels, &[Some(1.0), Some(1.0), Some(3.0), None]).unwrap();
        assert_eq!(
            g,
            vec![
                GroupStat {
                    label: "a".into(),
                    count: 2,
                    mean: Some(1.0)
                },
                GroupStat {
                    label: "b".into(),
                    count: 1,
                    mean: Some(3.0)
                },
                GroupStat {
                    label: "c".into(),
                    count: 0,
                    mean: None
                },
            ]
        );
        let one = grouped_mean(&names(&["x", "x", "x"]), &[Some(1.0), None, Some(4.0)]).unwrap();
        assert_eq!(one[0].mean, Some(2.5));
        assert_eq!(one[0].count, 2);
    }

    #[test]
    fn ks_distance_examples() {
        assert!((ks_uniform(&[0.5]) - 0.5).abs() < 1e-15);
        let grid: Vec<f64> = (0..100).map(|k| (k as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&grid) - 0.005).abs() < 1e-12);
        assert!((ks_uniform(&[0.0; 10]) - 1.0).abs() < 1e-15);
    }
}
