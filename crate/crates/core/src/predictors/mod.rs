//! Per-timestep predictors computed from attention weight vectors.
//!
//! All four measures compare the weight vector at timestep `i` (length `i`) with
//! the one at `i − 1` (length `i − 1`), except NAE which looks at a single vector.
//! Undefined values are `None`.

pub mod table;
mod transport;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

pub use table::{PredictorTable, WordRow, MISSING};
pub use transport::{
    brute_force_transport, line_distance, solve_transport, Histogram, TransportPlan, MASS_TOLERANCE,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Measure {
    Nae,
    DeltaNae,
    Md,
    Emd,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::Nae, Measure::DeltaNae, Measure::Md, Measure::Emd];

    pub fn tag(self) -> &'static str {
        match self {
            Measure::Nae => "nae",
            Measure::DeltaNae => "dnae",
            Measure::Md => "md",
            Measure::Emd => "emd",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nae" => Ok(Measure::Nae),
            "dnae" | "delta_nae" | "δnae" => Ok(Measure::DeltaNae),
            "md" | "manhattan" => Ok(Measure::Md),
            "emd" => Ok(Measure::Emd),
            _ => Err(Error::InvalidInput(format!(
                "unknown measure `{s}` (expected nae, dnae, md or emd)"
            ))),
        }
    }
}

/// How EMD is evaluated. Both give the same value; `Cdf` is linear time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmdMethod {
    #[default]
    Simplex,
    Cdf,
}

impl FromStr for EmdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplex" => Ok(EmdMethod::Simplex),
            "cdf" => Ok(EmdMethod::Cdf),
            _ => Err(Error::InvalidInput(format!(
                "unknown EMD method `{s}` (expected simplex or cdf)"
            ))),
        }
    }
}

/// Normalised attention entropy over the past positions of `w`.
///
/// The current position is dropped and the rest renormalised before taking the
/// base-2 entropy, which is divided by its maximum `log2(i − 1)`. `None` when
/// `i ≤ 2` or when the past positions carry no weight.
pub fn nae(w: &[f64]) -> Option<f64> {
    let i = w.len();
    if i <= 2 {
        return None;
    }
    let past = &w[..i - 1];
    let total: f64 = past.iter().sum();
    if !(total > 0.0) {
        log::debug!("NAE undefined at timestep {i}: past weights sum to {total}");
        return None;
    }
    let entropy: f64 = past
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            -p * p.log2()
        })
        .sum();
    // Rounding can push a uniform vector a few ulps past 1.
    Some((entropy / ((i - 1) as f64).log2()).clamp(0.0, 1.0))
}

pub fn delta_nae(current: Option<f64>, previous: Option<f64>) -> Option<f64> {
    Some((current? - previous?).abs())
}

fn check_consecutive(prev: &[f64], cur: &[f64], op: &'static str) -> Result<()> {
    if cur.len() < 2 || prev.len() + 1 != cur.len() {
        return Err(Error::shape(
            op,
            format!(
                "expected lengths i - 1 and i with i >= 2, got {} and {}",
                prev.len(),
                cur.len()
            ),
        ));
    }
    Ok(())
}

/// L1 distance between `cur` and `prev` padded with a trailing zero.
///
/// Both inputs are distributions, so the distance is at most 2; rounding that
/// lands just above it is clamped, as NAE is clamped to `[0, 1]`.
pub fn manhattan(prev: &[f64], cur: &[f64]) -> Result<f64> {
    check_consecutive(prev, cur, "manhattan")?;
    let shared: f64 = prev.iter().zip(cur).map(|(a, b)| (a - b).abs()).sum();
    let d = shared + cur[cur.len() - 1].abs();
    if d > 2.0 {
        log::trace!("MD {d} exceeds 2 by {:e}; clamped", d - 2.0);
    }
    Ok(d.min(2.0))
}

fn renormalized(w: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidInput(format!(
            "weight vector sums to {total}"
        )));
    }
    Ok(w.iter().map(|x| x / total).collect())
}

/// Earth mover's distance between `prev` on bins `1..i` and `cur` on bins
/// `1..=i`, with ground distance `|r − s| / (i − 1)`, solved by the
/// transportation simplex. Inputs are rescaled to unit mass first.
pub fn emd(prev: &[f64], cur: &[f64]) -> Result<f64> {
    check_consecutive(prev, cur, "emd")?;
    let p = Histogram::on_prefix(renormalized(prev)?)?;
    let q = Histogram::on_prefix(renormalized(cur)?)?;
    let cost = line_distance(&p, &q, (cur.len() - 1) as f64);
    Ok(solve_transport(&p, &q, &cost)?.emd())
}

/// Closed-form EMD on a line: the summed gap between cumulative distributions,
/// times the bin spacing `1 / (i − 1)`.
pub fn emd_cdf_oracle(prev: &[f64], cur: &[f64]) -> Result<f64> {
    check_consecutive(prev, cur, "emd_cdf_oracle")?;
    let p = renormalized(prev)?;
    let q = renormalized(cur)?;
    let i = q.len();
    let (mut fp, mut fq, mut acc) = (0.0, 0.0, 0.0);
    for k in 0..i - 1 {
        fp += p[k];
        fq += q[k];
        acc += (fp - fq).abs();
    }
    Ok(acc / (i - 1) as f64)
}

pub fn emd_with(method: EmdMethod, prev: &[f64], cur: &[f64]) -> Result<f64> {
    match method {
        EmdMethod::Simplex => emd(prev, cur),
        EmdMethod::Cdf => emd_cdf_oracle(prev, cur),
    }
}

/// One measure at timestep `cur.len()`; `prev` is the weight vector one step
/// earlier in the same context, absent at the first timestep.
pub fn measure(
    which: Measure,
    prev: Option<&[f64]>,
    cur: &[f64],
    method: EmdMethod,
) -> Result<Option<f64>> {
    Ok(match (which, prev) {
        (Measure::Nae, _) => nae(cur),
        (_, None) => None,
        (Measure::DeltaNae, Some(p)) => delta_nae(nae(cur), nae(p)),
        (Measure::Md, Some(p)) => Some(manhattan(p, cur)?),
        (Measure::Emd, Some(p)) => Some(emd_with(method, p, cur)?),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadAggregation {
    #[default]
    Mean,
    Sum,
}

impl FromStr for HeadAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadAggregation::Mean),
            "sum" => Ok(HeadAggregation::Sum),
            _ => Err(Error::InvalidInput(format!(
                "unknown head aggregation `{s}` (expected mean or sum)"
            ))),
        }
    }
}

/// Combines one value per head; any missing head makes the result missing.
pub fn aggregate_heads(values: &[Option<f64>], mode: HeadAggregation) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let total = values.iter().try_fold(0.0, |acc, v| v.map(|x| acc + x))?;
    Some(match mode {
        HeadAggregation::Mean => total / values.len() as f64,
        HeadAggregation::Sum => total,
    })
}

/// Sums per-token values over each word's token span. A word is missing if any of
/// its tokens is.
pub fn aggregate_subwords(
    per_token: &[Option<f64>],
    spans: &[Range<usize>],
) -> Result<Vec<Option<f64>>> {
    spans
        .iter()
        .map(|span| {
            if span.start >= span.end || span.end > per_token.len() {
                return Err(Error::InvalidInput(format!(
                    "token span {span:?} is empty or outside {} tokens",
                    per_token.len()
                )));
            }
            Ok(per_token[span.clone()]
                .iter()
                .try_fold(0.0, |acc, v| v.map(|x| acc + x)))
        })
        .collect()
}
