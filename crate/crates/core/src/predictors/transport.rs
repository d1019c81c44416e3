//! Balanced transportation problems and the transportation simplex.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Allowed gap between the two marginal totals, and between each total and 1.
pub const MASS_TOLERANCE: f64 = 1e-9;

const REDUCED_COST_TOLERANCE: f64 = 1e-12;

/// Masses on integer bin positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    bins: Vec<usize>,
    weights: Vec<f64>,
}

impl Histogram {
    pub fn new(bins: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if bins.len() != weights.len() {
            return Err(Error::shape(
                "histogram",
                format!("{} bins but {} weights", bins.len(), weights.len()),
            ));
        }
        if bins.is_empty() {
            return Err(Error::InvalidInput(
                "histogram needs at least one bin".into(),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "histogram weight {w} is not a finite nonnegative number"
            )));
        }
        Ok(Histogram { bins, weights })
    }

    /// Bins `1..=weights.len()`.
    pub fn on_prefix(weights: Vec<f64>) -> Result<Self> {
        Histogram::new((1..=weights.len()).collect(), weights)
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `d_rs = |p_r − q_s| / scale`.
pub fn line_distance(p: &Histogram, q: &Histogram, scale: f64) -> Matrix<f64> {
    let mut d = Matrix::zeros(p.len(), q.len());
    for (r, &pr) in p.bins().iter().enumerate() {
        for (s, &qs) in q.bins().iter().enumerate() {
            d.set(r, s, pr.abs_diff(qs) as f64 / scale);
        }
    }
    d
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub flow: Matrix<f64>,
    pub cost: Matrix<f64>,
    /// Number of simplex pivots after the north-west corner start.
    pub pivots: usize,
}

impl TransportPlan {
    pub fn work(&self) -> f64 {
        self.flow
            .data()
            .iter()
            .zip(self.cost.data())
            .map(|(f, d)| f * d)
            .sum()
    }

    pub fn total_flow(&self) -> f64 {
        self.flow.data().iter().sum()
    }

    /// Work normalised by total flow.
    pub fn emd(&self) -> f64 {
        self.work() / self.total_flow()
    }

    /// Largest gap between a row or column sum of the flow and the given marginals.
    pub fn marginal_error(&self, source: &[f64], sink: &[f64]) -> f64 {
        let m = self.flow.rows();
        let mut worst = 0.0f64;
        for (r, &want) in source.iter().enumerate() {
            worst = worst.max((self.flow.row(r).iter().sum::<f64>() - want).abs());
        }
        for (s, &want) in sink.iter().enumerate() {
            let col: f64 = (0..m).map(|r| self.flow.get(r, s)).sum();
            worst = worst.max((col - want).abs());
        }
        worst
    }
}

/// Minimises `Σ d_rs f_rs` subject to the row sums of `f` matching `p` and the
/// column sums matching `q`.
///
/// Starts from the north-west corner rule, which always yields a spanning tree of
/// `m + n − 1` basic cells (some possibly carrying zero flow), then pivots with
/// Bland's rule: the first improving cell in row-major order enters, and the
/// lowest-indexed cell among tied minima leaves. Under that rule degenerate pivots
/// cannot cycle, so zero-flow basic cells need no perturbation.
pub fn solve_transport(p: &Histogram, q: &Histogram, cost: &Matrix<f64>) -> Result<TransportPlan> {
    let (m, n) = (p.len(), q.len());
    if cost.shape() != (m, n) {
        return Err(Error::shape(
            "solve_transport",
            format!("cost is {:?} for {m}x{n} histograms", cost.shape()),
        ));
    }
    let (source_mass, sink_mass) = (p.mass(), q.mass());
    if (source_mass - sink_mass).abs() > MASS_TOLERANCE
        || (source_mass - 1.0).abs() > MASS_TOLERANCE
        || (sink_mass - 1.0).abs() > MASS_TOLERANCE
    {
        return Err(Error::InfeasibleMarginals {
            source_mass,
            sink_mass,
        });
    }
    let mut tableau = Tableau::north_west(p.weights(), q.weights(), cost);
    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let mut pivots = 0;
    while let Some(enter) = tableau.entering_cell() {
        if pivots == max_pivots {
            return Err(Error::NoConvergence(pivots));
        }
        tableau.pivot(enter);
        pivots += 1;
    }
    Ok(TransportPlan {
        flow: tableau.flow,
        cost: cost.clone(),
        pivots,
    })
}

struct Tableau<'a> {
    m: usize,
    n: usize,
    cost: &'a Matrix<f64>,
    flow: Matrix<f64>,
    /// Basic cells as row-major indices; always `m + n − 1` of them.
    basis: Vec<usize>,
    is_basic: Vec<bool>,
}

impl<'a> Tableau<'a> {
    fn north_west(supply: &[f64], demand: &[f64], cost: &'a Matrix<f64>) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut flow = Matrix::zeros(m, n);
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut is_basic = vec![false; m * n];
        let (mut a, mut b) = (supply[0], demand[0]);
        let (mut r, mut s) = (0, 0);
        loop {
            let x = if r == m - 1 && s == n - 1 {
                a.max(0.0)
            } else {
                a.min(b).max(0.0)
            };
            flow.set(r, s, x);
            basis.push(r * n + s);
            is_basic[r * n + s] = true;
            if r == m - 1 && s == n - 1 {
                break;
            }
            // Exactly one of row and column advances per cell, so the basis is a
            // staircase spanning tree even when both run out at once.
            if s == n - 1 || (r < m - 1 && a <= b) {
                b -= x;
                r += 1;
                a = supply[r];
            } else {
                a -= x;
                s += 1;
                b = demand[s];
            }
        }
        Tableau {
            m,
            n,
            cost,
            flow,
            basis,
            is_basic,
        }
    }

    /// Node ids: rows are `0..m`, columns are `m..m + n`.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for &cell in &self.basis {
            let (r, s) = (cell / self.n, cell % self.n);
            adj[r].push(cell);
            adj[self.m + s].push(cell);
        }
        adj
    }

    fn potentials(&self, adj: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let mut pot = vec![f64::NAN; m + n];
        pot[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            for &cell in &adj[node] {
                let (r, s) = (cell / n, cell % n);
                let c = self.cost.get(r, s);
                let other = if node < m { m + s } else { r };
                if pot[other].is_nan() {
                    pot[other] = c - pot[node];
                    stack.push(other);
                }
            }
        }
        let v = pot.split_off(m);
        (pot, v)
    }

    fn entering_cell(&self) -> Option<usize> {
        let (u, v) = self.potentials(&self.adjacency());
        (0..self.m * self.n).find(|&cell| {
            let (r, s) = (cell / self.n, cell % self.n);
            !self.is_basic[cell] && self.cost.get(r, s) - u[r] - v[s] < -REDUCED_COST_TOLERANCE
        })
    }

    /// Basic cells on the tree path from row node `from` to column node `to`.
    fn tree_path(&self, adj: &[Vec<usize>], from: usize, to: usize) -> Vec<usize> {
        let (m, n) = (self.m, self.n);
        let mut via = vec![usize::MAX; m + n];
        let mut seen = vec![false; m + n];
        seen[from] = true;
        let mut stack = vec![from];
        while let Some(node) = stack.pop() {
            if node == to {
                break;
            }
            for &cell in &adj[node] {
                let (r, s) = (cell / n, cell % n);
                let other = if node < m { m + s } else { r };
                if !seen[other] {
                    seen[other] = true;
                    via[other] = cell;
                    stack.push(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = to;
        while node != from {
            let cell = via[node];
            path.push(cell);
            let (r, s) = (cell / n, cell % n);
            node = if node < m { m + s } else { r };
        }
        path.reverse();
        path
    }

    fn pivot(&mut self, enter: usize) {
        let n = self.n;
        let adj = self.adjacency();
        let (p, q) = (enter / n, enter % n);
        // Path from row p to column q alternates −, +, −, ... and ends on −.
        let path = self.tree_path(&adj, p, self.m + q);
        let donors: Vec<usize> = path.iter().copied().step_by(2).collect();
        let flow_of = |cell: usize| self.flow.get(cell / n, cell % n);
        let theta = donors
            .iter()
            .map(|&c| flow_of(c))
            .fold(f64::INFINITY, f64::min);
        let leave = donors
            .iter()
            .copied()
            .filter(|&c| flow_of(c) <= theta)
            .min()
            .expect("cycle has at least one donor cell");

        for (k, &cell) in path.iter().enumerate() {
            let (r, s) = (cell / n, cell % n);
            let f = self.flow.get(r, s);
            let updated = if k % 2 == 0 {
                (f - theta).max(0.0)
            } else {
                f + theta
            };
            self.flow.set(r, s, updated);
        }
        self.flow.set(p, q, theta);
        self.flow.set(leave / n, leave % n, 0.0);

        let slot = self
            .basis
            .iter()
            .position(|&c| c == leave)
            .expect("leaving cell is basic");
        self.basis[slot] = enter;
        self.is_basic[leave] = false;
        self.is_basic[enter] = true;
    }
}

/// Exhaustive reference solver for tiny instances whose masses are integer
/// multiples of `1 / units`.
///
/// Enumerates every integer flow matrix with the scaled marginals; because the
/// constraint matrix is totally unimodular, an integral optimum always exists, so
/// the minimum over this finite set is the exact linear-programming optimum. Used
/// only as a test oracle.
pub fn brute_force_transport(p: &[f64], q: &[f64], cost: &Matrix<f64>, units: u32) -> Option<f64> {
    let to_units = |w: &[f64]| -> Option<Vec<u32>> {
        w.iter()
            .map(|&x| {
                let k = (x * units as f64).round();
                ((x * units as f64 - k).abs() < 1e-9 && k >= 0.0).then_some(k as u32)
            })
            .collect()
    };
    let rows = to_units(p)?;
    let mut cols = to_units(q)?;
    if rows.iter().sum::<u32>() != cols.iter().sum::<u32>() {
        return None;
    }
    let mut best = f64::INFINITY;
    let mut current = vec![0u32; p.len() * q.len()];
    enumerate_rows(&rows, &mut cols, 0, &mut current, cost, units, &mut best);
    best.is_finite().then_some(best)
}

fn enumerate_rows(
    rows: &[u32],
    cols: &mut [u32],
    r: usize,
    current: &mut [u32],
    cost: &Matrix<f64>,
    units: u32,
    best: &mut f64,
) {
    if r == rows.len() {
        if cols.iter().all(|&c| c == 0) {
            let n = cols.len();
            let work: f64 = current
                .iter()
                .enumerate()
                .map(|(k, &f)| f as f64 / units as f64 * cost.get(k / n, k % n))
                .sum();
            *best = best.min(work);
        }
        return;
    }
    split_row(rows, cols, r, 0, rows[r], current, cost, units, best);
}

#[allow(clippy::too_many_arguments)]
fn split_row(
    rows: &[u32],
    cols: &mut [u32],
    r: usize,
    s: usize,
    left: u32,
    current: &mut [u32],
    cost: &Matrix<f64>,
    units: u32,
    best: &mut f64,
) {
    let n = cols.len();
    if s == n {
        if left == 0 {
            enumerate_rows(rows, cols, r + 1, current, cost, units, best);
        }
        return;
    }
    for f in 0..=left.min(cols[s]) {
        current[r * n + s] = f;
        cols[s] -= f;
        split_row(rows, cols, r, s + 1, left - f, current, cost, units, best);
        cols[s] += f;
    }
    current[r * n + s] = 0;
}
