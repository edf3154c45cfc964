//! Optimal transport between uniform empirical measures with squared
//! Euclidean ground cost.
//!
//! [`wasserstein_approx`] is the training-time penalty: log-domain iterative
//! scaling with the entropic temperature annealed over a fixed number of
//! sweeps, a rounding step onto the exact marginals, and self-transport
//! debiasing so that identical sets are at distance zero.
//! [`wasserstein_exact`] solves small instances exactly and serves as the
//! reference.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on `|A| * |B|` accepted by [`wasserstein_exact`].
pub const EXACT_MAX_PAIRS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornOptions {
    /// Number of scaling sweeps (one row and one column update each).
    pub sweeps: usize,
    /// Final temperature is `mean(cost) / strength`; sweeps anneal from
    /// `mean(cost)` down to it geometrically.
    pub strength: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { sweeps: 10, strength: 100.0 }
    }
}

impl SinkhornOptions {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || !(self.strength > 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid transport options {self:?}")));
        }
        Ok(())
    }
}

pub fn sq_dist_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let bn: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut m = a.dot(&b.t());
    for ((i, j), v) in m.indexed_iter_mut() {
        *v = (an[i] + bn[j] - 2.0 * *v).max(0.0);
    }
    m
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Feasible coupling of uniform marginals close to the entropic optimum.
pub fn transport_plan(cost: &Array2<f64>, opts: &SinkhornOptions) -> Array2<f64> {
    let (m, n) = cost.dim();
    let la = -(m as f64).ln();
    let lb = -(n as f64).ln();
    let mean = cost.mean().unwrap_or(0.0);
    if !(mean > 0.0) {
        return Array2::from_elem((m, n), 1.0 / (m * n) as f64);
    }
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut eps = mean;
    for k in 0..opts.sweeps {
        let lam = if opts.sweeps > 1 {
            opts.strength.powf(k as f64 / (opts.sweeps - 1) as f64)
        } else {
            opts.strength
        };
        eps = mean / lam;
        for i in 0..m {
            f[i] = eps * la - eps * log_sum_exp((0..n).map(|j| (g[j] - cost[(i, j)]) / eps));
        }
        for j in 0..n {
            g[j] = eps * lb - eps * log_sum_exp((0..m).map(|i| (f[i] - cost[(i, j)]) / eps));
        }
    }
    let mut plan = Array2::from_shape_fn((m, n), |(i, j)| ((f[i] + g[j] - cost[(i, j)]) / eps).exp());

    // Round onto the transport polytope.
    let a = 1.0 / m as f64;
    let b = 1.0 / n as f64;
    for mut row in plan.rows_mut() {
        let s = row.sum();
        if s > a {
            row *= a / s;
        }
    }
    for mut col in plan.columns_mut() {
        let s = col.sum();
        if s > b {
            col *= b / s;
        }
    }
    let err_r: Vec<f64> = plan.sum_axis(Axis(1)).iter().map(|s| a - s).collect();
    let err_c: Vec<f64> = plan.sum_axis(Axis(0)).iter().map(|s| b - s).collect();
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for ((i, j), v) in plan.indexed_iter_mut() {
            *v += err_r[i] * err_c[j] / total;
        }
    }
    plan
}

/// Transport plans of the cross term and the two self terms.
#[derive(Debug, Clone)]
pub struct OtSolution {
    pub distance: f64,
    pub cross: Array2<f64>,
    pub self_a: Array2<f64>,
    pub self_b: Array2<f64>,
}

fn plan_cost(plan: &Array2<f64>, cost: &Array2<f64>) -> f64 {
    plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum()
}

fn check_sets(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("transport between empty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "point sets of dimension {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

pub fn wasserstein_solve(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, opts: &SinkhornOptions) -> Result<OtSolution> {
    check_sets(a, b)?;
    opts.validate()?;
    let cab = sq_dist_matrix(a, b);
    let caa = sq_dist_matrix(a, a);
    let cbb = sq_dist_matrix(b, b);
    // Averaging both scan orders makes the result symmetric in (A, B).
    let forward = transport_plan(&cab, opts);
    let backward = transport_plan(&cab.t().to_owned(), opts);
    let cross = (forward + backward.t()) * 0.5;
    let self_a = transport_plan(&caa, opts);
    let self_b = transport_plan(&cbb, opts);
    let distance = plan_cost(&cross, &cab) - 0.5 * (plan_cost(&self_a, &caa) + plan_cost(&self_b, &cbb));
    Ok(OtSolution { distance, cross, self_a, self_b })
}

pub fn wasserstein_approx(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, opts: &SinkhornOptions) -> Result<f64> {
    Ok(wasserstein_solve(a, b, opts)?.distance)
}

impl OtSolution {
    /// Gradients of `distance` with respect to the points of `a` and `b`,
    /// holding the plans fixed.
    pub fn gradients(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let pa = self.cross.sum_axis(Axis(1));
        let pb = self.cross.sum_axis(Axis(0));
        let mut ga = (&a * &pa.insert_axis(Axis(1)) - self.cross.dot(&b)) * 2.0;
        let mut gb = (&b * &pb.insert_axis(Axis(1)) - self.cross.t().dot(&a)) * 2.0;

        let sym_a = &self.self_a + &self.self_a.t();
        let da = sym_a.sum_axis(Axis(1));
        ga = ga - (&a * &da.insert_axis(Axis(1)) - sym_a.dot(&a));
        let sym_b = &self.self_b + &self.self_b.t();
        let db = sym_b.sum_axis(Axis(1));
        gb = gb - (&b * &db.insert_axis(Axis(1)) - sym_b.dot(&b));
        (ga, gb)
    }
}

/// Minimum-cost perfect assignment (Hungarian method with potentials).
/// Returns `assign[row] = col`.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact transport cost between uniform measures on `a` and `b`.
///
/// With `L = lcm(|A|, |B|)` every point is replicated to carry mass `1/L`;
/// the transport polytope then has integral vertices, so the optimum is an
/// assignment between the replicated sets.
pub fn wasserstein_exact(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_sets(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    if m * n > EXACT_MAX_PAIRS {
        return Err(Error::InvalidInput(format!(
            "exact transport limited to {EXACT_MAX_PAIRS} pairs, got {m} x {n}"
        )));
    }
    let l = m / gcd(m, n) * n;
    let cost = sq_dist_matrix(a, b);
    let big = Array2::from_shape_fn((l, l), |(i, j)| cost[(i / (l / m), j / (l / n))]);
    let assign = min_cost_assignment(&big);
    Ok(assign.iter().enumerate().map(|(i, &j)| big[(i, j)]).sum::<f64>() / l as f64)
}
