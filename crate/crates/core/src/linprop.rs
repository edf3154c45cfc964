//! Classical estimators: least squares, logistic propensity scores, inverse
//! probability weighting, stratification on the propensity score and the
//! balance diagnostics used to choose a propensity model.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative size of an R diagonal entry, below which a column counts as
/// linearly dependent on the columns before it.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lr,
    DrIpw,
    Blocking,
    Bart,
    Tarnet,
    Cfr,
    Unadjusted,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Lr => "lr",
            Method::DrIpw => "dripw",
            Method::Blocking => "blocking",
            Method::Bart => "bart",
            Method::Tarnet => "tarnet",
            Method::Cfr => "cfr",
            Method::Unadjusted => "unadjusted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteEstimate {
    pub value: f64,
    pub method: Method,
}

/// Fitted `E[Y | x, t] = intercept + treatment * t + coefficients . x`.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub intercept: f64,
    pub treatment: f64,
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
}

impl OlsFit {
    /// Full coefficient vector in design order `[1, t, x...]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.coefficients.len() + 2);
        p.push(self.intercept);
        p.push(self.treatment);
        p.extend_from_slice(&self.coefficients);
        p
    }

    pub fn predict_row(&self, x: ArrayView1<'_, f64>, t: u8) -> f64 {
        self.intercept
            + self.treatment * f64::from(t)
            + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, t: &[u8]) -> Vec<f64> {
        x.rows().into_iter().zip(t).map(|(row, &ti)| self.predict_row(row, ti)).collect()
    }
}

/// Weighted least squares on the design `[1, t, X]` via Householder QR.
/// Rank-deficiency errors name columns as `intercept`, `treatment`, `x<j>`.
pub fn fit_ols(
    x: ArrayView2<'_, f64>,
    t: &[u8],
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<OlsFit> {
    let (n, d) = x.dim();
    let p = d + 2;
    if t.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "x has {n} rows, t has {}, y has {}",
            t.len(),
            y.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!("{} weights for {n} rows", w.len())));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
    }
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "least squares needs more than {p} rows, got {n}"
        )));
    }

    let mut design = DMatrix::<f64>::zeros(n, p);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..n {
        let s = weights.map_or(1.0, |w| w[i].sqrt());
        design[(i, 0)] = s;
        design[(i, 1)] = s * f64::from(t[i]);
        for j in 0..d {
            design[(i, j + 2)] = s * x[(i, j)];
        }
        rhs[i] = s * y[i];
    }

    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| r[(j, j)].abs()).fold(0.0_f64, f64::max);
    let collinear: Vec<String> = (0..p)
        .filter(|&j| !(r[(j, j)].abs() > RANK_TOL * scale.max(f64::MIN_POSITIVE)))
        .map(|j| match j {
            0 => "intercept".to_string(),
            1 => "treatment".to_string(),
            k => format!("x{}", k - 2),
        })
        .collect();
    if !collinear.is_empty() {
        return Err(Error::RankDeficient { columns: collinear });
    }

    let qty = qr.q().transpose() * &rhs;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient { columns: vec!["<triangular solve>".into()] })?;
    let resid = &rhs - &design * &beta;
    let residual_variance = resid.norm_squared() / (n - p) as f64;

    Ok(OlsFit {
        intercept: beta[0],
        treatment: beta[1],
        coefficients: beta.iter().skip(2).copied().collect(),
        residual_variance,
    })
}

pub fn ols_ate(fit: &OlsFit) -> AteEstimate {
    AteEstimate { value: fit.treatment, method: Method::Lr }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Only the listed covariate columns.
    ConfounderSubset(Vec<usize>),
    #[default]
    AllCovariates,
    /// All covariates plus every pairwise product `x_j * x_k`, `j < k`.
    AllWithInteractions,
}

impl FeatureMode {
    pub fn expand(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (n, d) = x.dim();
        match self {
            FeatureMode::AllCovariates => Ok(x.to_owned()),
            FeatureMode::ConfounderSubset(cols) => {
                if cols.is_empty() {
                    return Err(Error::InvalidConfig("confounder subset is empty".into()));
                }
                if let Some(bad) = cols.iter().find(|&&c| c >= d) {
                    return Err(Error::InvalidConfig(format!(
                        "confounder column {bad} out of range for {d} covariates"
                    )));
                }
                Ok(Array2::from_shape_fn((n, cols.len()), |(i, k)| x[(i, cols[k])]))
            }
            FeatureMode::AllWithInteractions => {
                let pairs: Vec<(usize, usize)> =
                    (0..d).flat_map(|j| (j + 1..d).map(move |k| (j, k))).collect();
                Ok(Array2::from_shape_fn((n, d + pairs.len()), |(i, c)| {
                    if c < d {
                        x[(i, c)]
                    } else {
                        let (j, k) = pairs[c - d];
                        x[(i, j)] * x[(i, k)]
                    }
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, rel_tol: 1e-8 }
    }
}

/// Class-weighted, unpenalized logistic regression of treatment on covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    /// Intercept first, then one coefficient per expanded feature.
    pub coefficients: Vec<f64>,
    pub mode: FeatureMode,
    /// `(control, treated)` weights, `n / (2 n_c)`.
    pub class_weights: (f64, f64),
    /// Weighted log-likelihood after every accepted IRLS step (first entry is
    /// the starting point).
    pub log_likelihood_trace: Vec<f64>,
}

impl PropensityModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let feats = self.mode.expand(x)?;
        Ok(feats.rows().into_iter().map(|r| sigmoid(linear(&self.coefficients, r))).collect())
    }
}

fn linear(beta: &[f64], row: ArrayView1<'_, f64>) -> f64 {
    beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn weighted_loglik(beta: &[f64], feats: &Array2<f64>, t: &[u8], cw: (f64, f64)) -> f64 {
    feats
        .rows()
        .into_iter()
        .zip(t)
        .map(|(row, &ti)| {
            let z = linear(beta, row);
            if ti == 1 {
                -cw.1 * softplus(-z)
            } else {
                -cw.0 * softplus(z)
            }
        })
        .sum()
}

pub fn class_weights(t: &[u8]) -> Result<(f64, f64)> {
    let n = t.len() as f64;
    let n1 = t.iter().filter(|&&v| v == 1).count() as f64;
    let n0 = n - n1;
    if n1 == 0.0 || n0 == 0.0 {
        return Err(Error::InvalidInput("propensity model needs both treatment arms".into()));
    }
    Ok((n / (2.0 * n0), n / (2.0 * n1)))
}

/// Maximum-likelihood logistic fit by iteratively reweighted least squares
/// with step halving, so the log-likelihood never decreases.
pub fn fit_propensity(
    x: ArrayView2<'_, f64>,
    t: &[u8],
    mode: FeatureMode,
    opts: IrlsOptions,
) -> Result<PropensityModel> {
    if x.nrows() != t.len() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} rows, t has {}",
            x.nrows(),
            t.len()
        )));
    }
    let cw = class_weights(t)?;
    let feats = mode.expand(x)?;
    let (n, k) = feats.dim();
    let p = k + 1;

    let mut beta = vec![0.0; p];
    let mut ll = weighted_loglik(&beta, &feats, t, cw);
    let mut trace = vec![ll];
    let total_weight: f64 = t.iter().map(|&v| if v == 1 { cw.1 } else { cw.0 }).sum();

    for _ in 0..opts.max_iter {
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let mut grad = DVector::<f64>::zeros(p);
        let mut z = vec![0.0; p];
        for (row, &ti) in feats.rows().into_iter().zip(t) {
            let pr = sigmoid(linear(&beta, row));
            let c = if ti == 1 { cw.1 } else { cw.0 };
            let w = c * pr * (1.0 - pr);
            let g = c * (f64::from(ti) - pr);
            z[0] = 1.0;
            for (zj, v) in z[1..].iter_mut().zip(row.iter()) {
                *zj = *v;
            }
            for a in 0..p {
                grad[a] += g * z[a];
                let wa = w * z[a];
                for b in a..p {
                    hess[(a, b)] += wa * z[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                return Err(Error::NonConvergence(
                    "information matrix is singular (perfect separation or collinear features)"
                        .into(),
                ))
            }
        };

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let cand_ll = weighted_loglik(&cand, &feats, t, cw);
            if cand_ll.is_finite() && cand_ll >= ll {
                accepted = Some((cand, cand_ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            break;
        };
        let change = (cand_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        beta = cand;
        ll = cand_ll;
        trace.push(ll);

        if beta.iter().any(|b| !b.is_finite() || b.abs() > 1e8) || -ll < 1e-9 * total_weight {
            return Err(Error::NonConvergence(format!(
                "perfect separation: coefficients diverge (log-likelihood {ll:.3e} after {} steps)",
                trace.len() - 1
            )));
        }
        if change < opts.rel_tol {
            return Ok(PropensityModel { coefficients: beta, mode, class_weights: cw, log_likelihood_trace: trace });
        }
    }

    // Separable data keeps improving the likelihood without settling.
    let pred: Vec<f64> = feats.rows().into_iter().map(|r| sigmoid(linear(&beta, r))).collect();
    let separated = pred.iter().zip(t).all(|(p, &ti)| if ti == 1 { *p > 0.5 } else { *p < 0.5 });
    if separated {
        return Err(Error::NonConvergence("perfect separation: coefficients diverge".into()));
    }
    let last = trace.len();
    if last >= 2 {
        let change = (trace[last - 1] - trace[last - 2]).abs() / trace[last - 1].abs();
        if change < 1e-6 {
            log::warn!("IRLS stopped after {} steps with relative change {change:.2e}", last - 1);
            return Ok(PropensityModel { coefficients: beta, mode, class_weights: cw, log_likelihood_trace: trace });
        }
    }
    Err(Error::NonConvergence(format!("no convergence after {} iterations (n = {n})", opts.max_iter)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityScores {
    pub values: Vec<f64>,
    pub floor: f64,
    pub ceiling: Option<f64>,
    pub clipped_count: usize,
}

/// Raises scores below `floor` to `floor`. Scores above are left alone unless
/// a `ceiling` is given.
pub fn clip_scores(scores: &[f64], floor: f64, ceiling: Option<f64>) -> PropensityScores {
    let mut clipped_count = 0;
    let values = scores
        .iter()
        .map(|&s| {
            if s < floor {
                clipped_count += 1;
                floor
            } else if let Some(c) = ceiling.filter(|&c| s > c) {
                clipped_count += 1;
                c
            } else {
                s
            }
        })
        .collect();
    PropensityScores { values, floor, ceiling, clipped_count }
}

/// `1 / (e^t (1 - e)^(1 - t))`.
pub fn ipw_weight(score: f64, t: u8) -> Result<f64> {
    if !(score > 0.0 && score < 1.0) {
        return Err(Error::InvalidInput(format!(
            "propensity score {score} outside (0, 1); clip before weighting"
        )));
    }
    Ok(if t == 1 { 1.0 / score } else { 1.0 / (1.0 - score) })
}

/// Weighted least squares fit used by the doubly robust estimator.
pub fn dr_ipw_fit(x: ArrayView2<'_, f64>, t: &[u8], y: &[f64], scores: &[f64]) -> Result<OlsFit> {
    if scores.len() != t.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} rows", scores.len(), t.len())));
    }
    let mut w = scores.iter().zip(t).map(|(&e, &ti)| ipw_weight(e, ti)).collect::<Result<Vec<_>>>()?;
    // Rescaled to mean one; the fit is unchanged and constant weights give
    // exactly the unweighted design.
    let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
    w.iter_mut().for_each(|v| *v /= mean);
    fit_ols(x, t, y, Some(&w))
}

pub fn dr_ipw_ate(x: ArrayView2<'_, f64>, t: &[u8], y: &[f64], scores: &[f64]) -> Result<AteEstimate> {
    let fit = dr_ipw_fit(x, t, y, scores)?;
    Ok(AteEstimate { value: fit.treatment, method: Method::DrIpw })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Score range `(lo, hi]`; the first block also owns its lower edge.
    pub lo: f64,
    pub hi: f64,
    pub size: usize,
    pub fit: OlsFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockingFit {
    pub blocks: Vec<Block>,
}

impl BlockingFit {
    pub fn ate(&self) -> AteEstimate {
        let parts: Vec<(usize, f64)> = self.blocks.iter().map(|b| (b.size, b.fit.treatment)).collect();
        AteEstimate { value: combine_block_estimates(&parts), method: Method::Blocking }
    }

    pub fn block_of(&self, score: f64) -> usize {
        self.blocks.iter().position(|b| score <= b.hi).unwrap_or(self.blocks.len() - 1)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, t: &[u8], scores: &[f64]) -> Vec<f64> {
        x.rows()
            .into_iter()
            .zip(t)
            .zip(scores)
            .map(|((row, &ti), &s)| self.blocks[self.block_of(s)].fit.predict_row(row, ti))
            .collect()
    }
}

/// Size-weighted mean of per-block effects.
pub fn combine_block_estimates(parts: &[(usize, f64)]) -> f64 {
    let total: usize = parts.iter().map(|p| p.0).sum();
    parts.iter().map(|&(n, a)| n as f64 * a).sum::<f64>() / total as f64
}

/// Linear-interpolation quantile of an already sorted slice.
pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Stratify on score quantiles, fit least squares within each block and
/// merge blocks that cannot support a fit into their neighbor.
pub fn blocking_fit(
    x: ArrayView2<'_, f64>,
    t: &[u8],
    y: &[f64],
    scores: &[f64],
    n_blocks: usize,
) -> Result<BlockingFit> {
    let n = t.len();
    if n_blocks == 0 {
        return Err(Error::InvalidConfig("n_blocks must be at least 1".into()));
    }
    if scores.len() != n || x.nrows() != n || y.len() != n {
        return Err(Error::DimensionMismatch("blocking inputs have different lengths".into()));
    }
    if n == 0 {
        return Err(Error::Empty("no rows to stratify".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..n_blocks).map(|k| sorted_quantile(&sorted, k as f64 / n_blocks as f64)).collect();
    edges.push(f64::INFINITY);
    edges.dedup();

    // Members per block; block b holds scores in (edges[b-1], edges[b]].
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len()];
    for (i, &s) in scores.iter().enumerate() {
        let b = edges.iter().position(|&e| s <= e).unwrap_or(edges.len() - 1);
        members[b].push(i);
    }
    let mut ranges: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    let mut lo = f64::NEG_INFINITY;
    for (b, m) in members.into_iter().enumerate() {
        if !m.is_empty() {
            ranges.push((lo, edges[b], m));
        }
        lo = edges[b];
    }

    let min_rows = x.ncols() + 3;
    let valid = |m: &[usize]| {
        let k = m.iter().filter(|&&i| t[i] == 1).count();
        k > 0 && k < m.len() && m.len() >= min_rows
    };
    loop {
        let Some(bad) = ranges.iter().position(|r| !valid(&r.2)) else { break };
        if ranges.len() == 1 {
            return Err(Error::InvalidInput(
                "no valid propensity block: every merge lacks a treatment arm or enough rows".into(),
            ));
        }
        let target = if bad + 1 < ranges.len() { bad + 1 } else { bad - 1 };
        let (a, b) = (bad.min(target), bad.max(target));
        let removed = ranges.remove(b);
        ranges[a].1 = removed.1;
        ranges[a].2.extend(removed.2);
    }

    let mut blocks = Vec::with_capacity(ranges.len());
    for (lo, hi, mut m) in ranges {
        m.sort_unstable();
        let xb = x.select(ndarray::Axis(0), &m);
        let tb: Vec<u8> = m.iter().map(|&i| t[i]).collect();
        let yb: Vec<f64> = m.iter().map(|&i| y[i]).collect();
        let fit = fit_ols(xb.view(), &tb, &yb, None)?;
        blocks.push(Block { lo, hi, size: m.len(), fit });
    }
    Ok(BlockingFit { blocks })
}

pub fn blocking_ate(
    x: ArrayView2<'_, f64>,
    t: &[u8],
    y: &[f64],
    scores: &[f64],
    n_blocks: usize,
) -> Result<AteEstimate> {
    Ok(blocking_fit(x, t, y, scores, n_blocks)?.ate())
}

/// Per covariate `(mean_t - mean_c) / sqrt((var_t + var_c) / 2)` with sample
/// variances; zero when both arms have zero variance.
pub fn normalized_mean_difference(x: ArrayView2<'_, f64>, t: &[u8]) -> Result<Vec<f64>> {
    let n1 = t.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == t.len() {
        return Err(Error::InvalidInput("balance needs both treatment arms".into()));
    }
    Ok(x.columns()
        .into_iter()
        .map(|col| {
            let (mut t_vals, mut c_vals) = (Vec::new(), Vec::new());
            for (v, &ti) in col.iter().zip(t) {
                if ti == 1 {
                    t_vals.push(*v)
                } else {
                    c_vals.push(*v)
                }
            }
            let (mt, vt) = mean_var(&t_vals);
            let (mc, vc) = mean_var(&c_vals);
            let pooled = ((vt + vc) / 2.0).sqrt();
            if pooled == 0.0 {
                0.0
            } else {
                (mt - mc) / pooled
            }
        })
        .collect())
}

pub(crate) fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapHistogram {
    pub edges: Vec<f64>,
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
}

pub fn overlap_histogram(scores: &[f64], t: &[u8], bins: usize) -> Result<OverlapHistogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    if scores.len() != t.len() {
        return Err(Error::DimensionMismatch("scores and treatments differ in length".into()));
    }
    let mut treated = vec![0; bins];
    let mut control = vec![0; bins];
    for (&s, &ti) in scores.iter().zip(t) {
        let b = ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        if ti == 1 {
            treated[b] += 1
        } else {
            control[b] += 1
        }
    }
    let edges = (0..=bins).map(|k| k as f64 / bins as f64).collect();
    Ok(OverlapHistogram { edges, treated, control })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    use crate::rng::seeded;

    fn random_problem(seed: u64, n: usize, d: usize) -> (Array2<f64>, Vec<u8>, Vec<f64>) {
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let y = (0..n)
            .map(|i| 1.0 + 2.0 * f64::from(t[i]) + x.row(i).sum() + rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, t, y)
    }

    #[test]
    fn exact_linear_data_recovers_effect() {
        let (x, t, _) = random_problem(1, 30, 3);
        let y: Vec<f64> = t.iter().map(|&ti| 3.0 + 2.0 * f64::from(ti)).collect();
        let fit = fit_ols(x.view(), &t, &y, None).unwrap();
        assert_abs_diff_eq!(fit.treatment, 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.intercept, 3.0, epsilon = 1e-10);
        for c in &fit.coefficients {
            assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn null_effect_gives_zero_on_noiseless_data() {
        let (x, t, _) = random_problem(2, 40, 2);
        let y: Vec<f64> = (0..40).map(|i| 1.0 + x[(i, 0)] - 2.0 * x[(i, 1)]).collect();
        let fit = fit_ols(x.view(), &t, &y, None).unwrap();
        assert_abs_diff_eq!(ols_ate(&fit).value, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn uniform_weights_match_unweighted() {
        let (x, t, y) = random_problem(3, 20, 2);
        let plain = fit_ols(x.view(), &t, &y, None).unwrap();
        let weighted = fit_ols(x.view(), &t, &y, Some(&[3.5; 20])).unwrap();
        assert_abs_diff_eq!(plain.treatment, weighted.treatment, epsilon = 1e-10);
    }

    #[test]
    fn collinear_columns_are_named() {
        let (mut x, t, y) = random_problem(4, 30, 3);
        for i in 0..30 {
            x[(i, 2)] = 2.0 * x[(i, 0)];
        }
        match fit_ols(x.view(), &t, &y, None) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["x2".to_string()]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let (x, t, y) = random_problem(5, 4, 2);
        assert!(fit_ols(x.view(), &t, &y, None).is_err());
    }

    #[test]
    fn ols_ate_returns_treatment_coefficient() {
        let fit = OlsFit { intercept: 1.0, treatment: 15.31, coefficients: vec![], residual_variance: 1.0 };
        assert_eq!(ols_ate(&fit).value, 15.31);
        let zero = OlsFit { treatment: 0.0, ..fit };
        assert_eq!(ols_ate(&zero).value, 0.0);
    }

    #[test]
    fn closed_form_effect_is_constant_across_x() {
        let (x, t, y) = random_problem(6, 50, 3);
        let fit = fit_ols(x.view(), &t, &y, None).unwrap();
        for row in x.rows() {
            let diff = fit.predict_row(row, 1) - fit.predict_row(row, 0);
            assert_abs_diff_eq!(diff, fit.treatment, epsilon = 1e-10);
        }
    }

    #[test]
    fn balanced_classes_have_unit_weights() {
        assert_eq!(class_weights(&[0, 1, 0, 1]).unwrap(), (1.0, 1.0));
        let (w0, w1) = class_weights(&[0, 0, 0, 1]).unwrap();
        assert_abs_diff_eq!(w0, 4.0 / 6.0);
        assert_abs_diff_eq!(w1, 2.0);
    }

    #[test]
    fn coin_flip_treatment_gives_half_scores() {
        let mut rng = seeded(11);
        let n = 2000;
        let x = Array2::from_shape_fn((n, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let model = fit_propensity(x.view(), &t, FeatureMode::AllCovariates, IrlsOptions::default()).unwrap();
        let e = model.predict(x.view()).unwrap();
        assert!(e.iter().all(|p| (p - 0.5).abs() < 0.05), "max dev {}", e.iter().map(|p| (p - 0.5).abs()).fold(0.0, f64::max));
    }

    #[test]
    fn separable_data_is_reported() {
        let x = Array2::from_shape_fn((40, 1), |(i, _)| i as f64 - 19.5);
        let t: Vec<u8> = (0..40).map(|i| u8::from(i >= 20)).collect();
        let err = fit_propensity(x.view(), &t, FeatureMode::AllCovariates, IrlsOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonConvergence(_)), "{err}");
    }

    #[test]
    fn single_arm_is_rejected() {
        let x = Array2::zeros((5, 1));
        assert!(fit_propensity(x.view(), &[1; 5], FeatureMode::AllCovariates, IrlsOptions::default()).is_err());
    }

    #[test]
    fn irls_log_likelihood_never_decreases() {
        let mut rng = seeded(12);
        let n = 500;
        let x = Array2::from_shape_fn((n, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let t: Vec<u8> = (0..n)
            .map(|i| u8::from(rng.random_bool(sigmoid(0.8 * x[(i, 0)] - 0.5 * x[(i, 1)] + 0.3))))
            .collect();
        for mode in [FeatureMode::AllCovariates, FeatureMode::AllWithInteractions, FeatureMode::ConfounderSubset(vec![0, 2])] {
            let m = fit_propensity(x.view(), &t, mode, IrlsOptions::default()).unwrap();
            assert!(m.log_likelihood_trace.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn interaction_expansion_shape() {
        let x = array![[1.0, 2.0, 3.0]];
        let e = FeatureMode::AllWithInteractions.expand(x.view()).unwrap();
        assert_eq!(e.row(0).to_vec(), vec![1.0, 2.0, 3.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn clipping_is_lower_only_by_default() {
        let s = clip_scores(&[0.05, 0.5, 0.999], 0.1, None);
        assert_eq!(s.values, vec![0.1, 0.5, 0.999]);
        assert_eq!(s.clipped_count, 1);
        let sym = clip_scores(&[0.05, 0.5, 0.999], 0.1, Some(0.9));
        assert_eq!(sym.values, vec![0.1, 0.5, 0.9]);
    }

    #[test]
    fn ipw_weights() {
        assert_abs_diff_eq!(ipw_weight(0.5, 1).unwrap(), 2.0);
        assert_abs_diff_eq!(ipw_weight(0.1, 1).unwrap(), 10.0);
        assert_abs_diff_eq!(ipw_weight(0.1, 0).unwrap(), 1.0 / 0.9);
        assert!(ipw_weight(0.0, 1).is_err());
        assert!(ipw_weight(1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn ipw_weight_identity(e in 1e-6f64..(1.0 - 1e-6)) {
            let s = ipw_weight(e, 1).unwrap() * e + ipw_weight(e, 0).unwrap() * (1.0 - e);
            prop_assert!((s - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_scores_reduce_to_ols() {
        let (x, t, y) = random_problem(7, 60, 3);
        let plain = ols_ate(&fit_ols(x.view(), &t, &y, None).unwrap()).value;
        let dr = dr_ipw_ate(x.view(), &t, &y, &[0.5; 60]).unwrap().value;
        assert_abs_diff_eq!(plain, dr, epsilon = 1e-12);
        let bl = blocking_ate(x.view(), &t, &y, &[0.3; 60], 5).unwrap().value;
        assert_abs_diff_eq!(plain, bl, epsilon = 1e-12);
    }

    #[test]
    fn block_combination_is_size_weighted() {
        assert_abs_diff_eq!(combine_block_estimates(&[(30, 10.0), (70, 20.0)]), 17.0, epsilon = 1e-12);
    }

    #[test]
    fn single_arm_blocks_merge_into_neighbors() {
        let (x, _, y) = random_problem(8, 100, 1);
        // Lowest scores are all controls and highest all treated.
        let scores: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let t: Vec<u8> = (0..100).map(|i| u8::from(i >= 20 && (i >= 80 || i % 2 == 0))).collect();
        let fit = blocking_fit(x.view(), &t, &y, &scores, 5).unwrap();
        assert_eq!(fit.blocks.len(), 3);
        assert_eq!(fit.blocks.iter().map(|b| b.size).sum::<usize>(), 100);
        assert_eq!(fit.block_of(0.05), 0);
        assert_eq!(fit.block_of(0.99), 2);
    }

    #[test]
    fn normalized_mean_difference_formula() {
        let x = array![[1.0], [1.0], [0.0], [0.0]];
        // both arms constant: zero by convention
        assert_eq!(normalized_mean_difference(x.view(), &[1, 1, 0, 0]).unwrap(), vec![0.0]);
        let x = array![[0.0], [2.0], [-1.0], [1.0]];
        // treated mean 1, var 2; control mean 0, var 2
        let v = normalized_mean_difference(x.view(), &[1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(v[0], 1.0 / 2.0_f64.sqrt(), epsilon = 1e-12);
        let same = array![[1.0], [3.0], [1.0], [3.0]];
        assert_eq!(normalized_mean_difference(same.view(), &[1, 1, 0, 0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn table_one_fio2_imbalance() {
        let d = (79.0 - 71.0) / ((14.8_f64.powi(2) + 12.5_f64.powi(2)) / 2.0).sqrt();
        assert_abs_diff_eq!(d, 0.584, epsilon = 5e-4);
    }

    #[test]
    fn overlap_histogram_counts() {
        let h = overlap_histogram(&[0.5; 6], &[1, 1, 0, 0, 0, 1], 20).unwrap();
        assert_eq!(h.treated.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.treated.iter().sum::<usize>(), 3);
        assert_eq!(h.control.iter().sum::<usize>(), 3);
        assert_eq!(h.edges.len(), 21);

        let mut rng = seeded(9);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let h = overlap_histogram(&s, &t, 20).unwrap();
        let total: Vec<usize> = h.treated.iter().zip(&h.control).map(|(a, b)| a + b).collect();
        // 500 expected per bin, sd about 22
        assert!(total.iter().all(|&c| (400..=600).contains(&c)), "{total:?}");
    }
}
