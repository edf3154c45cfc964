//! Bayesian additive regression trees for `E[Y | x, t]`.
//!
//! The treatment indicator is appended to the covariates as one more split
//! variable; effects come from evaluating every posterior ensemble at `t = 1`
//! and `t = 0` for the same `x`.

mod sampler;
pub mod tree;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linprop::{fit_ols, AteEstimate, Method};
use crate::rng::{derive_seed, seeded};
use sampler::{Hyper, Sampler};
pub use tree::RegressionTree;

pub const MIN_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BartConfig {
    pub n_trees: usize,
    /// Leaf prior shrinkage: leaf sd is `0.5 / (k sqrt(n_trees))`.
    pub k: f64,
    /// Degrees of freedom of the noise-variance prior.
    pub nu: f64,
    /// Prior probability that the noise sd is below the least-squares residual sd.
    pub q: f64,
    pub alpha_tree: f64,
    pub beta_tree: f64,
    pub burn_in: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for BartConfig {
    fn default() -> Self {
        Self {
            n_trees: 50,
            k: 2.0,
            nu: 3.0,
            q: 0.9,
            alpha_tree: 0.95,
            beta_tree: 2.0,
            burn_in: 250,
            draws: 1000,
            seed: 0,
        }
    }
}

impl BartConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("bart: {msg}")));
        if self.n_trees < 1 {
            return bad("n_trees must be >= 1");
        }
        if !(self.k > 0.0) {
            return bad("k must be > 0");
        }
        if !(self.nu > 0.0) {
            return bad("nu must be > 0");
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q must lie in (0, 1)");
        }
        if !(self.alpha_tree > 0.0 && self.alpha_tree < 1.0) {
            return bad("alpha_tree must lie in (0, 1)");
        }
        if !(self.beta_tree >= 0.0) {
            return bad("beta_tree must be >= 0");
        }
        if self.draws < 1 {
            return bad("draws must be >= 1");
        }
        Ok(())
    }
}

/// Kept posterior draws. Trees live on the internal scale where the training
/// outcome spans `[-0.5, 0.5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BartPosterior {
    pub draws: Vec<Vec<RegressionTree>>,
    /// Noise sd per draw, in outcome units.
    pub sigma: Vec<f64>,
    pub y_min: f64,
    pub y_range: f64,
    pub n_covariates: usize,
    pub config: BartConfig,
}

impl BartPosterior {
    fn unscale(&self, s: f64) -> f64 {
        (s + 0.5) * self.y_range + self.y_min
    }

    /// Ensemble sum of one draw on the internal scale.
    pub fn draw_sum(&self, draw: usize, x: ndarray::ArrayView1<'_, f64>, t: u8) -> f64 {
        self.draws[draw].iter().map(|tr| tr.eval(x, t)).sum()
    }

    fn check_width(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.n_covariates {
            return Err(Error::DimensionMismatch(format!(
                "posterior fitted on {} covariates, got {}",
                self.n_covariates,
                x.ncols()
            )));
        }
        Ok(())
    }
}

pub fn bart_fit(x: ArrayView2<'_, f64>, t: &[u8], y: &[f64], config: &BartConfig) -> Result<BartPosterior> {
    config.validate()?;
    let n = y.len();
    if x.nrows() != n || t.len() != n {
        return Err(Error::DimensionMismatch("x, t and y differ in length".into()));
    }
    if n < MIN_ROWS {
        return Err(Error::InvalidInput(format!("BART needs at least {MIN_ROWS} rows, got {n}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite outcome".into()));
    }
    let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_range = y_max - y_min;
    if !(y_range > 0.0) {
        return Err(Error::InvalidInput("constant outcome: cannot rescale to [-0.5, 0.5]".into()));
    }
    let ys: Vec<f64> = y.iter().map(|v| (v - y_min) / y_range - 0.5).collect();

    let sigma_hat2 = match fit_ols(x, t, &ys, None) {
        Ok(fit) if fit.residual_variance > 0.0 => fit.residual_variance,
        _ => {
            let m = ys.iter().sum::<f64>() / n as f64;
            ys.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
        }
    };
    let chi = ChiSquared::new(config.nu).map_err(|e| Error::InvalidConfig(format!("bart: {e}")))?;
    let lambda = sigma_hat2 * chi.inverse_cdf(1.0 - config.q) / config.nu;

    let hyper = Hyper {
        n_trees: config.n_trees,
        sigma_mu: 0.5 / (config.k * (config.n_trees as f64).sqrt()),
        nu: config.nu,
        lambda,
        alpha_tree: config.alpha_tree,
        beta_tree: config.beta_tree,
    };
    let tcol = Array2::from_shape_fn((n, 1), |(i, _)| f64::from(t[i]));
    let xt = concatenate(Axis(1), &[x, tcol.view()]).expect("same row count");

    let mut rng = seeded(config.seed);
    let mut sampler = Sampler::new(&xt, &ys, hyper, sigma_hat2);
    for _ in 0..config.burn_in {
        sampler.sweep(&mut rng);
    }
    let mut draws = Vec::with_capacity(config.draws);
    let mut sigma = Vec::with_capacity(config.draws);
    for _ in 0..config.draws {
        sampler.sweep(&mut rng);
        let d = sampler.snapshot();
        draws.push(d.trees);
        sigma.push(d.sigma * y_range);
    }
    Ok(BartPosterior { draws, sigma, y_min, y_range, n_covariates: x.ncols(), config: config.clone() })
}

pub fn bart_fit_dataset(data: &Dataset, config: &BartConfig) -> Result<BartPosterior> {
    bart_fit(data.x.view(), &data.t, &data.y, config)
}

/// Posterior mean of the ensemble at `(x_i, t_i)`, in outcome units.
pub fn bart_predict(post: &BartPosterior, x: ArrayView2<'_, f64>, t: &[u8]) -> Result<Vec<f64>> {
    post.check_width(x)?;
    if t.len() != x.nrows() {
        return Err(Error::DimensionMismatch("x and t differ in length".into()));
    }
    let k = post.draws.len() as f64;
    Ok(x.rows()
        .into_iter()
        .zip(t)
        .map(|(row, &ti)| {
            let s: f64 = (0..post.draws.len()).map(|d| post.draw_sum(d, row, ti)).sum();
            post.unscale(s / k)
        })
        .collect())
}

/// Posterior mean of `ensemble(x, 1) - ensemble(x, 0)` per row.
pub fn bart_cate(post: &BartPosterior, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    post.check_width(x)?;
    let k = post.draws.len() as f64;
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let s: f64 = (0..post.draws.len())
                .map(|d| post.draw_sum(d, row, 1) - post.draw_sum(d, row, 0))
                .sum();
            s / k * post.y_range
        })
        .collect())
}

pub fn bart_ate(post: &BartPosterior, x_test: ArrayView2<'_, f64>) -> Result<AteEstimate> {
    if x_test.nrows() == 0 {
        return Err(Error::Empty("test set has no rows".into()));
    }
    let cate = bart_cate(post, x_test)?;
    Ok(AteEstimate { value: cate.iter().sum::<f64>() / cate.len() as f64, method: Method::Bart })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k: f64,
    pub nu: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub config: BartConfig,
    /// Mean held-out RMSE per grid point; `None` where the fit failed.
    pub scores: Vec<Option<f64>>,
}

/// K-fold cross-validation over `(k, nu, q)`; lowest mean held-out factual
/// RMSE wins, ties go to the earlier grid point.
pub fn bart_cv_select(
    data: &Dataset,
    base: &BartConfig,
    grid: &[GridPoint],
    folds: usize,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("bart: empty CV grid".into()));
    }
    if folds < 2 || folds > data.n() {
        return Err(Error::InvalidConfig(format!("bart: {folds} folds for {} rows", data.n())));
    }
    let fold_of: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..data.n()).collect();
        idx.shuffle(&mut seeded(derive_seed(base.seed, "bart-cv", 0)));
        let mut f = vec![0; data.n()];
        for (pos, &i) in idx.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let mut scores = Vec::with_capacity(grid.len());
    for (g, p) in grid.iter().enumerate() {
        let cfg = BartConfig { k: p.k, nu: p.nu, q: p.q, ..base.clone() };
        let mut total = 0.0;
        let mut failed = None;
        for f in 0..folds {
            let train: Vec<usize> = (0..data.n()).filter(|&i| fold_of[i] != f).collect();
            let held: Vec<usize> = (0..data.n()).filter(|&i| fold_of[i] == f).collect();
            let tr = data.select(&train);
            let ho = data.select(&held);
            let fold_cfg = BartConfig { seed: derive_seed(base.seed, "bart-cv-fold", (g * folds + f) as u64), ..cfg.clone() };
            match bart_fit_dataset(&tr, &fold_cfg).and_then(|post| bart_predict(&post, ho.x.view(), &ho.t)) {
                Ok(pred) => {
                    let mse = pred.iter().zip(&ho.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ho.n() as f64;
                    total += mse.sqrt();
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        match failed {
            Some(e) => {
                log::warn!("bart CV: skipping grid point {p:?}: {e}");
                scores.push(None);
            }
            None => scores.push(Some(total / folds as f64)),
        }
    }
    let best = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((i, v)),
        })
        .ok_or_else(|| Error::InvalidConfig("bart: every CV grid point failed".into()))?;
    let p = grid[best.0];
    Ok(CvOutcome { config: BartConfig { k: p.k, nu: p.nu, q: p.q, ..base.clone() }, scores })
}
