//! Data-generating processes with both potential outcomes observed, so that
//! effect estimates can be scored against the truth.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{write_cohort, Cohort, CovariateKind, Observation};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linprop::sigmoid;
use crate::rng::seeded;

/// True propensities are clamped to `[POSITIVITY_MARGIN, 1 - POSITIVITY_MARGIN]`.
pub const POSITIVITY_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// Linear outcome, linear-logistic assignment, constant effect.
    LinearConfounded,
    /// Interaction and threshold terms in both outcome and assignment, effect
    /// varying linearly in one covariate.
    Nonlinear,
    /// `LinearConfounded` with a zero effect.
    NullEffect,
}

impl std::str::FromStr for DgpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_confounded" => Ok(DgpKind::LinearConfounded),
            "nonlinear" => Ok(DgpKind::Nonlinear),
            "null_effect" => Ok(DgpKind::NullEffect),
            other => Err(Error::InvalidConfig(format!("unknown DGP kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub d: usize,
    pub n: usize,
    /// Constant effect, or the mean effect for `Nonlinear`.
    pub tau: f64,
    /// Confounding strength; 0 gives a fair coin.
    pub gamma: f64,
    pub sigma: f64,
    /// Slope of the effect in `x3` for `Nonlinear`.
    pub heterogeneity: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            kind: DgpKind::LinearConfounded,
            d: 10,
            n: 2000,
            tau: 10.0,
            gamma: 1.0,
            sigma: 1.0,
            heterogeneity: 1.0,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be at least 1".into()));
        }
        if self.kind == DgpKind::Nonlinear && self.d < 4 {
            return Err(Error::InvalidConfig("the nonlinear DGP needs d >= 4".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if ![self.tau, self.gamma, self.heterogeneity].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("tau, gamma and heterogeneity must be finite".into()));
        }
        Ok(())
    }
}

/// Fixed outcome coefficients: alternating signs, magnitudes cycling 1.0 .. 0.4.
pub fn outcome_coefficients(d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * (1.0 - 0.15 * (j % 5) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTable {
    pub x: Array2<f64>,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub e_true: Vec<f64>,
}

impl SyntheticTable {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn true_effects(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect()
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset::new(self.x.clone(), self.t.clone(), self.y.clone())
            .expect("generated tables are consistent")
    }

    /// Cohort with covariates `x0..`, the observed outcome in the early
    /// outcome column and no late outcome.
    pub fn to_cohort(&self) -> Cohort {
        let d = self.x.ncols();
        Cohort {
            names: (0..d).map(|j| format!("x{j}")).collect(),
            kinds: vec![CovariateKind::Numeric; d],
            observations: (0..self.n())
                .map(|i| Observation {
                    patient_id: format!("sim{i}"),
                    session_start: None,
                    session_end: None,
                    provenance: None,
                    x: self.x.row(i).iter().map(|&v| Some(v)).collect(),
                    t: self.t[i],
                    y_early: Some(self.y[i]),
                    y_late: None,
                    covariate_time: None,
                    outcome_times: [None, None],
                })
                .collect(),
        }
    }

    /// Cohort export format plus `y1`, `y0` and `e_true` columns.
    pub fn write<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_cohort(out, &self.to_cohort(), &[("y1", &self.y1), ("y0", &self.y0), ("e_true", &self.e_true)])
    }

    pub fn select(&self, idx: &[usize]) -> SyntheticTable {
        SyntheticTable {
            x: self.x.select(ndarray::Axis(0), idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            y1: idx.iter().map(|&i| self.y1[i]).collect(),
            y0: idx.iter().map(|&i| self.y0[i]).collect(),
            e_true: idx.iter().map(|&i| self.e_true[i]).collect(),
        }
    }
}

pub fn generate(spec: &DgpSpec, seed: u64) -> Result<SyntheticTable> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let (n, d) = (spec.n, spec.d);
    let beta = outcome_coefficients(d);
    let beta_norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    let tau = if spec.kind == DgpKind::NullEffect { 0.0 } else { spec.tau };

    let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut e_true = Vec::with_capacity(n);

    for row in x.rows() {
        let lin: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let score = lin / beta_norm;
        let (logit, base, effect) = match spec.kind {
            DgpKind::LinearConfounded | DgpKind::NullEffect => (spec.gamma * score, lin, tau),
            DgpKind::Nonlinear => {
                let inter = row[0] * row[1];
                let step = if row[2] > 0.0 { 1.0 } else { 0.0 };
                let logit = spec.gamma * (0.5 * score + inter + step - 0.5);
                let base = lin + 2.0 * inter + 2.0 * step;
                (logit, base, tau + spec.heterogeneity * row[3])
            }
        };
        let e = sigmoid(logit).clamp(POSITIVITY_MARGIN, 1.0 - POSITIVITY_MARGIN);
        let noise = if spec.sigma > 0.0 { spec.sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        let ti = u8::from(rng.random_bool(e));
        let v0 = base + noise;
        let v1 = v0 + effect;
        t.push(ti);
        y.push(if ti == 1 { v1 } else { v0 });
        y1.push(v1);
        y0.push(v0);
        e_true.push(e);
    }
    Ok(SyntheticTable { x, t, y, y1, y0, e_true })
}

/// Sample mean of `y1 - y0`.
pub fn true_ate(table: &SyntheticTable) -> f64 {
    if table.n() == 0 {
        return 0.0;
    }
    table.y1.iter().zip(&table.y0).map(|(a, b)| a - b).sum::<f64>() / table.n() as f64
}

pub fn epsilon_ate(estimate: f64, table: &SyntheticTable) -> f64 {
    (true_ate(table) - estimate).abs()
}

/// Mean squared error between estimated and true per-row effects.
pub fn epsilon_cate(tau_hat: &[f64], table: &SyntheticTable) -> Result<f64> {
    if tau_hat.len() != table.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} effect estimates for {} rows",
            tau_hat.len(),
            table.n()
        )));
    }
    if tau_hat.is_empty() {
        return Err(Error::Empty("no rows".into()));
    }
    Ok(tau_hat
        .iter()
        .zip(table.y1.iter().zip(&table.y0))
        .map(|(h, (a, b))| (h - (a - b)).powi(2))
        .sum::<f64>()
        / tau_hat.len() as f64)
}
