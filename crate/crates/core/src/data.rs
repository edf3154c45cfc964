use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Covariates, binary treatment and factual outcome for one estimation run.
///
/// Rows are observations. `t[i]` is 1 for treated (prone) rows and 0 for
/// controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, t: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, t, y, names)
    }

    pub fn with_names(
        x: Array2<f64>,
        t: Vec<u8>,
        y: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != t.len() || x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "x has {} rows, t has {}, y has {}",
                x.nrows(),
                t.len(),
                y.len()
            )));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        if let Some(bad) = t.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("treatment value {bad} is not 0/1")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariate or outcome".into()));
        }
        Ok(Self { x, t, y, feature_names })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn x_view(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.n_treated() as f64 / self.n() as f64
    }

    pub fn has_both_arms(&self) -> bool {
        let k = self.n_treated();
        k > 0 && k < self.n()
    }

    /// Rows at `indices`, repeats allowed (bootstrap multisets).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}
