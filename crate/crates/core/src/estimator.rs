//! One interface over the six estimators: fit on a training set, report the
//! ATE and factual predictions on a test set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bart::{bart_ate, bart_cv_select, bart_fit_dataset, bart_predict, BartConfig, GridPoint};
use crate::cfrnet::{cfr_ate, cfr_train, CfrConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linprop::{blocking_fit, clip_scores, dr_ipw_fit, fit_ols, fit_propensity, FeatureMode, IrlsOptions, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Lr,
    Dripw,
    Blocking,
    Bart,
    Tarnet,
    Cfr,
}

impl ModelTag {
    pub const ALL: [ModelTag; 6] =
        [ModelTag::Lr, ModelTag::Dripw, ModelTag::Blocking, ModelTag::Bart, ModelTag::Tarnet, ModelTag::Cfr];

    pub fn tag(self) -> &'static str {
        self.method().tag()
    }

    pub fn method(self) -> Method {
        match self {
            ModelTag::Lr => Method::Lr,
            ModelTag::Dripw => Method::DrIpw,
            ModelTag::Blocking => Method::Blocking,
            ModelTag::Bart => Method::Bart,
            ModelTag::Tarnet => Method::Tarnet,
            ModelTag::Cfr => Method::Cfr,
        }
    }

    /// Table label.
    pub fn label(self) -> &'static str {
        match self {
            ModelTag::Lr => "LR",
            ModelTag::Dripw => "DR-IPW",
            ModelTag::Blocking => "Blocking",
            ModelTag::Bart => "BART",
            ModelTag::Tarnet => "TARNet",
            ModelTag::Cfr => "CfR",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, ModelTag::Tarnet | ModelTag::Cfr)
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelTag::ALL.into_iter().find(|m| m.tag() == s.trim()).ok_or_else(|| {
            let valid: Vec<&str> = ModelTag::ALL.iter().map(|m| m.tag()).collect();
            Error::InvalidConfig(format!("unknown model tag `{s}`; valid tags: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensityConfig {
    pub mode: FeatureMode,
    pub clip_floor: f64,
    pub clip_ceiling: Option<f64>,
    pub n_blocks: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        let irls = IrlsOptions::default();
        Self {
            mode: FeatureMode::AllCovariates,
            clip_floor: 0.1,
            clip_ceiling: None,
            n_blocks: 5,
            max_iter: irls.max_iter,
            rel_tol: irls.rel_tol,
        }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_floor > 0.0 && self.clip_floor < 0.5) {
            return Err(Error::InvalidConfig("propensity clip floor must lie in (0, 0.5)".into()));
        }
        if let Some(c) = self.clip_ceiling {
            if !(c > self.clip_floor && c < 1.0) {
                return Err(Error::InvalidConfig("propensity clip ceiling must lie in (floor, 1)".into()));
            }
        }
        if self.n_blocks == 0 || self.max_iter == 0 || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("propensity: n_blocks, max_iter and rel_tol must be positive".into()));
        }
        Ok(())
    }

    fn irls(&self) -> IrlsOptions {
        IrlsOptions { max_iter: self.max_iter, rel_tol: self.rel_tol }
    }
}

/// Per-model settings for every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub propensity: PropensityConfig,
    pub bart: BartConfig,
    /// When non-empty, BART hyperparameters are picked by cross-validation
    /// on the training set before fitting.
    pub bart_grid: Vec<GridPoint>,
    pub bart_folds: usize,
    #[serde(deserialize_with = "crate::cfrnet::deserialize_tarnet")]
    pub tarnet: CfrConfig,
    pub cfr: CfrConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            propensity: PropensityConfig::default(),
            bart: BartConfig::default(),
            bart_grid: Vec::new(),
            bart_folds: 5,
            tarnet: CfrConfig::tarnet(),
            cfr: CfrConfig::cfr(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.propensity.validate()?;
        self.bart.validate()?;
        self.tarnet.validate()?;
        self.cfr.validate()
    }

    pub fn neural(&self, tag: ModelTag) -> Option<&CfrConfig> {
        match tag {
            ModelTag::Tarnet => Some(&self.tarnet),
            ModelTag::Cfr => Some(&self.cfr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub ate: f64,
    /// Factual predictions for the test rows.
    pub test_predictions: Vec<f64>,
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut x = a.x.clone();
    for r in b.x.rows() {
        x.push_row(r).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    }
    let t = a.t.iter().chain(&b.t).copied().collect();
    let y = a.y.iter().chain(&b.y).copied().collect();
    Dataset::with_names(x, t, y, a.feature_names.clone())
}

/// Fits `tag` and evaluates it on `test`. Neural models train on `train` and
/// stop early on `validation`; every other model trains on both together.
pub fn fit_and_evaluate(
    tag: ModelTag,
    config: &ModelConfig,
    train: &Dataset,
    validation: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<FitOutcome> {
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if tag.is_neural() {
        let cfg = CfrConfig { seed, ..config.neural(tag).expect("neural tag").clone() };
        let (model, _) = cfr_train(train, validation, &cfg)?;
        return Ok(FitOutcome {
            ate: cfr_ate(&model, test.x_view())?.value,
            test_predictions: model.predict_factual(test.x_view(), &test.t)?,
        });
    }

    let data = if validation.is_empty() { train.clone() } else { concat(train, validation)? };
    match tag {
        ModelTag::Lr => {
            let fit = fit_ols(data.x_view(), &data.t, &data.y, None)?;
            Ok(FitOutcome { ate: fit.treatment, test_predictions: fit.predict(test.x_view(), &test.t) })
        }
        ModelTag::Dripw | ModelTag::Blocking => {
            let p = &config.propensity;
            let model = fit_propensity(data.x_view(), &data.t, p.mode.clone(), p.irls())?;
            let scores = clip_scores(&model.predict(data.x_view())?, p.clip_floor, p.clip_ceiling).values;
            let test_scores = clip_scores(&model.predict(test.x_view())?, p.clip_floor, p.clip_ceiling).values;
            if tag == ModelTag::Dripw {
                let fit = dr_ipw_fit(data.x_view(), &data.t, &data.y, &scores)?;
                Ok(FitOutcome { ate: fit.treatment, test_predictions: fit.predict(test.x_view(), &test.t) })
            } else {
                let fit = blocking_fit(data.x_view(), &data.t, &data.y, &scores, p.n_blocks)?;
                // Block effects weighted by how many test rows fall in each block.
                let mut counts = vec![0usize; fit.blocks.len()];
                for &s in &test_scores {
                    counts[fit.block_of(s)] += 1;
                }
                let ate = fit.blocks.iter().zip(&counts).map(|(b, &c)| b.fit.treatment * c as f64).sum::<f64>()
                    / test.n() as f64;
                Ok(FitOutcome { ate, test_predictions: fit.predict(test.x_view(), &test.t, &test_scores) })
            }
        }
        ModelTag::Bart => {
            let mut cfg = BartConfig { seed, ..config.bart.clone() };
            if !config.bart_grid.is_empty() {
                cfg = bart_cv_select(&data, &cfg, &config.bart_grid, config.bart_folds)?.config;
            }
            let post = bart_fit_dataset(&data, &cfg)?;
            Ok(FitOutcome {
                ate: bart_ate(&post, test.x_view())?.value,
                test_predictions: bart_predict(&post, test.x_view(), &test.t)?,
            })
        }
        ModelTag::Tarnet | ModelTag::Cfr => unreachable!("handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for m in ModelTag::ALL {
            assert_eq!(m.tag().parse::<ModelTag>().unwrap(), m);
        }
        let err = "xyz".parse::<ModelTag>().unwrap_err().to_string();
        assert!(err.contains("lr, dripw, blocking, bart, tarnet, cfr"), "{err}");
    }

    #[test]
    fn neural_defaults_differ_only_in_alpha() {
        let c = ModelConfig::default();
        assert_eq!(c.cfr.alpha, 1.0);
        assert_eq!(c.tarnet.alpha, 0.0);
        assert_eq!(CfrConfig { alpha: 1.0, ..c.tarnet.clone() }, c.cfr);
        c.validate().unwrap();
    }
}
