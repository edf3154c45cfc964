//! Bootstrap evaluation protocol.
//!
//! Every model is refit on `B` resamples (with replacement, `⌈frac·n⌉`
//! rows) of the development set and scored on one fixed test set. The
//! replicate ATEs and factual RMSEs are summarized by their mean and a
//! percentile interval, and the models are compared against each other and
//! against the randomized-trial reference.

use std::fmt::Write as _;
use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Outcome, OutcomeData};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{fit_and_evaluate, ModelConfig, ModelTag};
use crate::linprop::{clip_scores, fit_propensity, overlap_histogram, sorted_quantile, IrlsOptions, OverlapHistogram};
use crate::reference::{Interval, ReferenceRow, TARGET_TRIAL_ATE};
use crate::rng::{derive_seed, seeded};

/// A model that fails on more than this share of replicates is reported as failed.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub frac: f64,
    pub seed: u64,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self { replicates: 100, frac: 0.95, seed: 0 }
    }
}

impl BootstrapPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("bootstrap needs at least one replicate".into()));
        }
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return Err(Error::InvalidConfig(format!("bootstrap fraction {} outside (0, 1]", self.frac)));
        }
        Ok(())
    }

    pub fn resample_size(&self, n: usize) -> usize {
        (self.frac * n as f64).ceil() as usize
    }
}

/// `⌈frac·n⌉` row indices drawn uniformly with replacement, determined by
/// `(plan.seed, replicate)`.
pub fn bootstrap_indices(plan: &BootstrapPlan, n: usize, replicate: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = seeded(derive_seed(plan.seed, "bootstrap", replicate as u64));
    (0..plan.resample_size(n)).map(|_| rng.random_range(0..n)).collect()
}

pub fn rmse_factual(predictions: &[f64], y: &[f64]) -> Result<f64> {
    if predictions.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} outcomes", predictions.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::Empty("no outcomes to score".into()));
    }
    let sse: f64 = predictions.iter().zip(y).map(|(p, v)| (p - v) * (p - v)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Empirical quantiles at `(1-level)/2` and `1-(1-level)/2`, linearly
/// interpolated between order statistics.
pub fn percentile_ci(samples: &[f64], level: f64) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (sorted_quantile(&s, a), sorted_quantile(&s, 1.0 - a))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(samples: &[f64]) -> Interval {
    let (lo, hi) = percentile_ci(samples, 0.95);
    Interval::new(mean(samples), lo, hi)
}

/// Difference in mean outcome between treated and control rows.
pub fn unadjusted_effect(t: &[u8], y: &[f64]) -> Result<f64> {
    if t.len() != y.len() {
        return Err(Error::DimensionMismatch("treatment and outcome lengths differ".into()));
    }
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&ti, &yi) in t.iter().zip(y) {
        if ti == 1 {
            s1 += yi;
            n1 += 1;
        } else {
            s0 += yi;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::InvalidInput("unadjusted effect needs both arms".into()));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Point estimate on `data` and a percentile interval from the plan's resamples.
pub fn unadjusted_with_ci(data: &Dataset, plan: &BootstrapPlan) -> Result<Interval> {
    let point = unadjusted_effect(&data.t, &data.y)?;
    let samples: Vec<f64> = (0..plan.replicates)
        .filter_map(|r| {
            let idx = bootstrap_indices(plan, data.n(), r);
            let t: Vec<u8> = idx.iter().map(|&i| data.t[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| data.y[i]).collect();
            unadjusted_effect(&t, &y).ok()
        })
        .collect();
    let (lo, hi) = percentile_ci(&samples, 0.95);
    Ok(Interval::new(point, lo, hi))
}

/// Box-and-whisker data: whiskers at the 95% interval, box at the quartiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boxplot {
    pub lo: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub hi: f64,
}

pub fn boxplot(samples: &[f64]) -> Boxplot {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| if s.is_empty() { f64::NAN } else { sorted_quantile(&s, p) };
    Boxplot { lo: q(0.025), q1: q(0.25), median: q(0.5), q3: q(0.75), hi: q(0.975) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub tag: ModelTag,
    /// Per successful replicate, in replicate order.
    pub ate_samples: Vec<f64>,
    pub rmse_samples: Vec<f64>,
    pub ate: Interval,
    pub rmse: Interval,
    pub failures: usize,
    pub failed: bool,
    /// First error message per distinct failure, with its replicate.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementFlags {
    /// Every non-failed model's ATE interval lies strictly above zero.
    pub all_above_zero: bool,
    /// Largest difference between two models' ATE means.
    pub max_gap: f64,
    /// Whether each model's interval overlaps the reference interval.
    pub overlaps_reference: Vec<(ModelTag, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub outcome: Option<Outcome>,
    pub models: Vec<ModelResult>,
    pub unadjusted: Interval,
    pub reference: Interval,
    pub flags: AgreementFlags,
    pub plan: BootstrapPlan,
    pub n_development: usize,
    pub n_test: usize,
    /// Size of every drawn resample, in replicate order.
    pub resample_sizes: Vec<usize>,
    pub overlap: Option<OverlapHistogram>,
}

/// Maximum pairwise gap and interval checks over a set of model summaries.
pub fn agreement_flags(rows: &[(ModelTag, Interval)], reference: &Interval) -> AgreementFlags {
    let means: Vec<f64> = rows.iter().map(|r| r.1.mean).collect();
    let max_gap = if means.is_empty() {
        0.0
    } else {
        means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    AgreementFlags {
        all_above_zero: !rows.is_empty() && rows.iter().all(|r| r.1.lo > 0.0),
        max_gap,
        overlaps_reference: rows.iter().map(|r| (r.0, r.1.overlaps(reference))).collect(),
    }
}

pub fn agreement(report: &AgreementReport) -> AgreementFlags {
    let rows: Vec<(ModelTag, Interval)> = report.models.iter().filter(|m| !m.failed).map(|m| (m.tag, m.ate)).collect();
    agreement_flags(&rows, &report.reference)
}

/// Splits a resample of the development rows (train rows first, then
/// validation rows) back into its train and validation parts.
fn resample_parts(train: &Dataset, validation: &Dataset, idx: &[usize]) -> (Dataset, Dataset) {
    let n_train = train.n();
    let tr: Vec<usize> = idx.iter().filter(|&&i| i < n_train).copied().collect();
    let va: Vec<usize> = idx.iter().filter(|&&i| i >= n_train).map(|&i| i - n_train).collect();
    (train.select(&tr), validation.select(&va))
}

/// Runs every model on every replicate. Jobs run concurrently; results are
/// assembled in (model, replicate) order so the report does not depend on
/// scheduling.
pub fn run_protocol(
    data: &OutcomeData,
    outcome: Option<Outcome>,
    models: &[ModelTag],
    config: &ModelConfig,
    plan: &BootstrapPlan,
) -> Result<AgreementReport> {
    plan.validate()?;
    config.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidConfig("no models to evaluate".into()));
    }
    let dev = data.development();
    let n_dev = dev.n();
    if n_dev == 0 || data.test.is_empty() {
        return Err(Error::Empty("development or test set".into()));
    }
    let resamples: Vec<Vec<usize>> = (0..plan.replicates).map(|r| bootstrap_indices(plan, n_dev, r)).collect();

    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..plan.replicates).map(move |r| (m, r))).collect();
    let results: Vec<Result<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(m, r)| {
            let tag = models[m];
            let (tr, va) = resample_parts(&data.train, &data.validation, &resamples[r]);
            let seed = derive_seed(plan.seed, tag.tag(), r as u64);
            let fit = fit_and_evaluate(tag, config, &tr, &va, &data.test, seed)?;
            Ok((fit.ate, rmse_factual(&fit.test_predictions, &data.test.y)?))
        })
        .collect();

    let mut out = Vec::with_capacity(models.len());
    for (m, &tag) in models.iter().enumerate() {
        let mut ate_samples = Vec::new();
        let mut rmse_samples = Vec::new();
        let mut failures = 0;
        let mut diagnostics: Vec<String> = Vec::new();
        for r in 0..plan.replicates {
            match &results[m * plan.replicates + r] {
                Ok((a, e)) => {
                    ate_samples.push(*a);
                    rmse_samples.push(*e);
                }
                Err(err) => {
                    failures += 1;
                    let msg = err.to_string();
                    if !diagnostics.iter().any(|d| d.ends_with(&msg)) {
                        diagnostics.push(format!("replicate {r}: {msg}"));
                    }
                }
            }
        }
        let failed = ate_samples.is_empty() || failures as f64 > MAX_FAILURE_RATE * plan.replicates as f64;
        if failures > 0 {
            log::warn!("{tag}: {failures} of {} replicates failed", plan.replicates);
        }
        out.push(ModelResult {
            tag,
            ate: summarize(&ate_samples),
            rmse: summarize(&rmse_samples),
            ate_samples,
            rmse_samples,
            failures,
            failed,
            diagnostics,
        });
    }

    let overlap = fit_propensity(dev.x_view(), &dev.t, config.propensity.mode.clone(), IrlsOptions {
        max_iter: config.propensity.max_iter,
        rel_tol: config.propensity.rel_tol,
    })
    .and_then(|m| m.predict(dev.x_view()))
    .map(|s| clip_scores(&s, config.propensity.clip_floor, config.propensity.clip_ceiling).values)
    .and_then(|s| overlap_histogram(&s, &dev.t, 20))
    .ok();

    let mut report = AgreementReport {
        outcome,
        models: out,
        unadjusted: unadjusted_with_ci(&dev, plan)?,
        reference: TARGET_TRIAL_ATE,
        flags: agreement_flags(&[], &TARGET_TRIAL_ATE),
        plan: *plan,
        n_development: n_dev,
        n_test: data.test.n(),
        resample_sizes: resamples.iter().map(Vec::len).collect(),
        overlap,
    };
    report.flags = agreement(&report);
    Ok(report)
}

fn fmt_interval(i: &Interval) -> String {
    format!("{:.2} ({:.2}, {:.2})", i.mean, i.lo, i.hi)
}

impl AgreementReport {
    /// Rows shaped like the published results table:
    /// `[model, ATE (lo, hi), RMSE (lo, hi)]`.
    pub fn table_rows(&self) -> Vec<[String; 3]> {
        self.models
            .iter()
            .map(|m| {
                if m.failed {
                    [m.tag.label().to_string(), "failed".into(), "failed".into()]
                } else {
                    [m.tag.label().to_string(), fmt_interval(&m.ate), fmt_interval(&m.rmse)]
                }
            })
            .collect()
    }

    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "ate_mean", "ate_lo", "ate_hi", "rmse_mean", "rmse_lo", "rmse_hi", "failures", "failed"])?;
        for m in &self.models {
            w.write_record([
                m.tag.tag().to_string(),
                m.ate.mean.to_string(),
                m.ate.lo.to_string(),
                m.ate.hi.to_string(),
                m.rmse.mean.to_string(),
                m.rmse.lo.to_string(),
                m.rmse.hi.to_string(),
                m.failures.to_string(),
                m.failed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_boxplots<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "lo", "q1", "median", "q3", "hi"])?;
        for m in &self.models {
            let b = boxplot(&m.ate_samples);
            w.write_record([m.tag.tag().to_string(), b.lo.to_string(), b.q1.to_string(), b.median.to_string(), b.q3.to_string(), b.hi.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_samples<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "replicate", "ate", "rmse"])?;
        for m in &self.models {
            for (k, (a, e)) in m.ate_samples.iter().zip(&m.rmse_samples).enumerate() {
                w.write_record([m.tag.tag().to_string(), k.to_string(), a.to_string(), e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_overlap<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "treated", "control"])?;
        if let Some(h) = &self.overlap {
            for k in 0..h.treated.len() {
                w.write_record([h.edges[k].to_string(), h.edges[k + 1].to_string(), h.treated[k].to_string(), h.control[k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Nested key/value summary of every estimate, interval and flag.
    pub fn summary(&self, published: Option<&[ReferenceRow]>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        if let Some(o) = self.outcome {
            let _ = writeln!(s, "outcome = \"{o}\"");
        }
        let _ = writeln!(s, "replicates = {}", self.plan.replicates);
        let _ = writeln!(s, "resample_fraction = {}", self.plan.frac);
        let _ = writeln!(s, "seed = {}", self.plan.seed);
        let _ = writeln!(s, "n_development = {}", self.n_development);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        let _ = writeln!(s, "resample_size = {}", self.resample_sizes.first().copied().unwrap_or(0));
        let _ = writeln!(s, "\n[reference]");
        let _ = writeln!(s, "line = \"target-trial ATE {} ({}, {})\"", self.reference.mean, self.reference.lo, self.reference.hi);
        let _ = writeln!(s, "\n[unadjusted]");
        let _ = writeln!(s, "mean = {}\nlo = {}\nhi = {}", self.unadjusted.mean, self.unadjusted.lo, self.unadjusted.hi);
        let _ = writeln!(s, "\n[agreement]");
        let _ = writeln!(s, "all_above_zero = {}", self.flags.all_above_zero);
        let _ = writeln!(s, "max_gap = {}", self.flags.max_gap);
        for (tag, ok) in &self.flags.overlaps_reference {
            let _ = writeln!(s, "overlaps_reference.{tag} = {ok}");
        }
        for m in &self.models {
            let _ = writeln!(s, "\n[models.{}]", m.tag);
            let _ = writeln!(s, "failed = {}\nfailures = {}", m.failed, m.failures);
            let _ = writeln!(s, "ate = {{ mean = {}, lo = {}, hi = {} }}", m.ate.mean, m.ate.lo, m.ate.hi);
            let _ = writeln!(s, "rmse = {{ mean = {}, lo = {}, hi = {} }}", m.rmse.mean, m.rmse.lo, m.rmse.hi);
            for d in &m.diagnostics {
                let _ = writeln!(s, "# {d}");
            }
            if let Some(p) = published.and_then(|rows| rows.iter().find(|r| r.method == m.tag.method())) {
                let _ = writeln!(s, "published_ate = {{ mean = {}, lo = {}, hi = {} }}", p.ate.mean, p.ate.lo, p.ate.hi);
                let _ = writeln!(s, "published_rmse = {{ mean = {}, lo = {}, hi = {} }}", p.rmse.mean, p.rmse.lo, p.rmse.hi);
            }
        }
        s
    }

    /// Human-readable table with the reference line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<26} {:<26}", "model", "ATE (95% CI)", "RMSE (95% CI)");
        for [m, a, r] in self.table_rows() {
            let _ = writeln!(s, "{m:<10} {a:<26} {r:<26}");
        }
        let _ = writeln!(s, "unadjusted {}", fmt_interval(&self.unadjusted));
        let _ = writeln!(s, "target-trial ATE {} ({}, {})", self.reference.mean, self.reference.lo, self.reference.hi);
        s
    }
}
