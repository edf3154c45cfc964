//! Counterfactual regression: a shared representation `Φ` feeding one
//! outcome head per arm, trained on the weighted factual loss plus an
//! optimal-transport imbalance penalty between the treated and control
//! representations. With `alpha = 0` this is TARNet.
//!
//! Inputs are standardized with training-split statistics and so is the
//! outcome; predictions are mapped back to the original outcome scale.

pub mod net;
pub mod ot;

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linprop::{AteEstimate, Method};
use crate::rng::{derive_seed, seeded};
use net::{Adam, AdamOptions, Mlp};
pub use ot::{wasserstein_approx, wasserstein_exact, SinkhornOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfrConfig {
    /// Imbalance penalty weight; 0 gives TARNet.
    pub alpha: f64,
    /// Squared-norm weight decay on head parameters.
    pub lambda: f64,
    pub rep_layers: usize,
    pub rep_width: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub transport: SinkhornOptions,
}

impl Default for CfrConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 1e-4,
            rep_layers: 3,
            rep_width: 200,
            head_layers: 3,
            head_width: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 128,
            patience: 10,
            max_epochs: 300,
            seed: 0,
            transport: SinkhornOptions::default(),
        }
    }
}

impl CfrConfig {
    pub fn cfr() -> Self {
        Self::default()
    }

    pub fn tarnet() -> Self {
        Self { alpha: 0.0, ..Self::default() }
    }

    pub fn method(&self) -> Method {
        if self.alpha > 0.0 {
            Method::Cfr
        } else {
            Method::Tarnet
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("cfr: {m}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.rep_layers == 0 || self.rep_width == 0 || self.head_layers == 0 || self.head_width == 0 {
            return bad("layer counts and widths must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer settings out of range");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, patience and max epochs must be positive");
        }
        self.transport.validate()
    }
}

macro_rules! cfr_overrides {
    ($($field:ident: $ty:ty),* $(,)?) => {
        /// A config table whose missing keys are filled from a chosen base.
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct CfrOverrides {
            $(#[serde(default)] $field: Option<$ty>,)*
        }

        impl CfrOverrides {
            fn apply(self, mut base: CfrConfig) -> CfrConfig {
                $(if let Some(v) = self.$field { base.$field = v; })*
                base
            }
        }
    };
}

cfr_overrides!(
    alpha: f64,
    lambda: f64,
    rep_layers: usize,
    rep_width: usize,
    head_layers: usize,
    head_width: usize,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    batch_size: usize,
    patience: usize,
    max_epochs: usize,
    seed: u64,
    transport: SinkhornOptions,
);

/// Reads a partial table on top of [`CfrConfig::tarnet`], so that keys left
/// out keep `alpha = 0`.
pub fn deserialize_tarnet<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CfrConfig, D::Error> {
    Ok(CfrOverrides::deserialize(d)?.apply(CfrConfig::tarnet()))
}

/// `w = (t/u + (1-t)/(1-u)) / 2` with `u` the treated fraction.
pub fn sample_weight(t: u8, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidInput(format!("treated fraction must lie in (0, 1), got {u}")));
    }
    Ok(if t == 1 { 0.5 / u } else { 0.5 / (1.0 - u) })
}

/// Trainable parameters: the representation and the control/treated heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub rep: Mlp,
    pub heads: [Mlp; 2],
}

impl Network {
    fn zeros_like(&self) -> Self {
        Self { rep: self.rep.zeros_like(), heads: [self.heads[0].zeros_like(), self.heads[1].zeros_like()] }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.rep.tensors();
        v.extend(self.heads[0].tensors());
        v.extend(self.heads[1].tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let [h0, h1] = &mut self.heads;
        let mut v = self.rep.tensors_mut();
        v.extend(h0.tensors_mut());
        v.extend(h1.tensors_mut());
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfrModel {
    pub net: Network,
    pub x_mean: Array1<f64>,
    pub x_scale: Array1<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    /// Treated fraction used for the sample weights.
    pub treated_fraction: f64,
    pub method: Method,
}

impl CfrModel {
    /// Freshly initialized network with identity standardization.
    pub fn init(d: usize, config: &CfrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if d == 0 {
            return Err(Error::InvalidInput("no covariates".into()));
        }
        let mut rng = seeded(seed);
        let mut rep_w = vec![d];
        rep_w.extend(std::iter::repeat_n(config.rep_width, config.rep_layers));
        let mut head_w = vec![config.rep_width];
        head_w.extend(std::iter::repeat_n(config.head_width, config.head_layers));
        head_w.push(1);
        let rep = Mlp::init(&rep_w, false, &mut rng);
        let h0 = Mlp::init(&head_w, true, &mut rng);
        let h1 = Mlp::init(&head_w, true, &mut rng);
        Ok(Self {
            net: Network { rep, heads: [h0, h1] },
            x_mean: Array1::zeros(d),
            x_scale: Array1::ones(d),
            y_mean: 0.0,
            y_scale: 1.0,
            treated_fraction: 0.5,
            method: config.method(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.x_mean.len()
    }

    /// `(fan_in, fan_out)` of every dense layer: representation, then head 0, then head 1.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let it = self.net.rep.layers.iter().chain(self.net.heads[0].layers.iter()).chain(self.net.heads[1].layers.iter());
        it.map(|l| l.w.dim()).collect()
    }

    fn check_dim(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} covariates, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.x_mean) / &self.x_scale
    }

    /// Unit-norm representation of raw covariates.
    pub fn represent(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let h = self.net.rep.forward(self.standardize(x).view());
        Ok(normalize_rows(&h).0)
    }

    /// Both potential outcomes on the original outcome scale, `(y0, y1)`.
    pub fn potential_outcomes(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let phi = self.represent(x)?;
        let un = |a: Array2<f64>| a.column(0).iter().map(|v| v * self.y_scale + self.y_mean).collect::<Vec<_>>();
        Ok((un(self.net.heads[0].forward(phi.view())), un(self.net.heads[1].forward(phi.view()))))
    }

    pub fn predict_factual(&self, x: ArrayView2<'_, f64>, t: &[u8]) -> Result<Vec<f64>> {
        if t.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!("{} rows but {} treatments", x.nrows(), t.len())));
        }
        let (y0, y1) = self.potential_outcomes(x)?;
        Ok(t.iter().enumerate().map(|(i, &ti)| if ti == 1 { y1[i] } else { y0[i] }).collect())
    }
}

/// Rows scaled to unit norm, with their original norms. A row that is
/// numerically zero maps to the constant unit vector and its norm is
/// reported as infinite, which zeroes its gradient.
fn normalize_rows(h: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let fallback = 1.0 / (h.ncols() as f64).sqrt();
    let mut phi = h.clone();
    let mut norms = Vec::with_capacity(h.nrows());
    for mut row in phi.rows_mut() {
        let r = row.dot(&row).sqrt();
        if r > 1e-12 {
            row /= r;
            norms.push(r);
        } else {
            row.fill(fallback);
            norms.push(f64::INFINITY);
        }
    }
    (phi, norms)
}

/// Loss components on the internal (standardized) outcome scale.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub factual: f64,
    pub decay: f64,
    pub imbalance: f64,
    /// The batch held a single arm, so the imbalance term was skipped.
    pub penalty_skipped: bool,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.factual + self.decay + self.imbalance
    }
}

/// Objective and (optionally) its gradient on standardized inputs.
fn objective(
    net: &Network,
    xs: ArrayView2<'_, f64>,
    t: &[u8],
    ys: &[f64],
    w: &[f64],
    lambda: f64,
    alpha: f64,
    transport: &SinkhornOptions,
    want_grad: bool,
) -> Result<(LossParts, Option<Network>)> {
    let n = xs.nrows();
    let (h, rep_cache) = net.rep.forward_cached(xs);
    let (phi, norms) = normalize_rows(&h);
    let arms: [Vec<usize>; 2] = [
        (0..n).filter(|&i| t[i] == 0).collect(),
        (0..n).filter(|&i| t[i] == 1).collect(),
    ];
    let mut parts = LossParts::default();
    let mut grad = want_grad.then(|| net.zeros_like());
    let mut dphi = Array2::<f64>::zeros(phi.raw_dim());

    for (k, idx) in arms.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let phi_k = phi.select(Axis(0), idx);
        let (pred, cache) = net.heads[k].forward_cached(phi_k.view());
        let mut dpred = Array2::<f64>::zeros((idx.len(), 1));
        for (r, &i) in idx.iter().enumerate() {
            let e = pred[(r, 0)] - ys[i];
            parts.factual += w[i] * e * e / n as f64;
            dpred[(r, 0)] = 2.0 * w[i] * e / n as f64;
        }
        if let Some(g) = grad.as_mut() {
            let d = net.heads[k].backward(&cache, dpred, &mut g.heads[k]);
            for (r, &i) in idx.iter().enumerate() {
                dphi.row_mut(i).assign(&d.row(r));
            }
        }
    }

    parts.decay = lambda * (net.heads[0].sq_norm() + net.heads[1].sq_norm());
    if let Some(g) = grad.as_mut() {
        for k in 0..2 {
            for (gt, pt) in g.heads[k].tensors_mut().into_iter().zip(net.heads[k].tensors()) {
                for (gv, pv) in gt.iter_mut().zip(pt) {
                    *gv += 2.0 * lambda * pv;
                }
            }
        }
    }

    if alpha > 0.0 {
        if arms[0].is_empty() || arms[1].is_empty() {
            parts.penalty_skipped = true;
        } else {
            let p1 = phi.select(Axis(0), &arms[1]);
            let p0 = phi.select(Axis(0), &arms[0]);
            let sol = ot::wasserstein_solve(p1.view(), p0.view(), transport)?;
            parts.imbalance = alpha * sol.distance;
            if want_grad {
                let (g1, g0) = sol.gradients(p1.view(), p0.view());
                for (r, &i) in arms[1].iter().enumerate() {
                    dphi.row_mut(i).scaled_add(alpha, &g1.row(r));
                }
                for (r, &i) in arms[0].iter().enumerate() {
                    dphi.row_mut(i).scaled_add(alpha, &g0.row(r));
                }
            }
        }
    }

    if let Some(g) = grad.as_mut() {
        // d(h/|h|) = (I - phi phi^T) / |h|
        let mut dh = dphi;
        for (i, mut row) in dh.rows_mut().into_iter().enumerate() {
            let proj = row.dot(&phi.row(i));
            row.scaled_add(-proj, &phi.row(i));
            row /= norms[i];
        }
        net.rep.backward(&rep_cache, dh, &mut g.rep);
    }
    Ok((parts, grad))
}

struct Prepared {
    xs: Array2<f64>,
    ys: Vec<f64>,
    w: Vec<f64>,
}

fn prepare(model: &CfrModel, batch: &Dataset) -> Result<Prepared> {
    if batch.is_empty() {
        return Err(Error::Empty("cfr batch".into()));
    }
    model.check_dim(batch.x_view())?;
    let xs = model.standardize(batch.x_view());
    let ys = batch.y.iter().map(|v| (v - model.y_mean) / model.y_scale).collect();
    let w = batch.t.iter().map(|&t| sample_weight(t, model.treated_fraction)).collect::<Result<_>>()?;
    Ok(Prepared { xs, ys, w })
}

/// Loss components of `model` on a batch, with weights from the model's
/// treated fraction and outcomes on the model's internal scale.
pub fn cfr_loss_parts(model: &CfrModel, batch: &Dataset, config: &CfrConfig) -> Result<LossParts> {
    let p = prepare(model, batch)?;
    let (parts, _) =
        objective(&model.net, p.xs.view(), &batch.t, &p.ys, &p.w, config.lambda, config.alpha, &config.transport, false)?;
    if parts.penalty_skipped {
        log::warn!("single-arm batch: imbalance penalty skipped");
    }
    Ok(parts)
}

pub fn cfr_loss(model: &CfrModel, batch: &Dataset, config: &CfrConfig) -> Result<f64> {
    Ok(cfr_loss_parts(model, batch, config)?.total())
}

/// Loss and its gradient, one flat vector per parameter tensor in
/// [`Network::tensors`] order.
pub fn cfr_loss_and_grad(model: &CfrModel, batch: &Dataset, config: &CfrConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let p = prepare(model, batch)?;
    let (parts, grad) =
        objective(&model.net, p.xs.view(), &batch.t, &p.ys, &p.w, config.lambda, config.alpha, &config.transport, true)?;
    let grad = grad.expect("gradient requested");
    Ok((parts.total(), grad.tensors().iter().map(|t| t.to_vec()).collect()))
}

/// Coordinates sampled per parameter tensor by [`gradient_check`].
pub const GRADIENT_CHECK_SAMPLES: usize = 16;

/// Largest relative discrepancy between analytic and central finite
/// difference gradients of the loss with the imbalance term disabled, over
/// a seeded sample of coordinates from every tensor.
pub fn gradient_check(model: &CfrModel, batch: &Dataset, config: &CfrConfig) -> Result<f64> {
    let cfg = CfrConfig { alpha: 0.0, ..config.clone() };
    let (_, grad) = cfr_loss_and_grad(model, batch, &cfg)?;
    let mut rng = seeded(derive_seed(config.seed, "gradient-check", 0));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (k, g) in grad.iter().enumerate() {
        for _ in 0..GRADIENT_CHECK_SAMPLES.min(g.len()) {
            let i = rng.random_range(0..g.len());
            let orig = probe.net.tensors()[k][i];
            probe.net.tensors_mut()[k][i] = orig + h;
            let up = cfr_loss(&probe, batch, &cfg)?;
            probe.net.tensors_mut()[k][i] = orig - h;
            let down = cfr_loss(&probe, batch, &cfg)?;
            probe.net.tensors_mut()[k][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-7);
            worst = worst.max((g[i] - fd).abs() / scale);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    /// Mean minibatch objective per epoch.
    pub train_objective: Vec<f64>,
    /// Weighted factual MSE plus `alpha * Wass` on the validation split.
    pub validation_loss: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub skipped_penalty_batches: usize,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_objective", "validation_loss", "best"])?;
        for (e, (tr, va)) in self.train_objective.iter().zip(&self.validation_loss).enumerate() {
            let epoch = e + 1;
            w.write_record([
                epoch.to_string(),
                tr.to_string(),
                va.to_string(),
                u8::from(epoch == self.best_epoch).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn column_stats(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let var = x.var_axis(Axis(0), 0.0);
    let scale = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    (mean, scale)
}

/// Minibatch Adam on the objective with early stopping on the validation
/// surrogate. `train` and `validation` must be disjoint row sets.
pub fn cfr_train(train: &Dataset, validation: &Dataset, config: &CfrConfig) -> Result<(CfrModel, TrainTrace)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Empty("cfr training needs nonempty train and validation splits".into()));
    }
    if validation.d() != train.d() {
        return Err(Error::DimensionMismatch("train and validation covariates differ".into()));
    }
    let u = train.treated_fraction();
    sample_weight(1, u)?;

    let mut model = CfrModel::init(train.d(), config, derive_seed(config.seed, "cfr-init", 0))?;
    let (xm, xs) = column_stats(train.x_view());
    model.x_mean = xm;
    model.x_scale = xs;
    let y = Array1::from(train.y.clone());
    model.y_mean = y.mean().expect("nonempty");
    let ysd = y.std(0.0);
    model.y_scale = if ysd > 1e-12 { ysd } else { 1.0 };
    model.treated_fraction = u;

    let tr = prepare(&model, train)?;
    let va = prepare(&model, validation)?;
    let mut adam = Adam::new(
        &model.net.tensors().iter().map(|t| t.len()).collect::<Vec<_>>(),
        AdamOptions { lr: config.learning_rate, beta1: config.beta1, beta2: config.beta2, eps: 1e-8 },
    );
    let mut rng = seeded(derive_seed(config.seed, "cfr-shuffle", 0));
    let mut order: Vec<usize> = (0..train.n()).collect();
    let mut trace = TrainTrace::default();
    let mut best = (f64::INFINITY, model.net.clone());
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb = tr.xs.select(Axis(0), chunk);
            let tb: Vec<u8> = chunk.iter().map(|&i| train.t[i]).collect();
            let yb: Vec<f64> = chunk.iter().map(|&i| tr.ys[i]).collect();
            let wb: Vec<f64> = chunk.iter().map(|&i| tr.w[i]).collect();
            let (parts, grad) =
                objective(&model.net, xb.view(), &tb, &yb, &wb, config.lambda, config.alpha, &config.transport, true)?;
            let value = parts.total();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, value });
            }
            if parts.penalty_skipped {
                trace.skipped_penalty_batches += 1;
            }
            epoch_sum += value * chunk.len() as f64;
            let grad = grad.expect("gradient requested");
            adam.update(model.net.tensors_mut(), grad.tensors());
        }
        let (vparts, _) =
            objective(&model.net, va.xs.view(), &validation.t, &va.ys, &va.w, 0.0, config.alpha, &config.transport, false)?;
        let vloss = vparts.total();
        if !vloss.is_finite() {
            return Err(Error::Diverged { epoch, value: vloss });
        }
        trace.train_objective.push(epoch_sum / train.n() as f64);
        trace.validation_loss.push(vloss);
        trace.stop_epoch = epoch;
        if vloss < best.0 {
            best = (vloss, model.net.clone());
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if trace.skipped_penalty_batches > 0 {
        log::warn!("imbalance penalty skipped on {} single-arm batches", trace.skipped_penalty_batches);
    }
    model.net = best.1;
    Ok((model, trace))
}

/// `f1(Φ(x)) - f0(Φ(x))` per row, on the original outcome scale.
pub fn cfr_cate(model: &CfrModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let (y0, y1) = model.potential_outcomes(x)?;
    Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
}

pub fn cfr_ate(model: &CfrModel, x_test: ArrayView2<'_, f64>) -> Result<AteEstimate> {
    if x_test.nrows() == 0 {
        return Err(Error::Empty("test set".into()));
    }
    let cate = cfr_cate(model, x_test)?;
    Ok(AteEstimate { value: cate.iter().sum::<f64>() / cate.len() as f64, method: model.method })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_config() -> CfrConfig {
        CfrConfig { rep_width: 6, head_width: 4, rep_layers: 2, head_layers: 2, ..CfrConfig::default() }
    }

    fn toy_batch(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let t = (0..n).map(|i| (i % 2) as u8).collect();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Dataset::new(x, t, y).unwrap()
    }

    #[test]
    fn sample_weights() {
        assert_eq!(sample_weight(1, 0.5).unwrap(), 1.0);
        assert_eq!(sample_weight(0, 0.5).unwrap(), 1.0);
        assert_abs_diff_eq!(sample_weight(1, 0.25).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sample_weight(0, 0.25).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(sample_weight(1, 0.0).is_err());
        assert!(sample_weight(0, 1.0).is_err());
    }

    #[test]
    fn shapes_follow_config() {
        let model = CfrModel::init(7, &CfrConfig::default(), 1).unwrap();
        let shapes = model.layer_shapes();
        assert_eq!(&shapes[..3], &[(7, 200), (200, 200), (200, 200)]);
        let head = [(200, 100), (100, 100), (100, 100), (100, 1)];
        assert_eq!(&shapes[3..7], &head);
        assert_eq!(&shapes[7..], &head);
    }

    #[test]
    fn representation_has_unit_norm() {
        let model = CfrModel::init(3, &small_config(), 2).unwrap();
        let x = array![[0.0, 0.0, 0.0], [1.0, -2.0, 3.0], [100.0, 5.0, -7.0]];
        for r in model.represent(x.view()).unwrap().rows() {
            assert_abs_diff_eq!(r.dot(&r).sqrt(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_heads_give_zero_effect() {
        let mut model = CfrModel::init(3, &small_config(), 4).unwrap();
        model.net.heads[1] = model.net.heads[0].clone();
        let x = toy_batch(9, 3, 1).x;
        assert!(cfr_cate(&model, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ate_is_mean_cate_and_rejects_empty() {
        let model = CfrModel::init(3, &small_config(), 4).unwrap();
        let x = toy_batch(5, 3, 1).x;
        let cate = cfr_cate(&model, x.view()).unwrap();
        let ate = cfr_ate(&model, x.slice(ndarray::s![0..1, ..])).unwrap();
        assert_eq!(ate.value, cate[0]);
        assert_eq!(ate.method, Method::Cfr);
        assert!(cfr_ate(&model, Array2::zeros((0, 3)).view()).is_err());
        assert!(cfr_ate(&model, Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = CfrConfig::default();
        let model = CfrModel::init(5, &cfg, 11).unwrap();
        let err = gradient_check(&model, &toy_batch(4, 5, 12), &cfg).unwrap();
        assert!(err < 1e-4, "relative error {err}");
        assert_eq!(err, gradient_check(&model, &toy_batch(4, 5, 12), &cfg).unwrap());
    }

    #[test]
    fn imbalance_term_reaches_the_gradient() {
        let cfg = CfrConfig { lambda: 0.0, ..small_config() };
        let model = CfrModel::init(3, &cfg, 5).unwrap();
        let batch = toy_batch(6, 3, 6);
        let (_, grad) = cfr_loss_and_grad(&model, &batch, &cfg).unwrap();
        let (_, grad0) = cfr_loss_and_grad(&model, &batch, &CfrConfig { alpha: 0.0, ..cfg.clone() }).unwrap();
        assert!(grad.iter().zip(&grad0).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let cfg = CfrConfig { lambda: 0.0, alpha: 0.0, ..small_config() };
        let mut model = CfrModel::init(3, &cfg, 8).unwrap();
        for head in &mut model.net.heads {
            let last = head.layers.last_mut().unwrap();
            last.w.fill(0.0);
            last.b.fill(1.5);
        }
        let mut batch = toy_batch(6, 3, 9);
        batch.y = vec![1.5; 6];
        let (loss, grad) = cfr_loss_and_grad(&model, &batch, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().flatten().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn single_arm_batch_skips_penalty() {
        let cfg = small_config();
        let model = CfrModel::init(2, &cfg, 1).unwrap();
        let batch = Dataset::new(array![[0.0, 1.0], [1.0, 0.0]], vec![1, 1], vec![0.0, 1.0]).unwrap();
        let parts = cfr_loss_parts(&model, &batch, &cfg).unwrap();
        assert!(parts.penalty_skipped);
        assert_eq!(parts.imbalance, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(CfrConfig { alpha: -1.0, ..CfrConfig::default() }.validate().is_err());
        assert!(CfrConfig { lambda: f64::NAN, ..CfrConfig::default() }.validate().is_err());
        assert!(CfrConfig { batch_size: 0, ..CfrConfig::default() }.validate().is_err());
        assert_eq!(CfrConfig::tarnet().method(), Method::Tarnet);
        assert_eq!(CfrConfig::cfr().method(), Method::Cfr);
    }

    #[test]
    fn training_is_deterministic_and_keeps_best_epoch() {
        let cfg = CfrConfig { max_epochs: 8, patience: 3, batch_size: 16, ..small_config() };
        let train = toy_batch(40, 3, 21);
        let val = toy_batch(20, 3, 22);
        let (m1, t1) = cfr_train(&train, &val, &cfg).unwrap();
        let (m2, t2) = cfr_train(&train, &val, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        assert!(t1.stop_epoch <= cfg.max_epochs);
        let best = t1.validation_loss[t1.best_epoch - 1];
        assert!(t1.validation_loss[..t1.best_epoch].iter().all(|&v| best <= v));
        let mut buf = Vec::new();
        t1.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), t1.stop_epoch + 1);
    }
}
