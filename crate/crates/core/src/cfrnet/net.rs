//! Dense layers with ELU activations, hand-written backward pass and Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

#[inline]
pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

#[inline]
fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// LeCun-normal weights, zero biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / fan_in.max(1) as f64).sqrt()).expect("positive scale");
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng));
        Self { w, b: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.len()) }
    }
}

/// A stack of dense layers; every layer but possibly the last applies ELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub linear_output: bool,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init(widths: &[usize], linear_output: bool, rng: &mut Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers, linear_output }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Dense::zeros_like).collect(), linear_output: self.linear_output }
    }

    fn activated(&self, k: usize) -> bool {
        !(self.linear_output && k + 1 == self.layers.len())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.b.len())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            a = a.dot(&layer.w) + &layer.b;
            if self.activated(k) {
                a.mapv_inplace(elu);
            }
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            inputs.push(a);
            a = if self.activated(k) { z.mapv(elu) } else { z.clone() };
            pre.push(z);
        }
        (a, MlpCache { inputs, pre })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &MlpCache, dout: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut da = dout;
        for k in (0..self.layers.len()).rev() {
            let dz = if self.activated(k) {
                let mut dz = da;
                dz.zip_mut_with(&cache.pre[k], |g, &z| *g *= elu_grad(z));
                dz
            } else {
                da
            };
            grad.layers[k].w += &cache.inputs[k].t().dot(&dz);
            grad.layers[k].b += &dz.sum_axis(Axis(0));
            da = dz.dot(&self.layers[k].w.t());
        }
        da
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.w.iter().map(|v| v * v).sum::<f64>() + l.b.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam state over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    opts: AdamOptions,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(shapes: &[usize], opts: AdamOptions) -> Self {
        Self {
            opts,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        let o = self.opts;
        let c1 = 1.0 - o.beta1.powi(self.step);
        let c2 = 1.0 - o.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
                p[i] -= o.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + o.eps);
            }
        }
    }
}
