//! Encoders from observations to latent coordinates.
//!
//! Amortized mode uses a three-layer ReLU perceptron (`D → 512 → 256 → Q` by
//! default); the Bayesian variant pairs a mean network with a variance
//! network whose output passes through a floored softplus. Non-amortized mode
//! stores free per-datum parameters in a [`LatentParamTable`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bayes::VariationalPosterior;
use crate::error::{GpError, Result};
use crate::kernel::LatentPoints;
use crate::matrix::{gemm, Mat};
use crate::real::Real;

pub const HIDDEN_UNITS: [usize; 2] = [512, 256];
/// Lower bound on encoder variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Fully connected layer, `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Mat::zeros(fan_in, fan_out), b: vec![T::zero(); fan_out] }
    }

    fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w);
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.b) {
                *v = *v + b;
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layers: [Dense<T>; 3],
}

impl<T: Real> MlpParams<T> {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(sizes: [usize; 4], rng: &mut R) -> Self {
        let layer = |i: usize, rng: &mut R| {
            let bound = 1.0 / (sizes[i] as f64).sqrt();
            let mut u = || T::of(rng.random_range(-bound..=bound));
            let w = Mat::from_fn(sizes[i], sizes[i + 1], |_, _| u());
            let b = (0..sizes[i + 1]).map(|_| u()).collect();
            Dense { w, b }
        };
        Self { layers: [layer(0, rng), layer(1, rng), layer(2, rng)] }
    }

    pub fn zeros(sizes: [usize; 4]) -> Self {
        Self {
            layers: [
                Dense::zeros(sizes[0], sizes[1]),
                Dense::zeros(sizes[1], sizes[2]),
                Dense::zeros(sizes[2], sizes[3]),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.sizes())
    }

    pub fn sizes(&self) -> [usize; 4] {
        [self.layers[0].w.rows(), self.layers[1].w.rows(), self.layers[2].w.rows(), self.layers[2].w.cols()]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].w.cols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.as_slice().len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }

    /// Checks that consecutive layer shapes chain.
    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].w.cols() != pair[1].w.rows() {
                return Err(GpError::ShapeMismatch(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    pair[0].w.cols(),
                    k + 1,
                    pair[1].w.rows()
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.b.len() != l.w.cols() {
                return Err(GpError::ShapeMismatch(format!("layer {k} bias has {} entries for {} units", l.b.len(), l.w.cols())));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        let c = |l: &Dense<T>| Dense { w: l.w.cast(), b: l.b.iter().map(|v| U::of(v.f64())).collect() };
        MlpParams { layers: [c(&self.layers[0]), c(&self.layers[1]), c(&self.layers[2])] }
    }

    /// Weight and bias slices in layer order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()]).collect()
    }
}

/// Activations retained by the forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<T> {
    x: Mat<T>,
    h1: Mat<T>,
    h2: Mat<T>,
}

fn relu<T: Real>(m: &mut Mat<T>) {
    for v in m.as_mut_slice() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Zeroes `g` wherever the post-activation `h` is not positive.
fn relu_backward<T: Real>(g: &mut Mat<T>, h: &Mat<T>) {
    for (g, &h) in g.as_mut_slice().iter_mut().zip(h.as_slice()) {
        if !(h > T::zero()) {
            *g = T::zero();
        }
    }
}

fn col_sums<T: Real>(m: &Mat<T>) -> Vec<T> {
    let mut s = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (a, &v) in s.iter_mut().zip(m.row(i)) {
            *a = *a + v;
        }
    }
    s
}

pub fn encode_taped<T: Real>(x: &Mat<T>, params: &MlpParams<T>) -> Result<(LatentPoints<T>, MlpTape<T>)> {
    if x.cols() != params.input_dim() {
        return Err(GpError::DimensionMismatch(format!(
            "input has {} columns, encoder expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut h1 = params.layers[0].forward(x);
    relu(&mut h1);
    let mut h2 = params.layers[1].forward(&h1);
    relu(&mut h2);
    let out = params.layers[2].forward(&h2);
    Ok((out, MlpTape { x: x.clone(), h1, h2 }))
}

pub fn encode<T: Real>(x: &Mat<T>, params: &MlpParams<T>) -> Result<LatentPoints<T>> {
    Ok(encode_taped(x, params)?.0)
}

/// Reverse pass. Returns parameter gradients and, if requested, the gradient
/// with respect to the inputs.
pub fn encode_backward<T: Real>(
    params: &MlpParams<T>,
    tape: &MlpTape<T>,
    upstream: &Mat<T>,
    input_grad: bool,
) -> Result<(MlpParams<T>, Option<Mat<T>>)> {
    if upstream.shape() != (tape.x.rows(), params.output_dim()) {
        return Err(GpError::DimensionMismatch(format!(
            "upstream gradient is {:?}, expected ({}, {})",
            upstream.shape(),
            tape.x.rows(),
            params.output_dim()
        )));
    }
    let d3 = Dense { w: gemm(&tape.h2, true, upstream, false), b: col_sums(upstream) };
    let mut g2 = gemm(upstream, false, &params.layers[2].w, true);
    relu_backward(&mut g2, &tape.h2);
    let d2 = Dense { w: gemm(&tape.h1, true, &g2, false), b: col_sums(&g2) };
    let mut g1 = gemm(&g2, false, &params.layers[1].w, true);
    relu_backward(&mut g1, &tape.h1);
    let d1 = Dense { w: gemm(&tape.x, true, &g1, false), b: col_sums(&g1) };
    let dx = input_grad.then(|| gemm(&g1, false, &params.layers[0].w, true));
    Ok((MlpParams { layers: [d1, d2, d3] }, dx))
}

fn softplus<T: Real>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone)]
pub struct GaussianTape<T> {
    mean: MlpTape<T>,
    var: MlpTape<T>,
    /// Variance-network outputs before the softplus.
    raw: Mat<T>,
}

/// `μ = g_μ(x)`, `σ² = max(softplus(g_σ(x)), 1e-6)`.
pub fn encode_gaussian_taped<T: Real>(
    x: &Mat<T>,
    params_mu: &MlpParams<T>,
    params_sigma: &MlpParams<T>,
) -> Result<(VariationalPosterior<T>, GaussianTape<T>)> {
    if params_mu.output_dim() != params_sigma.output_dim() {
        return Err(GpError::DimensionMismatch("mean and variance networks differ in output size".into()));
    }
    let (mu, mean) = encode_taped(x, params_mu)?;
    let (raw, var) = encode_taped(x, params_sigma)?;
    let floor = T::of(VARIANCE_FLOOR);
    let log_var = raw.map(|r| softplus(r).max(floor).ln());
    Ok((VariationalPosterior { mu, log_var }, GaussianTape { mean, var, raw }))
}

pub fn encode_gaussian<T: Real>(
    x: &Mat<T>,
    params_mu: &MlpParams<T>,
    params_sigma: &MlpParams<T>,
) -> Result<VariationalPosterior<T>> {
    Ok(encode_gaussian_taped(x, params_mu, params_sigma)?.0)
}

/// Reverse pass of [`encode_gaussian_taped`] from gradients with respect to
/// `μ` and `log σ²`. The floor has zero gradient.
pub fn encode_gaussian_backward<T: Real>(
    params_mu: &MlpParams<T>,
    params_sigma: &MlpParams<T>,
    tape: &GaussianTape<T>,
    d_mu: &Mat<T>,
    d_log_var: &Mat<T>,
) -> Result<(MlpParams<T>, MlpParams<T>)> {
    if d_log_var.shape() != tape.raw.shape() {
        return Err(GpError::DimensionMismatch("log-variance gradient shape".into()));
    }
    let floor = T::of(VARIANCE_FLOOR);
    let d_raw = Mat::from_fn(tape.raw.rows(), tape.raw.cols(), |i, j| {
        let r = tape.raw[(i, j)];
        let s = softplus(r);
        if s > floor {
            d_log_var[(i, j)] * sigmoid(r) / s
        } else {
            T::zero()
        }
    });
    let (gm, _) = encode_backward(params_mu, &tape.mean, d_mu, false)?;
    let (gv, _) = encode_backward(params_sigma, &tape.var, &d_raw, false)?;
    Ok((gm, gv))
}

/// Free per-datum latent parameters, indexed by dataset row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParamTable<T> {
    /// Latent points (deterministic mode) or variational means.
    pub z: Mat<T>,
    /// Variational log-variances (Bayesian mode only).
    pub log_var: Option<Mat<T>>,
}

impl<T: Real> LatentParamTable<T> {
    /// `z ~ N(0, 0.01 I)`; `log σ² = log 0.1` in Bayesian mode.
    pub fn init<R: Rng + ?Sized>(n: usize, q: usize, bayesian: bool, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let z = Mat::from_fn(n, q, |_, _| T::of(normal.sample(rng)));
        let log_var = bayesian.then(|| Mat::from_fn(n, q, |_, _| T::of(0.1f64.ln())));
        Self { z, log_var }
    }

    pub fn zeros_like(&self) -> Self {
        let (n, q) = self.z.shape();
        Self { z: Mat::zeros(n, q), log_var: self.log_var.as_ref().map(|_| Mat::zeros(n, q)) }
    }

    pub fn n(&self) -> usize {
        self.z.rows()
    }

    pub fn q(&self) -> usize {
        self.z.cols()
    }

    pub fn points(&self, idx: &[usize]) -> LatentPoints<T> {
        self.z.select_rows(idx)
    }

    pub fn posterior(&self, idx: &[usize]) -> Result<VariationalPosterior<T>> {
        let lv = self
            .log_var
            .as_ref()
            .ok_or_else(|| GpError::InvalidConfig("latent table has no variances".into()))?;
        Ok(VariationalPosterior { mu: self.z.select_rows(idx), log_var: lv.select_rows(idx) })
    }

    /// `self[idx[i]] += rows[i]` for the mean (and optionally variance) block.
    pub fn scatter_add(&mut self, idx: &[usize], dz: &Mat<T>, d_log_var: Option<&Mat<T>>) {
        for (i, &n) in idx.iter().enumerate() {
            for (a, &g) in self.z.row_mut(n).iter_mut().zip(dz.row(i)) {
                *a = *a + g;
            }
            if let (Some(lv), Some(d)) = (self.log_var.as_mut(), d_log_var) {
                for (a, &g) in lv.row_mut(n).iter_mut().zip(d.row(i)) {
                    *a = *a + g;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.log_var.as_ref().is_none_or(|m| m.is_finite())
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = vec![self.z.as_slice()];
        if let Some(lv) = &self.log_var {
            v.push(lv.as_slice());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![self.z.as_mut_slice()];
        if let Some(lv) = &mut self.log_var {
            v.push(lv.as_mut_slice());
        }
        v
    }
}
