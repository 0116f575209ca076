//! Parameter containers, Adam and a finite-difference gradient checker.
//!
//! Objectives handed to this module are *minimized*; training loops pass the
//! negated estimator value and gradient.

use rand::seq::index;
use rand::Rng;

use crate::amortization::{LatentParamTable, MlpParams};
use crate::error::{GpError, Result};
use crate::kernel::KernelParams;
use crate::real::Real;

/// Every trainable tensor of a run: kernel hyperparameters, optional encoder
/// stacks and optional free latents.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub kernel: KernelParams<T>,
    pub mean_net: Option<MlpParams<T>>,
    pub var_net: Option<MlpParams<T>>,
    pub latents: Option<LatentParamTable<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: KernelParams::zeros(),
            mean_net: self.mean_net.as_ref().map(MlpParams::zeros_like),
            var_net: self.var_net.as_ref().map(MlpParams::zeros_like),
            latents: self.latents.as_ref().map(LatentParamTable::zeros_like),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = vec![("kernel".to_string(), &self.kernel.raw[..])];
        for (name, net) in [("mean_net", &self.mean_net), ("var_net", &self.var_net)] {
            if let Some(net) = net {
                for (k, t) in net.tensors().into_iter().enumerate() {
                    out.push((format!("{name}.{}.{}", k / 2, if k % 2 == 0 { "w" } else { "b" }), t));
                }
            }
        }
        if let Some(l) = &self.latents {
            for (k, t) in l.tensors().into_iter().enumerate() {
                out.push((if k == 0 { "latents.z" } else { "latents.log_var" }.to_string(), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![&mut self.kernel.raw[..]];
        for net in [&mut self.mean_net, &mut self.var_net].into_iter().flatten() {
            out.extend(net.tensors_mut());
        }
        if let Some(l) = &mut self.latents {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn assign(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(GpError::DimensionMismatch(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, (_, t)) in self.tensors().iter().enumerate() {
            if k < t.len() {
                return Some((i, k));
            }
            k -= t.len();
        }
        None
    }

    /// Flat-index read.
    pub fn get(&self, k: usize) -> T {
        let (i, j) = self.locate(k).expect("parameter index in range");
        self.tensors()[i].1[j]
    }

    /// Flat-index write.
    pub fn set(&mut self, k: usize, v: T) {
        let (i, j) = self.locate(k).expect("parameter index in range");
        self.tensors_mut()[i][j] = v;
    }

    /// Name of the tensor holding flat index `k`, with the offset inside it.
    pub fn coordinate_name(&self, k: usize) -> String {
        let (i, j) = self.locate(k).expect("parameter index in range");
        format!("{}[{j}]", self.tensors()[i].0)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += s · other` for identically shaped parameter sets.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() || src.iter().zip(&dst).any(|((_, a), b)| a.len() != b.len()) {
            return Err(GpError::ShapeMismatch("parameter sets differ in layout".into()));
        }
        for ((_, a), b) in src.iter().zip(dst.iter_mut()) {
            for (d, &v) in b.iter_mut().zip(a.iter()) {
                *d = *d + s * v;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            kernel: self.kernel.cast(),
            mean_net: self.mean_net.as_ref().map(MlpParams::cast),
            var_net: self.var_net.as_ref().map(MlpParams::cast),
            latents: self.latents.as_ref().map(|l| LatentParamTable {
                z: l.z.cast(),
                log_var: l.log_var.as_ref().map(|m| m.cast()),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Parameters, their gradient buffers and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub values: ModelParams<T>,
    pub grads: ModelParams<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(values: ModelParams<T>) -> Self {
        let n = values.num_params();
        Self {
            grads: values.zeros_like(),
            values,
            adam: AdamState { t: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] },
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.grads.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// One bias-corrected Adam step on the accumulated gradients, which are
    /// zeroed afterwards. Parameters are left untouched on a non-finite
    /// gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in self.grads.tensors() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(GpError::NonFiniteGradient(format!("{name}[{i}]")));
            }
        }
        self.adam.t += 1;
        let t = self.adam.t as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - T::of(cfg.beta1.powi(t));
        let c2 = T::one() - T::of(cfg.beta2.powi(t));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        let mut off = 0;
        let grads = self.grads.tensors();
        for (p, (_, g)) in self.values.tensors_mut().into_iter().zip(grads) {
            let m = &mut self.adam.m[off..off + p.len()];
            let v = &mut self.adam.v[off..off + p.len()];
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                p[k] = p[k] - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            off += p.len();
        }
        self.zero_grads();
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinate attaining the maximum.
    pub worst: String,
    /// Coordinates where both gradients were below `zero_tol`.
    pub zero_coordinates: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates drawn (all if this exceeds the candidate count).
    pub sample: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Both gradients at or below this magnitude count as agreement.
    pub zero_tol: f64,
    /// Tensors excluded from sampling, by name.
    pub skip: Vec<String>,
}

impl GradCheckOptions {
    pub fn new(h: f64, sample: usize) -> Self {
        Self { h, sample, floor: 1e-8, zero_tol: 0.0, skip: Vec::new() }
    }
}

/// Compares the analytic gradient returned by `objective` with central
/// differences on `sample` random coordinates. Relative error uses
/// `max(|a|, |n|, 1e-8)`.
pub fn grad_check<T, F, R>(objective: F, params: &ModelParams<T>, h: f64, sample: usize, rng: &mut R) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ModelParams<T>) -> Result<(T, ModelParams<T>)>,
    R: Rng + ?Sized,
{
    grad_check_with(objective, params, &GradCheckOptions::new(h, sample), rng)
}

pub fn grad_check_with<T, F, R>(objective: F, params: &ModelParams<T>, opts: &GradCheckOptions, rng: &mut R) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ModelParams<T>) -> Result<(T, ModelParams<T>)>,
    R: Rng + ?Sized,
{
    let (_, grad) = objective(params)?;
    let mut candidates = Vec::new();
    let mut off = 0;
    for (name, t) in params.tensors() {
        if !opts.skip.contains(&name) {
            candidates.extend(off..off + t.len());
        }
        off += t.len();
    }
    let coords: Vec<usize> = if opts.sample >= candidates.len() {
        candidates
    } else {
        index::sample(rng, candidates.len(), opts.sample).into_iter().map(|i| candidates[i]).collect()
    };
    let h = opts.h;
    let mut probe = params.clone();
    let mut report =
        GradCheckReport { max_rel_error: 0.0, coordinates: coords.len(), worst: String::new(), zero_coordinates: 0 };
    for k in coords {
        let orig = params.get(k);
        probe.set(k, orig + T::of(h));
        let up = objective(&probe)?.0.f64();
        probe.set(k, orig - T::of(h));
        let down = objective(&probe)?.0.f64();
        probe.set(k, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.get(k).f64();
        if analytic.abs() <= opts.zero_tol && numeric.abs() <= opts.zero_tol {
            report.zero_coordinates += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = params.coordinate_name(k);
        }
    }
    Ok(report)
}
