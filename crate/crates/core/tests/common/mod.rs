//! Independent dense oracles shared by the integration tests. Nothing here
//! touches the Cholesky path of the library.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sasgp::kernel::{kernel_eval, KernelParams};
use sasgp::matrix::Mat;

/// Gauss-Jordan elimination with partial pivoting. Returns (inverse, log|det|).
pub fn inverse_and_logdet(m: &Mat<f64>) -> (Mat<f64>, f64) {
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Mat::identity(n);
    let mut logdet = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap();
        if p != c {
            for k in 0..n {
                let t = a[(c, k)];
                a[(c, k)] = a[(p, k)];
                a[(p, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(p, k)];
                inv[(p, k)] = t;
            }
        }
        let d = a[(c, c)];
        logdet += d.abs().ln();
        for k in 0..n {
            a[(c, k)] /= d;
            inv[(c, k)] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[(r, c)];
                if f != 0.0 {
                    for k in 0..n {
                        a[(r, k)] -= f * a[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
    }
    (inv, logdet)
}

pub fn naive_cov(z: &Mat<f64>, p: &KernelParams<f64>, noise: bool) -> Mat<f64> {
    Mat::from_fn(z.rows(), z.rows(), |i, j| {
        kernel_eval(z.row(i), z.row(j), p) + if noise && i == j { p.noise() } else { 0.0 }
    })
}

/// `Σ_d log N(x[:, d] | mean[:, d], cov)` by explicit quadratic forms.
pub fn naive_logpdf(x: &Mat<f64>, mean: Option<&Mat<f64>>, cov: &Mat<f64>) -> f64 {
    let n = x.rows();
    if n == 0 {
        return 0.0;
    }
    let (inv, logdet) = inverse_and_logdet(cov);
    let mut total = 0.0;
    for d in 0..x.cols() {
        let r: Vec<f64> = (0..n).map(|i| x[(i, d)] - mean.map_or(0.0, |m| m[(i, d)])).collect();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += r[i] * inv[(i, j)] * r[j];
            }
        }
        total += -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + q);
    }
    total
}

pub fn naive_exact(x: &Mat<f64>, z: &Mat<f64>, p: &KernelParams<f64>) -> f64 {
    naive_logpdf(x, None, &naive_cov(z, p, true))
}

/// Predictive means `R x D` and full predictive covariance `R x R` of the
/// hold-out rows given the active rows.
pub fn naive_conditional(x: &Mat<f64>, z: &Mat<f64>, p: &KernelParams<f64>, active: &[usize], holdout: &[usize]) -> (Mat<f64>, Mat<f64>) {
    let za = z.select_rows(active);
    let zr = z.select_rows(holdout);
    let xa = x.select_rows(active);
    let (cinv, _) = inverse_and_logdet(&naive_cov(&za, p, true));
    let k_ra = Mat::from_fn(zr.rows(), za.rows(), |i, j| kernel_eval(zr.row(i), za.row(j), p));
    let w = k_ra.matmul(&cinv);
    let mean = w.matmul(&xa);
    let mut cov = naive_cov(&zr, p, true);
    cov.axpy(-1.0, &w.matmul_t(&k_ra));
    (mean, cov)
}

pub fn naive_log_predictive(x: &Mat<f64>, z: &Mat<f64>, p: &KernelParams<f64>, active: &[usize], n: usize) -> f64 {
    let (m, c) = naive_conditional(x, z, p, active, &[n]);
    naive_logpdf(&x.select_rows(&[n]), Some(&m), &c)
}

pub struct Instance {
    pub x: Mat<f64>,
    pub z: Mat<f64>,
}

/// Latents in a box comparable to the default lengthscale, data i.i.d.
/// normal at the prior scale.
pub fn instance(n: usize, d: usize, q: usize, p: &KernelParams<f64>, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Mat::from_fn(n, q, |_, _| rng.random_range(-0.15..0.15));
    let cov = naive_cov(&z, p, true);
    let scale = cov.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).sqrt();
    let x = Mat::from_fn(n, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    Instance { x, z }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
