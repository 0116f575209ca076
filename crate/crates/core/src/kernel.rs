//! Exponentiated-quadratic covariance with a single shared lengthscale.
//!
//! `k(z, z') = σ_a² exp(-‖z - z'‖² / (2ℓ²))`, observation noise `σ_n²`.
//! All three hyperparameters are stored as logarithms so unconstrained
//! gradient steps keep them positive.

use serde::{Deserialize, Serialize};

use crate::linalg::SymMatrix;
use crate::matrix::Mat;
use crate::real::Real;

/// Latent coordinates, one row per datum.
pub type LatentPoints<T> = Mat<T>;

/// `[log σ_a², log ℓ, log σ_n²]`.
///
/// The same layout doubles as a gradient buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    pub raw: [T; 3],
}

impl<T: Real> KernelParams<T> {
    pub const AMPLITUDE: usize = 0;
    pub const LENGTHSCALE: usize = 1;
    pub const NOISE: usize = 2;

    pub fn from_natural(amplitude: f64, lengthscale: f64, noise: f64) -> Self {
        Self { raw: [T::of(amplitude.ln()), T::of(lengthscale.ln()), T::of(noise.ln())] }
    }

    pub fn zeros() -> Self {
        Self { raw: [T::zero(); 3] }
    }

    #[inline]
    pub fn log_amplitude(&self) -> T {
        self.raw[0]
    }

    #[inline]
    pub fn log_lengthscale(&self) -> T {
        self.raw[1]
    }

    #[inline]
    pub fn log_noise(&self) -> T {
        self.raw[2]
    }

    /// σ_a²
    #[inline]
    pub fn amplitude(&self) -> T {
        self.raw[0].exp()
    }

    /// ℓ
    #[inline]
    pub fn lengthscale(&self) -> T {
        self.raw[1].exp()
    }

    /// σ_n²
    #[inline]
    pub fn noise(&self) -> T {
        self.raw[2].exp()
    }

    /// Prior predictive variance of a single observation, `σ_a² + σ_n²`.
    #[inline]
    pub fn prior_variance(&self) -> T {
        self.amplitude() + self.noise()
    }

    pub fn is_finite(&self) -> bool {
        self.raw.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> KernelParams<U> {
        KernelParams { raw: self.raw.map(|v| U::of(v.f64())) }
    }

    #[inline]
    fn inv_two_l2(&self) -> T {
        let l2 = (self.raw[1] + self.raw[1]).exp();
        T::one() / (l2 + l2)
    }
}

/// σ_a² = 0.5, ℓ = 0.1, σ_n² = 0.5.
impl<T: Real> Default for KernelParams<T> {
    fn default() -> Self {
        Self::from_natural(0.5, 0.1, 0.5)
    }
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn kernel_eval<T: Real>(z1: &[T], z2: &[T], p: &KernelParams<T>) -> T {
    debug_assert_eq!(z1.len(), z2.len());
    p.amplitude() * (-sq_dist(z1, z2) * p.inv_two_l2()).exp()
}

/// `K(z, z)`, plus `σ_n² I` when `add_noise`.
pub fn gram<T: Real>(z: &LatentPoints<T>, p: &KernelParams<T>, add_noise: bool) -> SymMatrix<T> {
    let n = z.rows();
    let amp = p.amplitude();
    let c = p.inv_two_l2();
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = if add_noise { amp + p.noise() } else { amp };
        let zi = z.row(i);
        for j in 0..i {
            let v = amp * (-sq_dist(zi, z.row(j)) * c).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    SymMatrix::new_unchecked(k)
}

/// `K(zr, za)`; never noised.
pub fn cross_gram<T: Real>(zr: &LatentPoints<T>, za: &LatentPoints<T>, p: &KernelParams<T>) -> Mat<T> {
    assert_eq!(zr.cols(), za.cols(), "latent dimensions differ");
    let amp = p.amplitude();
    let c = p.inv_two_l2();
    Mat::from_fn(zr.rows(), za.rows(), |i, j| amp * (-sq_dist(zr.row(i), za.row(j)) * c).exp())
}

/// Closed-form partial derivatives of the noiseless gram matrix.
#[derive(Debug, Clone)]
pub struct KernelGrads<T> {
    /// `∂K_ij / ∂ log σ_a² = K_ij`
    pub d_log_amplitude: Mat<T>,
    /// `∂K_ij / ∂ log ℓ = K_ij ‖z_i - z_j‖² / ℓ²`
    pub d_log_lengthscale: Mat<T>,
    /// `d_z[q][(i, j)] = ∂k(z_i, z_j) / ∂z_{i,q} = -K_ij (z_iq - z_jq) / ℓ²`.
    /// The derivative with respect to `z_{j,q}` is the negation.
    pub d_z: Vec<Mat<T>>,
}

pub fn kernel_grads<T: Real>(z: &LatentPoints<T>, p: &KernelParams<T>) -> KernelGrads<T> {
    let k = gram(z, p, false).into_mat();
    let n = z.rows();
    let inv_l2 = (-(p.log_lengthscale() + p.log_lengthscale())).exp();
    let d_ls = Mat::from_fn(n, n, |i, j| k[(i, j)] * sq_dist(z.row(i), z.row(j)) * inv_l2);
    let d_z = (0..z.cols())
        .map(|q| Mat::from_fn(n, n, |i, j| -k[(i, j)] * (z[(i, q)] - z[(j, q)]) * inv_l2))
        .collect();
    KernelGrads { d_log_amplitude: k, d_log_lengthscale: d_ls, d_z }
}

/// Pulls a symmetric adjoint `g = ∂L/∂K` of `gram(z)` back onto the
/// hyperparameters and latents. `k` is the noiseless gram matrix. The noise
/// contribution (`σ_n² tr g` when the matrix was noised) is the caller's.
pub(crate) fn gram_backward<T: Real>(
    z: &LatentPoints<T>,
    p: &KernelParams<T>,
    k: &Mat<T>,
    g: &Mat<T>,
    grad: &mut KernelParams<T>,
    dz: &mut Mat<T>,
) {
    let n = z.rows();
    let q = z.cols();
    let inv_l2 = (-(p.log_lengthscale() + p.log_lengthscale())).exp();
    let two = T::of(2.0);
    let mut d_amp = T::zero();
    let mut d_ls = T::zero();
    for i in 0..n {
        d_amp = d_amp + g[(i, i)] * k[(i, i)];
        let zi = z.row(i);
        for j in 0..i {
            let gk = two * g[(i, j)] * k[(i, j)];
            if gk == T::zero() {
                continue;
            }
            let zj = z.row(j);
            d_amp = d_amp + gk;
            d_ls = d_ls + gk * sq_dist(zi, zj) * inv_l2;
            for c in 0..q {
                let s = gk * (zi[c] - zj[c]) * inv_l2;
                dz[(i, c)] = dz[(i, c)] - s;
                dz[(j, c)] = dz[(j, c)] + s;
            }
        }
    }
    grad.raw[0] = grad.raw[0] + d_amp;
    grad.raw[1] = grad.raw[1] + d_ls;
}

/// Pulls an adjoint `h = ∂L/∂K_RA` of `cross_gram(zr, za)` back.
pub(crate) fn cross_gram_backward<T: Real>(
    zr: &LatentPoints<T>,
    za: &LatentPoints<T>,
    p: &KernelParams<T>,
    k: &Mat<T>,
    h: &Mat<T>,
    grad: &mut KernelParams<T>,
    dzr: &mut Mat<T>,
    dza: &mut Mat<T>,
) {
    let q = zr.cols();
    let inv_l2 = (-(p.log_lengthscale() + p.log_lengthscale())).exp();
    let mut d_amp = T::zero();
    let mut d_ls = T::zero();
    for i in 0..zr.rows() {
        let zi = zr.row(i);
        for j in 0..za.rows() {
            let hk = h[(i, j)] * k[(i, j)];
            if hk == T::zero() {
                continue;
            }
            let zj = za.row(j);
            d_amp = d_amp + hk;
            d_ls = d_ls + hk * sq_dist(zi, zj) * inv_l2;
            for c in 0..q {
                let s = hk * (zi[c] - zj[c]) * inv_l2;
                dzr[(i, c)] = dzr[(i, c)] - s;
                dza[(j, c)] = dza[(j, c)] + s;
            }
        }
    }
    grad.raw[0] = grad.raw[0] + d_amp;
    grad.raw[1] = grad.raw[1] + d_ls;
}
