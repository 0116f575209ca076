//! Dense symmetric linear algebra and zero-mean Gaussian log densities.

use std::f64::consts::PI;

use crate::error::{GpError, Result};
use crate::matrix::Mat;
use crate::real::Real;

/// A dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T>(Mat<T>);

impl<T: Real> SymMatrix<T> {
    /// Checks squareness, finiteness and symmetry (relative tolerance
    /// `1e-12`, or a few ulps for 32-bit elements).
    pub fn new(m: Mat<T>) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(GpError::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(GpError::NonFinite("symmetric matrix entry".into()));
        }
        let tol = T::of(1e-12).max(T::epsilon() * T::of(4.0)) * m.max_abs();
        let n = m.rows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(GpError::ShapeMismatch(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Wraps a matrix that is symmetric by construction.
    pub(crate) fn new_unchecked(m: Mat<T>) -> Self {
        debug_assert_eq!(m.rows(), m.cols());
        Self(m)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn as_mat(&self) -> &Mat<T> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<T> {
        self.0
    }

    pub fn mean_diag(&self) -> T {
        let n = self.n();
        if n == 0 {
            return T::zero();
        }
        (0..n).map(|i| self.0[(i, i)]).sum::<T>() / T::of(n as f64)
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = M + jitter I`.
#[derive(Debug, Clone)]
pub struct CholFactor<T> {
    lower: Mat<T>,
    logdet: T,
    jitter: T,
}

impl<T: Real> CholFactor<T> {
    #[inline]
    pub fn n(&self) -> usize {
        self.lower.rows()
    }

    #[inline]
    pub fn lower(&self) -> &Mat<T> {
        &self.lower
    }

    /// `log |L Lᵀ| = 2 Σ log L_ii`.
    #[inline]
    pub fn logdet(&self) -> T {
        self.logdet
    }

    /// Diagonal increment that was applied before factorization.
    #[inline]
    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn reconstruct(&self) -> Mat<T> {
        self.lower.matmul_t(&self.lower)
    }
}

/// Factors `m + jitter I`. Fails instead of producing NaNs.
pub fn cholesky<T: Real>(m: &SymMatrix<T>, jitter: T) -> Result<CholFactor<T>> {
    let n = m.n();
    let a = m.as_mat();
    let mut l = Mat::zeros(n, n);
    let mut logdet = T::zero();
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        {
            let lj = l.row(j);
            for &v in &lj[..j] {
                d = d - v * v;
            }
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(GpError::NotPositiveDefinite { pivot: j, value: d.f64(), jitter: jitter.f64() });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        logdet = logdet + djj.ln();
        let inv = T::one() / djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (i * n, j * n);
            let buf = l.as_slice();
            for k in 0..j {
                s = s - buf[ri + k] * buf[rj + k];
            }
            l[(i, j)] = s * inv;
        }
    }
    Ok(CholFactor { lower: l, logdet: logdet + logdet, jitter })
}

/// Diagonal jitter schedule: start at `initial · mean(diag)`, then on
/// failure multiply by `growth` up to `retries` times. A zero `initial`
/// first tries the exact factorization and then falls back to `fallback`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub initial: f64,
    pub fallback: f64,
    pub growth: f64,
    pub retries: u32,
}

impl JitterPolicy {
    /// Exact first attempt; used by oracles and gradient checks.
    pub const EXACT_FIRST: Self = Self { initial: 0.0, fallback: 1e-6, growth: 10.0, retries: 3 };

    pub fn relative(initial: f64) -> Self {
        Self { initial, fallback: 1e-6, growth: 10.0, retries: 3 }
    }
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self::relative(1e-6)
    }
}

pub fn cholesky_with_policy<T: Real>(m: &SymMatrix<T>, policy: &JitterPolicy) -> Result<CholFactor<T>> {
    let scale = m.mean_diag().abs().max(T::min_positive_value());
    let mut rel = policy.initial;
    let mut last = None;
    if rel == 0.0 {
        match cholesky(m, T::zero()) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
        rel = policy.fallback;
    }
    for _ in 0..=policy.retries {
        match cholesky(m, T::of(rel) * scale) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
        rel *= policy.growth;
    }
    Err(last.expect("at least one attempt"))
}

fn check_rows<T: Real>(f: &CholFactor<T>, b: &Mat<T>) -> Result<()> {
    if b.rows() != f.n() {
        return Err(GpError::DimensionMismatch(format!(
            "factor is {n}x{n} but right-hand side has {} rows",
            b.rows(),
            n = f.n()
        )));
    }
    Ok(())
}

/// Solves `L y = b`.
pub fn solve_lower<T: Real>(f: &CholFactor<T>, b: &Mat<T>) -> Result<Mat<T>> {
    check_rows(f, b)?;
    let n = f.n();
    let k = b.cols();
    let l = &f.lower;
    let mut y = b.clone();
    for i in 0..n {
        let (done, rest) = y.as_mut_slice().split_at_mut(i * k);
        let yi = &mut rest[..k];
        let li = l.row(i);
        for j in 0..i {
            let lij = li[j];
            if lij == T::zero() {
                continue;
            }
            let yj = &done[j * k..(j + 1) * k];
            for (a, &bj) in yi.iter_mut().zip(yj) {
                *a = *a - lij * bj;
            }
        }
        let inv = T::one() / li[i];
        yi.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(y)
}

/// Solves `Lᵀ x = y`.
pub fn solve_upper<T: Real>(f: &CholFactor<T>, y: &Mat<T>) -> Result<Mat<T>> {
    check_rows(f, y)?;
    let n = f.n();
    let k = y.cols();
    let l = &f.lower;
    let mut x = y.clone();
    for i in (0..n).rev() {
        let (head, tail) = x.as_mut_slice().split_at_mut((i + 1) * k);
        let xi = &mut head[i * k..];
        for j in (i + 1)..n {
            let lji = l[(j, i)];
            if lji == T::zero() {
                continue;
            }
            let xj = &tail[(j - i - 1) * k..(j - i) * k];
            for (a, &b) in xi.iter_mut().zip(xj) {
                *a = *a - lji * b;
            }
        }
        let inv = T::one() / l[(i, i)];
        xi.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(x)
}

/// Solves `(L Lᵀ) x = b`.
pub fn solve<T: Real>(f: &CholFactor<T>, b: &Mat<T>) -> Result<Mat<T>> {
    let y = solve_lower(f, b)?;
    solve_upper(f, &y)
}

/// `(L Lᵀ)⁻¹`, symmetrized.
pub fn inverse<T: Real>(f: &CholFactor<T>) -> Mat<T> {
    let n = f.n();
    let linv = solve_lower(f, &Mat::identity(n)).expect("square identity");
    linv.t_matmul(&linv)
}

/// `Σ_d log N(x[:, d] | 0, L Lᵀ)` for `x` of shape `N x D`.
pub fn gaussian_logpdf_zero_mean<T: Real>(x: &Mat<T>, f: &CholFactor<T>) -> Result<T> {
    check_rows(f, x)?;
    let (n, d) = x.shape();
    let y = solve_lower(f, x)?;
    let quad: T = y.as_slice().iter().map(|&v| v * v).sum();
    let nd = T::of((n * d) as f64);
    let half = T::of(0.5);
    Ok(-half * nd * T::of((2.0 * PI).ln()) - half * T::of(d as f64) * f.logdet() - half * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(rows: &[Vec<f64>]) -> SymMatrix<f64> {
        SymMatrix::new(Mat::from_rows(rows)).unwrap()
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = a.matmul_t(&a);
        for i in 0..n {
            m[(i, i)] += 0.5;
        }
        m.symmetrized()
    }

    /// Gauss-Jordan inverse with partial pivoting; independent of Cholesky.
    fn dense_inverse(m: &Mat<f64>) -> Mat<f64> {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = Mat::identity(n);
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap();
            for k in 0..n {
                let t = a[(c, k)];
                a[(c, k)] = a[(p, k)];
                a[(p, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(p, k)];
                inv[(p, k)] = t;
            }
            let d = a[(c, c)];
            for k in 0..n {
                a[(c, k)] /= d;
                inv[(c, k)] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = a[(r, c)];
                    for k in 0..n {
                        a[(r, k)] -= f * a[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
        inv
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    fn jacobi_eigenvalues(m: &Mat<f64>) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[(i, i)]).collect()
    }

    #[test]
    fn identity_factor() {
        let f = cholesky(&SymMatrix::new(Mat::<f64>::identity(3)).unwrap(), 0.0).unwrap();
        assert_eq!(f.lower(), &Mat::identity(3));
        assert_eq!(f.logdet(), 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let f = cholesky(&sym(&[vec![4.0, 2.0], vec![2.0, 3.0]]), 0.0).unwrap();
        let l = f.lower();
        assert_relative_eq!(l[(0, 0)], 2.0);
        assert_relative_eq!(l[(1, 0)], 1.0);
        assert_eq!(l[(0, 1)], 0.0);
        assert_relative_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(f.logdet(), 8f64.ln(), epsilon = 1e-14);

        let x = solve(&f, &Mat::from_vec(2, 1, vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(x[(0, 0)], 3.0 / 8.0, epsilon = 1e-15);
        assert_relative_eq!(x[(1, 0)], -0.25, epsilon = 1e-15);
    }

    #[test]
    fn indefinite_is_rejected() {
        // eigenvalues 1 and -1e-3
        let (a, b) = (0.5 * (1.0 - 1e-3), 0.5 * (1.0 + 1e-3));
        let m = sym(&[vec![a, b], vec![b, a]]);
        assert!(matches!(cholesky(&m, 0.0), Err(GpError::NotPositiveDefinite { .. })));
        // escalating jitter (max 1e-3 * mean diag) is still not enough
        assert!(cholesky_with_policy(&m, &JitterPolicy::default()).is_err());
    }

    #[test]
    fn jitter_policy_rescues_singular_matrix() {
        let m = sym(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(cholesky(&m, 0.0).is_err());
        let f = cholesky_with_policy(&m, &JitterPolicy::EXACT_FIRST).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= 1e-3);
    }

    #[test]
    fn solve_with_identity_returns_rhs() {
        let f = cholesky(&SymMatrix::new(Mat::<f64>::identity(4)).unwrap(), 0.0).unwrap();
        let b = Mat::from_fn(4, 3, |i, j| (i as f64) - 2.0 * j as f64);
        assert_eq!(solve(&f, &b).unwrap(), b);
    }

    #[test]
    fn solve_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(5, &mut rng);
        let b = Mat::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let f = cholesky(&SymMatrix::new(m.clone()).unwrap(), 0.0).unwrap();
        let x = solve(&f, &b).unwrap();
        let oracle = dense_inverse(&m).matmul(&b);
        assert!(x.sub(&oracle).max_abs() <= 1e-8 * b.max_abs());
        let resid = m.matmul(&x).sub(&b);
        assert!(resid.max_abs() <= 1e-8 * b.max_abs());
        assert!(inverse(&f).sub(&dense_inverse(&m)).max_abs() < 1e-10);
    }

    #[test]
    fn solve_rejects_bad_rhs() {
        let f = cholesky(&SymMatrix::new(Mat::<f64>::identity(3)).unwrap(), 0.0).unwrap();
        assert!(matches!(solve(&f, &Mat::zeros(2, 1)), Err(GpError::DimensionMismatch(_))));
    }

    #[test]
    fn reconstruction_and_logdet_vs_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[1usize, 2, 7, 16, 33, 64] {
            let m = random_spd(n, &mut rng);
            let jitter = 1e-3;
            let f = cholesky(&SymMatrix::new(m.clone()).unwrap(), jitter).unwrap();
            let mut target = m.clone();
            for i in 0..n {
                target[(i, i)] += jitter;
            }
            let err = f.reconstruct().sub(&target).max_abs();
            assert!(err <= 1e-8 * target.max_abs(), "n={n} err={err}");
            let eig_logdet: f64 = jacobi_eigenvalues(&target).iter().map(|v| v.ln()).sum();
            assert_relative_eq!(f.logdet(), eig_logdet, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn reconstruction_at_32_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_spd(24, &mut rng);
        let m32: Mat<f32> = m.cast();
        let f = cholesky(&SymMatrix::new(m32.clone()).unwrap(), 0.0).unwrap();
        assert!(f.reconstruct().sub(&m32).max_abs() <= 1e-4 * m32.max_abs());
    }

    #[test]
    fn logpdf_scalar_at_mode() {
        let c = 2.5;
        let f = cholesky(&SymMatrix::new(Mat::from_vec(1, 1, vec![c])).unwrap(), 0.0).unwrap();
        let v = gaussian_logpdf_zero_mean(&Mat::zeros(1, 1), &f).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * PI * c).ln(), epsilon = 1e-15);
    }

    #[test]
    fn logpdf_duplicated_columns_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_spd(4, &mut rng);
        let f = cholesky(&SymMatrix::new(m).unwrap(), 0.0).unwrap();
        let col: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let one = Mat::from_vec(4, 1, col.clone());
        let two = Mat::from_fn(4, 2, |i, _| col[i]);
        let a = gaussian_logpdf_zero_mean(&one, &f).unwrap();
        let b = gaussian_logpdf_zero_mean(&two, &f).unwrap();
        assert_relative_eq!(b, 2.0 * a, max_relative = 1e-14);
    }

    #[test]
    fn logpdf_matches_naive_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 6;
        let m = random_spd(n, &mut rng);
        let x = Mat::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
        let f = cholesky(&SymMatrix::new(m.clone()).unwrap(), 0.0).unwrap();
        let got = gaussian_logpdf_zero_mean(&x, &f).unwrap();

        let inv = dense_inverse(&m);
        let logdet: f64 = jacobi_eigenvalues(&m).iter().map(|v| v.ln()).sum();
        let mut want = 0.0;
        for d in 0..3 {
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += x[(i, d)] * inv[(i, j)] * x[(j, d)];
                }
            }
            want += -0.5 * (n as f64) * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * q;
        }
        assert_relative_eq!(got, want, epsilon = 1e-9);
    }

    #[test]
    fn logpdf_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let m = random_spd(n, &mut rng);
        let x = Mat::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 4, 1, 2];
        let mp = Mat::from_fn(n, n, |i, j| m[(perm[i], perm[j])]);
        let xp = x.select_rows(&perm);
        let a = gaussian_logpdf_zero_mean(&x, &cholesky(&SymMatrix::new(m).unwrap(), 0.0).unwrap()).unwrap();
        let b = gaussian_logpdf_zero_mean(&xp, &cholesky(&SymMatrix::new(mp).unwrap(), 0.0).unwrap()).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
}
