mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sasgp::linalg::*;
use sasgp::matrix::Mat;

/// `A Aᵀ / n + 0.1 I`, well conditioned.
fn spd(n: usize, seed: u64) -> Mat<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut m = a.matmul_t(&a);
    m.scale_mut(1.0 / n as f64);
    for i in 0..n {
        m[(i, i)] += 0.1;
    }
    m.symmetrized()
}

fn max_rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let scale = b.max_abs();
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

#[test]
fn non_symmetric_and_indefinite_inputs_fail() {
    let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]);
    assert!(SymMatrix::new(m).is_err());
    let indefinite = SymMatrix::new(Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0])).unwrap();
    assert!(cholesky(&indefinite, 0.0).is_err());
    assert!(cholesky_with_policy(&indefinite, &JitterPolicy::default()).is_err());
}

#[test]
fn jitter_escalation_rescues_a_singular_matrix() {
    let ones = SymMatrix::new(Mat::from_fn(4, 4, |_, _| 1.0)).unwrap();
    let f = cholesky_with_policy(&ones, &JitterPolicy::EXACT_FIRST).unwrap();
    assert!(f.jitter() > 0.0);
    let mut expected = Mat::from_fn(4, 4, |_, _| 1.0);
    for i in 0..4 {
        expected[(i, i)] += f.jitter();
    }
    assert!(max_rel(&f.reconstruct(), &expected) < 1e-12);
}

#[test]
fn solve_inverts_the_factored_matrix() {
    let m = spd(7, 3);
    let f = cholesky(&SymMatrix::new(m.clone()).unwrap(), 0.0).unwrap();
    let b = Mat::from_fn(7, 2, |i, j| (i + 3 * j) as f64 - 4.0);
    let x = solve(&f, &b).unwrap();
    assert!(max_rel(&m.matmul(&x), &b) < 1e-12);
    assert!(max_rel(&m.matmul(&inverse(&f)), &Mat::identity(7)) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cholesky_reconstructs_input_plus_jitter(n in 1usize..40, seed in any::<u64>(), jitter in 0.0f64..1e-3) {
        let m = spd(n, seed);
        let f = cholesky(&SymMatrix::new(m.clone()).unwrap(), jitter).unwrap();
        let mut expected = m.clone();
        for i in 0..n {
            expected[(i, i)] += jitter;
        }
        prop_assert!(max_rel(&f.reconstruct(), &expected) < 1e-8);
        let f32 = cholesky(&SymMatrix::new(m.cast::<f32>()).unwrap(), jitter as f32).unwrap();
        prop_assert!(max_rel(&f32.reconstruct().cast::<f64>(), &expected) < 1e-4);
    }

    #[test]
    fn logdet_matches_independent_elimination(n in 1usize..=64, seed in any::<u64>()) {
        let m = spd(n, seed);
        let f = cholesky(&SymMatrix::new(m.clone()).unwrap(), 0.0).unwrap();
        let (_, oracle) = inverse_and_logdet(&m);
        prop_assert!((f.logdet() - oracle).abs() <= 1e-6 * oracle.abs().max(1.0));
    }

    #[test]
    fn logpdf_is_invariant_under_joint_permutation(n in 1usize..20, d in 1usize..4, seed in any::<u64>()) {
        let m = spd(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let x = Mat::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
        let mp = Mat::from_fn(n, n, |i, j| m[(perm[i], perm[j])]);
        let a = gaussian_logpdf_zero_mean(&x, &cholesky(&SymMatrix::new(m).unwrap(), 0.0).unwrap()).unwrap();
        let b = gaussian_logpdf_zero_mean(&x.select_rows(&perm), &cholesky(&SymMatrix::new(mp).unwrap(), 0.0).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        let oracle = naive_logpdf(&x, None, &spd(n, seed));
        prop_assert!((a - oracle).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
