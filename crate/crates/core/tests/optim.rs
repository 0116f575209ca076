use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasgp::amortization::{LatentParamTable, MlpParams};
use sasgp::error::GpError;
use sasgp::estimators::ActiveSplit;
use sasgp::kernel::KernelParams;
use sasgp::linalg::JitterPolicy;
use sasgp::matrix::Mat;
use sasgp::objective::{batch_value_and_grad, ObjectiveOptions};
use sasgp::optim::*;

/// Parameter holder with `n` free coordinates in a latent table.
fn vector(values: &[f64]) -> ModelParams<f64> {
    ModelParams {
        kernel: KernelParams { raw: [0.0; 3] },
        mean_net: None,
        var_net: None,
        latents: Some(LatentParamTable { z: Mat::from_vec(values.len(), 1, values.to_vec()), log_var: None }),
    }
}

fn coords(p: &ModelParams<f64>) -> &[f64] {
    p.latents.as_ref().unwrap().z.as_slice()
}

/// `½ Σ c_i (p_i - t_i)²` over the table coordinates.
fn quadratic(p: &ModelParams<f64>, c: &[f64], t: &[f64]) -> (f64, ModelParams<f64>) {
    let x = coords(p);
    let value = x.iter().zip(c).zip(t).map(|((x, c), t)| 0.5 * c * (x - t).powi(2)).sum();
    let grad: Vec<f64> = x.iter().zip(c).zip(t).map(|((x, c), t)| c * (x - t)).collect();
    let mut g = p.zeros_like();
    g.latents.as_mut().unwrap().z = Mat::from_vec(grad.len(), 1, grad);
    (value, g)
}

fn gp_problem(seed: u64) -> (ModelParams<f64>, Mat<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams {
        kernel: KernelParams::from_natural(0.8, 0.7, 0.3),
        mean_net: Some(MlpParams::init([3, 5, 4, 2], &mut rng)),
        var_net: None,
        latents: None,
    };
    let x = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    (params, x)
}

#[test]
fn accumulated_gradients_are_linear() {
    let (params, x) = gp_problem(1);
    let rows: Vec<usize> = (0..6).collect();
    let s1 = ActiveSplit::from_holdout(vec![0, 3], 6).unwrap();
    let s2 = ActiveSplit::from_holdout(vec![5], 6).unwrap();
    // Relative jitter depends on θ and is held constant by the gradient.
    let opts = ObjectiveOptions { jitter: JitterPolicy::EXACT_FIRST, ..Default::default() };
    let (a, b) = (0.7, -1.9);
    let combined = |p: &ModelParams<f64>| {
        let (f, gf) = batch_value_and_grad(p, &x, &rows, &s1, &opts, None)?;
        let (g, gg) = batch_value_and_grad(p, &x, &rows, &s2, &opts, None)?;
        let mut acc = p.zeros_like();
        acc.axpy(a, &gf)?;
        acc.axpy(b, &gg)?;
        Ok((a * f.value + b * g.value, acc))
    };
    let opts = GradCheckOptions { zero_tol: 1e-9, ..GradCheckOptions::new(1e-5, usize::MAX) };
    let report = grad_check_with(combined, &params, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut ps = ParamSet::new(vector(&[1.0, -2.0, 0.5]));
        for _ in 0..25 {
            let (_, g) = quadratic(&ps.values, &[1.0, 3.0, 0.2], &[0.0, 0.1, -4.0]);
            ps.grads.axpy(1.0, &g).unwrap();
            ps.adam_step(&AdamConfig::with_lr(1e-2)).unwrap();
        }
        ps
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_gradient_names_the_coordinate_and_leaves_values() {
    let mut ps = ParamSet::new(vector(&[1.0, 2.0]));
    ps.grads.latents.as_mut().unwrap().z[(1, 0)] = f64::INFINITY;
    let before = ps.values.clone();
    match ps.adam_step(&AdamConfig::default()) {
        Err(GpError::NonFiniteGradient(name)) => assert_eq!(name, "latents.z[1]"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(ps.values, before);
    assert_eq!(ps.adam.t, 0);
}

#[test]
fn grad_check_detects_a_wrong_gradient() {
    let c = [1.0, 2.0];
    let t = [0.5, -0.5];
    let wrong = |p: &ModelParams<f64>| {
        let (v, mut g) = quadratic(p, &c, &t);
        g.latents.as_mut().unwrap().z[(0, 0)] *= 1.01;
        Ok((v, g))
    };
    let r = grad_check(wrong, &vector(&[3.0, 1.0]), 1e-5, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.max_rel_error > 5e-3);
    assert_eq!(r.worst, "latents.z[0]");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adam_descends_convex_quadratic_after_burn_in(
        lr in 1e-4f64..1e-2,
        start in prop::collection::vec(-3.0f64..3.0, 4),
        curv in prop::collection::vec(0.1f64..10.0, 4),
        target in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let mut ps = ParamSet::new(vector(&start));
        let cfg = AdamConfig::with_lr(lr);
        let mut values = Vec::new();
        for _ in 0..60 {
            let (v, g) = quadratic(&ps.values, &curv, &target);
            values.push(v);
            ps.grads.axpy(1.0, &g).unwrap();
            ps.adam_step(&cfg).unwrap();
        }
        for w in values[10..].windows(2) {
            prop_assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn flatten_and_assign_round_trip(seed in any::<u64>()) {
        let (params, _) = gp_problem(seed);
        let flat = params.flatten();
        prop_assert_eq!(flat.len(), params.num_params());
        let mut other = params.zeros_like();
        other.assign(&flat).unwrap();
        prop_assert_eq!(&other, &params);
        for k in [0, flat.len() / 2, flat.len() - 1] {
            prop_assert_eq!(params.get(k), flat[k]);
        }
        prop_assert!(other.assign(&flat[1..]).is_err());
    }
}
