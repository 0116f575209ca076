use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sasgp::amortization::LatentParamTable;
use sasgp::bayes::{draw_noise, kl_to_standard_normal};
use sasgp::data::{synth_gp_dataset, Dataset};
use sasgp::error::GpError;
use sasgp::estimators::ActiveSplit;
use sasgp::kernel::KernelParams;
use sasgp::linalg::JitterPolicy;
use sasgp::matrix::Mat;
use sasgp::metrics::{nlpd, PredictiveOutput};
use sasgp::objective::{batch_value_and_grad, Ablation, Mode, ObjectiveOptions};
use sasgp::optim::ModelParams;
use sasgp::trainer::*;

fn small(epochs: usize) -> RunConfig {
    RunConfig { n_train: 96, n_test: 32, active_set: 8, batch: 24, epochs, lr: 3e-3, ..Default::default() }
}

fn small_free(epochs: usize) -> RunConfig {
    RunConfig { amortized: false, n_test: 0, lr: 1e-2, ..small(epochs) }
}

fn strip_seconds(log: &RunLog) -> RunLog {
    let mut l = log.clone();
    l.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
    l
}

#[test]
fn config_text_round_trips_and_reports_lines() {
    let mut cfg = RunConfig { mode: Mode::BayesianSas, num_mc: 3, ..small(7) };
    cfg.set("data", "csv-labeled:/tmp/x.csv").unwrap();
    let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.hash(), cfg.hash());
    let with_out = RunConfig { out: Some("/tmp/elsewhere".into()), ..cfg.clone() };
    assert_eq!(with_out.hash(), cfg.hash());
    assert_ne!(RunConfig { seed: 1, ..cfg.clone() }.hash(), cfg.hash());
    match RunConfig::parse_text("epochs = 3\n# comment\nbogus = 1\n") {
        Err(GpError::ParseError { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        RunConfig { active_set: 24, ..small(1) },
        RunConfig { lr: 0.0, ..small(1) },
        RunConfig { epochs: 0, ..small(1) },
        RunConfig { batch: 200, ..small(1) },
        RunConfig { mode: Mode::BayesianSas, ablation: Ablation::ActiveOnly, ..small(1) },
    ] {
        assert!(matches!(train(&cfg), Err(GpError::InvalidConfig(_))));
    }
    assert!(train_sas(&RunConfig { mode: Mode::BayesianSas, ..small(1) }).is_err());
    assert!(train_bayesian_sas(&small(1)).is_err());
    assert!(run_ablation(&small(1)).is_err());
}

#[test]
fn maximal_active_set_runs() {
    let cfg = RunConfig { active_set: 23, ..small_free(2) };
    let out = train_sas(&cfg).unwrap();
    assert_eq!(out.log.epochs.len(), 2);
    assert!(out.log.objectives().iter().all(|v| v.is_finite()));
}

#[test]
fn runs_are_deterministic_per_seed() {
    for cfg in [small(4), RunConfig { mode: Mode::BayesianSas, ..small(4) }, small_free(4)] {
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(strip_seconds(&a.log), strip_seconds(&b.log));
        assert_eq!(a.params, b.params);
        let c = train(&RunConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }
}

#[test]
fn epochs_increase_and_bayesian_kl_is_nonnegative() {
    let out = train_bayesian_sas(&RunConfig { mode: Mode::BayesianSas, ..small(5) }).unwrap();
    for (k, e) in out.log.epochs.iter().enumerate() {
        assert_eq!(e.epoch, k + 1);
        assert!(e.objective.is_finite() && e.seconds >= 0.0);
        assert!(e.min_kl.unwrap() >= 0.0 && e.mean_kl.unwrap() >= e.min_kl.unwrap());
    }
}

#[test]
fn both_modes_share_the_mean_network_shape() {
    let a = train(&small(1)).unwrap().params;
    let b = train(&RunConfig { mode: Mode::BayesianSas, ..small(1) }).unwrap().params;
    assert_eq!(a.mean_net.unwrap().sizes(), b.mean_net.as_ref().unwrap().sizes());
    assert!(b.var_net.is_some());
}

#[test]
fn collapsed_variances_track_point_objective_minus_kl() {
    let (ds, z) = synth_gp_dataset(10, 2, 3, &KernelParams::default(), 1).unwrap();
    let rows: Vec<usize> = (0..10).collect();
    let split = ActiveSplit::from_holdout(vec![2, 5, 7], 10).unwrap();
    let kl_scale = 2.5;
    let point = ModelParams {
        kernel: KernelParams::from_natural(0.7, 0.8, 0.2),
        mean_net: None,
        var_net: None,
        latents: Some(LatentParamTable { z: z.clone(), log_var: None }),
    };
    let mut bayes = point.clone();
    let tiny = Mat::from_fn(10, 2, |_, _| -40.0);
    bayes.latents.as_mut().unwrap().log_var = Some(tiny.clone());
    let noise = vec![draw_noise::<f64, _>(10, 2, &mut ChaCha8Rng::seed_from_u64(4))];
    let jitter = JitterPolicy::EXACT_FIRST;
    let sas = ObjectiveOptions { jitter, kl_scale, ..Default::default() };
    let elbo = ObjectiveOptions { mode: Mode::BayesianSas, ..sas };
    let (p, _) = batch_value_and_grad(&point, &ds.x, &rows, &split, &sas, None).unwrap();
    let (b, _) = batch_value_and_grad(&bayes, &ds.x, &rows, &split, &elbo, Some(&noise)).unwrap();
    let q = sasgp::bayes::VariationalPosterior::new(z, tiny).unwrap();
    let kl: f64 = kl_to_standard_normal(&q).iter().sum();
    assert!((b.value - (p.value - kl_scale * kl)).abs() < 1e-6);
}

#[test]
fn synthetic_run_beats_the_prior_predictor() {
    let cfg = RunConfig { n_train: 256, n_test: 64, active_set: 32, batch: 64, epochs: 40, ..Default::default() };
    let out = train(&cfg).unwrap();
    let m = out.log.metrics.unwrap();
    let prior = PredictiveOutput::new(Mat::zeros(out.test.n(), out.test.d()), vec![out.params.kernel.prior_variance(); out.test.n()]).unwrap();
    let baseline = nlpd(&out.test.x, &prior).unwrap();
    assert!(m.nlpd < baseline, "{} vs prior {baseline}", m.nlpd);
    assert!(m.knn_accuracy.is_none());
}

#[test]
fn free_latents_have_no_test_metrics() {
    let out = train(&RunConfig { n_test: 32, ..small_free(2) }).unwrap();
    assert!(out.log.metrics.is_none());
    assert!(out.log.final_exact_log_marginal.is_some());
}

#[test]
fn labelled_data_reports_knn_and_unlabelled_does_not() {
    let (ds, _) = synth_gp_dataset(128, 2, 4, &KernelParams::from_natural(1.0, 1.0, 0.1), 2).unwrap();
    let labels: Vec<u32> = (0..128).map(|i| (i % 3) as u32).collect();
    let labelled = Dataset::new(ds.x.clone(), Some(labels)).unwrap();
    let cfg = small(2);
    let (tr, te) = labelled.shuffled_split(96, 32, 0).unwrap();
    let with = train_on(&cfg, tr, te).unwrap();
    assert!(with.log.metrics.unwrap().knn_accuracy.is_some());
    let (tr, te) = ds.shuffled_split(96, 32, 0).unwrap();
    let without = train_on(&cfg, tr, te).unwrap().log.metrics.unwrap();
    assert!(without.knn_accuracy.is_none() && without.nlpd.is_finite());
}

#[test]
fn outputs_are_written_and_checkpoint_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { mode: Mode::BayesianSas, out: Some(dir.path().join("run")), ..small(3) };
    let out = train(&cfg).unwrap();
    let run = dir.path().join("run");
    for f in [CURVES_FILE, LATENTS_FILE, METRICS_FILE, RUN_LOG_FILE, CHECKPOINT_FILE] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let curves = read_curves(&run.join(CURVES_FILE)).unwrap();
    assert_eq!(curves.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(curves[2].objective, out.log.epochs[2].objective);
    let latents = fs::read_to_string(run.join(LATENTS_FILE)).unwrap();
    assert_eq!(latents.lines().next().unwrap(), "index,z_1,z_2,var_1,var_2");
    assert_eq!(latents.lines().count(), 1 + 96);

    let ckpt = Checkpoint::load(&run.join(CHECKPOINT_FILE)).unwrap();
    let restored = ckpt.to_params().unwrap();
    assert_eq!(restored, out.params);
    let again = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
    assert_eq!(again.to_params().unwrap(), out.params);
    let restored_cfg = RunConfig::parse_text(&ckpt.config).unwrap();
    let a = evaluate(&out.params, &restored_cfg, &out.train, &out.test).unwrap();
    let b = evaluate(&restored, &restored_cfg, &out.train, &out.test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, out.log.metrics);

    // exports other than wall-clock timings are byte-identical across runs
    let cfg2 = RunConfig { out: Some(dir.path().join("again")), ..cfg };
    train(&cfg2).unwrap();
    for f in [LATENTS_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(dir.path().join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, "{\"format\": \"something-else\"}").unwrap();
    assert!(Checkpoint::load(&p).is_err());
    let mut ckpt = Checkpoint::from_params(&train(&small_free(1)).unwrap().params, 0, String::new());
    ckpt.tensors[0].data.pop();
    assert!(ckpt.to_params().is_err());
}

#[test]
fn single_precision_training_completes() {
    let out = train(&RunConfig { precision: Precision::F32, ..small(3) }).unwrap();
    assert!(out.log.objectives().iter().all(|v| v.is_finite()));
    assert!(out.params.is_finite());
}

#[test]
fn verify_suites_pass_and_filter() {
    let report = verify::verify("all", Precision::F64, 0).unwrap();
    assert!(report.all_passed(), "{:?}", report.results.iter().filter(|r| !r.passed).collect::<Vec<_>>());
    assert!(report.relaxations().is_empty());
    let only = verify::verify("cv-identity", Precision::F64, 0).unwrap();
    assert!(only.results.iter().all(|r| r.suite == "cv-identity"));
    let f32 = verify::verify("all", Precision::F32, 0).unwrap();
    assert!(f32.all_passed());
    assert!(!f32.relaxations().is_empty());
    assert!(verify::verify("nope", Precision::F64, 0).is_err());
}
