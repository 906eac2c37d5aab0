use std::collections::BTreeMap;

use causalnet::autodiff::Tensor;
use causalnet::granger::{GrangerConfig, GraphSchedule};
use causalnet::ingest::{windows, DelayMatrix, SplitFractions, ZScoreParams};
use causalnet::model::{ModelConfig, ModelParams, Variant};
use causalnet::synth::{airport_names, distance_std, generate, geo_graph, synth_start, SynthConfig};
use causalnet::trainer::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn toy_model(n: usize, r: usize, m: usize) -> ModelConfig {
    ModelConfig {
        n_airports: n,
        hidden_dim: 4,
        embed_dim: 3,
        encoder_steps: r,
        horizon: m,
        ..ModelConfig::default()
    }
}

fn matrix(series: &[Vec<f64>]) -> DelayMatrix {
    DelayMatrix::from_series(airport_names(series.len()), synth_start(), series).unwrap()
}

fn random_dataset(seed: u64, n: usize, hours: usize, r: usize, m: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series: Vec<Vec<f64>> = (0..n).map(|_| (0..hours).map(|_| rng.random_range(0.0..40.0)).collect()).collect();
    let geo = Tensor::new(vec![n, n], (0..n * n).map(|k| if k % (n + 1) == 0 { 0.0 } else { 0.5 }).collect()).unwrap();
    Dataset::prepare(&matrix(&series), GraphSchedule::from_sets(n, vec![]), geo, SplitFractions::default(), r, m).unwrap()
}

/// The 3-airport synthetic set with real graph schedules.
fn synthetic_toy() -> Dataset {
    let cfg = SynthConfig {
        n_airports: 3,
        hours: 500,
        seed: 3,
        ..SynthConfig::default()
    };
    let (delays, truth) = generate(&cfg).unwrap();
    let schedule = GraphSchedule::precompute(&delays, &GrangerConfig::default()).unwrap();
    let geo = geo_graph(&truth.coords, distance_std(&truth.coords), f64::INFINITY).unwrap();
    let geo = Tensor::new(vec![3, 3], geo.weights).unwrap();
    Dataset::prepare(&delays, schedule, geo, SplitFractions::default(), 3, 2).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let mut data = random_dataset(1, 3, 120, 2, 2);
    data.samples.train.truncate(10);
    let cfg = toy_model(3, 2, 2);
    let tcfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 1,
        batch_size: 64,
        seed: 4,
        ..TrainConfig::default()
    };
    let init = ModelParams::init(&cfg, 4).unwrap();
    let out = train(&cfg, &data, &tcfg).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.history.len(), 1);
    let refs: Vec<_> = data.samples.train.iter().collect();
    let batch = make_batch(&refs, &data.schedule, 3);
    let (loss, _) = batch_gradients(&init, &data.geo, &batch).unwrap();
    // same samples, shuffled order
    assert!((out.history[0].train_loss - loss).abs() < 1e-12);
    assert_eq!(out.history[0].lr, 0.0);
}

#[test]
fn memorizes_a_tiny_dataset() {
    // 50 training windows; validation points at the training windows so the
    // best-on-validation pick tracks the fit.
    let mut data = random_dataset(2, 3, 77, 2, 2);
    assert_eq!(data.samples.train.len(), 50);
    data.samples.val = data.samples.train.clone();
    let cfg = ModelConfig {
        hidden_dim: 16,
        embed_dim: 4,
        ..toy_model(3, 2, 2)
    };
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        decay_every: 50,
        max_epochs: 150,
        patience: 150,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data, &tcfg).unwrap();
    let fit = forecast(&out.params, &data, &data.samples.train, 64).unwrap();
    let base = persistence_baseline(&data.samples.train, &data.zscore, 2).unwrap();
    let (fit_mae, base_mae) = (fit.mae.iter().sum::<f64>(), base.mae.iter().sum::<f64>());
    assert!(fit_mae < 0.1 * base_mae, "model {fit_mae} vs persistence {base_mae}");
}

#[test]
fn same_seed_is_bit_reproducible() {
    let data = synthetic_toy();
    let cfg = toy_model(3, 3, 2);
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 2,
        batch_size: 32,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &data, &tcfg).unwrap();
    let b = train(&cfg, &data, &tcfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let bits = |h: &[EpochRecord]| h.iter().map(|r| (r.train_loss.to_bits(), r.val_mae.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    let other = train(&cfg, &data, &TrainConfig { seed: 12, ..tcfg }).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn validation_data_never_reaches_the_gradients() {
    let data = random_dataset(5, 3, 300, 2, 2);
    let mut altered = data.clone();
    for s in altered.samples.val.iter_mut() {
        for row in s.targets.iter_mut().chain(s.inputs.iter_mut()) {
            row.iter_mut().for_each(|v| *v = -*v * 3.0 + 1.0);
        }
    }
    let cfg = toy_model(3, 2, 2);
    let tcfg = TrainConfig {
        learning_rate: 5e-3,
        max_epochs: 3,
        patience: 10,
        batch_size: 50,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &data, &tcfg).unwrap();
    let b = train(&cfg, &altered, &tcfg).unwrap();
    let losses = |o: &TrainOutcome| o.history.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_ne!(a.history[0].val_mae, b.history[0].val_mae);
}

#[test]
fn nan_loss_reports_epoch_and_batch() {
    let mut data = random_dataset(6, 3, 200, 2, 2);
    let sample = &mut data.samples.train[0];
    sample.inputs[0][1] = f64::NAN;
    let cfg = toy_model(3, 2, 2);
    let tcfg = TrainConfig {
        max_epochs: 2,
        batch_size: 500,
        ..TrainConfig::default()
    };
    let err = train(&cfg, &data, &tcfg).unwrap_err();
    match err {
        TrainError::NonFiniteLoss { epoch, batch, .. } => assert_eq!((epoch, batch), (0, 0)),
        other => panic!("unexpected {other}"),
    }
    assert!(err_text(&cfg, &data, &tcfg).contains("epoch 0, batch 0"));
}

fn err_text(cfg: &ModelConfig, data: &Dataset, tcfg: &TrainConfig) -> String {
    train(cfg, data, tcfg).unwrap_err().to_string()
}

#[test]
fn mismatched_model_is_rejected() {
    let data = random_dataset(7, 3, 200, 2, 2);
    let err = train(&toy_model(4, 2, 2), &data, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::ShapeMismatch(_)), "{err}");
    let err = train(&toy_model(3, 3, 2), &data, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::ShapeMismatch(_)), "{err}");
}

#[test]
fn every_variant_trains_on_the_toy_set() {
    let data = synthetic_toy();
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    for variant in Variant::ALL {
        let (outcome, result) = ablate(variant, &toy_model(3, 3, 2), &data, &tcfg).unwrap();
        assert_eq!(outcome.params.config().variant, variant);
        assert_eq!(result.mae.len(), 2);
        assert!(result.predictions.iter().flatten().flatten().all(|v| v.is_finite()));
        if variant == Variant::Nf {
            let ones = Tensor::ones(outcome.params.get("cell.fit1").unwrap().shape());
            assert_eq!(outcome.params.get("cell.fit1").unwrap(), &ones);
        }
    }
}

#[test]
fn adam_minimizes_a_quadratic_bowl() {
    let cfg = toy_model(2, 1, 1);
    let mut params = ModelParams::init(&cfg, 9).unwrap();
    let centre = |name: &str, i: usize| ((name.len() + i) % 7) as f64 * 0.3 - 1.0;
    let loss = |p: &ModelParams| -> f64 {
        p.iter()
            .map(|(n, t)| t.data().iter().enumerate().map(|(i, v)| (v - centre(n, i)).powi(2)).sum::<f64>())
            .sum()
    };
    let mut adam = Adam::new(&params);
    let initial = loss(&params);
    let mut checkpoints = vec![initial];
    for step in 0..200 {
        let grads: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| {
                let g = t.data().iter().enumerate().map(|(i, v)| 2.0 * (v - centre(n, i))).collect();
                (n.clone(), Tensor::new(t.shape().to_vec(), g).unwrap())
            })
            .collect();
        adam.step(&mut params, &grads, 0.1 * 0.97f64.powi(step)).unwrap();
        if (step + 1) % 40 == 0 {
            checkpoints.push(loss(&params));
        }
    }
    assert!(checkpoints.windows(2).all(|w| w[1] < w[0]), "{checkpoints:?}");
    assert!(loss(&params) < 1e-3 * initial, "{} vs {initial}", loss(&params));
}

#[test]
fn persistence_on_constant_series_is_exact() {
    let series = vec![vec![12.0; 100], (0..100).map(|t| (t % 5) as f64).collect()];
    let m = matrix(&series);
    let z = ZScoreParams::fit(&m).unwrap();
    let samples = windows(&z.apply_matrix(&m), 0..100, 2, 3);
    // only the first airport is constant; score it alone
    let single: Vec<_> = samples
        .iter()
        .map(|s| causalnet::ingest::Sample {
            t: s.t,
            inputs: s.inputs.iter().map(|r| vec![r[0]]).collect(),
            targets: s.targets.iter().map(|r| vec![r[0]]).collect(),
            target_mask: s.target_mask.iter().map(|r| vec![r[0]]).collect(),
        })
        .collect();
    let res = persistence_baseline(&single, &z, 3).unwrap();
    for mae in res.mae {
        assert!(mae.abs() < 1e-12);
    }
}

#[test]
fn persistence_on_a_daily_sinusoid() {
    let amp = 7.0;
    let r = 2;
    let hours = 24 * 10 + r + 1;
    let series = vec![(0..hours).map(|t| 20.0 + amp * (std::f64::consts::TAU * t as f64 / 24.0).sin()).collect::<Vec<_>>()];
    let m = matrix(&series);
    let z = ZScoreParams::fit(&m).unwrap();
    let samples = windows(&z.apply_matrix(&m), 0..hours, r, 1);
    assert_eq!(samples.len(), 240);
    let res = persistence_baseline(&samples, &z, 1).unwrap();
    // |sin(a + δ) − sin a| = 2|cos(a + δ/2)| sin(δ/2), averaged over 24 phases
    let delta = std::f64::consts::TAU / 24.0;
    let want = (0..24)
        .map(|k| 2.0 * amp * (delta * (k as f64 + 0.5)).cos().abs() * (delta / 2.0).sin())
        .sum::<f64>()
        / 24.0;
    assert!((res.mae[0] - want).abs() < 1e-9, "{} vs {want}", res.mae[0]);
    // close to the continuous-phase value 4A sin(π/24)/π
    let continuous = 4.0 * amp * (std::f64::consts::PI / 24.0).sin() / std::f64::consts::PI;
    assert!((res.mae[0] - continuous).abs() / continuous < 0.01);
}

#[test]
fn persistence_error_grows_with_horizon_on_a_random_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let series: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut y = 100.0;
            (0..3000)
                .map(|_| {
                    y += normal.sample(&mut rng);
                    y
                })
                .collect()
        })
        .collect();
    let m = matrix(&series);
    let z = ZScoreParams::fit(&m).unwrap();
    let samples = windows(&z.apply_matrix(&m), 0..3000, 1, 4);
    let res = persistence_baseline(&samples, &z, 4).unwrap();
    assert!(res.mae.windows(2).all(|w| w[1] > w[0]), "{:?}", res.mae);
    // E|N(0, h)| = sqrt(2h/π)
    for (h, mae) in res.mae.iter().enumerate() {
        let want = (2.0 * (h + 1) as f64 / std::f64::consts::PI).sqrt();
        assert!((mae - want).abs() / want < 0.1, "h={} {mae} vs {want}", h + 1);
    }
}

#[test]
fn adaptive_weight_report() {
    let cfg = toy_model(3, 1, 1);
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    let names = airport_names(3);
    let report = report_adaptive_weights(&params, &names).unwrap();
    assert!(report.iter().all(|w| w.score == 1.0));
    assert_eq!(report.iter().map(|w| w.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    let mut fit = params.get("cell.fit1").unwrap().clone();
    let f = fit.shape()[1];
    fit.data_mut()[f..2 * f].iter_mut().for_each(|v| *v *= 2.0);
    params.set("cell.fit1", fit).unwrap();
    let report = report_adaptive_weights(&params, &names).unwrap();
    assert_eq!(report[1].score, 2.0);
    assert_eq!(report[1].rank, 1);
    assert!(report_adaptive_weights(&params, &names[..2]).is_err());
}

#[test]
fn correction_analysis_end_to_end() {
    let data = synthetic_toy();
    let cfg = toy_model(3, 3, 2);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    let (raw, corrected) = correction_pairs(&params, &data, &data.samples.test).unwrap();
    assert!(!raw.is_empty());
    let distances = analyze_correction(&raw, &corrected).unwrap();
    assert!(distances.iter().all(|d| d.is_finite() && *d >= 0.0));

    let e1 = params.get("corr.e1").unwrap().clone();
    params.set("corr.e2", e1).unwrap();
    let (raw, corrected) = correction_pairs(&params, &data, &data.samples.test).unwrap();
    assert_eq!(analyze_correction(&raw, &corrected).unwrap(), [0.0; 4]);
}

#[test]
fn csv_outputs() {
    let history = vec![EpochRecord {
        epoch: 0,
        train_loss: 0.5,
        val_mae: 3.25,
        lr: 1e-4,
    }];
    let mut buf = Vec::new();
    write_history_csv(&mut buf, &history).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_mae,lr\n0,0.5,3.25,0.0001\n");
    let result = ForecastResult {
        predictions: vec![],
        mae: vec![1.5, 2.0],
        rmse: vec![2.5, 3.0],
    };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &MetricRow::from_result(&result, Variant::Nmc.name(), 7)).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "horizon,mae,rmse,variant,seed\n1,1.5,2.5,nmc,7\n2,2.0,3.0,nmc,7\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rmse_bounds_mae_and_order_does_not_matter(
        rows in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0, any::<bool>()), 1..60),
        seed in any::<u64>(),
    ) {
        prop_assume!(rows.iter().any(|r| r.2));
        let (p, y, m): (Vec<f64>, Vec<f64>, Vec<bool>) = rows.iter().fold((vec![], vec![], vec![]), |mut acc, r| {
            acc.0.push(r.0);
            acc.1.push(r.1);
            acc.2.push(r.2);
            acc
        });
        let (mae, rmse) = evaluate(&p, &y, &m).unwrap();
        prop_assert!(rmse >= mae);
        let mut idx: Vec<usize> = (0..p.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let perm = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let pm: Vec<bool> = idx.iter().map(|&i| m[i]).collect();
        let (mae2, rmse2) = evaluate(&perm(&p), &perm(&y), &pm).unwrap();
        prop_assert!((mae - mae2).abs() <= 1e-12 * mae.max(1.0));
        prop_assert!((rmse - rmse2).abs() <= 1e-12 * rmse.max(1.0));
    }
}
