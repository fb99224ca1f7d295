use creepformer::data::{CreepCurveParams, PreparedData, Specimen, SplitMode};
use creepformer::train::{clip_gradients, mse_loss, train, validate, AdamW};
use creepformer::{AblationSpec, Error, TataConfig, TataModel, TrainConfig};
use creepformer_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> TataConfig {
    TataConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        hidden_dim: 8,
        d_intermediate: 4,
        dropout: 0.0,
        ..TataConfig::default()
    }
}

fn four_specimens() -> Vec<Specimen> {
    [(2300.0, 300.0, 2.6e5, 900.0, 0.10, 0.80), (2350.0, 400.0, 3.0e5, 700.0, 0.09, 0.75), (2400.0, 500.0, 3.4e5, 550.0, 0.11, 0.70), (2330.0, 450.0, 3.2e5, 620.0, 0.08, 0.85)]
        .iter()
        .enumerate()
        .map(|(i, &(rho, fc, e, a, b, c))| Specimen::from_params(format!("T{i}"), [rho, fc, e], CreepCurveParams::new(a, b, c)))
        .collect()
}

#[test]
fn mse_examples_and_oracle() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let l = mse_loss(&mut g, p, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let p = g.constant(Tensor::from_vec(vec![2.0]));
    let l = mse_loss(&mut g, p, &Tensor::from_vec(vec![0.0])).unwrap();
    assert_eq!(g.value(l).item(), 4.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..37).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..37).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut oracle = 0.0;
    for i in 0..37 {
        oracle += (a[i] - b[i]) * (a[i] - b[i]);
    }
    oracle /= 37.0;
    let p = g.constant(Tensor::new([37, 1], a).unwrap());
    let l = mse_loss(&mut g, p, &Tensor::from_vec(b)).unwrap();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);

    let empty = g.constant(Tensor::from_vec(vec![]));
    assert!(mse_loss(&mut g, empty, &Tensor::from_vec(vec![])).is_err());
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut params = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5])];
    let zero = vec![vec![0.0; 3]];
    let mut opt = AdamW::new(&params, 0.01, 0.0);
    for _ in 0..10 {
        opt.step(&mut params, &zero).unwrap();
    }
    assert_eq!(params[0].data(), [1.0, -2.0, 0.5]);

    let (lr, wd) = (0.01, 0.1);
    let mut opt = AdamW::new(&params, lr, wd);
    opt.step(&mut params, &zero).unwrap();
    assert_eq!(params[0].data(), [1.0 * (1.0 - lr * wd), -2.0 * (1.0 - lr * wd), 0.5 * (1.0 - lr * wd)]);
    for _ in 0..49 {
        opt.step(&mut params, &zero).unwrap();
    }
    let want = (1.0 - lr * wd).powi(50);
    assert!((params[0].data()[0] - want).abs() < 1e-14);
}

#[test]
fn adamw_descends_a_parabola() {
    let mut params = vec![Tensor::from_vec(vec![1.0])];
    let mut opt = AdamW::new(&params, 0.01, 0.0);
    let mut history = vec![1.0];
    for _ in 0..100 {
        let p = params[0].data()[0];
        opt.step(&mut params, &[vec![2.0 * p]]).unwrap();
        history.push(params[0].data()[0].abs());
    }
    assert!(history.windows(2).skip(1).all(|w| w[1] < w[0]), "{history:?}");
    assert!(history[100] < 0.7, "{}", history[100]);
}

#[test]
fn adamw_rejects_nan_gradients() {
    let mut params = vec![Tensor::from_vec(vec![1.0])];
    let mut opt = AdamW::new(&params, 0.01, 0.0);
    assert!(opt.step(&mut params, &[vec![f64::NAN]]).is_err());
    assert_eq!(params[0].data(), [1.0]);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        grads in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 1..6), 1..5),
        max_norm in 0.01f64..10.0,
    ) {
        let mut clipped = grads.clone();
        let before = clip_gradients(&mut clipped, max_norm);
        let after: f64 = clipped.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!(after <= max_norm + 1e-12);
        prop_assert!(after <= before + 1e-12);
        let s = if before > max_norm { max_norm / before } else { 1.0 };
        for (a, b) in grads.iter().flatten().zip(clipped.iter().flatten()) {
            prop_assert!((a * s - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 64,
        max_epochs: epochs,
        early_stop_patience: 1000,
        plateau_patience: 1000,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_model_overfits_four_specimens() {
    let data = PreparedData::new(four_specimens(), SplitMode::PerWindow, 1).unwrap();
    let mut model = TataModel::new(toy(), AblationSpec::full(), 3).unwrap();
    let report = train(&mut model, &data, &toy_train_config(200), |_| {}).unwrap();
    let first = report.metrics[0].train_loss;
    let best = report.metrics.iter().map(|m| m.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "train loss {first} -> {best}");
}

#[test]
fn training_is_reproducible_and_keeps_best_weights() {
    let data = PreparedData::new(four_specimens(), SplitMode::PerWindow, 2).unwrap();
    let run = || {
        let mut model = TataModel::new(toy(), AblationSpec::full(), 4).unwrap();
        let report = train(&mut model, &data, &toy_train_config(6), |_| {}).unwrap();
        (model, report)
    };
    let (model, a) = run();
    let (_, b) = run();
    assert_eq!(a.metrics, b.metrics);
    let min = a.metrics.iter().map(|m| m.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, min);
    let (val_loss, _) = validate(&model, &data, &data.splits.val).unwrap();
    assert!((val_loss - min).abs() < 1e-15, "{val_loss} vs {min}");
}

#[test]
fn early_stopping_ends_flat_runs() {
    let data = PreparedData::new(four_specimens(), SplitMode::PerWindow, 3).unwrap();
    let mut model = TataModel::new(toy(), AblationSpec::full(), 5).unwrap();
    let cfg = TrainConfig {
        // Updates far below one ulp leave the weights, and so the metrics, unchanged.
        lr: 1e-30,
        max_epochs: 50,
        early_stop_patience: 2,
        ..toy_train_config(50)
    };
    let report = train(&mut model, &data, &cfg, |_| {}).unwrap();
    assert!(report.stopped_early);
    assert!(report.metrics.len() < 50);
}

#[test]
fn non_finite_targets_abort_training() {
    let mut data = PreparedData::new(four_specimens(), SplitMode::PerWindow, 4).unwrap();
    for s in &mut data.series {
        s.creep[5] = f64::NAN;
    }
    let mut model = TataModel::new(toy(), AblationSpec::full(), 6).unwrap();
    let before = model.params().to_vec();
    let err = train(&mut model, &data, &toy_train_config(3), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    assert_eq!(model.params().len(), before.len());
}
