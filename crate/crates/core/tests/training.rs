//! Optimizer, schedule, splitting, and end-to-end fitting behavior.

use frnet_core::data::{synthesize, SynthSpec, TrialSet};
use frnet_core::layers::xavier_uniform;
use frnet_core::network::{Ablation, NetworkConfig};
use frnet_core::training::{
    accuracy_of, adam_step, cross_validate, evaluate_network, fit_fold, init_network,
    plateau_update, stratified_folds, stratified_holdout, TrainConfig, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        electrodes: 3,
        trial_length: 32,
        classes: 2,
        stem_filters: 2,
        stem_temporal_kernel: 8,
        stem_depth_multiplier: 1,
        stem_pool: 8,
        mfe_branch_kernels: vec![3],
        mfe_filters_per_branch: 2,
        fr_channels: 8,
        temporal_scale_factor: 2,
        scale_base: 2,
        channel_split_factor: 1,
        prediction_kernel: 4,
        dropout_p: 0.0,
        elu_alpha: 1.0,
    }
}

/// Two easily separable classes: distinct carrier channels and frequencies.
fn tiny_data(trials_per_class: usize, seed: u64) -> TrialSet {
    synthesize(&SynthSpec {
        classes: 2,
        trials_per_class,
        channels: 3,
        samples: 32,
        sampling_rate: 32.0,
        class_frequencies: vec![3.0, 8.0],
        class_channels: vec![vec![0], vec![2]],
        window: (8, 24),
        amplitude: 1.5,
        noise_sigma: 0.2,
        seed,
    })
    .unwrap()
}

#[test]
fn train_config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            decay_factor: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            folds: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            validation_fraction: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn xavier_bounds_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = xavier_uniform(&[50, 40], 40, 50, &mut rng);
    let bound = (6.0f64 / (40.0 + 50.0)).sqrt();
    let data = t.data_clone();
    assert!(data.iter().all(|v| v.abs() <= bound));
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    // spread is that of U(-b, b): sd = b/sqrt(3), allow 10%
    let sd = (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt();
    assert!((sd - bound / 3f64.sqrt()).abs() / sd < 0.1, "sd {sd}");
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let net = init_network(&tiny_net(), Ablation::Full, 3).unwrap();
    let before: Vec<Vec<f64>> = net.parameters().iter().map(|(_, t)| t.data_clone()).collect();
    net.zero_grad();
    let config = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config);
    adam_step(&mut state, &net, &config).unwrap();
    for ((_, t), b) in net.parameters().iter().zip(&before) {
        assert_eq!(&t.data_clone(), b);
    }
}

#[test]
fn adam_first_step_is_a_signed_learning_rate_step() {
    let net = init_network(&tiny_net(), Ablation::Full, 3).unwrap();
    let config = TrainConfig {
        weight_decay: 0.0,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    net.zero_grad();
    // seed an arbitrary nonzero gradient on one parameter
    let (_, param) = net
        .parameters()
        .into_iter()
        .find(|(n, _)| n == "pred.fc.weight")
        .unwrap();
    let before = param.data_clone();
    let grads: Vec<f64> = (0..param.len())
        .map(|i| if i % 2 == 0 { 0.5 } else { -2.0 })
        .collect();
    param.accumulate_grad(&grads);
    let mut state = TrainState::new(&config);
    adam_step(&mut state, &net, &config).unwrap();
    let after = param.data_clone();
    for i in 0..before.len() {
        let step = before[i] - after[i];
        // bias-corrected first step: lr * g/(|g| + eps) ~= lr * sign(g)
        let expected = config.learning_rate * grads[i].signum();
        assert!((step - expected).abs() < 1e-6, "step {step} vs {expected}");
    }
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let net = init_network(&tiny_net(), Ablation::Full, 3).unwrap();
    net.zero_grad();
    let (name, param) = net.parameters().into_iter().next().unwrap();
    let mut g = vec![0.0; param.len()];
    g[0] = f64::NAN;
    param.accumulate_grad(&g);
    let config = TrainConfig::default();
    let mut state = TrainState::new(&config);
    let err = adam_step(&mut state, &net, &config).unwrap_err();
    assert!(err.to_string().contains(&name), "{err}");
}

#[test]
fn plateau_schedule_trace() {
    let config = TrainConfig {
        patience: 2,
        decay_factor: 0.5,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config);
    assert!(plateau_update(&mut state, 1.0, &config));
    assert_eq!(state.lr, 1.0);
    assert!(!plateau_update(&mut state, 1.1, &config)); // counter 1
    assert!(!plateau_update(&mut state, 1.1, &config)); // counter 2
    assert_eq!(state.lr, 1.0);
    assert!(!plateau_update(&mut state, 1.1, &config)); // counter 3 > 2: decay
    assert_eq!(state.lr, 0.5);
    assert_eq!(state.patience_counter, 0);
    assert_eq!(state.best_val_loss, 1.0);

    // an improvement resets the counter without touching the rate
    assert!(!plateau_update(&mut state, 1.05, &config));
    assert!(plateau_update(&mut state, 0.9, &config));
    assert_eq!(state.patience_counter, 0);
    assert_eq!(state.lr, 0.5);
}

#[test]
fn stratified_folds_partition_evenly() {
    // 4 balanced classes of 25 -> 5 folds of 20, 5 per class
    let labels: Vec<u16> = (0..100).map(|i| (i % 4) as u16).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let folds = stratified_folds(&labels, 4, 5, &mut rng).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = vec![false; 100];
    for fold in &folds {
        assert_eq!(fold.len(), 20);
        for k in 0..4u16 {
            let per_class = fold.iter().filter(|&&i| labels[i] == k).count();
            assert_eq!(per_class, 5);
        }
        for &i in fold {
            assert!(!seen[i], "index {i} in two folds");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));

    // too few trials in a class
    let small: Vec<u16> = vec![0, 0, 0, 1, 1, 1, 1, 1];
    assert!(stratified_folds(&small, 2, 4, &mut rng).is_err());
}

#[test]
fn stratified_holdout_keeps_every_class_on_both_sides() {
    let labels: Vec<u16> = (0..30).map(|i| (i % 3) as u16).collect();
    let pool: Vec<usize> = (0..30).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (train, val) = stratified_holdout(&pool, &labels, 3, 0.2, &mut rng);
    assert_eq!(train.len() + val.len(), 30);
    for k in 0..3u16 {
        assert!(train.iter().any(|&i| labels[i] == k));
        assert!(val.iter().any(|&i| labels[i] == k));
    }
    assert!(train.iter().all(|i| !val.contains(i)));
    // 20% of 10 per class
    assert_eq!(val.len(), 6);
}

#[test]
fn fit_fold_is_deterministic_and_learns() {
    let data = tiny_data(12, 41);
    let train = data.subset(&(0..16).collect::<Vec<_>>());
    let val = data.subset(&(16..24).collect::<Vec<_>>());
    let config = TrainConfig {
        epochs: 40,
        batch_size: 8,
        learning_rate: 0.005,
        ..TrainConfig::default()
    };

    let a = fit_fold(&train, &val, &tiny_net(), Ablation::Full, &config, 7).unwrap();
    let b = fit_fold(&train, &val, &tiny_net(), Ablation::Full, &config, 7).unwrap();
    assert_eq!(a.state.history.len(), config.epochs);
    for (ra, rb) in a.state.history.iter().zip(&b.state.history) {
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_loss, rb.val_loss);
        assert_eq!(ra.lr, rb.lr);
    }
    for ((_, ta), (_, tb)) in a.network.parameters().iter().zip(b.network.parameters().iter()) {
        assert_eq!(ta.data_clone(), tb.data_clone());
    }

    // learning rates only ever decay by the configured factor
    let mut last = config.learning_rate;
    for r in &a.state.history {
        assert!(r.lr == last || r.lr == last * config.decay_factor);
        last = r.lr;
    }

    // the separable problem is actually solved
    let final_acc = a.state.history.last().unwrap().val_acc;
    assert!(final_acc >= 0.9, "validation accuracy {final_acc}");
    assert!(a.best_val_loss < 0.5, "best val loss {}", a.best_val_loss);

    // restoring the best snapshot reproduces the recorded best loss
    a.network.load_state(&a.best_entries).unwrap();
    let (loss, probs) = evaluate_network(&a.network, &val, config.batch_size).unwrap();
    assert!((loss - a.best_val_loss).abs() < 1e-10);
    assert!(accuracy_of(&probs, &val.labels) >= 0.9);
}

#[test]
fn cross_validation_parallel_matches_sequential() {
    let data = tiny_data(8, 42);
    let config = TrainConfig {
        epochs: 6,
        batch_size: 8,
        folds: 2,
        learning_rate: 0.005,
        ..TrainConfig::default()
    };
    let net = tiny_net();
    let seq = cross_validate(&data, &net, Ablation::Full, &config, 1).unwrap();
    let par = cross_validate(&data, &net, Ablation::Full, &config, 2).unwrap();
    assert_eq!(seq.folds.len(), 2);
    assert_eq!(seq.accuracy.mean, par.accuracy.mean);
    assert_eq!(seq.kappa.mean, par.kappa.mean);
    for (a, b) in seq.folds.iter().zip(&par.folds) {
        assert_eq!(a.fold, b.fold);
        assert_eq!(a.report.confusion, b.report.confusion);
        assert_eq!(a.best_val_loss, b.best_val_loss);
    }
    // every fold produced a full history and a snapshot
    for f in &seq.folds {
        assert_eq!(f.history.len(), config.epochs);
        assert!(!f.best_entries.is_empty());
    }
}

#[test]
fn init_network_is_seeded() {
    let a = init_network(&tiny_net(), Ablation::Full, 11).unwrap();
    let b = init_network(&tiny_net(), Ablation::Full, 11).unwrap();
    let c = init_network(&tiny_net(), Ablation::Full, 12).unwrap();
    let flat = |n: &frnet_core::network::Network| -> Vec<f64> {
        n.parameters().iter().flat_map(|(_, t)| t.data_clone()).collect()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}
