//! Training: Xavier initialization, Adam with weight decay, the
//! patience-based learning-rate schedule, and stratified k-fold
//! cross-validation.

use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::network::{Ablation, Network, NetworkConfig};
use crate::tensor::{cross_entropy, softmax_rows, Mode};
use crate::weights::Entry;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate when the patience counter
    /// overflows.
    pub decay_factor: f64,
    /// Consecutive non-improving epochs tolerated before a decay.
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// When set, weight decay is applied directly to the parameters instead
    /// of being folded into the Adam gradient.
    pub decoupled_weight_decay: bool,
    pub folds: usize,
    /// Fraction of each fold's training portion held out as the validation
    /// set, stratified.
    pub validation_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            decay_factor: 0.5,
            patience: 10,
            batch_size: 64,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            folds: 5,
            validation_fraction: 0.2,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.decay_factor) || self.decay_factor == 0.0 {
            return fail(format!(
                "decay_factor must be in (0,1), got {}",
                self.decay_factor
            ));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.folds < 2 {
            return fail("folds must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return fail("validation_fraction must be in (0,1)".into());
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// Build a network with Xavier-initialized weights, deterministically under
/// the seed. Biases are zero, batch-norm scale 1 / shift 0.
pub fn init_network(config: &NetworkConfig, ablation: Ablation, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(config.clone(), ablation, &mut rng)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Mutable optimizer and schedule state carried across epochs.
pub struct TrainState {
    moments: BTreeMap<String, AdamSlot>,
    pub step: usize,
    pub patience_counter: usize,
    pub best_val_loss: f64,
    pub lr: f64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            moments: BTreeMap::new(),
            step: 0,
            patience_counter: 0,
            best_val_loss: f64::INFINITY,
            lr: config.learning_rate,
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// One Adam update over the network parameters using their accumulated
/// gradients. Weight decay is L2-coupled into the gradient unless the
/// decoupled flag is set.
pub fn adam_step(state: &mut TrainState, network: &Network, config: &TrainConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - config.adam_beta1.powf(t);
    let bc2 = 1.0 - config.adam_beta2.powf(t);
    for (name, param) in network.parameters() {
        let grad = param
            .grad_clone()
            .ok_or_else(|| Error::InvalidInput(format!("parameter '{name}' has no gradient")))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
        let mut theta = param.data_clone();
        let slot = state.moments.entry(name.clone()).or_insert_with(|| AdamSlot {
            m: vec![0.0; theta.len()],
            v: vec![0.0; theta.len()],
        });
        for i in 0..theta.len() {
            let g = if config.decoupled_weight_decay {
                grad[i]
            } else {
                grad[i] + config.weight_decay * theta[i]
            };
            slot.m[i] = config.adam_beta1 * slot.m[i] + (1.0 - config.adam_beta1) * g;
            slot.v[i] = config.adam_beta2 * slot.v[i] + (1.0 - config.adam_beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            theta[i] -= state.lr * m_hat / (v_hat.sqrt() + config.adam_epsilon);
            if config.decoupled_weight_decay {
                theta[i] -= state.lr * config.weight_decay * theta[i];
            }
        }
        param.set_data(&theta)?;
    }
    Ok(())
}

/// Patience schedule: an improving epoch records the new best loss and
/// resets the counter; otherwise the counter grows, and once it exceeds the
/// patience the learning rate is multiplied by the decay factor. Returns
/// whether this epoch improved.
pub fn plateau_update(state: &mut TrainState, val_loss: f64, config: &TrainConfig) -> bool {
    let improved = val_loss < state.best_val_loss;
    if improved {
        state.best_val_loss = val_loss;
        state.patience_counter = 0;
    } else {
        state.patience_counter += 1;
        if state.patience_counter > config.patience {
            state.lr *= config.decay_factor;
            state.patience_counter = 0;
        }
    }
    improved
}

/// Mean loss and probability rows of the network over a set, eval mode.
pub fn evaluate_network(
    network: &Network,
    set: &TrialSet,
    batch_size: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let x = set.batch_tensor(chunk);
        let labels = set.batch_labels(chunk);
        let logits = network.forward(&x, Mode::Eval, &mut rng)?;
        loss_sum += cross_entropy(&logits, &labels)?.item() * chunk.len() as f64;
        probs.extend(softmax_rows(&logits)?);
    }
    Ok((loss_sum / set.len() as f64, probs))
}

pub fn accuracy_of(probs: &[Vec<f64>], labels: &[u16]) -> f64 {
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            pred == l as usize
        })
        .count();
    correct as f64 / labels.len() as f64
}

pub struct FitResult {
    pub network: Network,
    pub state: TrainState,
    /// Snapshot of the full network state at the epoch with minimal
    /// validation loss.
    pub best_entries: Vec<Entry>,
    pub best_val_loss: f64,
}

/// Train one network on a train/validation split for the configured number
/// of epochs. Fully deterministic under the seed.
pub fn fit_fold(
    train: &TrialSet,
    val: &TrialSet,
    net_config: &NetworkConfig,
    ablation: Ablation,
    config: &TrainConfig,
    seed: u64,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("empty train or validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = Network::new(net_config.clone(), ablation, &mut rng)?;
    let mut state = TrainState::new(config);
    let mut best_entries = network.state_entries();
    let mut best_val_loss = f64::INFINITY;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = train.batch_tensor(chunk);
            let labels = train.batch_labels(chunk);
            network.zero_grad();
            let logits = network.forward(&x, Mode::Train, &mut rng)?;
            let loss = cross_entropy(&logits, &labels)?;
            loss.backward();
            train_loss_sum += loss.item() * chunk.len() as f64;
            adam_step(&mut state, &network, config)?;
        }
        let train_loss = train_loss_sum / train.len() as f64;

        let (val_loss, val_probs) = evaluate_network(&network, val, config.batch_size)?;
        let val_acc = accuracy_of(&val_probs, &val.labels);
        let improved = plateau_update(&mut state, val_loss, config);
        if improved {
            best_entries = network.state_entries();
            best_val_loss = val_loss;
        }
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr: state.lr,
        });
    }

    Ok(FitResult {
        network,
        state,
        best_entries,
        best_val_loss,
    })
}

/// Stratified partition of labels into `folds` disjoint index sets: per
/// class, indices are shuffled and dealt round-robin.
pub fn stratified_folds(
    labels: &[u16],
    classes: usize,
    folds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for (k, idxs) in by_class.iter().enumerate() {
        if idxs.len() < folds {
            return Err(Error::InvalidInput(format!(
                "class {k} has {} trials, fewer than {folds} folds",
                idxs.len()
            )));
        }
    }
    let mut out = vec![Vec::new(); folds];
    for idxs in by_class.iter_mut() {
        idxs.shuffle(rng);
        for (j, &i) in idxs.iter().enumerate() {
            out[j % folds].push(i);
        }
    }
    for fold in out.iter_mut() {
        fold.sort_unstable();
    }
    Ok(out)
}

/// Stratified split of an index pool into (train, validation) with the
/// given validation fraction; at least one trial per class goes to the
/// validation side.
pub fn stratified_holdout(
    pool: &[usize],
    labels: &[u16],
    classes: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i] as usize].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for idxs in by_class.iter_mut() {
        idxs.shuffle(rng);
        let k = ((idxs.len() as f64 * fraction).round() as usize).clamp(1, idxs.len() - 1);
        val.extend_from_slice(&idxs[..k]);
        train.extend_from_slice(&idxs[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub report: EvalReport,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    /// FRWT-serializable snapshot of the best network state.
    #[serde(skip)]
    pub best_entries: Vec<Entry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldOutcome>,
    pub accuracy: MeanStd,
    pub f_measure: MeanStd,
    pub kappa: MeanStd,
    pub auc_macro: MeanStd,
}

/// 5-fold (or k-fold) cross-validation: each fold serves once as the test
/// set; a stratified validation subset is carved out of the remaining
/// training portion; metrics are computed on the held-out fold with the
/// best-validation-loss parameters.
///
/// `jobs > 1` trains folds on worker threads with per-fold seeds
/// (`seed + fold`), which produces results identical to the sequential run.
pub fn cross_validate(
    data: &TrialSet,
    net_config: &NetworkConfig,
    ablation: Ablation,
    config: &TrainConfig,
    jobs: usize,
) -> Result<CrossValReport> {
    config.validate()?;
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let folds = stratified_folds(&data.labels, data.classes, config.folds, &mut rng)?;

    // Precompute every fold's splits so worker threads share nothing mutable.
    let mut splits = Vec::with_capacity(folds.len());
    for (fold_idx, test_idx) in folds.iter().enumerate() {
        let pool: Vec<usize> = (0..data.len()).filter(|i| !test_idx.contains(i)).collect();
        let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (fold_idx as u64 + 1));
        let (train_idx, val_idx) = stratified_holdout(
            &pool,
            &data.labels,
            data.classes,
            config.validation_fraction,
            &mut split_rng,
        );
        splits.push((fold_idx, train_idx, val_idx, test_idx.clone()));
    }

    let run_fold = |(fold_idx, train_idx, val_idx, test_idx): &(
        usize,
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
    )|
     -> Result<FoldOutcome> {
        let train = data.subset(train_idx);
        let val = data.subset(val_idx);
        let test = data.subset(test_idx);
        let fit = fit_fold(
            &train,
            &val,
            net_config,
            ablation,
            config,
            config.seed + *fold_idx as u64,
        )?;
        fit.network.load_state(&fit.best_entries)?;
        let (_, probs) = evaluate_network(&fit.network, &test, config.batch_size)?;
        let labels: Vec<usize> = test.labels.iter().map(|&l| l as usize).collect();
        let report = eval::evaluate(Some(&probs), None, &labels, data.classes)?;
        Ok(FoldOutcome {
            fold: *fold_idx,
            report,
            best_val_loss: fit.best_val_loss,
            history: fit.state.history,
            best_entries: fit.best_entries,
        })
    };

    let mut outcomes: Vec<FoldOutcome> = if jobs <= 1 {
        splits.iter().map(run_fold).collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = splits
                .chunks(splits.len().div_ceil(jobs))
                .map(|chunk| scope.spawn(move || chunk.iter().map(run_fold).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("fold worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    outcomes.sort_by_key(|o| o.fold);

    let acc: Vec<f64> = outcomes.iter().map(|o| o.report.accuracy).collect();
    let f: Vec<f64> = outcomes.iter().map(|o| o.report.f_measure).collect();
    let kappa: Vec<f64> = outcomes.iter().map(|o| o.report.kappa).collect();
    let auc: Vec<f64> = outcomes
        .iter()
        .map(|o| o.report.auc_macro.unwrap_or(f64::NAN))
        .collect();
    Ok(CrossValReport {
        accuracy: mean_std(&acc),
        f_measure: mean_std(&f),
        kappa: mean_std(&kappa),
        auc_macro: mean_std(&auc),
        folds: outcomes,
    })
}
