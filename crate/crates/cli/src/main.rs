//! `frnet`: command-line entry point for the feature-reweighting EEG
//! classifier. Subcommands cover data synthesis, training, k-fold
//! cross-validation, evaluation, gradient checking, Grad-CAM attribution,
//! and the ablation sweep.

mod gradcheck_suite;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use frnet_core::data::{load_eegb, save_eegb, synthesize, SynthSpec, TrialSet};
use frnet_core::eval::{evaluate, roc_points, EvalReport};
use frnet_core::explain::{export_map, grad_cam};
use frnet_core::network::{Ablation, Network, NetworkConfig};
use frnet_core::training::{
    cross_validate, evaluate_network, fit_fold, stratified_holdout, CrossValReport, TrainConfig,
};
use frnet_core::weights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything a run needs, merged from defaults, the optional JSON config
/// file, and command-line flags (in that precedence order).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    network: NetworkConfig,
    train: TrainConfig,
    synth: SynthSpec,
}

#[derive(Parser)]
#[command(name = "frnet", version, about = "Feature-reweighting EEG classifier")]
struct Cli {
    /// JSON configuration file (sections: network, train, synth)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EEG trial set and write it as EEGB
    Synth,
    /// Train one model on a stratified holdout split
    Train {
        /// EEGB trial file
        #[arg(long)]
        data: PathBuf,
        /// Architecture variant to train
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// k-fold stratified cross-validation
    Xval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        ablation: String,
        /// Worker threads for folds (1 = sequential; results identical)
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a trained checkpoint on a trial set
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// FRWT checkpoint written by `train` (expects its .json sidecar)
        #[arg(long)]
        model: PathBuf,
    },
    /// Finite-difference check of every kernel and the full network
    Gradcheck,
    /// Grad-CAM attribution maps as CSV
    Explain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Feature map to tap
        #[arg(long, default_value = "fr")]
        layer: String,
        /// Target class (default: the predicted class per trial)
        #[arg(long)]
        class: Option<usize>,
        /// Single trial index (default: every trial in the set)
        #[arg(long)]
        trial: Option<usize>,
    },
    /// Cross-validate every architecture variant and tabulate the results
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FRNET_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut run: RunConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.train.seed = seed;
        run.synth.seed = seed;
    }
    run.network
        .validate()
        .context("invalid [network] section")?;
    run.train.validate().context("invalid [train] section")?;
    run.synth.validate().context("invalid [synth] section")?;
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    let run_config = load_run_config(&cli)?;
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    match &cli.command {
        Command::Synth => cmd_synth(&run_config, &cli.out),
        Command::Train { data, ablation } => {
            cmd_train(&run_config, data, ablation, &cli.out)
        }
        Command::Xval {
            data,
            ablation,
            jobs,
        } => cmd_xval(&run_config, data, ablation, *jobs, &cli.out),
        Command::Eval { data, model } => cmd_eval(data, model, &cli.out),
        Command::Gradcheck => gradcheck_suite::run(run_config.train.seed),
        Command::Explain {
            data,
            model,
            layer,
            class,
            trial,
        } => cmd_explain(data, model, layer, *class, *trial, &cli.out),
        Command::Ablate { data, jobs } => cmd_ablate(&run_config, data, *jobs, &cli.out),
    }
}

fn cmd_synth(run: &RunConfig, out: &Path) -> Result<()> {
    let set = synthesize(&run.synth)?;
    let path = out.join("synth.eegb");
    save_eegb(&set, &path)?;
    log::info!(
        "wrote {} trials ({} classes, {}x{}) to {}",
        set.len(),
        set.classes,
        set.channels,
        set.samples,
        path.display()
    );
    Ok(())
}

fn load_data(path: &Path) -> Result<TrialSet> {
    load_eegb(path).with_context(|| format!("loading {}", path.display()))
}

/// Companion JSON written next to each checkpoint so `eval` and `explain`
/// can rebuild the exact architecture.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    network: NetworkConfig,
    train: TrainConfig,
    ablation: Ablation,
}

fn write_checkpoint(
    dir: &Path,
    stem: &str,
    entries: &[weights::Entry],
    sidecar: &Sidecar,
) -> Result<()> {
    weights::save(entries, &dir.join(format!("{stem}.frwt")))?;
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

fn load_checkpoint(model: &Path) -> Result<(Network, Sidecar)> {
    let sidecar_path = model.with_extension("json");
    let text = std::fs::read_to_string(&sidecar_path)
        .with_context(|| format!("reading model sidecar {}", sidecar_path.display()))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .with_context(|| format!("parsing model sidecar {}", sidecar_path.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sidecar.train.seed);
    let network = Network::new(sidecar.network.clone(), sidecar.ablation, &mut rng)?;
    let entries = weights::load(model)?;
    network.load_state(&entries)?;
    Ok((network, sidecar))
}

fn write_history(path: &Path, history: &[frnet_core::training::EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,val_acc,lr")?;
    for r in history {
        writeln!(
            f,
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
        )?;
    }
    Ok(())
}

fn check_compat(network: &NetworkConfig, data: &TrialSet) -> Result<()> {
    if network.electrodes != data.channels {
        bail!(
            "config expects {} electrodes but the data has {} channels",
            network.electrodes,
            data.channels
        );
    }
    if network.classes != data.classes {
        bail!(
            "config expects {} classes but the data has {}",
            network.classes,
            data.classes
        );
    }
    Ok(())
}

fn cmd_train(run: &RunConfig, data_path: &Path, ablation: &str, out: &Path) -> Result<()> {
    let ablation = Ablation::from_name(ablation)?;
    let data = load_data(data_path)?;
    check_compat(&run.network, &data)?;
    let pool: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let (train_idx, val_idx) = stratified_holdout(
        &pool,
        &data.labels,
        data.classes,
        run.train.validation_fraction,
        &mut rng,
    );
    let train = data.subset(&train_idx);
    let val = data.subset(&val_idx);
    log::info!(
        "training '{}' on {} trials, validating on {}",
        ablation.name(),
        train.len(),
        val.len()
    );
    let fit = fit_fold(
        &train,
        &val,
        &run.network,
        ablation,
        &run.train,
        run.train.seed,
    )?;
    write_history(&out.join("history.csv"), &fit.state.history)?;
    write_checkpoint(
        out,
        "model",
        &fit.best_entries,
        &Sidecar {
            network: run.network.clone(),
            train: run.train.clone(),
            ablation,
        },
    )?;
    let last = fit.state.history.last().unwrap();
    log::info!(
        "done: best val loss {:.4}, final val acc {:.3}; artifacts in {}",
        fit.best_val_loss,
        last.val_acc,
        out.display()
    );
    Ok(())
}

fn write_xval_artifacts(
    report: &CrossValReport,
    sidecar_of: impl Fn(usize) -> Sidecar,
    prefix: &str,
    out: &Path,
) -> Result<()> {
    for fold in &report.folds {
        let stem = format!("{prefix}fold{}", fold.fold);
        std::fs::write(
            out.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&fold.report)?,
        )?;
        write_history(&out.join(format!("{stem}_history.csv")), &fold.history)?;
        write_checkpoint(out, &stem, &fold.best_entries, &sidecar_of(fold.fold))?;
    }
    let aggregate = serde_json::json!({
        "accuracy": report.accuracy,
        "f_measure": report.f_measure,
        "kappa": report.kappa,
        "auc_macro": report.auc_macro,
    });
    std::fs::write(
        out.join(format!("{prefix}aggregate.json")),
        serde_json::to_string_pretty(&aggregate)?,
    )?;
    Ok(())
}

fn cmd_xval(
    run: &RunConfig,
    data_path: &Path,
    ablation: &str,
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let ablation = Ablation::from_name(ablation)?;
    let data = load_data(data_path)?;
    check_compat(&run.network, &data)?;
    log::info!(
        "{}-fold cross-validation of '{}' on {} trials ({} jobs)",
        run.train.folds,
        ablation.name(),
        data.len(),
        jobs
    );
    let report = cross_validate(&data, &run.network, ablation, &run.train, jobs)?;
    write_xval_artifacts(
        &report,
        |_| Sidecar {
            network: run.network.clone(),
            train: run.train.clone(),
            ablation,
        },
        "",
        out,
    )?;
    log::info!(
        "accuracy {:.3} +/- {:.3}, kappa {:.3} +/- {:.3}; artifacts in {}",
        report.accuracy.mean,
        report.accuracy.std,
        report.kappa.mean,
        report.kappa.std,
        out.display()
    );
    Ok(())
}

fn write_eval_artifacts(report: &EvalReport, probs: &[Vec<f64>], labels: &[usize], out: &Path) -> Result<()> {
    std::fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut f = std::fs::File::create(out.join("confusion.csv"))?;
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    for k in 0..report.confusion.len() {
        let scores: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let pts = roc_points(&scores, &positives);
        let mut f = std::fs::File::create(out.join(format!("roc_class{k}.csv")))?;
        writeln!(f, "fpr,tpr")?;
        for (fpr, tpr) in pts {
            writeln!(f, "{fpr:.9e},{tpr:.9e}")?;
        }
    }
    Ok(())
}

fn cmd_eval(data_path: &Path, model: &Path, out: &Path) -> Result<()> {
    let data = load_data(data_path)?;
    let (network, sidecar) = load_checkpoint(model)?;
    check_compat(&sidecar.network, &data)?;
    let (loss, probs) = evaluate_network(&network, &data, sidecar.train.batch_size)?;
    let labels: Vec<usize> = data.labels.iter().map(|&l| l as usize).collect();
    let report = evaluate(Some(&probs), None, &labels, data.classes)?;
    write_eval_artifacts(&report, &probs, &labels, out)?;
    log::info!(
        "loss {:.4}, accuracy {:.3}, kappa {:.3}; report in {}",
        loss,
        report.accuracy,
        report.kappa,
        out.display()
    );
    Ok(())
}

fn cmd_explain(
    data_path: &Path,
    model: &Path,
    layer: &str,
    class: Option<usize>,
    trial: Option<usize>,
    out: &Path,
) -> Result<()> {
    let data = load_data(data_path)?;
    let (network, sidecar) = load_checkpoint(model)?;
    check_compat(&sidecar.network, &data)?;
    let trials: Vec<usize> = match trial {
        Some(i) if i >= data.len() => bail!("trial {i} out of range ({} trials)", data.len()),
        Some(i) => vec![i],
        None => (0..data.len()).collect(),
    };
    let (_, probs) = evaluate_network(&network, &data, sidecar.train.batch_size)?;
    for &i in &trials {
        let target = class.unwrap_or_else(|| {
            probs[i]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        });
        let x = data.batch_tensor(&[i]);
        let map = grad_cam(&network, &x, i, target, layer)?;
        export_map(&map, &out.join(format!("gradcam_trial{i}_class{target}.csv")))?;
    }
    log::info!(
        "wrote {} attribution map(s) for layer '{layer}' to {}",
        trials.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ablate(run: &RunConfig, data_path: &Path, jobs: usize, out: &Path) -> Result<()> {
    let data = load_data(data_path)?;
    check_compat(&run.network, &data)?;
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        log::info!("cross-validating variant '{}'", ablation.name());
        let report = cross_validate(&data, &run.network, ablation, &run.train, jobs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        let params = Network::new(run.network.clone(), ablation, &mut rng)?.param_count();
        write_xval_artifacts(
            &report,
            |_| Sidecar {
                network: run.network.clone(),
                train: run.train.clone(),
                ablation,
            },
            &format!("{}_", ablation.name()),
            out,
        )?;
        rows.push((ablation.name(), params, report));
    }

    let mut table = String::from("variant,params,accuracy_mean,accuracy_std,f_measure_mean,kappa_mean,auc_macro_mean\n");
    println!("variant     params  accuracy        f       kappa     auc");
    for (name, params, r) in &rows {
        table.push_str(&format!(
            "{name},{params},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.accuracy.mean, r.accuracy.std, r.f_measure.mean, r.kappa.mean, r.auc_macro.mean
        ));
        println!(
            "{name:<11} {params:>6}  {:.3} +/- {:.3}  {:.3}  {:.3}  {:.3}",
            r.accuracy.mean, r.accuracy.std, r.f_measure.mean, r.kappa.mean, r.auc_macro.mean
        );
    }
    std::fs::write(out.join("ablation.csv"), table)?;
    log::info!("comparison table in {}", out.join("ablation.csv").display());
    Ok(())
}
