//! `train`: fit the mixture classifier on a dataset, optionally adapting
//! the group assignments, and write checkpoints plus per-epoch metrics.
//!
//! `--flat-baseline` trains the plain N-way softmax reference instead: a
//! single-level tree whose assignment matrix is the identity, with the same
//! epoch budget and seed so paired comparisons are fair.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use hiermix_core::checkpoint;
use hiermix_core::dataset::{rng_tags, split, Dataset};
use hiermix_core::feature_net::{Activation, FeatureNetParams};
use hiermix_core::hierarchy::Hierarchy;
use hiermix_core::numerics::RngStream;
use hiermix_core::trainer::{run_from, init_state, EpochMetrics, ThetaSpec, TrainConfig};

use crate::common::{
    ensure_dir, from_core, load_dataset, load_hierarchy, load_overlay, parse_theta, pick,
    pick_required, print_warnings, write_json, write_text, CliResult,
};
use crate::Shared;

#[derive(ValueEnum, Clone, Copy, Debug)]
#[clap(rename_all = "lowercase")]
pub enum ActivationArg {
    Relu,
    Tanh,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(arg: ActivationArg) -> Activation {
        match arg {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset (.csv or .bin).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Expected class count for CSV files (default: max label + 1).
    #[arg(long = "declared-classes")]
    declared_classes: Option<usize>,

    /// Hierarchy JSON from build-hierarchy (not needed with --flat-baseline).
    #[arg(long)]
    hierarchy: Option<PathBuf>,

    /// Keep this fraction for training and hold out the rest as a
    /// stratified test split.
    #[arg(long)]
    split: Option<f64>,

    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Quadratic penalty strength on classifier weights.
    #[arg(long)]
    l2: Option<f64>,

    /// Extend the quadratic penalty to feature-net weights.
    #[arg(long = "l2-on-net", num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    l2_on_net: Option<bool>,

    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,

    /// Plain SGD epochs before any assignment adaptation.
    #[arg(long)]
    warmup: Option<usize>,

    /// Total epoch budget, warmup included.
    #[arg(long)]
    epochs: Option<usize>,

    /// Gibbs sweeps per adaptation epoch.
    #[arg(long)]
    sweeps: Option<usize>,

    /// Symmetric Dirichlet smoothing for assignment re-estimation.
    #[arg(long)]
    beta: Option<f64>,

    /// Level mixing: "uniform", "bottom-only", or comma-separated weights.
    #[arg(long)]
    theta: Option<String>,

    /// Prune each class to its single best group after every re-estimate.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    nonoverlap: Option<bool>,

    /// Freeze the initial group assignments for the whole run.
    #[arg(long = "no-adapt", num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    no_adapt: Option<bool>,

    /// Train the plain N-way softmax reference instead of the mixture.
    #[arg(long = "flat-baseline", num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    flat_baseline: Option<bool>,

    /// Hidden layer widths for the feature net (e.g. "32,16"); omit to
    /// classify raw features.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,

    /// Hidden-layer activation.
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,

    /// Dropout rate on hidden layers during training.
    #[arg(long)]
    dropout: Option<f64>,

    /// Relative per-epoch loss improvement at or below which an epoch
    /// counts as stalled.
    #[arg(long)]
    tol: Option<f64>,

    /// Consecutive stalled epochs before stopping early.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Serialize)]
struct ResolvedConfig {
    data: PathBuf,
    declared_classes: Option<usize>,
    hierarchy: Option<PathBuf>,
    split: Option<f64>,
    flat_baseline: bool,
    hidden: Vec<usize>,
    activation: Activation,
    dropout: f64,
    learning_rate: f64,
    l2_alpha: f64,
    l2_on_feature_net: bool,
    batch_size: usize,
    warmup_epochs: usize,
    max_epochs: usize,
    gibbs_sweeps_per_epoch: usize,
    theta: ThetaSpec,
    nonoverlap: bool,
    adapt: bool,
    dirichlet_beta: f64,
    convergence_tol: f64,
    patience: usize,
    seed: u64,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overlay {
    data: Option<PathBuf>,
    declared_classes: Option<usize>,
    hierarchy: Option<PathBuf>,
    split: Option<f64>,
    flat_baseline: Option<bool>,
    hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
    dropout: Option<f64>,
    learning_rate: Option<f64>,
    l2_alpha: Option<f64>,
    l2_on_feature_net: Option<bool>,
    batch_size: Option<usize>,
    warmup_epochs: Option<usize>,
    max_epochs: Option<usize>,
    gibbs_sweeps_per_epoch: Option<usize>,
    theta: Option<ThetaSpec>,
    nonoverlap: Option<bool>,
    adapt: Option<bool>,
    dirichlet_beta: Option<f64>,
    convergence_tol: Option<f64>,
    patience: Option<usize>,
    seed: Option<u64>,
}

fn resolve(shared: &Shared, args: &TrainArgs) -> CliResult<ResolvedConfig> {
    let file: Overlay = load_overlay(shared.config.as_ref())?;
    let defaults = TrainConfig::default();
    // --no-adapt is the flag-side spelling of adapt: false.
    let adapt = match args.no_adapt {
        Some(no) => !no,
        None => file.adapt.unwrap_or(defaults.adapt),
    };
    Ok(ResolvedConfig {
        data: pick_required(args.data.clone(), file.data, "data", "data")?,
        declared_classes: args.declared_classes.or(file.declared_classes),
        hierarchy: args.hierarchy.clone().or(file.hierarchy),
        split: args.split.or(file.split),
        flat_baseline: pick(args.flat_baseline, file.flat_baseline, false),
        hidden: pick(args.hidden.clone(), file.hidden, Vec::new()),
        activation: pick(
            args.activation.map(Activation::from),
            file.activation,
            Activation::Relu,
        ),
        dropout: pick(args.dropout, file.dropout, 0.0),
        learning_rate: pick(args.lr, file.learning_rate, defaults.learning_rate),
        l2_alpha: pick(args.l2, file.l2_alpha, defaults.l2_alpha),
        l2_on_feature_net: pick(args.l2_on_net, file.l2_on_feature_net, defaults.l2_on_feature_net),
        batch_size: pick(args.batch, file.batch_size, defaults.batch_size),
        warmup_epochs: pick(args.warmup, file.warmup_epochs, defaults.warmup_epochs),
        max_epochs: pick(args.epochs, file.max_epochs, defaults.max_epochs),
        gibbs_sweeps_per_epoch: pick(args.sweeps, file.gibbs_sweeps_per_epoch, defaults.gibbs_sweeps_per_epoch),
        theta: pick(
            args.theta.as_deref().map(parse_theta),
            file.theta,
            defaults.theta,
        ),
        nonoverlap: pick(args.nonoverlap, file.nonoverlap, defaults.nonoverlap),
        adapt,
        dirichlet_beta: pick(args.beta, file.dirichlet_beta, defaults.dirichlet_beta),
        convergence_tol: pick(args.tol, file.convergence_tol, defaults.convergence_tol),
        patience: pick(args.patience, file.patience, defaults.patience),
        seed: pick(shared.seed, file.seed, defaults.seed),
    })
}

impl ResolvedConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            l2_alpha: self.l2_alpha,
            l2_on_feature_net: self.l2_on_feature_net,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            max_epochs: self.max_epochs,
            gibbs_sweeps_per_epoch: self.gibbs_sweeps_per_epoch,
            theta: self.theta.clone(),
            nonoverlap: self.nonoverlap,
            adapt: self.adapt,
            dirichlet_beta: self.dirichlet_beta,
            convergence_tol: self.convergence_tol,
            patience: self.patience,
            seed: self.seed,
        }
    }

    fn build_net(&self, input_dim: usize) -> CliResult<FeatureNetParams> {
        if self.hidden.is_empty() {
            if self.dropout > 0.0 {
                eprintln!("note: dropout has no effect without hidden layers");
            }
            return Ok(FeatureNetParams::identity(input_dim));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        let activations = vec![self.activation; self.hidden.len()];
        let mut rng = RngStream::new(self.seed).substream(&[rng_tags::INIT]);
        FeatureNetParams::init(&dims, &activations, self.dropout, &mut rng).map_err(from_core)
    }
}

/// End-of-run digest written to `reports/summary.json`.
#[derive(Serialize)]
struct Summary<'a> {
    epochs_completed: usize,
    stopped_early: bool,
    eval_split: &'a str,
    final_epoch: &'a EpochMetrics,
    best_epoch: Option<usize>,
    best_top1: Option<f64>,
    warnings: &'a [String],
}

pub fn run(shared: &Shared, args: &TrainArgs) -> CliResult<()> {
    let config = resolve(shared, args)?;
    let dataset = load_dataset(&config.data, config.declared_classes)?;

    let hierarchy = if config.flat_baseline {
        if config.hierarchy.is_some() {
            eprintln!("note: --flat-baseline ignores the hierarchy");
        }
        Hierarchy::trivial(dataset.num_classes())
    } else {
        let path = config.hierarchy.as_ref().ok_or_else(|| {
            crate::common::CliError::input(
                "missing --hierarchy (or \"hierarchy\" in the config file); \
                 pass --flat-baseline to train without one",
            )
        })?;
        load_hierarchy(path)?
    };

    let (train_set, test_set): (Dataset, Option<Dataset>) = match config.split {
        Some(fraction) => {
            let parts = split(&dataset, fraction, config.seed).map_err(from_core)?;
            print_warnings(&parts.warnings);
            (parts.train, Some(parts.test))
        }
        None => (dataset, None),
    };

    let train_config = config.train_config();
    train_config
        .validate(hierarchy.depth())
        .map_err(from_core)?;
    let net = config.build_net(train_set.input_dim())?;

    let out = &shared.out;
    ensure_dir(&out.join("checkpoints"))?;
    ensure_dir(&out.join("reports"))?;
    write_json(&config, &out.join("config.json"))?;

    let state = init_state(&train_set, &hierarchy, net, &train_config).map_err(from_core)?;
    let result = run_from(state, &train_set, test_set.as_ref(), &train_config, Vec::new())
        .map_err(from_core)?;
    print_warnings(&result.warnings);

    let mut jsonl = String::new();
    for m in &result.metrics {
        jsonl.push_str(&m.to_jsonl_line().map_err(from_core)?);
        jsonl.push('\n');
    }
    write_text(&jsonl, &out.join("metrics.jsonl"))?;

    checkpoint::save(&result.state, &out.join("checkpoints").join("final.json"))
        .map_err(from_core)?;
    if let Some(best) = &result.best {
        checkpoint::save(&best.state, &out.join("checkpoints").join("best.json"))
            .map_err(from_core)?;
    }

    let eval_split = if test_set.is_some() { "test" } else { "train" };
    let last = result
        .metrics
        .last()
        .ok_or_else(|| crate::common::CliError::runtime("training produced no epochs"))?;
    let summary = Summary {
        epochs_completed: result.state.epoch,
        stopped_early: result.state.epoch < train_config.max_epochs,
        eval_split,
        final_epoch: last,
        best_epoch: result.best.as_ref().map(|b| b.epoch),
        best_top1: result.best.as_ref().map(|b| b.top1),
        warnings: &result.warnings,
    };
    write_json(&summary, &out.join("reports").join("summary.json"))?;

    for m in &result.metrics {
        println!(
            "epoch {:>3} {:<6} loss {:.4}  top1 {:.4}  top5 {:.4}  moves {}",
            m.epoch,
            match m.phase {
                hiermix_core::trainer::Phase::Warmup => "warmup",
                hiermix_core::trainer::Phase::Adapt => "adapt",
            },
            m.loss,
            m.top1,
            m.top5,
            m.psi_moves
        );
    }
    println!(
        "finished after {} epochs{}; {} top1 {:.4}",
        result.state.epoch,
        if summary.stopped_early { " (stopped early)" } else { "" },
        eval_split,
        last.top1
    );
    if let Some(best) = &result.best {
        println!("best test top1 {:.4} at epoch {}", best.top1, best.epoch);
    }
    Ok(())
}
