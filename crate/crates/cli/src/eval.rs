//! `eval`: score a labeled dataset with a trained checkpoint and report
//! top-k errors, per-class accuracies, mean loss, and mean true-class
//! confidence.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use hiermix_core::dataset::{split, Dataset};
use hiermix_core::trainer::{evaluate, EvalMetrics};

use crate::common::{
    ensure_dir, from_core, load_checkpoint, load_dataset, load_overlay, pick, pick_required,
    print_warnings, write_json, CliError, CliResult,
};
use crate::Shared;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[clap(rename_all = "lowercase")]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint JSON.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Dataset to score (.csv or .bin).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Expected class count for CSV files (default: max label + 1).
    #[arg(long = "declared-classes")]
    declared_classes: Option<usize>,

    /// Re-create the training run's stratified split (same fraction and
    /// --seed) so one part of it can be scored.
    #[arg(long)]
    split: Option<f64>,

    /// Which part to score; defaults to test when --split is given, else
    /// the whole dataset.
    #[arg(long, value_enum)]
    part: Option<Part>,

    /// Comma-separated top-k ranks to report (default "1,5", capped at N).
    #[arg(long, value_delimiter = ',')]
    topk: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct ResolvedConfig {
    checkpoint: PathBuf,
    data: PathBuf,
    declared_classes: Option<usize>,
    split: Option<f64>,
    part: Part,
    topk: Option<Vec<usize>>,
    seed: u64,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overlay {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    declared_classes: Option<usize>,
    split: Option<f64>,
    part: Option<Part>,
    topk: Option<Vec<usize>>,
    seed: Option<u64>,
}

fn resolve(shared: &Shared, args: &EvalArgs) -> CliResult<ResolvedConfig> {
    let file: Overlay = load_overlay(shared.config.as_ref())?;
    let split = args.split.or(file.split);
    let default_part = if split.is_some() { Part::Test } else { Part::All };
    Ok(ResolvedConfig {
        checkpoint: pick_required(args.checkpoint.clone(), file.checkpoint, "checkpoint", "checkpoint")?,
        data: pick_required(args.data.clone(), file.data, "data", "data")?,
        declared_classes: args.declared_classes.or(file.declared_classes),
        split,
        part: pick(args.part, file.part, default_part),
        topk: args.topk.clone().or(file.topk),
        seed: pick(shared.seed, file.seed, 0),
    })
}

/// Report written to `reports/eval.json`.
#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a PathBuf,
    data: &'a PathBuf,
    part: Part,
    num_samples: usize,
    num_classes: usize,
    metrics: &'a EvalMetrics,
}

pub fn run(shared: &Shared, args: &EvalArgs) -> CliResult<()> {
    let config = resolve(shared, args)?;
    let state = load_checkpoint(&config.checkpoint)?;
    let dataset = load_dataset(&config.data, config.declared_classes)?;

    let scored: Dataset = match (config.part, config.split) {
        (Part::All, _) => dataset,
        (_, None) => {
            return Err(CliError::input(
                "--part train/test needs --split (and the training run's --seed)",
            ))
        }
        (part, Some(fraction)) => {
            let parts = split(&dataset, fraction, config.seed).map_err(from_core)?;
            print_warnings(&parts.warnings);
            match part {
                Part::Train => parts.train,
                Part::Test => parts.test,
                Part::All => unreachable!(),
            }
        }
    };

    let n = scored.num_classes();
    let ks: Vec<usize> = match &config.topk {
        Some(list) => {
            let mut ks = list.clone();
            ks.sort_unstable();
            ks.dedup();
            ks
        }
        None => {
            let mut ks = vec![1, 5.min(n)];
            ks.dedup();
            ks
        }
    };

    let metrics = evaluate(&state, &scored, &ks).map_err(from_core)?;

    ensure_dir(&shared.out.join("reports"))?;
    write_json(&config, &shared.out.join("config.json"))?;
    let report = EvalReport {
        checkpoint: &config.checkpoint,
        data: &config.data,
        part: config.part,
        num_samples: scored.len(),
        num_classes: n,
        metrics: &metrics,
    };
    write_json(&report, &shared.out.join("reports").join("eval.json"))?;

    println!(
        "scored {} samples ({} classes, part: {:?})",
        scored.len(),
        n,
        config.part
    );
    for (i, &k) in metrics.ks.iter().enumerate() {
        println!(
            "top-{k} error {:.4}  accuracy {:.4}",
            metrics.top_k_error[i], metrics.top_k_accuracy[i]
        );
    }
    println!(
        "mean loss {:.4}  mean true-class confidence {:.4}",
        metrics.mean_loss, metrics.mean_true_confidence
    );
    let mut weakest: Vec<(usize, f64)> = metrics
        .per_class_accuracy
        .iter()
        .copied()
        .enumerate()
        .collect();
    weakest.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let worst: Vec<String> = weakest
        .iter()
        .take(3)
        .map(|(c, a)| format!("{c} ({a:.3})"))
        .collect();
    println!("weakest classes: {}", worst.join(", "));
    Ok(())
}
