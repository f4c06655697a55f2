//! `synth`: generate a clustered synthetic dataset with a known planted
//! grouping, for end-to-end experiments with a recoverable ground truth.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use hiermix_core::dataset::{generate_synthetic, save_binary, save_csv, SynthSpec};

use crate::common::{ensure_dir, from_core, pick, write_json, CliResult};
use crate::Shared;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of planted superclusters.
    #[arg(long)]
    superclusters: Option<usize>,

    /// Classes inside each supercluster.
    #[arg(long = "classes-per")]
    classes_per: Option<usize>,

    /// Input feature dimension.
    #[arg(long)]
    dim: Option<usize>,

    /// Samples drawn per class.
    #[arg(long = "per-class")]
    per_class: Option<usize>,

    /// Spread of class means inside a supercluster.
    #[arg(long)]
    intra: Option<f64>,

    /// Spread of supercluster centers; must exceed --intra.
    #[arg(long)]
    inter: Option<f64>,

    /// Also write the dataset in the packed binary format.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    binary: Option<bool>,
}

/// Fully-resolved run configuration, echoed to `config.json`. Feeding the
/// echo back through `--config` reproduces the dataset exactly.
#[derive(Serialize)]
struct ResolvedConfig {
    num_superclusters: usize,
    classes_per_supercluster: usize,
    input_dim: usize,
    samples_per_class: usize,
    intra_spread: f64,
    inter_spread: f64,
    binary: bool,
    seed: u64,
}

/// Config-file counterpart of the flags; every field optional.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overlay {
    num_superclusters: Option<usize>,
    classes_per_supercluster: Option<usize>,
    input_dim: Option<usize>,
    samples_per_class: Option<usize>,
    intra_spread: Option<f64>,
    inter_spread: Option<f64>,
    binary: Option<bool>,
    seed: Option<u64>,
}

fn resolve(shared: &Shared, args: &SynthArgs) -> CliResult<ResolvedConfig> {
    let file: Overlay = crate::common::load_overlay(shared.config.as_ref())?;
    Ok(ResolvedConfig {
        num_superclusters: pick(args.superclusters, file.num_superclusters, 4),
        classes_per_supercluster: pick(args.classes_per, file.classes_per_supercluster, 5),
        input_dim: pick(args.dim, file.input_dim, 16),
        samples_per_class: pick(args.per_class, file.samples_per_class, 100),
        intra_spread: pick(args.intra, file.intra_spread, 1.0),
        inter_spread: pick(args.inter, file.inter_spread, 5.0),
        binary: pick(args.binary, file.binary, false),
        seed: pick(shared.seed, file.seed, 0),
    })
}

pub fn run(shared: &Shared, args: &SynthArgs) -> CliResult<()> {
    let config = resolve(shared, args)?;
    let spec = SynthSpec {
        num_superclusters: config.num_superclusters,
        classes_per_supercluster: config.classes_per_supercluster,
        input_dim: config.input_dim,
        intra_spread: config.intra_spread,
        inter_spread: config.inter_spread,
        samples_per_class: config.samples_per_class,
        seed: config.seed,
    };
    spec.validate().map_err(from_core)?;

    let (dataset, planted) = generate_synthetic(&spec).map_err(from_core)?;

    let out: &Path = &shared.out;
    ensure_dir(out)?;
    write_json(&config, &out.join("config.json"))?;
    let csv_path = out.join("dataset.csv");
    save_csv(&dataset, &csv_path).map_err(from_core)?;
    if config.binary {
        save_binary(&dataset, &out.join("dataset.bin")).map_err(from_core)?;
    }
    write_json(&planted, &out.join("planted.json"))?;

    println!(
        "wrote {} classes x {} samples (dim {}) to {}",
        dataset.num_classes(),
        dataset.len(),
        dataset.input_dim(),
        csv_path.display()
    );
    Ok(())
}
