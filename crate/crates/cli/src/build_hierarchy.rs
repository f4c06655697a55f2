//! `build-hierarchy`: cluster classes by visual similarity into a level
//! structure and write the hierarchy plus its initial group→class
//! assignment matrices.
//!
//! Class representations are mean feature vectors — raw inputs by default,
//! or embeddings from a trained checkpoint's feature net when
//! `--checkpoint` is given.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use hiermix_core::feature_net::FeatureNetParams;
use hiermix_core::hierarchy::{
    build_hierarchy, class_representations, init_psi, similarity_matrix, HierarchyConfig, Linkage,
};

use crate::common::{
    ensure_dir, from_core, load_checkpoint, load_dataset, load_overlay, pick, pick_required,
    print_warnings, write_json, CliResult,
};
use crate::Shared;

#[derive(ValueEnum, Clone, Copy, Debug)]
#[clap(rename_all = "lowercase")]
pub enum LinkageArg {
    Average,
    Complete,
}

impl From<LinkageArg> for Linkage {
    fn from(arg: LinkageArg) -> Linkage {
        match arg {
            LinkageArg::Average => Linkage::Average,
            LinkageArg::Complete => Linkage::Complete,
        }
    }
}

#[derive(Args, Debug)]
pub struct BuildHierarchyArgs {
    /// Feature dataset (.csv, or .bin for the packed binary format).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Expected class count for CSV files (default: max label + 1).
    #[arg(long = "declared-classes")]
    declared_classes: Option<usize>,

    /// Tree depth, bottom level included; 1 means no grouping at all.
    #[arg(long)]
    levels: Option<usize>,

    /// Group counts for the levels above the bottom, coarsest first.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<usize>>,

    /// Geometric alternative to --groups: level l gets branching^l groups.
    #[arg(long)]
    branching: Option<usize>,

    /// Cluster-distance rule for the agglomerative merges.
    #[arg(long, value_enum)]
    linkage: Option<LinkageArg>,

    /// Neighbor rank used for the self-tuned similarity bandwidths
    /// (default 7, capped below the class count).
    #[arg(long = "self-tune-k")]
    self_tune_k: Option<usize>,

    /// Checkpoint whose feature net embeds the data before clustering.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Also write the inter-class similarity matrix (similarity.json).
    #[arg(long = "dump-similarity", num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    dump_similarity: Option<bool>,
}

#[derive(Serialize)]
struct ResolvedConfig {
    data: PathBuf,
    declared_classes: Option<usize>,
    levels: usize,
    groups: Option<Vec<usize>>,
    branching: Option<usize>,
    linkage: Linkage,
    self_tune_k: usize,
    checkpoint: Option<PathBuf>,
    dump_similarity: bool,
    seed: u64,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overlay {
    data: Option<PathBuf>,
    declared_classes: Option<usize>,
    levels: Option<usize>,
    groups: Option<Vec<usize>>,
    branching: Option<usize>,
    linkage: Option<Linkage>,
    self_tune_k: Option<usize>,
    checkpoint: Option<PathBuf>,
    dump_similarity: Option<bool>,
    seed: Option<u64>,
}

fn resolve(
    shared: &Shared,
    args: &BuildHierarchyArgs,
    file: Overlay,
    data: PathBuf,
    num_classes: usize,
) -> ResolvedConfig {
    // --groups and --branching are mutually exclusive, so when either flag
    // is present the pair replaces the config file's pair wholesale.
    let (groups, branching) = if args.groups.is_some() || args.branching.is_some() {
        (args.groups.clone(), args.branching)
    } else {
        (file.groups, file.branching)
    };
    let default_k = 7.min(num_classes.saturating_sub(1)).max(1);
    ResolvedConfig {
        data,
        declared_classes: args.declared_classes.or(file.declared_classes),
        levels: pick(args.levels, file.levels, 2),
        groups,
        branching,
        linkage: pick(args.linkage.map(Linkage::from), file.linkage, Linkage::Average),
        self_tune_k: pick(args.self_tune_k, file.self_tune_k, default_k),
        checkpoint: args.checkpoint.clone().or(file.checkpoint),
        dump_similarity: pick(args.dump_similarity, file.dump_similarity, false),
        seed: pick(shared.seed, file.seed, 0),
    }
}

pub fn run(shared: &Shared, args: &BuildHierarchyArgs) -> CliResult<()> {
    let file: Overlay = load_overlay(shared.config.as_ref())?;
    let data = pick_required(args.data.clone(), file.data.clone(), "data", "data")?;
    let declared_classes = args.declared_classes.or(file.declared_classes);
    let dataset = load_dataset(&data, declared_classes)?;
    let config = resolve(shared, args, file, data, dataset.num_classes());

    let hconfig = HierarchyConfig {
        num_levels: config.levels,
        level_group_counts: config.groups.clone(),
        branching: config.branching,
        linkage: config.linkage,
        self_tune_k: config.self_tune_k,
    };
    // Catch structural problems (more groups than classes, conflicting
    // sizing flags) before doing any feature work.
    hconfig.resolve_cuts(dataset.num_classes()).map_err(from_core)?;

    let net = match &config.checkpoint {
        Some(path) => load_checkpoint(path)?.net,
        None => FeatureNetParams::identity(dataset.input_dim()),
    };
    let reps = class_representations(&dataset, &net).map_err(from_core)?;
    let sim = similarity_matrix(&reps, config.self_tune_k).map_err(from_core)?;
    print_warnings(&sim.warnings);

    let hierarchy = build_hierarchy(&sim, &hconfig).map_err(from_core)?;
    let psis = init_psi(&hierarchy).map_err(from_core)?;

    ensure_dir(&shared.out)?;
    write_json(&config, &shared.out.join("config.json"))?;
    let hierarchy_path = shared.out.join("hierarchy.json");
    hierarchy.save_json(&hierarchy_path).map_err(from_core)?;
    write_json(&psis, &shared.out.join("psi_init.json"))?;
    if config.dump_similarity {
        write_json(&sim, &shared.out.join("similarity.json"))?;
    }

    println!(
        "built {}-level hierarchy over {} classes -> {}",
        hierarchy.depth(),
        hierarchy.num_classes(),
        hierarchy_path.display()
    );
    for (idx, lvl) in hierarchy.levels().iter().enumerate() {
        let mut sizes = vec![0usize; lvl.num_groups()];
        for &g in &lvl.membership {
            sizes[g] += 1;
        }
        println!("  level {}: {} groups, sizes {:?}", idx + 1, lvl.num_groups(), sizes);
    }
    Ok(())
}
