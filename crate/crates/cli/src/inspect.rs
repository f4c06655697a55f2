//! `inspect`: report each level's group memberships under the current
//! assignment matrices and flag every class whose strongest group moved
//! away from where the hierarchy originally placed it.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use hiermix_core::adaptation::{reassignment_report, Reassignment};
use hiermix_core::trainer::TrainState;

use crate::common::{
    ensure_dir, from_core, load_checkpoint, load_overlay, pick, pick_required, write_json,
    CliResult,
};
use crate::Shared;

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Trained checkpoint JSON.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResolvedConfig {
    checkpoint: PathBuf,
    seed: u64,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Overlay {
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GroupReport {
    id: usize,
    /// Classes whose strongest assignment points at this group.
    classes: Vec<usize>,
    /// The subset of `classes` that started out in a different group.
    moved_in: Vec<usize>,
}

#[derive(Serialize)]
struct LevelReport {
    level: usize,
    num_groups: usize,
    /// Groups that no class points at anymore.
    dead_groups: Vec<usize>,
    groups: Vec<GroupReport>,
}

/// Report written to `reports/inspect.json`.
#[derive(Serialize)]
struct InspectReport {
    checkpoint: PathBuf,
    num_classes: usize,
    depth: usize,
    epochs_trained: usize,
    levels: Vec<LevelReport>,
    reassignments: Vec<Reassignment>,
}

fn build_report(checkpoint: PathBuf, state: &TrainState) -> CliResult<InspectReport> {
    let reassignments =
        reassignment_report(&state.initial_memberships, &state.psis).map_err(from_core)?;
    let mut levels = Vec::with_capacity(state.psis.len());
    for (psi, membership) in state.psis.iter().zip(&state.initial_memberships) {
        let argmax = psi.column_argmax();
        let mut groups: Vec<GroupReport> = (0..psi.num_groups())
            .map(|id| GroupReport {
                id,
                classes: Vec::new(),
                moved_in: Vec::new(),
            })
            .collect();
        for (class, (&now, &orig)) in argmax.iter().zip(membership).enumerate() {
            groups[now].classes.push(class);
            if now != orig {
                groups[now].moved_in.push(class);
            }
        }
        let dead_groups = groups
            .iter()
            .filter(|g| g.classes.is_empty())
            .map(|g| g.id)
            .collect();
        levels.push(LevelReport {
            level: psi.level(),
            num_groups: psi.num_groups(),
            dead_groups,
            groups,
        });
    }
    Ok(InspectReport {
        checkpoint,
        num_classes: state.hierarchy.num_classes(),
        depth: state.hierarchy.depth(),
        epochs_trained: state.epoch,
        levels,
        reassignments,
    })
}

pub fn run(shared: &Shared, args: &InspectArgs) -> CliResult<()> {
    let file: Overlay = load_overlay(shared.config.as_ref())?;
    let config = ResolvedConfig {
        checkpoint: pick_required(args.checkpoint.clone(), file.checkpoint, "checkpoint", "checkpoint")?,
        seed: pick(shared.seed, file.seed, 0),
    };
    let state = load_checkpoint(&config.checkpoint)?;
    let report = build_report(config.checkpoint.clone(), &state)?;

    ensure_dir(&shared.out.join("reports"))?;
    write_json(&config, &shared.out.join("config.json"))?;
    write_json(&report, &shared.out.join("reports").join("inspect.json"))?;

    println!(
        "checkpoint: {} classes, depth {}, {} epochs trained",
        report.num_classes, report.depth, report.epochs_trained
    );
    for level in &report.levels {
        println!(
            "level {}: {} groups, {} dead",
            level.level,
            level.num_groups,
            level.dead_groups.len()
        );
        // Group-by-group detail only where grouping is coarser than the
        // class list itself; the bottom level is one class per group.
        if level.num_groups >= report.num_classes {
            continue;
        }
        for group in &level.groups {
            let members: Vec<String> = group
                .classes
                .iter()
                .map(|c| {
                    if group.moved_in.contains(c) {
                        format!("{c}*")
                    } else {
                        c.to_string()
                    }
                })
                .collect();
            println!("  group {}: {}", group.id, members.join(" "));
        }
    }
    if report.reassignments.is_empty() {
        println!("reassignments: none");
    } else {
        println!(
            "reassignments: {} (* = moved in during adaptation)",
            report.reassignments.len()
        );
        for r in &report.reassignments {
            println!(
                "  level {}: class {} moved group {} -> {}",
                r.level, r.class, r.from_group, r.to_group
            );
        }
    }
    Ok(())
}
