//! Versioned on-disk snapshots of a training run. A checkpoint is a single
//! JSON document with a self-describing header (format tag, version, model
//! shape) wrapping the full [`TrainState`], so a run can resume exactly
//! where it left off.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainState;

pub const FORMAT_TAG: &str = "hier-mixture-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub level_group_counts: Vec<usize>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState) -> Self {
        Checkpoint {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            num_classes: state.hierarchy.num_classes(),
            depth: state.hierarchy.depth(),
            feature_dim: state.net.feature_dim,
            level_group_counts: state.hierarchy.group_counts(),
            state,
        }
    }

    /// Cross-checks the header against the payload and the payload against
    /// itself, so a hand-edited or truncated file fails loudly rather than
    /// resuming a subtly broken run.
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_TAG {
            return Err(Error::InvalidInput(format!(
                "not a checkpoint file (format tag {:?})",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let state = &self.state;
        let h = &state.hierarchy;
        if self.num_classes != h.num_classes() {
            return Err(Error::dim("header num_classes", h.num_classes(), self.num_classes));
        }
        if self.depth != h.depth() {
            return Err(Error::dim("header depth", h.depth(), self.depth));
        }
        if self.feature_dim != state.net.feature_dim {
            return Err(Error::dim(
                "header feature_dim",
                state.net.feature_dim,
                self.feature_dim,
            ));
        }
        if self.level_group_counts != h.group_counts() {
            return Err(Error::InvalidInput(format!(
                "header level sizes {:?} disagree with the hierarchy {:?}",
                self.level_group_counts,
                h.group_counts()
            )));
        }
        state.net.validate()?;
        if state.classifiers.len() != h.depth() {
            return Err(Error::dim("classifier count", h.depth(), state.classifiers.len()));
        }
        for (idx, c) in state.classifiers.iter().enumerate() {
            if c.num_groups() != h.group_counts()[idx] {
                return Err(Error::dim(
                    format!("classifier groups at level {}", idx + 1),
                    h.group_counts()[idx],
                    c.num_groups(),
                ));
            }
            if c.feature_dim() != state.net.feature_dim {
                return Err(Error::dim(
                    format!("classifier feature dim at level {}", idx + 1),
                    state.net.feature_dim,
                    c.feature_dim(),
                ));
            }
        }
        if state.theta.len() != h.depth() {
            return Err(Error::dim("mixture weights", h.depth(), state.theta.len()));
        }
        if state.psis.len() != h.depth() {
            return Err(Error::dim("assignment matrices", h.depth(), state.psis.len()));
        }
        for (idx, psi) in state.psis.iter().enumerate() {
            if psi.num_groups() != h.group_counts()[idx] || psi.num_classes() != h.num_classes() {
                return Err(Error::InvalidInput(format!(
                    "assignment matrix at level {} is {}x{}, hierarchy wants {}x{}",
                    idx + 1,
                    psi.num_groups(),
                    psi.num_classes(),
                    h.group_counts()[idx],
                    h.num_classes()
                )));
            }
        }
        if state.counts.len() != h.depth().saturating_sub(1) {
            return Err(Error::dim(
                "count matrices",
                h.depth().saturating_sub(1),
                state.counts.len(),
            ));
        }
        for counts in &state.counts {
            counts.validate()?;
        }
        if state.loss_history.len() != state.epoch {
            return Err(Error::dim(
                "loss history length",
                state.epoch,
                state.loss_history.len(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::new(state.clone());
    fs::write(path, ckpt.to_json()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path)?;
    Ok(Checkpoint::from_json(&text)?.state)
}
