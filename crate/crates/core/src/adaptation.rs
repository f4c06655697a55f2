//! Bayesian adaptation of the group→class assignments: a collapsed Gibbs
//! sampler over per-image group labels, count-based re-estimation of each
//! level's assignment matrix under a Dirichlet prior, and the optional
//! pruning that forces every class into a single group per level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::head::AssignmentMatrix;
use crate::numerics::{Matrix, RngStream};

/// Per-level tally of images by (current group label, true class), plus the
/// labels themselves so the tally is recount-verifiable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    level: usize,
    /// group × class counts.
    omega: Vec<Vec<u64>>,
    /// Per-group total, kept in step with `omega`.
    row_sums: Vec<u64>,
    /// Current group label of each image.
    group_labels: Vec<usize>,
    /// True class of each image (fixed).
    image_labels: Vec<usize>,
}

impl CountMatrix {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_groups(&self) -> usize {
        self.omega.len()
    }

    pub fn num_classes(&self) -> usize {
        self.omega.first().map_or(0, Vec::len)
    }

    pub fn num_images(&self) -> usize {
        self.group_labels.len()
    }

    pub fn count(&self, t: usize, y: usize) -> u64 {
        self.omega[t][y]
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        self.row_sums[t]
    }

    pub fn total(&self) -> u64 {
        self.row_sums.iter().sum()
    }

    pub fn group_labels(&self) -> &[usize] {
        &self.group_labels
    }

    pub fn image_labels(&self) -> &[usize] {
        &self.image_labels
    }

    /// Rebuilds the tally from the stored labels.
    pub fn recount(&self) -> Vec<Vec<u64>> {
        let mut fresh = vec![vec![0u64; self.num_classes()]; self.num_groups()];
        for (&t, &y) in self.group_labels.iter().zip(&self.image_labels) {
            fresh[t][y] += 1;
        }
        fresh
    }

    /// Checks the tally and cached row sums against a fresh recount.
    pub fn validate(&self) -> Result<()> {
        if self.recount() != self.omega {
            return Err(Error::Mismatch(
                "count matrix disagrees with a recount of its labels".into(),
            ));
        }
        for (t, row) in self.omega.iter().enumerate() {
            if row.iter().sum::<u64>() != self.row_sums[t] {
                return Err(Error::Mismatch(format!("cached row sum {t} is stale")));
            }
        }
        Ok(())
    }

    /// Removes image i's contribution (the leave-one-out step before
    /// resampling). Underflow means the tally was already inconsistent.
    pub fn remove_image(&mut self, i: usize) -> Result<()> {
        let (t, y) = (self.group_labels[i], self.image_labels[i]);
        if self.omega[t][y] == 0 || self.row_sums[t] == 0 {
            return Err(Error::Mismatch(format!(
                "count underflow removing image {i} from group {t}"
            )));
        }
        self.omega[t][y] -= 1;
        self.row_sums[t] -= 1;
        Ok(())
    }

    /// Re-adds image i under a (possibly new) group label.
    pub fn place_image(&mut self, i: usize, t: usize) {
        let y = self.image_labels[i];
        self.omega[t][y] += 1;
        self.row_sums[t] += 1;
        self.group_labels[i] = t;
    }
}

/// Tallies every image into its class's group at the given hierarchy level
/// (0-based index into the hierarchy's levels).
pub fn init_counts(image_labels: &[usize], hierarchy: &Hierarchy, level_idx: usize) -> Result<CountMatrix> {
    if level_idx >= hierarchy.depth() {
        return Err(Error::InvalidInput(format!(
            "level index {level_idx} out of range for depth {}",
            hierarchy.depth()
        )));
    }
    let lvl = hierarchy.level(level_idx);
    let n = hierarchy.num_classes();
    let mut cm = CountMatrix {
        level: level_idx + 1,
        omega: vec![vec![0u64; n]; lvl.num_groups()],
        row_sums: vec![0u64; lvl.num_groups()],
        group_labels: Vec::with_capacity(image_labels.len()),
        image_labels: image_labels.to_vec(),
    };
    for &y in image_labels {
        if y >= n {
            return Err(Error::InvalidInput(format!("image label {y} out of range")));
        }
        let t = lvl.membership[y];
        cm.omega[t][y] += 1;
        cm.row_sums[t] += 1;
        cm.group_labels.push(t);
    }
    Ok(cm)
}

/// Positive Dirichlet prior over class columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    beta: Vec<f64>,
}

impl DirichletPrior {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidConfig(
                "Dirichlet prior entries must all be positive".into(),
            ));
        }
        Ok(DirichletPrior { beta })
    }

    pub fn symmetric(num_classes: usize, value: f64) -> Result<Self> {
        DirichletPrior::new(vec![value; num_classes])
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta0(&self) -> f64 {
        self.beta.iter().sum()
    }
}

/// Posterior over groups for one image, with the image's own count already
/// removed from `counts`: each group's score is its smoothed share of the
/// image's class times the classifier's probability for that group, then
/// the scores are normalized.
pub fn group_posterior(
    counts: &CountMatrix,
    class: usize,
    prior: &DirichletPrior,
    level_probs: &[f64],
) -> Result<Vec<f64>> {
    if prior.beta().len() != counts.num_classes() {
        return Err(Error::dim("prior width", counts.num_classes(), prior.beta().len()));
    }
    if level_probs.len() != counts.num_groups() {
        return Err(Error::dim("level probs", counts.num_groups(), level_probs.len()));
    }
    if class >= counts.num_classes() {
        return Err(Error::InvalidInput(format!("class {class} out of range")));
    }
    let beta0 = prior.beta0();
    let mut scores = Vec::with_capacity(counts.num_groups());
    for (t, &evidence) in level_probs.iter().enumerate() {
        let share = (counts.count(t, class) as f64 + prior.beta()[class])
            / (counts.row_sum(t) as f64 + beta0);
        scores.push(share * evidence);
    }
    let total: f64 = scores.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::InvalidDistribution(format!(
            "group posterior normalizer is {total}"
        )));
    }
    for s in &mut scores {
        *s /= total;
    }
    Ok(scores)
}

/// One full sweep: every image in index order is removed from the tally,
/// resampled from its group posterior, and placed back. Returns how many
/// images changed group.
///
/// `level_probs` holds one row per image: the current classifier's group
/// distribution for that image. Classifiers do not change during a sweep,
/// so the same matrix serves consecutive sweeps within an epoch.
pub fn gibbs_sweep(
    counts: &mut CountMatrix,
    prior: &DirichletPrior,
    level_probs: &Matrix,
    rng: &mut RngStream,
) -> Result<usize> {
    if level_probs.rows() != counts.num_images() || level_probs.cols() != counts.num_groups() {
        return Err(Error::dim(
            "level_probs shape",
            format!("{}x{}", counts.num_images(), counts.num_groups()),
            format!("{}x{}", level_probs.rows(), level_probs.cols()),
        ));
    }
    let mut moves = 0usize;
    for i in 0..counts.num_images() {
        let old = counts.group_labels[i];
        counts.remove_image(i)?;
        let posterior = group_posterior(counts, counts.image_labels[i], prior, level_probs.row(i))?;
        let new = rng.sample_categorical(&posterior)?;
        counts.place_image(i, new);
        if new != old {
            moves += 1;
        }
    }
    Ok(moves)
}

/// Smoothed assignment estimate from the tally: entry (t, y) is the prior-
/// smoothed fraction of group t's images that belong to class y. Rows are
/// normalized to their computed sum to absorb accumulated rounding.
pub fn estimate_psi(counts: &CountMatrix, prior: &DirichletPrior) -> Result<AssignmentMatrix> {
    if prior.beta().len() != counts.num_classes() {
        return Err(Error::dim("prior width", counts.num_classes(), prior.beta().len()));
    }
    let beta0 = prior.beta0();
    let mut psi = Matrix::zeros(counts.num_groups(), counts.num_classes());
    for t in 0..counts.num_groups() {
        let denom = counts.row_sum(t) as f64 + beta0;
        let row = psi.row_mut(t);
        for (y, v) in row.iter_mut().enumerate() {
            *v = (counts.count(t, y) as f64 + prior.beta()[y]) / denom;
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    AssignmentMatrix::new(counts.level(), psi)
}

/// Forces each class into its single best group per level: for every class
/// column only the largest entry's row keeps it (ties to the lower group),
/// and surviving rows are renormalized over the classes they kept. A group
/// stripped of every class becomes a dead all-zero row, reported as a
/// warning.
///
/// Rows already summing to one are left untouched, which makes a second
/// application the exact identity.
pub fn apply_nonoverlap(psis: &[AssignmentMatrix]) -> Result<(Vec<AssignmentMatrix>, Vec<String>)> {
    let mut out = Vec::with_capacity(psis.len());
    let mut warnings = Vec::new();
    for psi in psis {
        let (groups, classes) = (psi.num_groups(), psi.num_classes());
        let keep = psi.column_argmax();
        let mut pruned = Matrix::zeros(groups, classes);
        for (y, &t) in keep.iter().enumerate() {
            pruned.set(t, y, psi.get(t, y));
        }
        for t in 0..groups {
            let sum: f64 = pruned.row(t).iter().sum();
            if sum == 0.0 {
                warnings.push(format!(
                    "level {}: group {t} lost every class and is now inert",
                    psi.level()
                ));
                continue;
            }
            if (sum - 1.0).abs() <= crate::head::ROW_SUM_TOL {
                continue;
            }
            let row = pruned.row_mut(t);
            for v in row.iter_mut() {
                *v /= sum;
            }
            // Second pass pins the sum to 1 within strict tolerance.
            let resum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= resum;
            }
        }
        out.push(AssignmentMatrix::new(psi.level(), pruned)?);
    }
    Ok((out, warnings))
}

/// One class whose strongest group moved away from where the hierarchy
/// originally placed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reassignment {
    pub level: usize,
    pub class: usize,
    pub from_group: usize,
    pub to_group: usize,
}

/// Compares each level's column argmax against the original membership and
/// lists every class that moved.
pub fn reassignment_report(
    initial_memberships: &[Vec<usize>],
    psis: &[AssignmentMatrix],
) -> Result<Vec<Reassignment>> {
    if initial_memberships.len() != psis.len() {
        return Err(Error::dim("membership levels", psis.len(), initial_memberships.len()));
    }
    let mut moved = Vec::new();
    for (membership, psi) in initial_memberships.iter().zip(psis) {
        if membership.len() != psi.num_classes() {
            return Err(Error::dim("membership width", psi.num_classes(), membership.len()));
        }
        for (class, (&orig, &now)) in membership.iter().zip(&psi.column_argmax()).enumerate() {
            if orig != now {
                moved.push(Reassignment {
                    level: psi.level(),
                    class,
                    from_group: orig,
                    to_group: now,
                });
            }
        }
    }
    Ok(moved)
}
