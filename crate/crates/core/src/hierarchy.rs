//! Builds the class hierarchy the mixture head runs on: mean class
//! representations in feature space, a self-tuned similarity kernel over
//! them, agglomerative clustering with deterministic tie-breaks, and the
//! initial uniform group→class assignment matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::feature_net::{forward, FeatureNetParams, Mode};
use crate::head::AssignmentMatrix;
use crate::numerics::Matrix;

/// Mean feature vector of one class's samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRepresentation {
    pub class: usize,
    pub vector: Vec<f64>,
}

/// Eval-mode per-class feature means. Every class needs at least one sample.
pub fn class_representations(
    dataset: &Dataset,
    net: &FeatureNetParams,
) -> Result<Vec<ClassRepresentation>> {
    let counts = dataset.class_counts();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!(
            "class {missing} has no samples; cannot form its representation"
        )));
    }
    let mut batch = Matrix::zeros(dataset.len(), dataset.input_dim());
    for (r, s) in dataset.samples().iter().enumerate() {
        batch.row_mut(r).copy_from_slice(&s.input);
    }
    let (features, _) = forward(net, &batch, Mode::Eval, None)?;

    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; dataset.num_classes()];
    for (r, s) in dataset.samples().iter().enumerate() {
        let row = features.row(r);
        for (acc, v) in sums[s.label].iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(class, mut sum)| {
            for v in &mut sum {
                *v /= counts[class] as f64;
            }
            ClassRepresentation { class, vector: sum }
        })
        .collect())
}

/// Symmetric inter-class similarity with per-class self-tuned bandwidths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    matrix: Matrix,
    sigmas: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SimilarityMatrix {
    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Similarity between classes i and j is exp(-d_ij / sqrt(σ_i σ_j)) where
/// d is Euclidean distance between class means and σ_i is the distance from
/// class i to its `self_tune_k`-th nearest neighbor. A class whose σ
/// collapses to zero (duplicate representations) falls back to the global
/// mean pairwise distance, with a warning.
pub fn similarity_matrix(reps: &[ClassRepresentation], self_tune_k: usize) -> Result<SimilarityMatrix> {
    let n = reps.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "similarity needs at least two classes".into(),
        ));
    }
    if self_tune_k == 0 || self_tune_k >= n {
        return Err(Error::InvalidConfig(format!(
            "self_tune_k must be in [1, {}), got {self_tune_k}",
            n
        )));
    }
    let mut dist = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&reps[i].vector, &reps[j].vector);
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }
    let global_mean = {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += dist.get(i, j);
            }
        }
        total / (n * (n - 1) / 2) as f64
    };

    let mut warnings = Vec::new();
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist.get(i, j)).collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sigma = others[self_tune_k - 1];
        if sigma == 0.0 {
            if global_mean == 0.0 {
                return Err(Error::InvalidInput(
                    "all class representations are identical; similarity is undefined".into(),
                ));
            }
            warnings.push(format!(
                "class {i} duplicates a neighbor; bandwidth fell back to the global mean distance"
            ));
            sigma = global_mean;
        }
        sigmas.push(sigma);
    }

    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let sigma_ij = (sigmas[i] * sigmas[j]).sqrt();
            let v = (-dist.get(i, j) / sigma_ij).exp();
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(SimilarityMatrix {
        matrix: s,
        sigmas,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Average,
    Complete,
}

/// How to build the level structure over N classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub num_levels: usize,
    /// Explicit group counts for the levels above the bottom, coarsest
    /// first, strictly increasing. Mutually exclusive with `branching`.
    pub level_group_counts: Option<Vec<usize>>,
    /// Geometric level sizes: level l gets branching^l groups.
    pub branching: Option<usize>,
    pub linkage: Linkage,
    pub self_tune_k: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            num_levels: 2,
            level_group_counts: None,
            branching: None,
            linkage: Linkage::Average,
            self_tune_k: 7,
        }
    }
}

impl HierarchyConfig {
    /// Group counts for the non-bottom levels, coarsest first.
    pub fn resolve_cuts(&self, num_classes: usize) -> Result<Vec<usize>> {
        if self.num_levels < 1 {
            return Err(Error::InvalidConfig("num_levels must be at least 1".into()));
        }
        let coarse_levels = self.num_levels - 1;
        let counts: Vec<usize> = match (&self.level_group_counts, self.branching) {
            (Some(c), _) => c.clone(),
            (None, Some(b)) => {
                if b < 2 {
                    return Err(Error::InvalidConfig("branching must be at least 2".into()));
                }
                (1..=coarse_levels).map(|l| b.saturating_pow(l as u32)).collect()
            }
            (None, None) if coarse_levels == 0 => Vec::new(),
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "multi-level hierarchy needs level_group_counts or branching".into(),
                ))
            }
        };
        if counts.len() != coarse_levels {
            return Err(Error::dim("level group counts", coarse_levels, counts.len()));
        }
        let mut prev = 0usize;
        for &c in &counts {
            if c <= prev {
                return Err(Error::InvalidConfig(format!(
                    "group counts must increase strictly toward the bottom, got {counts:?}"
                )));
            }
            if c > num_classes {
                return Err(Error::InvalidConfig(format!(
                    "requested {c} groups but only {num_classes} classes exist"
                )));
            }
            prev = c;
        }
        Ok(counts)
    }
}

/// One level's partition of the classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPartition {
    /// Member classes per group, each sorted; groups ordered by smallest
    /// member.
    pub groups: Vec<Vec<usize>>,
    /// class → group index at this level.
    pub membership: Vec<usize>,
}

impl LevelPartition {
    pub fn from_groups(mut groups: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g.first().copied().unwrap_or(usize::MAX));
        let mut membership = vec![usize::MAX; num_classes];
        for (t, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidInput(format!("group {t} is empty")));
            }
            for &y in g {
                if y >= num_classes {
                    return Err(Error::InvalidInput(format!("class {y} out of range")));
                }
                if membership[y] != usize::MAX {
                    return Err(Error::InvalidInput(format!(
                        "class {y} appears in two groups at one level"
                    )));
                }
                membership[y] = t;
            }
        }
        if let Some(missing) = membership.iter().position(|&m| m == usize::MAX) {
            return Err(Error::InvalidInput(format!(
                "class {missing} missing from the level partition"
            )));
        }
        Ok(LevelPartition { groups, membership })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// The level structure: index 0 is the coarsest level, the last level is
/// always the singleton partition (one class per group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    levels: Vec<LevelPartition>,
    num_classes: usize,
}

impl Hierarchy {
    /// Depth-1 hierarchy: just the singleton bottom level. This is the flat
    /// softmax configuration.
    pub fn trivial(num_classes: usize) -> Self {
        let groups: Vec<Vec<usize>> = (0..num_classes).map(|y| vec![y]).collect();
        let membership = (0..num_classes).collect();
        Hierarchy {
            levels: vec![LevelPartition { groups, membership }],
            num_classes,
        }
    }

    pub fn from_levels(levels: Vec<LevelPartition>, num_classes: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidInput("hierarchy needs at least one level".into()));
        }
        let bottom = levels.last().unwrap();
        if bottom.num_groups() != num_classes || bottom.groups.iter().any(|g| g.len() != 1) {
            return Err(Error::InvalidInput(
                "bottom level must have exactly one class per group".into(),
            ));
        }
        for (i, lvl) in levels.iter().enumerate() {
            if lvl.membership.len() != num_classes {
                return Err(Error::dim(
                    format!("level {} membership", i + 1),
                    num_classes,
                    lvl.membership.len(),
                ));
            }
            if i + 1 < levels.len() && lvl.num_groups() > levels[i + 1].num_groups() {
                return Err(Error::InvalidInput(
                    "level group counts must not decrease toward the bottom".into(),
                ));
            }
        }
        Ok(Hierarchy { levels, num_classes })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn level(&self, idx: usize) -> &LevelPartition {
        &self.levels[idx]
    }

    pub fn levels(&self) -> &[LevelPartition] {
        &self.levels
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.levels.iter().map(LevelPartition::num_groups).collect()
    }

    /// Moves a class to another group at one (non-bottom) level. Used to
    /// plant deliberate mis-assignments in experiments.
    pub fn reassign_class(&mut self, level_idx: usize, class: usize, target_group: usize) -> Result<()> {
        if level_idx + 1 >= self.levels.len() {
            return Err(Error::InvalidInput(
                "cannot reassign classes at the singleton bottom level".into(),
            ));
        }
        let lvl = &mut self.levels[level_idx];
        if class >= self.num_classes || target_group >= lvl.groups.len() {
            return Err(Error::InvalidInput(format!(
                "reassign_class({level_idx}, {class}, {target_group}) out of range"
            )));
        }
        let from = lvl.membership[class];
        if from == target_group {
            return Ok(());
        }
        if lvl.groups[from].len() == 1 {
            return Err(Error::InvalidInput(format!(
                "moving class {class} would leave group {from} empty"
            )));
        }
        lvl.groups[from].retain(|&y| y != class);
        lvl.groups[target_group].push(class);
        lvl.groups[target_group].sort_unstable();
        lvl.membership[class] = target_group;
        Ok(())
    }
}

/// Agglomerative clustering over the similarity matrix, snapshotting the
/// partition at each requested group count. Merges always join the pair
/// with the highest linkage similarity; ties break toward the lowest class
/// indices. The bottom singleton level is appended automatically.
pub fn build_hierarchy(sim: &SimilarityMatrix, config: &HierarchyConfig) -> Result<Hierarchy> {
    let n = sim.num_classes();
    let cuts = config.resolve_cuts(n)?;
    if config.num_levels == 1 {
        return Ok(Hierarchy::trivial(n));
    }

    // Cluster id == smallest member index, maintained by always keeping the
    // lower id on a merge.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    // Pairwise linkage statistic between active clusters: for average
    // linkage the running SUM of inter-cluster similarities, for complete
    // linkage the running MIN.
    let mut stat = sim.matrix().clone();
    let mut active: Vec<usize> = (0..n).collect();

    let mut wanted: Vec<usize> = cuts.clone();
    wanted.sort_unstable_by(|a, b| b.cmp(a));
    let mut snapshots: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
    let mut take_snapshot = |count: usize, members: &[Option<Vec<usize>>]| {
        let groups: Vec<Vec<usize>> = members.iter().filter_map(|m| m.clone()).collect();
        snapshots.push((count, groups));
    };

    let mut next_wanted = 0usize;
    while next_wanted < wanted.len() && wanted[next_wanted] == active.len() {
        take_snapshot(active.len(), &members);
        next_wanted += 1;
    }

    while active.len() > 1 && next_wanted < wanted.len() {
        // Best pair by linkage value, ties toward lexicographically smallest
        // (i, j) with i < j, which is the lowest-class-index rule because
        // cluster ids are smallest members.
        let mut best: Option<(usize, usize, f64)> = None;
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let value = match config.linkage {
                    Linkage::Average => {
                        let si = members[i].as_ref().unwrap().len();
                        let sj = members[j].as_ref().unwrap().len();
                        stat.get(i, j) / (si * sj) as f64
                    }
                    Linkage::Complete => stat.get(i, j),
                };
                let better = match best {
                    None => true,
                    Some((_, _, bv)) => value > bv,
                };
                if better {
                    best = Some((i, j, value));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");

        // Merge j into i and update the linkage statistic against all
        // remaining clusters in one pass.
        let absorbed = members[j].take().expect("active cluster has members");
        members[i].as_mut().unwrap().extend(absorbed);
        active.retain(|&c| c != j);
        for &k in &active {
            if k == i {
                continue;
            }
            let merged = match config.linkage {
                Linkage::Average => stat.get(i, k) + stat.get(j, k),
                Linkage::Complete => stat.get(i, k).min(stat.get(j, k)),
            };
            stat.set(i, k, merged);
            stat.set(k, i, merged);
        }

        while next_wanted < wanted.len() && wanted[next_wanted] == active.len() {
            take_snapshot(active.len(), &members);
            next_wanted += 1;
        }
    }
    if next_wanted < wanted.len() {
        return Err(Error::InvalidInput(format!(
            "could not reach {} groups",
            wanted[next_wanted]
        )));
    }

    // Snapshots were taken coarsest-last; levels run coarsest-first.
    snapshots.sort_by_key(|(count, _)| *count);
    let mut levels = Vec::with_capacity(config.num_levels);
    for (_, groups) in snapshots {
        levels.push(LevelPartition::from_groups(groups, n)?);
    }
    levels.push(Hierarchy::trivial(n).levels[0].clone());
    Hierarchy::from_levels(levels, n)
}

/// Uniform initial assignment matrices, one per level: group t spreads
/// probability 1/|t| over its member classes; the bottom level is the
/// identity.
pub fn init_psi(hierarchy: &Hierarchy) -> Result<Vec<AssignmentMatrix>> {
    let n = hierarchy.num_classes();
    let depth = hierarchy.depth();
    let mut psis = Vec::with_capacity(depth);
    for (idx, lvl) in hierarchy.levels().iter().enumerate() {
        let level_label = idx + 1;
        if idx + 1 == depth {
            psis.push(AssignmentMatrix::identity(level_label, n));
        } else {
            psis.push(AssignmentMatrix::uniform_from_groups(level_label, &lvl.groups, n)?);
        }
    }
    Ok(psis)
}

/// Fraction of classes covered by their group's majority planted label:
/// 1.0 means every group is pure.
pub fn grouping_purity(assignment: &[usize], planted: &[usize]) -> f64 {
    assert_eq!(assignment.len(), planted.len());
    let n = assignment.len();
    if n == 0 {
        return 1.0;
    }
    let num_groups = assignment.iter().max().unwrap() + 1;
    let num_truth = planted.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; num_truth]; num_groups];
    for (&g, &p) in assignment.iter().zip(planted) {
        table[g][p] += 1;
    }
    let majority: usize = table.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    majority as f64 / n as f64
}

/// Counts finer-level groups whose members straddle more than one group at
/// the next-coarser level. Zero means the levels still nest as a tree.
pub fn nesting_violations(memberships: &[Vec<usize>]) -> usize {
    let mut violations = 0;
    for pair in memberships.windows(2) {
        let (coarse, fine) = (&pair[0], &pair[1]);
        let fine_groups = fine.iter().max().map_or(0, |m| m + 1);
        let mut seen: Vec<Option<usize>> = vec![None; fine_groups];
        let mut violated = vec![false; fine_groups];
        for (class, &fg) in fine.iter().enumerate() {
            match seen[fg] {
                None => seen[fg] = Some(coarse[class]),
                Some(cg) if cg != coarse[class] => violated[fg] = true,
                _ => {}
            }
        }
        violations += violated.iter().filter(|v| **v).count();
    }
    violations
}

// --- JSON form -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GroupFile {
    id: usize,
    classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LevelFile {
    level: usize,
    groups: Vec<GroupFile>,
}

#[derive(Serialize, Deserialize)]
struct HierarchyFile {
    depth: usize,
    levels: Vec<LevelFile>,
}

impl Hierarchy {
    pub fn to_json(&self) -> Result<String> {
        let file = HierarchyFile {
            depth: self.depth(),
            levels: self
                .levels
                .iter()
                .enumerate()
                .map(|(idx, lvl)| LevelFile {
                    level: idx + 1,
                    groups: lvl
                        .groups
                        .iter()
                        .enumerate()
                        .map(|(id, classes)| GroupFile {
                            id,
                            classes: classes.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HierarchyFile = serde_json::from_str(text)?;
        if file.levels.len() != file.depth {
            return Err(Error::dim("hierarchy depth", file.depth, file.levels.len()));
        }
        let num_classes = file
            .levels
            .last()
            .map(|l| l.groups.iter().map(|g| g.classes.len()).sum())
            .unwrap_or(0);
        let mut levels = Vec::with_capacity(file.depth);
        for lvl in file.levels {
            let groups: Vec<Vec<usize>> = lvl.groups.into_iter().map(|g| g.classes).collect();
            levels.push(LevelPartition::from_groups(groups, num_classes)?);
        }
        Hierarchy::from_levels(levels, num_classes)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Hierarchy::from_json(&std::fs::read_to_string(path)?)
    }
}
