//! The mixture classifier head: one softmax classifier per hierarchy level,
//! a row-stochastic assignment matrix spreading each level's group scores
//! over the leaf classes, and a simplex weighting mixing levels into a
//! single class distribution. Includes the loss and all analytic gradients
//! (classifier parameters and the gradient sent back into the features).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{add_outer, dot, softmax_stable, top_k_indices, Matrix};

/// Probabilities below this floor are clamped inside the log loss so an
/// aggressively pruned assignment matrix cannot produce an infinite loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Tolerance for "rows sum to one" checks on assignment matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Softmax classifier for one hierarchy level: scores that level's groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelClassifier {
    pub level: usize,
    /// group-count × feature-dim weights.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl LevelClassifier {
    /// Zero-initialized classifier: every group starts equally likely.
    pub fn zeros(level: usize, num_groups: usize, feature_dim: usize) -> Self {
        LevelClassifier {
            level,
            weights: Matrix::zeros(num_groups, feature_dim),
            biases: vec![0.0; num_groups],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Per-level mixing weights on the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    theta: Vec<f64>,
}

impl MixtureWeights {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidConfig("empty mixture weights".into()));
        }
        if theta.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mixture weights must be nonnegative, got {theta:?}"
            )));
        }
        let total: f64 = theta.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        // Exact renormalization so downstream sums hit tight tolerances.
        let theta = theta.into_iter().map(|v| v / total).collect();
        Ok(MixtureWeights { theta })
    }

    pub fn uniform(num_levels: usize) -> Self {
        MixtureWeights {
            theta: vec![1.0 / num_levels as f64; num_levels],
        }
    }

    /// All mass on the bottom level: the flat-softmax special case.
    pub fn bottom_only(num_levels: usize) -> Self {
        let mut theta = vec![0.0; num_levels];
        theta[num_levels - 1] = 1.0;
        MixtureWeights { theta }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }
}

/// Row-stochastic group→class assignment for one level: entry (t, y) is the
/// probability of class y given group t. The zero pattern doubles as the
/// group membership structure, so each row's nonzero columns are cached for
/// sparse traversal.
///
/// A row may also be entirely zero: a group that lost every class to
/// pruning stays in the matrix as a dead row and contributes nothing to the
/// mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AssignmentMatrixRepr", into = "AssignmentMatrixRepr")]
pub struct AssignmentMatrix {
    level: usize,
    psi: Matrix,
    support: Vec<Vec<usize>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct AssignmentMatrixRepr {
    level: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<AssignmentMatrixRepr> for AssignmentMatrix {
    type Error = Error;
    fn try_from(repr: AssignmentMatrixRepr) -> Result<Self> {
        AssignmentMatrix::new(repr.level, Matrix::from_rows(&repr.rows)?)
    }
}

impl From<AssignmentMatrix> for AssignmentMatrixRepr {
    fn from(m: AssignmentMatrix) -> Self {
        AssignmentMatrixRepr {
            level: m.level,
            rows: (0..m.psi.rows()).map(|t| m.psi.row(t).to_vec()).collect(),
        }
    }
}

impl AssignmentMatrix {
    pub fn new(level: usize, psi: Matrix) -> Result<Self> {
        for t in 0..psi.rows() {
            let row = psi.row(t);
            let mut sum = 0.0;
            for &v in row {
                if !(0.0..=1.0 + ROW_SUM_TOL).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "assignment entry ({t}) = {v} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if sum != 0.0 && (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "assignment row {t} sums to {sum}, expected 1 (or 0 for a dead group)"
                )));
            }
        }
        let support = (0..psi.rows())
            .map(|t| {
                psi.row(t)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0)
                    .map(|(y, _)| y)
                    .collect()
            })
            .collect();
        Ok(AssignmentMatrix { level, psi, support })
    }

    /// Skips the row-sum check: for weight matrices that are not yet
    /// normalized, e.g. raw inputs to the overlap pruning pass. Entries
    /// must still be nonnegative and finite (the wrapped [`Matrix`]
    /// enforces finiteness).
    #[cfg(test)]
    pub(crate) fn new_unnormalized(level: usize, psi: Matrix) -> Result<Self> {
        for t in 0..psi.rows() {
            for &v in psi.row(t) {
                if v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "assignment row {t} has negative entry {v}"
                    )));
                }
            }
        }
        let support = (0..psi.rows())
            .map(|t| {
                psi.row(t)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0)
                    .map(|(y, _)| y)
                    .collect()
            })
            .collect();
        Ok(AssignmentMatrix { level, psi, support })
    }

    pub fn identity(level: usize, n: usize) -> Self {
        AssignmentMatrix {
            level,
            psi: Matrix::identity(n),
            support: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// Uniform membership rows: group t spreads 1/|members| over its members.
    pub fn uniform_from_groups(level: usize, groups: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        let mut psi = Matrix::zeros(groups.len(), num_classes);
        for (t, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidInput(format!("group {t} has no classes")));
            }
            let w = 1.0 / members.len() as f64;
            for &y in members {
                if y >= num_classes {
                    return Err(Error::InvalidInput(format!(
                        "group {t} contains class {y} >= {num_classes}"
                    )));
                }
                psi.set(t, y, w);
            }
        }
        AssignmentMatrix::new(level, psi)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_groups(&self) -> usize {
        self.psi.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.psi.cols()
    }

    pub fn get(&self, t: usize, y: usize) -> f64 {
        self.psi.get(t, y)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.psi.row(t)
    }

    /// Nonzero class columns of row t.
    pub fn support(&self, t: usize) -> &[usize] {
        &self.support[t]
    }

    pub fn matrix(&self) -> &Matrix {
        &self.psi
    }

    /// For each class column, the group holding its largest entry (ties to
    /// the lowest group index).
    pub fn column_argmax(&self) -> Vec<usize> {
        (0..self.psi.cols())
            .map(|y| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for t in 0..self.psi.rows() {
                    let v = self.psi.get(t, y);
                    if v > best_v {
                        best_v = v;
                        best = t;
                    }
                }
                best
            })
            .collect()
    }
}

/// One sample's full forward result.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Per-level group distributions.
    pub level_probs: Vec<Vec<f64>>,
    /// Mixed class distribution.
    pub class_probs: Vec<f64>,
}

impl Prediction {
    pub fn top1(&self) -> usize {
        predict_topk(&self.class_probs, 1)[0]
    }
}

/// Softmax over one level's group logits for a single feature vector.
pub fn forward_level(classifier: &LevelClassifier, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != classifier.feature_dim() {
        return Err(Error::dim("forward_level x", classifier.feature_dim(), x.len()));
    }
    let mut logits = classifier.weights.matvec(x)?;
    for (l, b) in logits.iter_mut().zip(&classifier.biases) {
        *l += b;
    }
    softmax_stable(&logits)
}

/// Mixes per-level group distributions into one class distribution:
/// each level's groups spread their mass over classes through the
/// assignment rows, and levels combine with the simplex weights.
/// Only nonzero assignment entries are traversed.
pub fn mix(theta: &MixtureWeights, level_probs: &[Vec<f64>], psis: &[AssignmentMatrix]) -> Result<Vec<f64>> {
    if theta.len() != level_probs.len() || theta.len() != psis.len() {
        return Err(Error::Mismatch(format!(
            "mix got {} weights, {} level outputs, {} assignment matrices",
            theta.len(),
            level_probs.len(),
            psis.len()
        )));
    }
    let n = psis
        .first()
        .map(AssignmentMatrix::num_classes)
        .ok_or_else(|| Error::InvalidInput("mix with zero levels".into()))?;
    let mut z = vec![0.0; n];
    for ((&th, zl), psi) in theta.as_slice().iter().zip(level_probs).zip(psis) {
        if psi.num_classes() != n {
            return Err(Error::dim("mix class count", n, psi.num_classes()));
        }
        if zl.len() != psi.num_groups() {
            return Err(Error::dim("mix group count", psi.num_groups(), zl.len()));
        }
        if th == 0.0 {
            continue;
        }
        for (t, &zt) in zl.iter().enumerate() {
            let coeff = th * zt;
            if coeff == 0.0 {
                continue;
            }
            let row = psi.row(t);
            for &y in psi.support(t) {
                z[y] += coeff * row[y];
            }
        }
    }
    Ok(z)
}

/// Negative log likelihood of the true class under the mixed distribution,
/// floored so a zeroed-out class cannot produce infinity.
pub fn loss(class_probs: &[f64], label: usize) -> Result<f64> {
    if label >= class_probs.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            class_probs.len()
        )));
    }
    Ok(-(class_probs[label].max(LOSS_FLOOR)).ln())
}

/// Full forward pass for one feature vector.
pub fn forward_full(
    classifiers: &[LevelClassifier],
    theta: &MixtureWeights,
    psis: &[AssignmentMatrix],
    x: &[f64],
) -> Result<Prediction> {
    let level_probs: Vec<Vec<f64>> = classifiers
        .iter()
        .map(|c| forward_level(c, x))
        .collect::<Result<_>>()?;
    let class_probs = mix(theta, &level_probs, psis)?;
    Ok(Prediction {
        level_probs,
        class_probs,
    })
}

/// Gradient of the loss in one level's group distribution, before the
/// softmax Jacobian: entry t is the level weight times the assignment entry
/// (t, label) times d(loss)/d(class prob). Zero assignment entries contribute
/// exactly zero, which is what stops errors leaking between levels.
pub fn grad_level_probs(theta_l: f64, psi: &AssignmentMatrix, label: usize, dloss_dzy: f64) -> Vec<f64> {
    (0..psi.num_groups())
        .map(|t| theta_l * psi.get(t, label) * dloss_dzy)
        .collect()
}

/// Per-level parameter gradients plus the gradient in the feature vector.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub per_level: Vec<(Matrix, Vec<f64>)>,
    pub grad_x: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(classifiers: &[LevelClassifier]) -> Self {
        HeadGrads {
            per_level: classifiers
                .iter()
                .map(|c| (Matrix::zeros(c.num_groups(), c.feature_dim()), vec![0.0; c.num_groups()]))
                .collect(),
            grad_x: classifiers.first().map_or_else(Vec::new, |c| vec![0.0; c.feature_dim()]),
        }
    }

    pub fn add(&mut self, other: &HeadGrads) -> Result<()> {
        if self.per_level.len() != other.per_level.len() {
            return Err(Error::dim("head grad levels", self.per_level.len(), other.per_level.len()));
        }
        for ((w, b), (ow, ob)) in self.per_level.iter_mut().zip(&other.per_level) {
            w.add_scaled(ow, 1.0)?;
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        for (x, y) in self.grad_x.iter_mut().zip(&other.grad_x) {
            *x += y;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.per_level {
            w.scale(s);
            for v in b {
                *v *= s;
            }
        }
        for v in &mut self.grad_x {
            *v *= s;
        }
    }
}

/// Analytic gradients of the (floored) log loss for one sample.
///
/// The chain runs loss → mixed class probability → each level's group
/// distribution (weighted by the level's assignment column for the label)
/// → softmax Jacobian → that level's weights, biases, and the shared
/// feature vector.
pub fn backward_head(
    prediction: &Prediction,
    label: usize,
    theta: &MixtureWeights,
    psis: &[AssignmentMatrix],
    classifiers: &[LevelClassifier],
    x: &[f64],
) -> Result<HeadGrads> {
    if prediction.level_probs.len() != classifiers.len() || psis.len() != classifiers.len() {
        return Err(Error::Mismatch("backward_head level count".into()));
    }
    if label >= prediction.class_probs.len() {
        return Err(Error::InvalidInput(format!("label {label} out of range")));
    }
    let zy = prediction.class_probs[label];
    // loss = -ln(max(zy, floor)); below the floor the loss is constant.
    let dloss_dzy = if zy >= LOSS_FLOOR { -1.0 / zy } else { 0.0 };

    let mut grads = HeadGrads::zeros_like(classifiers);
    for (l, classifier) in classifiers.iter().enumerate() {
        let th = theta.as_slice()[l];
        let zl = &prediction.level_probs[l];
        if th == 0.0 {
            continue;
        }
        let g_z = grad_level_probs(th, &psis[l], label, dloss_dzy);
        // Softmax Jacobian: g_a = z ⊙ (g_z − (g_z · z) 1).
        let inner = dot(&g_z, zl);
        let g_a: Vec<f64> = zl
            .iter()
            .zip(&g_z)
            .map(|(&z_t, &g_t)| z_t * (g_t - inner))
            .collect();
        add_outer(&mut grads.per_level[l].0, &g_a, x, 1.0)?;
        for (b, g) in grads.per_level[l].1.iter_mut().zip(&g_a) {
            *b += g;
        }
        let gx = classifier.weights.vecmat(&g_a)?;
        for (o, g) in grads.grad_x.iter_mut().zip(&gx) {
            *o += g;
        }
    }
    Ok(grads)
}

/// Quadratic penalty on classifier weights (biases excluded): adds
/// `alpha/2 * sum of squared weights` to the loss.
pub fn l2_penalty(classifiers: &[LevelClassifier], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    0.5 * alpha * classifiers.iter().map(|c| c.weights.frobenius_sq()).sum::<f64>()
}

/// Gradient of [`l2_penalty`]: adds `alpha * weights` per level.
pub fn add_l2_grad(grads: &mut HeadGrads, classifiers: &[LevelClassifier], alpha: f64) -> Result<()> {
    if alpha == 0.0 {
        return Ok(());
    }
    for ((gw, _), c) in grads.per_level.iter_mut().zip(classifiers) {
        gw.add_scaled(&c.weights, alpha)?;
    }
    Ok(())
}

/// Indices of the k largest probabilities, descending, ties to the lowest
/// index.
pub fn predict_topk(class_probs: &[f64], k: usize) -> Vec<usize> {
    top_k_indices(class_probs, k)
}

/// SGD update on all level classifiers.
pub fn sgd_step_head(
    classifiers: &mut [LevelClassifier],
    grads: &HeadGrads,
    learning_rate: f64,
) -> Result<()> {
    if grads.per_level.len() != classifiers.len() {
        return Err(Error::dim("head grad levels", classifiers.len(), grads.per_level.len()));
    }
    for (l, (c, (gw, gb))) in classifiers.iter_mut().zip(&grads.per_level).enumerate() {
        if !gw.is_finite() || gb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sgd_step_head".into(),
                detail: format!("non-finite gradient at level classifier {l}"),
            });
        }
        c.weights.add_scaled(gw, -learning_rate)?;
        for (b, g) in c.biases.iter_mut().zip(gb) {
            *b -= learning_rate * g;
        }
    }
    Ok(())
}

/// Batched class distributions for a feature matrix (one sample per row).
/// Logits are computed with one matrix product per level, then each row is
/// mixed through the sparse assignment rows.
pub fn score_batch(
    classifiers: &[LevelClassifier],
    theta: &MixtureWeights,
    psis: &[AssignmentMatrix],
    xs: &Matrix,
) -> Result<Vec<Vec<f64>>> {
    let mut level_logits = Vec::with_capacity(classifiers.len());
    for c in classifiers {
        level_logits.push(xs.matmul(&c.weights.transpose())?.add_bias(&c.biases)?);
    }
    let mut out = Vec::with_capacity(xs.rows());
    for r in 0..xs.rows() {
        let level_probs: Vec<Vec<f64>> = level_logits
            .iter()
            .map(|a| softmax_stable(a.row(r)))
            .collect::<Result<_>>()?;
        out.push(mix(theta, &level_probs, psis)?);
    }
    Ok(out)
}
