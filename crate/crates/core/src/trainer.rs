//! The joint training loop: warm-up epochs of SGD with the assignment
//! matrices frozen, then epochs that interleave Gibbs adaptation of the
//! assignments with further SGD, until the loss plateaus or the epoch
//! budget runs out. Also houses evaluation and per-epoch metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    apply_nonoverlap, estimate_psi, gibbs_sweep, init_counts, CountMatrix, DirichletPrior,
};
use crate::dataset::{rng_tags, Dataset};
use crate::error::{Error, Result};
use crate::feature_net::{
    backward as net_backward, forward as net_forward, sgd_step as net_sgd_step, FeatureNetParams,
    Mode,
};
use crate::head::{
    add_l2_grad, backward_head, forward_full, loss as head_loss, score_batch, sgd_step_head,
    AssignmentMatrix, HeadGrads, LevelClassifier, MixtureWeights,
};
use crate::hierarchy::{init_psi, Hierarchy};
use crate::numerics::{softmax_stable, Matrix, RngStream};

/// How the per-level mixing weights are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaSpec {
    /// "uniform" or "bottom-only".
    Named(String),
    Explicit(Vec<f64>),
}

impl ThetaSpec {
    pub fn uniform() -> Self {
        ThetaSpec::Named("uniform".into())
    }

    pub fn bottom_only() -> Self {
        ThetaSpec::Named("bottom-only".into())
    }

    pub fn resolve(&self, depth: usize) -> Result<MixtureWeights> {
        match self {
            ThetaSpec::Named(name) => match name.as_str() {
                "uniform" => Ok(MixtureWeights::uniform(depth)),
                "bottom-only" => Ok(MixtureWeights::bottom_only(depth)),
                other => Err(Error::InvalidConfig(format!(
                    "unknown mixture weighting {other:?}; use \"uniform\", \"bottom-only\", \
                     or an explicit list"
                ))),
            },
            ThetaSpec::Explicit(theta) => {
                if theta.len() != depth {
                    return Err(Error::dim("mixture weights", depth, theta.len()));
                }
                MixtureWeights::new(theta.clone())
            }
        }
    }
}

/// All the knobs of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Quadratic penalty strength on classifier weights.
    pub l2_alpha: f64,
    /// Extend the penalty to feature-net weights as well (off by default:
    /// the penalty is aimed at the classifier parameters).
    pub l2_on_feature_net: bool,
    pub batch_size: usize,
    /// Epochs of SGD before any adaptation starts.
    pub warmup_epochs: usize,
    /// Total epoch budget, warm-up included.
    pub max_epochs: usize,
    pub gibbs_sweeps_per_epoch: usize,
    pub theta: ThetaSpec,
    /// Prune each class to its single best group after every re-estimate.
    pub nonoverlap: bool,
    /// Master switch for assignment adaptation; off freezes the initial
    /// assignments for the whole run.
    pub adapt: bool,
    /// Symmetric Dirichlet smoothing for the count-based estimates.
    pub dirichlet_beta: f64,
    /// Relative per-epoch loss improvement at or below which an epoch
    /// counts as stalled.
    pub convergence_tol: f64,
    /// Consecutive stalled epochs before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            l2_alpha: 0.0,
            l2_on_feature_net: false,
            batch_size: 32,
            warmup_epochs: 5,
            max_epochs: 40,
            gibbs_sweeps_per_epoch: 1,
            theta: ThetaSpec::uniform(),
            nonoverlap: false,
            adapt: true,
            dirichlet_beta: 1.0,
            convergence_tol: 1e-4,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Validates every field, reporting all problems at once.
    pub fn validate(&self, depth: usize) -> Result<()> {
        let mut problems = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            problems.push(format!("learning_rate must be positive (got {})", self.learning_rate));
        }
        if self.l2_alpha < 0.0 {
            problems.push(format!("l2_alpha must be nonnegative (got {})", self.l2_alpha));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if !positive(self.convergence_tol) {
            problems.push(format!(
                "convergence_tol must be positive (got {})",
                self.convergence_tol
            ));
        }
        if self.patience == 0 {
            problems.push("patience must be at least 1".into());
        }
        if !positive(self.dirichlet_beta) {
            problems.push(format!(
                "dirichlet_beta must be positive (got {})",
                self.dirichlet_beta
            ));
        }
        if let Err(e) = self.theta.resolve(depth) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Everything that evolves during training. Serializable as a whole so a
/// checkpoint can restore the exact run state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub net: FeatureNetParams,
    pub classifiers: Vec<LevelClassifier>,
    pub theta: MixtureWeights,
    pub psis: Vec<AssignmentMatrix>,
    /// Gibbs tallies, one per non-bottom level.
    pub counts: Vec<CountMatrix>,
    pub prior: DirichletPrior,
    pub hierarchy: Hierarchy,
    /// class → group per level as the hierarchy was built, kept so later
    /// inspection can tell which classes the adaptation moved.
    pub initial_memberships: Vec<Vec<usize>>,
    /// Epoch-mean training loss, one entry per completed epoch.
    pub loss_history: Vec<f64>,
}

/// Fresh state: zero-initialized classifiers, uniform assignments from the
/// hierarchy, tallies seeded by each class's original group.
pub fn init_state(
    train: &Dataset,
    hierarchy: &Hierarchy,
    net: FeatureNetParams,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate(hierarchy.depth())?;
    net.validate()?;
    if net.input_dim() != train.input_dim() {
        return Err(Error::dim("feature net input", train.input_dim(), net.input_dim()));
    }
    if hierarchy.num_classes() != train.num_classes() {
        return Err(Error::dim(
            "hierarchy classes",
            train.num_classes(),
            hierarchy.num_classes(),
        ));
    }
    let d = net.feature_dim;
    let theta = config.theta.resolve(hierarchy.depth())?;
    let classifiers: Vec<LevelClassifier> = hierarchy
        .levels()
        .iter()
        .enumerate()
        .map(|(idx, lvl)| LevelClassifier::zeros(idx + 1, lvl.num_groups(), d))
        .collect();
    let psis = init_psi(hierarchy)?;
    let labels: Vec<usize> = train.samples().iter().map(|s| s.label).collect();
    let counts: Vec<CountMatrix> = (0..hierarchy.depth().saturating_sub(1))
        .map(|idx| init_counts(&labels, hierarchy, idx))
        .collect::<Result<_>>()?;
    let prior = DirichletPrior::symmetric(train.num_classes(), config.dirichlet_beta)?;
    let initial_memberships = hierarchy
        .levels()
        .iter()
        .map(|lvl| lvl.membership.clone())
        .collect();
    Ok(TrainState {
        epoch: 0,
        net,
        classifiers,
        theta,
        psis,
        counts,
        prior,
        hierarchy: hierarchy.clone(),
        initial_memberships,
        loss_history: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Adapt,
}

/// What one epoch produced.
#[derive(Clone, Debug)]
pub struct EpochOutcome {
    pub phase: Phase,
    /// Epoch-mean training data loss (weight penalty not included).
    pub mean_loss: f64,
    /// Images that changed group across all levels and sweeps this epoch.
    pub psi_moves: usize,
    pub warnings: Vec<String>,
}

/// One SGD pass over the training set in seeded shuffled order with mean-
/// reduced minibatch gradients. Returns the epoch-mean data loss.
fn sgd_epoch(
    state: &mut TrainState,
    train: &Dataset,
    config: &TrainConfig,
    epoch_index: usize,
) -> Result<f64> {
    let root = RngStream::new(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = root.substream(&[rng_tags::SHUFFLE, epoch_index as u64]);
    order.shuffle(&mut shuffle_rng);

    let d = state.net.feature_dim;
    let mut loss_sum = 0.0;
    for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
        let b = chunk.len();
        let mut inputs = Matrix::zeros(b, train.input_dim());
        for (r, &si) in chunk.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(&train.samples()[si].input);
        }
        let mut drop_rng = root.substream(&[rng_tags::DROPOUT, epoch_index as u64, batch_no as u64]);
        let (features, trace) = net_forward(&state.net, &inputs, Mode::Train, Some(&mut drop_rng))?;

        let mut head_acc = HeadGrads::zeros_like(&state.classifiers);
        let mut grad_x = Matrix::zeros(b, d);
        for (r, &si) in chunk.iter().enumerate() {
            let label = train.samples()[si].label;
            let x = features.row(r);
            let pred = forward_full(&state.classifiers, &state.theta, &state.psis, x)?;
            let l = head_loss(&pred.class_probs, label)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("epoch {} batch {batch_no}", epoch_index + 1),
                    detail: format!("training loss became {l}"),
                });
            }
            loss_sum += l;
            let g = backward_head(&pred, label, &state.theta, &state.psis, &state.classifiers, x)?;
            for (acc, gl) in head_acc.per_level.iter_mut().zip(&g.per_level) {
                acc.0.add_scaled(&gl.0, 1.0)?;
                for (a, v) in acc.1.iter_mut().zip(&gl.1) {
                    *a += v;
                }
            }
            grad_x.row_mut(r).copy_from_slice(&g.grad_x);
        }
        let inv_b = 1.0 / b as f64;
        head_acc.scale(inv_b);
        grad_x.scale(inv_b);
        add_l2_grad(&mut head_acc, &state.classifiers, config.l2_alpha)?;

        let (mut net_grads, _) = net_backward(&state.net, &trace, &grad_x)?;
        if config.l2_on_feature_net && config.l2_alpha > 0.0 {
            for (gl, layer) in net_grads.layers.iter_mut().zip(&state.net.layers) {
                gl.0.add_scaled(&layer.weight, config.l2_alpha)?;
            }
        }
        sgd_step_head(&mut state.classifiers, &head_acc, config.learning_rate)?;
        net_sgd_step(&mut state.net, &net_grads, config.learning_rate)?;
    }
    Ok(loss_sum / train.len() as f64)
}

/// Eval-mode features for a whole dataset under the current net.
fn dataset_features(state: &TrainState, dataset: &Dataset) -> Result<Matrix> {
    let mut inputs = Matrix::zeros(dataset.len(), dataset.input_dim());
    for (r, s) in dataset.samples().iter().enumerate() {
        inputs.row_mut(r).copy_from_slice(&s.input);
    }
    let (features, _) = net_forward(&state.net, &inputs, Mode::Eval, None)?;
    Ok(features)
}

/// Gibbs sweeps, assignment re-estimate, and optional pruning for every
/// non-bottom level. Returns total label moves plus any pruning warnings.
fn adaptation_step(
    state: &mut TrainState,
    train: &Dataset,
    config: &TrainConfig,
    epoch_index: usize,
) -> Result<(usize, Vec<String>)> {
    let features = dataset_features(state, train)?;
    let root = RngStream::new(config.seed);
    let mut total_moves = 0usize;
    for level_idx in 0..state.hierarchy.depth().saturating_sub(1) {
        let c = &state.classifiers[level_idx];
        let logits = features.matmul(&c.weights.transpose())?.add_bias(&c.biases)?;
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            let p = softmax_stable(logits.row(r))?;
            probs.row_mut(r).copy_from_slice(&p);
        }
        let mut rng = root.substream(&[rng_tags::GIBBS, epoch_index as u64, level_idx as u64]);
        for _ in 0..config.gibbs_sweeps_per_epoch {
            total_moves += gibbs_sweep(&mut state.counts[level_idx], &state.prior, &probs, &mut rng)?;
        }
        state.psis[level_idx] = estimate_psi(&state.counts[level_idx], &state.prior)?;
    }
    let mut warnings = Vec::new();
    if config.nonoverlap {
        let (pruned, w) = apply_nonoverlap(&state.psis)?;
        state.psis = pruned;
        warnings = w;
    }
    Ok((total_moves, warnings))
}

/// Runs the next epoch: plain SGD during warm-up, adaptation followed by
/// SGD afterwards (adaptation degenerates to a plain epoch when disabled,
/// when there is no level to adapt, or when the sweep count is zero).
pub fn train_epoch(state: &mut TrainState, train: &Dataset, config: &TrainConfig) -> Result<EpochOutcome> {
    let epoch_index = state.epoch;
    let phase = if epoch_index < config.warmup_epochs {
        Phase::Warmup
    } else {
        Phase::Adapt
    };
    let mut psi_moves = 0;
    let mut warnings = Vec::new();
    if phase == Phase::Adapt
        && config.adapt
        && state.hierarchy.depth() > 1
        && config.gibbs_sweeps_per_epoch > 0
    {
        let (moves, w) = adaptation_step(state, train, config, epoch_index)?;
        psi_moves = moves;
        warnings = w;
    }
    let mean_loss = sgd_epoch(state, train, config, epoch_index)?;
    state.epoch += 1;
    state.loss_history.push(mean_loss);
    Ok(EpochOutcome {
        phase,
        mean_loss,
        psi_moves,
        warnings,
    })
}

/// Runs any warm-up epochs still owed. With `warmup_epochs` = 0 this is a
/// no-op and the state is untouched.
pub fn warmup(state: &mut TrainState, train: &Dataset, config: &TrainConfig) -> Result<()> {
    while state.epoch < config.warmup_epochs && state.epoch < config.max_epochs {
        train_epoch(state, train, config)?;
    }
    Ok(())
}

/// True once the trailing `patience` epochs each improved the epoch-mean
/// loss by a relative amount at or below `tol`. The comparison carries a
/// hair of relative slack so an improvement sitting exactly on a tolerance
/// written in decimal (where neither side is representable) still counts
/// as stalled.
pub fn check_convergence(history: &[f64], tol: f64, patience: usize) -> bool {
    if history.len() < patience + 1 {
        return false;
    }
    history[history.len() - patience - 1..].windows(2).all(|w| {
        let rel = (w[0] - w[1]) / w[0].abs().max(f64::MIN_POSITIVE);
        rel <= tol * (1.0 + 1e-9)
    })
}

/// Accuracy/error summary over a labeled dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub ks: Vec<usize>,
    pub top_k_accuracy: Vec<f64>,
    pub top_k_error: Vec<f64>,
    pub per_class_accuracy: Vec<f64>,
    pub mean_loss: f64,
    /// Mean probability assigned to the true class.
    pub mean_true_confidence: f64,
}

impl EvalMetrics {
    pub fn top1_accuracy(&self) -> f64 {
        self.top_k_accuracy[0]
    }
}

/// Metrics from precomputed class distributions. `ks` must be ascending.
pub fn metrics_from_scores(scores: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Result<EvalMetrics> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "metrics need matching nonempty scores/labels, got {}/{}",
            scores.len(),
            labels.len()
        )));
    }
    let n_classes = scores[0].len();
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > n_classes) {
        return Err(Error::InvalidInput(format!(
            "top-k requests {ks:?} outside 1..={n_classes}"
        )));
    }
    let max_k = *ks.iter().max().unwrap();
    let mut hits = vec![0usize; ks.len()];
    let mut class_correct = vec![0usize; n_classes];
    let mut class_total = vec![0usize; n_classes];
    let mut loss_sum = 0.0;
    let mut conf_sum = 0.0;
    for (z, &y) in scores.iter().zip(labels) {
        let ranked = crate::head::predict_topk(z, max_k);
        for (slot, &k) in ks.iter().enumerate() {
            if ranked[..k].contains(&y) {
                hits[slot] += 1;
            }
        }
        class_total[y] += 1;
        if ranked[0] == y {
            class_correct[y] += 1;
        }
        loss_sum += head_loss(z, y)?;
        conf_sum += z[y];
    }
    let n = scores.len() as f64;
    let top_k_accuracy: Vec<f64> = hits.iter().map(|&h| h as f64 / n).collect();
    let top_k_error = top_k_accuracy.iter().map(|a| 1.0 - a).collect();
    let per_class_accuracy = class_correct
        .iter()
        .zip(&class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalMetrics {
        ks: ks.to_vec(),
        top_k_accuracy,
        top_k_error,
        per_class_accuracy,
        mean_loss: loss_sum / n,
        mean_true_confidence: conf_sum / n,
    })
}

/// Scores a dataset with the current model (eval mode) and summarizes.
pub fn evaluate(state: &TrainState, dataset: &Dataset, ks: &[usize]) -> Result<EvalMetrics> {
    if dataset.num_classes() != state.hierarchy.num_classes() {
        return Err(Error::dim(
            "evaluation classes",
            state.hierarchy.num_classes(),
            dataset.num_classes(),
        ));
    }
    let features = dataset_features(state, dataset)?;
    let scores = score_batch(&state.classifiers, &state.theta, &state.psis, &features)?;
    let labels: Vec<usize> = dataset.samples().iter().map(|s| s.label).collect();
    metrics_from_scores(&scores, &labels, ks)
}

/// One metrics line per epoch; serializes to a stable single-line JSON
/// record. `top1`/`top5` are accuracies on the evaluation split (the test
/// split when present, else the training split); `top5` uses k = min(5, N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub psi_moves: usize,
}

impl EpochMetrics {
    pub fn to_jsonl_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Best-so-far snapshot by evaluation top-1 accuracy.
#[derive(Clone, Debug)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub top1: f64,
    pub state: TrainState,
}

/// A finished (or stopped) run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Tracked only when a test split exists.
    pub best: Option<BestSnapshot>,
    pub warnings: Vec<String>,
}

fn eval_ks(num_classes: usize) -> Vec<usize> {
    if num_classes >= 5 {
        vec![1, 5]
    } else if num_classes > 1 {
        vec![1, num_classes]
    } else {
        vec![1, 1]
    }
}

/// Continues training from an existing state until convergence or the
/// epoch budget. Metrics accumulate onto `metrics`, so a resumed run's
/// combined metrics match an uninterrupted one.
pub fn run_from(
    mut state: TrainState,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut metrics: Vec<EpochMetrics>,
) -> Result<RunResult> {
    config.validate(state.hierarchy.depth())?;
    let ks = eval_ks(train.num_classes());
    let mut warnings = Vec::new();
    let mut best: Option<BestSnapshot> = None;
    while state.epoch < config.max_epochs {
        let outcome = train_epoch(&mut state, train, config)?;
        warnings.extend(outcome.warnings.iter().cloned());
        let eval_split = test.unwrap_or(train);
        let m = evaluate(&state, eval_split, &ks)?;
        let top1 = m.top_k_accuracy[0];
        metrics.push(EpochMetrics {
            epoch: state.epoch,
            phase: outcome.phase,
            loss: outcome.mean_loss,
            top1,
            top5: m.top_k_accuracy[1],
            psi_moves: outcome.psi_moves,
        });
        if test.is_some() && best.as_ref().is_none_or(|b| top1 > b.top1) {
            best = Some(BestSnapshot {
                epoch: state.epoch,
                top1,
                state: state.clone(),
            });
        }
        if state.epoch > config.warmup_epochs
            && check_convergence(&state.loss_history, config.convergence_tol, config.patience)
        {
            break;
        }
    }
    Ok(RunResult {
        state,
        metrics,
        best,
        warnings,
    })
}

/// Full run from a fresh state.
pub fn run(
    train: &Dataset,
    test: Option<&Dataset>,
    hierarchy: &Hierarchy,
    net: FeatureNetParams,
    config: &TrainConfig,
) -> Result<RunResult> {
    let state = init_state(train, hierarchy, net, config)?;
    run_from(state, train, test, config, Vec::new())
}
