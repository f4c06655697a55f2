//! A small multilayer perceptron with explicit forward and backward passes.
//!
//! This is the feature extractor under the classifier head: it maps raw
//! inputs to d-dimensional representations and consumes the gradient the
//! head sends back into its input. Configured with zero layers it is the
//! identity, which is how precomputed feature files are trained on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out×in weight matrix.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// The full parameter set of the feature extractor.
///
/// With no layers the net is the identity on `feature_dim`-wide inputs.
/// Dropout applies to hidden-layer outputs only (never to the final
/// features) and only in train mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetParams {
    pub layers: Vec<Layer>,
    pub dropout_rate: f64,
    pub feature_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl FeatureNetParams {
    /// Identity net: features are the raw inputs.
    pub fn identity(feature_dim: usize) -> Self {
        FeatureNetParams {
            layers: Vec::new(),
            dropout_rate: 0.0,
            feature_dim,
        }
    }

    /// Fan-in-scaled uniform init over the dimension chain
    /// `dims = [input, hidden..., feature_dim]`, one activation per layer.
    pub fn init(
        dims: &[usize],
        activations: &[Activation],
        dropout_rate: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least input and output dimensions".into(),
            ));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::dim(
                "activations per layer",
                dims.len() - 1,
                activations.len(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0,1), got {dropout_rate}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = (2.0 * rng.next_f64() - 1.0) * bound;
            }
            layers.push(Layer {
                weight,
                bias: vec![0.0; fan_out],
                activation: activations[k],
            });
        }
        Ok(FeatureNetParams {
            layers,
            dropout_rate,
            feature_dim: *dims.last().unwrap(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.feature_dim, |l| l.weight.cols())
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.weight.cols() != dim {
                return Err(Error::dim(format!("layer {k} input"), dim, layer.weight.cols()));
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::dim(
                    format!("layer {k} bias"),
                    layer.weight.rows(),
                    layer.bias.len(),
                ));
            }
            dim = layer.weight.rows();
        }
        if dim != self.feature_dim {
            return Err(Error::dim("feature dimension", self.feature_dim, dim));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input batch to each layer (after the previous layer's dropout).
    layer_inputs: Vec<Matrix>,
    /// Pre-activation batch per layer.
    pre_activations: Vec<Matrix>,
    /// Dropout mask per layer output (None for the last layer and in eval).
    /// Masks already carry the 1/(1-rate) scale.
    masks: Vec<Option<Matrix>>,
    batch_rows: usize,
}

/// Per-layer parameter gradients, shapes mirroring [`FeatureNetParams`].
#[derive(Clone, Debug)]
pub struct FeatureNetGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl FeatureNetGrads {
    pub fn zeros_like(params: &FeatureNetParams) -> Self {
        FeatureNetGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &FeatureNetGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("grad layers", self.layers.len(), other.layers.len()));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_scaled(ow, 1.0)?;
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.scale(s);
            for v in b {
                *v *= s;
            }
        }
    }
}

/// Runs the net over a batch (one sample per row).
///
/// Train mode applies dropout to hidden-layer outputs and records a trace;
/// it needs an RNG exactly when `dropout_rate > 0`. Eval mode never touches
/// the RNG, so repeated calls are bit-identical.
pub fn forward(
    params: &FeatureNetParams,
    batch: &Matrix,
    mode: Mode,
    mut rng: Option<&mut RngStream>,
) -> Result<(Matrix, ForwardTrace)> {
    if batch.cols() != params.input_dim() {
        return Err(Error::dim("feature net input", params.input_dim(), batch.cols()));
    }
    let use_dropout = mode == Mode::Train && params.dropout_rate > 0.0;
    if use_dropout && rng.is_none() {
        return Err(Error::InvalidInput(
            "train-mode forward with dropout needs an RNG".into(),
        ));
    }

    let mut current = batch.clone();
    let mut trace = ForwardTrace {
        layer_inputs: Vec::with_capacity(params.layers.len()),
        pre_activations: Vec::with_capacity(params.layers.len()),
        masks: Vec::with_capacity(params.layers.len()),
        batch_rows: batch.rows(),
    };

    let last = params.layers.len().saturating_sub(1);
    for (k, layer) in params.layers.iter().enumerate() {
        trace.layer_inputs.push(current.clone());
        let pre = current
            .matmul(&layer.weight.transpose())?
            .add_bias(&layer.bias)?;
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = layer.activation.apply(*v);
        }
        trace.pre_activations.push(pre);

        let mask = if use_dropout && k != last {
            let keep = 1.0 - params.dropout_rate;
            let scale = 1.0 / keep;
            let rng = rng.as_deref_mut().expect("checked above");
            let mut m = Matrix::zeros(act.rows(), act.cols());
            for v in m.data_mut() {
                *v = if rng.next_f64() < keep { scale } else { 0.0 };
            }
            for (a, mv) in act.data_mut().iter_mut().zip(m.data()) {
                *a *= mv;
            }
            Some(m)
        } else {
            None
        };
        trace.masks.push(mask);
        current = act;
    }
    Ok((current, trace))
}

/// Forward pass reusing pre-drawn dropout masks (one per hidden layer, each
/// already scaled). Finite-difference tests freeze masks this way so the
/// loss stays differentiable in the parameters.
pub fn forward_with_masks(
    params: &FeatureNetParams,
    batch: &Matrix,
    masks: &[Option<Matrix>],
) -> Result<(Matrix, ForwardTrace)> {
    if masks.len() != params.layers.len() {
        return Err(Error::dim("mask count", params.layers.len(), masks.len()));
    }
    let mut current = batch.clone();
    let mut trace = ForwardTrace {
        layer_inputs: Vec::with_capacity(params.layers.len()),
        pre_activations: Vec::with_capacity(params.layers.len()),
        masks: Vec::with_capacity(params.layers.len()),
        batch_rows: batch.rows(),
    };
    for (layer, mask) in params.layers.iter().zip(masks) {
        trace.layer_inputs.push(current.clone());
        let pre = current
            .matmul(&layer.weight.transpose())?
            .add_bias(&layer.bias)?;
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = layer.activation.apply(*v);
        }
        trace.pre_activations.push(pre);
        if let Some(m) = mask {
            for (a, mv) in act.data_mut().iter_mut().zip(m.data()) {
                *a *= mv;
            }
        }
        trace.masks.push(mask.clone());
        current = act;
    }
    Ok((current, trace))
}

/// Backpropagates `grad_x` (gradient of the loss in the output features)
/// through the trace, returning parameter gradients and the gradient in the
/// raw input batch.
pub fn backward(
    params: &FeatureNetParams,
    trace: &ForwardTrace,
    grad_x: &Matrix,
) -> Result<(FeatureNetGrads, Matrix)> {
    if trace.layer_inputs.len() != params.layers.len() {
        return Err(Error::Mismatch(
            "trace does not match the parameter set it was produced from".into(),
        ));
    }
    if grad_x.rows() != trace.batch_rows || grad_x.cols() != params.feature_dim {
        return Err(Error::dim(
            "grad_x shape",
            format!("{}x{}", trace.batch_rows, params.feature_dim),
            format!("{}x{}", grad_x.rows(), grad_x.cols()),
        ));
    }

    let mut grads = FeatureNetGrads::zeros_like(params);
    let mut g = grad_x.clone();
    for (k, layer) in params.layers.iter().enumerate().rev() {
        if let Some(mask) = &trace.masks[k] {
            for (gv, mv) in g.data_mut().iter_mut().zip(mask.data()) {
                *gv *= mv;
            }
        }
        let pre = &trace.pre_activations[k];
        if g.rows() != pre.rows() || g.cols() != pre.cols() {
            return Err(Error::Mismatch(format!(
                "trace layer {k} shape does not match incoming gradient"
            )));
        }
        let mut g_pre = g;
        for (gv, pv) in g_pre.data_mut().iter_mut().zip(pre.data()) {
            *gv *= layer.activation.derivative(*pv);
        }
        // dW = g_pre^T X, db = column sums of g_pre, dX = g_pre W.
        let input = &trace.layer_inputs[k];
        grads.layers[k].0 = g_pre.transpose().matmul(input)?;
        let db = &mut grads.layers[k].1;
        for r in 0..g_pre.rows() {
            for (b, gv) in db.iter_mut().zip(g_pre.row(r)) {
                *b += gv;
            }
        }
        g = g_pre.matmul(&layer.weight)?;
    }
    Ok((grads, g))
}

/// In-place SGD update `p -= learning_rate * g`.
pub fn sgd_step(
    params: &mut FeatureNetParams,
    grads: &FeatureNetGrads,
    learning_rate: f64,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::dim("grad layers", params.layers.len(), grads.layers.len()));
    }
    for (k, (layer, (gw, gb))) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        if !gw.is_finite() || gb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sgd_step".into(),
                detail: format!("non-finite gradient at feature layer {k}"),
            });
        }
        layer.weight.add_scaled(gw, -learning_rate)?;
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b -= learning_rate * g;
        }
    }
    Ok(())
}
