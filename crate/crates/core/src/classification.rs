//! Two-class graph attention classifier.
//!
//! Node features are sorted connectivity rows, neighbourhoods come from the
//! mean-thresholded graph plus self-loops, and graph scores are read from the
//! mean of the last layer's node states.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::graph::{threshold_by_mean, AdjacencyMask, ConnectivityMatrix, GraphError, Population};
use crate::nn::{glorot, Adam, Module, WeightDecay};
use crate::seed;

#[derive(Debug, Error)]
pub enum ClassificationError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no training sample for class `{0}`")]
    MissingClass(String),
    #[error("training sample {index} is unlabeled or has unknown label")]
    UnknownLabel { index: usize },
    #[error("training diverged at epoch {epoch}")]
    NonConvergence { epoch: usize },
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub const DEFAULT_LEAKY_RELU_ALPHA: f64 = 0.2;

/// One attention layer: projection `W` (F x F') and mechanism `a` (2F' x 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub weight: Array2<f64>,
    pub attention: Array2<f64>,
    pub leaky_relu_alpha: f64,
}

impl GatLayerParams {
    pub fn new(fan_in: usize, fan_out: usize, leaky_relu_alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: glorot(fan_in, fan_out, rng),
            attention: glorot(2 * fan_out, 1, rng),
            leaky_relu_alpha,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, features: &Array2<f64>, mask: &AdjacencyMask) -> Result<(), ClassificationError> {
        let mismatch = |expected, found| Err(ClassificationError::DimensionMismatch { expected, found });
        if features.ncols() != self.in_dim() {
            return mismatch(self.in_dim(), features.ncols());
        }
        if self.attention.dim() != (2 * self.out_dim(), 1) {
            return mismatch(2 * self.out_dim(), self.attention.nrows());
        }
        if mask.num_rois() != features.nrows() {
            return mismatch(features.nrows(), mask.num_rois());
        }
        Ok(())
    }
}

/// Records one attention layer over `neighbourhoods` (self-loops included);
/// returns `(alpha, h')`.
pub fn gat_layer_tape(
    tape: &mut Tape,
    h: Var,
    weight: Var,
    attention: Var,
    alpha: f64,
    neighbourhoods: &Array2<bool>,
) -> (Var, Var) {
    let out_dim = tape.value(weight).ncols();
    let z = tape.matmul(h, weight);
    let a_src = tape.row_slice(attention, 0, out_dim);
    let a_dst = tape.row_slice(attention, out_dim, 2 * out_dim);
    let s_src = tape.matmul(z, a_src);
    let s_dst = tape.matmul(z, a_dst);
    let e = tape.outer_sum(s_src, s_dst);
    let e = tape.leaky_relu(e, alpha);
    let coeffs = tape.masked_row_softmax(e, neighbourhoods);
    let agg = tape.matmul(coeffs, z);
    (coeffs, tape.elu(agg))
}

/// Row-normalised attention `alpha_ij` over each node's neighbourhood
/// (`mask` plus a self-loop). Non-neighbours get exactly zero.
pub fn attention_coefficients(
    features: &Array2<f64>,
    params: &GatLayerParams,
    mask: &AdjacencyMask,
) -> Result<Array2<f64>, ClassificationError> {
    params.check(features, mask)?;
    let mut tape = Tape::new();
    let h = tape.leaf(features.clone());
    let w = tape.leaf(params.weight.clone());
    let a = tape.leaf(params.attention.clone());
    let (coeffs, _) = gat_layer_tape(&mut tape, h, w, a, params.leaky_relu_alpha, &mask.with_self_loops());
    Ok(tape.value(coeffs).clone())
}

/// `h'_i = elu(sum_j alpha_ij W h_j)`.
pub fn gat_layer_forward(
    features: &Array2<f64>,
    params: &GatLayerParams,
    mask: &AdjacencyMask,
) -> Result<Array2<f64>, ClassificationError> {
    params.check(features, mask)?;
    let mut tape = Tape::new();
    let h = tape.leaf(features.clone());
    let w = tape.leaf(params.weight.clone());
    let a = tape.leaf(params.attention.clone());
    let (_, out) = gat_layer_tape(&mut tape, h, w, a, params.leaky_relu_alpha, &mask.with_self_loops());
    Ok(tape.value(out).clone())
}

/// Input to the network for one graph: sorted rows and neighbourhoods.
#[derive(Debug, Clone)]
pub struct GraphInput {
    features: Array2<f64>,
    neighbourhoods: Array2<bool>,
}

impl GraphInput {
    pub fn new(g: &ConnectivityMatrix) -> Self {
        let mut tape = Tape::new();
        let x = tape.leaf(g.weights().clone());
        let sorted = tape.sort_rows_desc(x);
        Self {
            features: tape.value(sorted).clone(),
            neighbourhoods: threshold_by_mean(g).with_self_loops(),
        }
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatModel {
    num_rois: usize,
    pub layers: Vec<GatLayerParams>,
    /// `F_last x 2`.
    pub readout_weight: Array2<f64>,
    /// `1 x 2`.
    pub readout_bias: Array2<f64>,
    pub dropout_rate: f64,
    pub classes: [String; 2],
}

impl Module for GatModel {
    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("gat{k}.weight"), &l.weight));
            out.push((format!("gat{k}.attention"), &l.attention));
        }
        out.push(("readout.weight".into(), &self.readout_weight));
        out.push(("readout.bias".into(), &self.readout_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.attention])
            .collect();
        out.push(&mut self.readout_weight);
        out.push(&mut self.readout_bias);
        out
    }
}

/// Outcome of classifying one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub class_index: usize,
    /// Probabilities of `classes[0]` and `classes[1]`.
    pub probabilities: [f64; 2],
}

impl GatModel {
    pub fn new(
        num_rois: usize,
        hidden_dims: &[usize],
        classes: [String; 2],
        dropout_rate: f64,
        leaky_relu_alpha: f64,
        rng_seed: u64,
    ) -> Self {
        let mut rng = seed::rng(rng_seed);
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut fan_in = num_rois;
        for &d in hidden_dims {
            layers.push(GatLayerParams::new(fan_in, d, leaky_relu_alpha, &mut rng));
            fan_in = d;
        }
        Self {
            num_rois,
            layers,
            readout_weight: glorot(fan_in, 2, &mut rng),
            readout_bias: Array2::zeros((1, 2)),
            dropout_rate,
            classes,
        }
    }

    pub fn num_rois(&self) -> usize {
        self.num_rois
    }

    /// Records the network on `input`; returns the `1 x 2` logits. Dropout
    /// on the pooled graph embedding is applied only when `dropout` holds an
    /// RNG.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: &GraphInput,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let mut h = tape.leaf(input.features.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let (_, out) = gat_layer_tape(
                tape,
                h,
                params[2 * k],
                params[2 * k + 1],
                layer.leaky_relu_alpha,
                &input.neighbourhoods,
            );
            h = out;
        }
        let nl = self.layers.len();
        let mut pooled = tape.col_means(h);
        if let (Some(rng), true) = (dropout, self.dropout_rate > 0.0) {
            let keep = 1.0 - self.dropout_rate;
            let dim = tape.value(pooled).dim();
            let m = Array2::from_shape_fn(dim, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = tape.leaf(m);
            pooled = tape.mul(pooled, m);
        }
        let logits = tape.matmul(pooled, params[2 * nl]);
        tape.add(logits, params[2 * nl + 1])
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn probabilities(&self, g: &ConnectivityMatrix) -> Result<[f64; 2], ClassificationError> {
        if g.num_rois() != self.num_rois {
            return Err(ClassificationError::DimensionMismatch {
                expected: self.num_rois,
                found: g.num_rois(),
            });
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let logits = self.forward_tape(&mut tape, &params, &GraphInput::new(g), None);
        let z = tape.value(logits);
        let max = z[[0, 0]].max(z[[0, 1]]);
        let (e0, e1) = ((z[[0, 0]] - max).exp(), (z[[0, 1]] - max).exp());
        Ok([e0 / (e0 + e1), e1 / (e0 + e1)])
    }
}

/// Labels `g` by argmax; an exact tie goes to `classes[0]`.
pub fn classify(model: &GatModel, g: &ConnectivityMatrix) -> Result<Prediction, ClassificationError> {
    let p = model.probabilities(g)?;
    Ok(prediction(model, p, p[1] > p[0]))
}

/// Labels `g` as `classes[1]` iff its probability exceeds `threshold`.
pub fn classify_with_threshold(
    model: &GatModel,
    g: &ConnectivityMatrix,
    threshold: f64,
) -> Result<Prediction, ClassificationError> {
    let p = model.probabilities(g)?;
    Ok(prediction(model, p, p[1] > threshold))
}

fn prediction(model: &GatModel, probabilities: [f64; 2], second: bool) -> Prediction {
    let class_index = usize::from(second);
    Prediction {
        label: model.classes[class_index].clone(),
        class_index,
        probabilities,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub leaky_relu_alpha: f64,
    pub rng_seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            epochs: 200,
            hidden_dims: vec![16, 16],
            dropout_rate: 0.6,
            leaky_relu_alpha: DEFAULT_LEAKY_RELU_ALPHA,
            rng_seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassificationError> {
        let bad = |m: &str| Err(ClassificationError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be a nonempty list of positive sizes");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !self.leaky_relu_alpha.is_finite() {
            return bad("leaky_relu_alpha must be finite");
        }
        Ok(())
    }
}

/// Mean cross-entropy over `samples` (input, class index) on the tape.
pub fn batch_loss_tape(
    model: &GatModel,
    tape: &mut Tape,
    params: &[Var],
    samples: &[(GraphInput, usize)],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Var {
    let n = samples.len() as f64;
    let mut loss: Option<Var> = None;
    for (input, target) in samples {
        let logits = model.forward_tape(tape, params, input, dropout.as_deref_mut());
        let ce = tape.softmax_cross_entropy(logits, *target);
        let ce = tape.scale(ce, 1.0 / n);
        loss = Some(match loss {
            Some(l) => tape.add(l, ce),
            None => ce,
        });
    }
    loss.expect("nonempty batch")
}

/// Dropout-free batch loss and its gradient for every parameter, in
/// [`Module::named_parameters`] order.
pub fn loss_and_gradients(model: &GatModel, samples: &[(GraphInput, usize)]) -> (f64, Vec<Array2<f64>>) {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let loss = batch_loss_tape(model, &mut tape, &params, samples, None);
    let grads = tape.backward(loss);
    (tape.scalar(loss), params.iter().map(|&p| grads.wrt(p)).collect())
}

/// Trains a fresh model on a labelled population whose labels are drawn
/// from `classes`. Each epoch is one full-batch Adam step with L2 weight
/// decay; dropout is active only here.
pub fn train_classifier(
    train: &Population,
    classes: &[String; 2],
    cfg: &ClassifierConfig,
) -> Result<GatModel, ClassificationError> {
    cfg.validate()?;
    let labels = train.labels();
    let mut samples = Vec::with_capacity(train.len());
    for (index, member) in train.members().iter().enumerate() {
        let label = labels.and_then(|l| l.get(index)).ok_or(ClassificationError::UnknownLabel { index })?;
        let target = classes
            .iter()
            .position(|c| c == label)
            .ok_or(ClassificationError::UnknownLabel { index })?;
        samples.push((GraphInput::new(member), target));
    }
    for (k, c) in classes.iter().enumerate() {
        if !samples.iter().any(|(_, t)| *t == k) {
            return Err(ClassificationError::MissingClass(c.clone()));
        }
    }

    let mut model = GatModel::new(
        train.num_rois(),
        &cfg.hidden_dims,
        classes.clone(),
        cfg.dropout_rate,
        cfg.leaky_relu_alpha,
        seed::derive(cfg.rng_seed, "gat/init"),
    );
    let mut rng = seed::rng(seed::derive(cfg.rng_seed, "gat/dropout"));
    let mut opt = Adam::new(0.9, 0.999, cfg.weight_decay, WeightDecay::Coupled);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let loss = batch_loss_tape(&model, &mut tape, &params, &samples, Some(&mut rng));
        if !tape.scalar(loss).is_finite() {
            return Err(ClassificationError::NonConvergence { epoch });
        }
        let grads = tape.backward(loss);
        let g: Vec<Array2<f64>> = params.iter().map(|&p| grads.wrt(p)).collect();
        opt.step(model.parameters_mut(), &g, cfg.learning_rate);
        if !model.all_finite() {
            return Err(ClassificationError::NonConvergence { epoch });
        }
    }
    Ok(model)
}
