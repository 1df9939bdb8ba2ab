//! Cascade of graph GANs forecasting follow-up brain graphs from a baseline.
//!
//! Stage `i` holds a generator mapping the graph at timepoint `i - 1` to the
//! graph at `i`, and a discriminator scoring how real a graph at `i` looks.
//! Stages are trained one after the other; the inputs to stage `i > 1` are
//! the trained stage `i - 1`'s predictions unless teacher forcing is enabled.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, sigmoid, Tape, Var};
use crate::graph::{ConnectivityMatrix, GraphError, Trajectory};
use crate::nn::{glorot, uniform, Adam, Module, WeightDecay};
use crate::seed;

/// Fixed gain on the generator's residual update. Keeps one optimiser step
/// at the schedule's largest learning rates well below the [0, 1] range.
pub const OUTPUT_GAIN: f64 = 0.05;

/// Floor on fitted per-node standard deviations in the KL term.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("trajectory `{subject}` has {found} timepoints, expected {expected}")]
    InconsistentTrajectoryLength {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("training diverged at stage {stage}, epoch {epoch}")]
    NonConvergence { stage: usize, epoch: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionHyperparams {
    /// Adversarial weight.
    pub lambda1: f64,
    /// L1 weight.
    pub lambda2: f64,
    /// KL weight.
    pub lambda3: f64,
    pub gen_lr_initial: f64,
    pub gen_lr_final: f64,
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub generator_dims: Vec<usize>,
    pub discriminator_dims: Vec<usize>,
    /// Train stage `i > 1` on ground-truth inputs instead of predictions.
    pub teacher_forcing: bool,
    pub rng_seed: u64,
}

impl Default for EvolutionHyperparams {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 2.0,
            lambda3: 0.001,
            gen_lr_initial: 0.01,
            gen_lr_final: 0.1,
            disc_lr: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weight_decay: 0.01,
            epochs: 300,
            generator_dims: vec![16, 16],
            discriminator_dims: vec![16, 8],
            teacher_forcing: false,
            rng_seed: 0,
        }
    }
}

impl EvolutionHyperparams {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: &str| Err(EvolutionError::InvalidHyperparams(m.to_string()));
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l >= 0.0)) {
            return bad("lambdas must be nonnegative");
        }
        if [self.gen_lr_initial, self.gen_lr_final, self.disc_lr].iter().any(|l| !(*l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if [self.adam_beta1, self.adam_beta2].iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be nonnegative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.generator_dims.is_empty() || self.discriminator_dims.is_empty() {
            return bad("generator and discriminator need at least one layer");
        }
        if self.generator_dims.contains(&0) || self.discriminator_dims.contains(&0) {
            return bad("layer sizes must be positive");
        }
        Ok(())
    }

    /// Generator learning rate at `epoch`, interpolated linearly from
    /// `gen_lr_initial` (first epoch) to `gen_lr_final` (last epoch).
    pub fn generator_lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.gen_lr_initial;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.gen_lr_initial + (self.gen_lr_final - self.gen_lr_initial) * t
    }
}

/// Edge-weighted graph convolution `H' = elu((X H) W_msg / r + H W_self + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConv {
    pub message: Array2<f64>,
    pub self_loop: Array2<f64>,
    pub bias: Array2<f64>,
}

impl GraphConv {
    fn new(fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            message: glorot(fan_in, fan_out, rng),
            self_loop: glorot(fan_in, fan_out, rng),
            bias: Array2::zeros((1, fan_out)),
        }
    }
}

fn conv_stack(tape: &mut Tape, params: &[Var], num_layers: usize, x: Var, r: usize) -> Var {
    let mut h = tape.sort_rows_desc(x);
    let inv_r = 1.0 / r as f64;
    for k in 0..num_layers {
        let (wm, ws, b) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
        let agg = tape.matmul(x, h);
        let msg = tape.matmul(agg, wm);
        let msg = tape.scale(msg, inv_r);
        let own = tape.matmul(h, ws);
        let pre = tape.add(msg, own);
        let pre = tape.add_row(pre, b);
        h = tape.elu(pre);
    }
    h
}

fn push_conv_params<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, prefix: &str, layers: &'a [GraphConv]) {
    for (k, l) in layers.iter().enumerate() {
        out.push((format!("{prefix}conv{k}.message"), &l.message));
        out.push((format!("{prefix}conv{k}.self"), &l.self_loop));
        out.push((format!("{prefix}conv{k}.bias"), &l.bias));
    }
}

fn bind(tape: &mut Tape, m: &impl Module) -> Vec<Var> {
    m.parameters().into_iter().map(|p| tape.leaf(p.clone())).collect()
}

/// Maps a graph to its successor: bounded node embeddings `H` from the
/// convolution stack produce a symmetric update `H M H^T / d^2` which, with an
/// edge-affine term and a fixed gain, is added to the input graph. Output is
/// symmetric, zero-diagonal and clamped to [0, 1] for any parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    num_rois: usize,
    pub layers: Vec<GraphConv>,
    /// `d x d` bilinear head.
    pub head: Array2<f64>,
    /// `1 x 1` multiplier on the input edge weight.
    pub edge_scale: Array2<f64>,
    /// `1 x 1` constant added to every edge.
    pub edge_bias: Array2<f64>,
}

impl Module for GeneratorModel {
    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        push_conv_params(&mut out, "", &self.layers);
        out.push(("head".into(), &self.head));
        out.push(("edge_scale".into(), &self.edge_scale));
        out.push(("edge_bias".into(), &self.edge_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.message, &mut l.self_loop, &mut l.bias])
            .collect();
        out.push(&mut self.head);
        out.push(&mut self.edge_scale);
        out.push(&mut self.edge_bias);
        out
    }
}

impl GeneratorModel {
    pub fn new(num_rois: usize, dims: &[usize], rng_seed: u64) -> Self {
        let mut rng = seed::rng(rng_seed);
        let mut layers = Vec::new();
        let mut fan_in = num_rois;
        for &d in dims {
            layers.push(GraphConv::new(fan_in, d, &mut rng));
            fan_in = d;
        }
        let head = uniform(fan_in, fan_in, 0.1, &mut rng);
        Self {
            num_rois,
            layers,
            head,
            edge_scale: Array2::zeros((1, 1)),
            edge_bias: Array2::zeros((1, 1)),
        }
    }

    pub fn num_rois(&self) -> usize {
        self.num_rois
    }

    /// Zeroes the output head so the generator returns its input unchanged.
    pub fn zero_output_head(&mut self) {
        self.head.fill(0.0);
        self.edge_scale.fill(0.0);
        self.edge_bias.fill(0.0);
    }

    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let r = self.num_rois;
        let nl = self.layers.len();
        let h = conv_stack(tape, params, nl, x, r);
        // tanh(h) = 2 sigmoid(2h) - 1 keeps the embeddings in (-1, 1).
        let h = tape.scale(h, 2.0);
        let h = tape.sigmoid(h);
        let h = tape.scale(h, 2.0);
        let h = tape.offset(h, -1.0);
        let (head, scale, bias) = (params[3 * nl], params[3 * nl + 1], params[3 * nl + 2]);
        let hm = tape.matmul(h, head);
        let ht = tape.transpose(h);
        let delta = tape.matmul(hm, ht);
        let delta_t = tape.transpose(delta);
        let delta = tape.add(delta, delta_t);
        let d = self.head.nrows() as f64;
        let delta = tape.scale(delta, 0.5 / (d * d));

        let ones_col = tape.leaf(Array2::ones((r, 1)));
        let ones_row = tape.leaf(Array2::ones((1, r)));
        let s = tape.matmul(ones_col, scale);
        let s = tape.matmul(s, ones_row);
        let b = tape.matmul(ones_col, bias);
        let b = tape.matmul(b, ones_row);
        let scaled = tape.mul(s, x);

        let update = tape.add(delta, scaled);
        let update = tape.add(update, b);
        let update = tape.scale(update, OUTPUT_GAIN);
        let y = tape.add(x, update);
        let offdiag = tape.leaf(Array2::from_shape_fn((r, r), |(i, j)| if i == j { 0.0 } else { 1.0 }));
        let y = tape.mul(y, offdiag);
        tape.clamp(y, 0.0, 1.0)
    }

    pub fn generate(&self, input: &ConnectivityMatrix) -> Result<ConnectivityMatrix, EvolutionError> {
        check_rois(self.num_rois, input)?;
        let mut tape = Tape::new();
        let params = bind(&mut tape, self);
        let x = tape.leaf(input.weights().clone());
        let y = self.forward_tape(&mut tape, &params, x);
        Ok(ConnectivityMatrix::from_trusted(tape.value(y).clone()))
    }
}

/// Convolution stack, mean-pool over nodes, affine readout to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    num_rois: usize,
    pub layers: Vec<GraphConv>,
    pub readout_weight: Array2<f64>,
    pub readout_bias: Array2<f64>,
}

impl Module for DiscriminatorModel {
    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        push_conv_params(&mut out, "", &self.layers);
        out.push(("readout.weight".into(), &self.readout_weight));
        out.push(("readout.bias".into(), &self.readout_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.message, &mut l.self_loop, &mut l.bias])
            .collect();
        out.push(&mut self.readout_weight);
        out.push(&mut self.readout_bias);
        out
    }
}

impl DiscriminatorModel {
    pub fn new(num_rois: usize, dims: &[usize], rng_seed: u64) -> Self {
        let mut rng = seed::rng(rng_seed);
        let mut layers = Vec::new();
        let mut fan_in = num_rois;
        for &d in dims {
            layers.push(GraphConv::new(fan_in, d, &mut rng));
            fan_in = d;
        }
        Self {
            num_rois,
            layers,
            readout_weight: glorot(fan_in, 1, &mut rng),
            readout_bias: Array2::zeros((1, 1)),
        }
    }

    /// Records the forward pass; returns the `1 x 1` logit.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let nl = self.layers.len();
        let h = conv_stack(tape, params, nl, x, self.num_rois);
        let pooled = tape.col_means(h);
        let logit = tape.matmul(pooled, params[3 * nl]);
        tape.add(logit, params[3 * nl + 1])
    }

    pub fn logit(&self, input: &ConnectivityMatrix) -> Result<f64, EvolutionError> {
        check_rois(self.num_rois, input)?;
        let mut tape = Tape::new();
        let params = bind(&mut tape, self);
        let x = tape.leaf(input.weights().clone());
        let l = self.forward_tape(&mut tape, &params, x);
        Ok(tape.scalar(l))
    }

    /// Probability that `input` is a real graph, kept inside the open unit interval.
    pub fn probability(&self, input: &ConnectivityMatrix) -> Result<f64, EvolutionError> {
        Ok(sigmoid(self.logit(input)?).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    num_rois: usize,
    stages: Vec<CascadeStage>,
}

impl Module for CascadeModel {
    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (n, p) in s.generator.named_parameters() {
                out.push((format!("stage{i}.generator.{n}"), p));
            }
            for (n, p) in s.discriminator.named_parameters() {
                out.push((format!("stage{i}.discriminator.{n}"), p));
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend(s.generator.parameters_mut());
            out.extend(s.discriminator.parameters_mut());
        }
        out
    }
}

impl CascadeModel {
    /// Untrained cascade with `num_stages` stages laid out as `hp` describes.
    pub fn new(num_rois: usize, num_stages: usize, hp: &EvolutionHyperparams) -> Self {
        let stages = (0..num_stages)
            .map(|i| CascadeStage {
                generator: GeneratorModel::new(
                    num_rois,
                    &hp.generator_dims,
                    seed::derive(hp.rng_seed, &format!("stage{i}/generator")),
                ),
                discriminator: DiscriminatorModel::new(
                    num_rois,
                    &hp.discriminator_dims,
                    seed::derive(hp.rng_seed, &format!("stage{i}/discriminator")),
                ),
            })
            .collect();
        Self { num_rois, stages }
    }

    pub fn num_rois(&self) -> usize {
        self.num_rois
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[CascadeStage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [CascadeStage] {
        &mut self.stages
    }
}

fn check_rois(expected: usize, m: &ConnectivityMatrix) -> Result<(), EvolutionError> {
    if m.num_rois() != expected {
        return Err(GraphError::DimensionMismatch {
            left: expected,
            right: m.num_rois(),
        }
        .into());
    }
    Ok(())
}

fn check_pair(pred: &ConnectivityMatrix, truth: &ConnectivityMatrix) -> Result<(), EvolutionError> {
    check_rois(pred.num_rois(), truth)
}

/// Sum of absolute differences over the strict upper triangle.
pub fn l1_loss(pred: &ConnectivityMatrix, truth: &ConnectivityMatrix) -> Result<f64, EvolutionError> {
    check_pair(pred, truth)?;
    Ok(pred
        .upper_triangle()
        .iter()
        .zip(truth.upper_triangle())
        .map(|(p, t)| (p - t).abs())
        .sum())
}

/// Maximum-likelihood Gaussian fit `(mean, std)` of each node's off-diagonal
/// edge weights, std floored at [`SIGMA_FLOOR`].
pub fn node_gaussians(m: &ConnectivityMatrix) -> Vec<(f64, f64)> {
    let r = m.num_rois();
    let count = (r.max(2) - 1) as f64;
    (0..r)
        .map(|i| {
            let vals = (0..r).filter(|&j| j != i).map(|j| m.get(i, j));
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            (mean, var.sqrt().max(SIGMA_FLOOR))
        })
        .collect()
}

/// `KL(N(mu_t, s_t) || N(mu_p, s_p))`.
pub fn gaussian_kl(mu_t: f64, s_t: f64, mu_p: f64, s_p: f64) -> f64 {
    (s_p / s_t).ln() + (s_t * s_t + (mu_t - mu_p) * (mu_t - mu_p)) / (2.0 * s_p * s_p) - 0.5
}

/// Sum over nodes of the KL divergence from the ground-truth node Gaussian
/// to the predicted one.
pub fn kl_alignment_loss(pred: &ConnectivityMatrix, truth: &ConnectivityMatrix) -> Result<f64, EvolutionError> {
    check_pair(pred, truth)?;
    Ok(node_gaussians(truth)
        .into_iter()
        .zip(node_gaussians(pred))
        .map(|((mt, st), (mp, sp))| gaussian_kl(mt, st, mp, sp))
        .sum())
}

/// Predictions, targets and discriminator outputs of one cascade stage.
#[derive(Debug, Clone, Copy)]
pub struct StageBatch<'a> {
    pub predictions: &'a [ConnectivityMatrix],
    pub truths: &'a [ConnectivityMatrix],
    /// `D_i(prediction)` probabilities, one per subject.
    pub disc_on_predictions: &'a [f64],
}

/// Generator objective summed over stages:
/// `lambda1 * L_adv + lambda2 * mean(L1) + lambda3 * mean(KL)`, with
/// `L_adv = mean(-ln D(prediction))`.
pub fn composite_loss(stages: &[StageBatch<'_>], hp: &EvolutionHyperparams) -> Result<f64, EvolutionError> {
    let mut total = 0.0;
    for stage in stages {
        let n = stage.predictions.len();
        if n == 0 {
            return Err(EvolutionError::EmptyBatch);
        }
        if stage.truths.len() != n || stage.disc_on_predictions.len() != n {
            return Err(EvolutionError::InvalidHyperparams(
                "prediction, truth and discriminator lists must align".into(),
            ));
        }
        let mut adv = 0.0;
        let mut l1 = 0.0;
        let mut kl = 0.0;
        for ((p, t), d) in stage.predictions.iter().zip(stage.truths).zip(stage.disc_on_predictions) {
            adv += -d.ln();
            l1 += l1_loss(p, t)?;
            kl += kl_alignment_loss(p, t)?;
        }
        let nf = n as f64;
        total += hp.lambda1 * adv / nf + hp.lambda2 * l1 / nf + hp.lambda3 * kl / nf;
    }
    Ok(total)
}

/// Strict-upper-triangle L1 on the tape.
pub fn l1_loss_tape(tape: &mut Tape, pred: Var, truth: &ConnectivityMatrix) -> Var {
    let r = truth.num_rois();
    let t = tape.leaf(truth.weights().clone());
    let d = tape.sub(pred, t);
    let d = tape.abs(d);
    let upper = tape.leaf(Array2::from_shape_fn((r, r), |(i, j)| if i < j { 1.0 } else { 0.0 }));
    let d = tape.mul(d, upper);
    tape.sum(d)
}

/// [`kl_alignment_loss`] on the tape; only the prediction carries gradient.
pub fn kl_alignment_loss_tape(tape: &mut Tape, pred: Var, truth: &ConnectivityMatrix) -> Var {
    let r = truth.num_rois();
    let count = (r.max(2) - 1) as f64;
    let offdiag = tape.leaf(Array2::from_shape_fn((r, r), |(i, j)| if i == j { 0.0 } else { 1.0 }));
    let masked = tape.mul(pred, offdiag);
    let mu = tape.row_sums(masked);
    let mu = tape.scale(mu, 1.0 / count);
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_col(pred, neg_mu);
    let centered = tape.mul(centered, offdiag);
    let sq = tape.square(centered);
    let var = tape.row_sums(sq);
    let var = tape.scale(var, 1.0 / count);
    let var = tape.floor_at(var, SIGMA_FLOOR * SIGMA_FLOOR);
    let sigma_p = tape.sqrt(var);

    let fits = node_gaussians(truth);
    let mu_t = tape.leaf(Array2::from_shape_fn((r, 1), |(i, _)| fits[i].0));
    let var_t = tape.leaf(Array2::from_shape_fn((r, 1), |(i, _)| fits[i].1 * fits[i].1));
    let ln_sigma_t: f64 = fits.iter().map(|f| f.1.ln()).sum();

    let ln_sp = tape.ln(sigma_p);
    let dmu = tape.sub(mu_t, mu);
    let dmu2 = tape.square(dmu);
    let num = tape.add(var_t, dmu2);
    let den = tape.scale(var, 2.0);
    let ratio = tape.div(num, den);
    let per_node = tape.add(ln_sp, ratio);
    let total = tape.sum(per_node);
    tape.offset(total, -ln_sigma_t - 0.5 * r as f64)
}

/// Generator-side objective for one stage on the tape. Returns the loss node.
pub fn stage_generator_loss_tape(
    tape: &mut Tape,
    generator: &GeneratorModel,
    gen_params: &[Var],
    discriminator: &DiscriminatorModel,
    disc_params: &[Var],
    inputs: &[ConnectivityMatrix],
    truths: &[ConnectivityMatrix],
    hp: &EvolutionHyperparams,
) -> Var {
    let n = inputs.len() as f64;
    let mut terms = Vec::new();
    for (input, truth) in inputs.iter().zip(truths) {
        let x = tape.leaf(input.weights().clone());
        let pred = generator.forward_tape(tape, gen_params, x);
        let logit = discriminator.forward_tape(tape, disc_params, pred);
        let neg = tape.scale(logit, -1.0);
        let adv = tape.softplus(neg);
        let adv = tape.scale(adv, hp.lambda1 / n);
        let l1 = l1_loss_tape(tape, pred, truth);
        let l1 = tape.scale(l1, hp.lambda2 / n);
        let kl = kl_alignment_loss_tape(tape, pred, truth);
        let kl = tape.scale(kl, hp.lambda3 / n);
        let t = tape.add(adv, l1);
        terms.push(tape.add(t, kl));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    loss
}

/// Discriminator objective `mean(softplus(-D(real)) + softplus(D(fake)))`.
pub fn discriminator_loss_tape(
    tape: &mut Tape,
    discriminator: &DiscriminatorModel,
    disc_params: &[Var],
    reals: &[ConnectivityMatrix],
    fakes: &[ConnectivityMatrix],
) -> Var {
    let n = reals.len() as f64;
    let mut terms = Vec::new();
    for (real, fake) in reals.iter().zip(fakes) {
        let xr = tape.leaf(real.weights().clone());
        let lr = discriminator.forward_tape(tape, disc_params, xr);
        let lr = tape.scale(lr, -1.0);
        let a = tape.softplus(lr);
        let xf = tape.leaf(fake.weights().clone());
        let lf = discriminator.forward_tape(tape, disc_params, xf);
        let b = tape.softplus(lf);
        let t = tape.add(a, b);
        terms.push(tape.scale(t, 1.0 / n));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    loss
}

/// Plain value of the discriminator objective.
pub fn discriminator_loss(
    discriminator: &DiscriminatorModel,
    reals: &[ConnectivityMatrix],
    fakes: &[ConnectivityMatrix],
) -> Result<f64, EvolutionError> {
    if reals.is_empty() {
        return Err(EvolutionError::EmptyBatch);
    }
    let mut total = 0.0;
    for (r, f) in reals.iter().zip(fakes) {
        total += softplus(-discriminator.logit(r)?) + softplus(discriminator.logit(f)?);
    }
    Ok(total / reals.len() as f64)
}

fn collect_grads(tape: &Tape, loss: Var, params: &[Var]) -> Vec<Array2<f64>> {
    let grads = tape.backward(loss);
    params.iter().map(|&p| grads.wrt(p)).collect()
}

fn train_stage(
    stage: &mut CascadeStage,
    stage_index: usize,
    inputs: &[ConnectivityMatrix],
    truths: &[ConnectivityMatrix],
    hp: &EvolutionHyperparams,
) -> Result<(), EvolutionError> {
    let mut gen_opt = Adam::new(hp.adam_beta1, hp.adam_beta2, hp.weight_decay, WeightDecay::Decoupled);
    let mut disc_opt = Adam::new(hp.adam_beta1, hp.adam_beta2, hp.weight_decay, WeightDecay::Decoupled);
    let diverged = |epoch| EvolutionError::NonConvergence {
        stage: stage_index,
        epoch,
    };

    for epoch in 0..hp.epochs {
        let fakes = inputs
            .iter()
            .map(|x| stage.generator.generate(x))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tape = Tape::new();
        let dp = bind(&mut tape, &stage.discriminator);
        let d_loss = discriminator_loss_tape(&mut tape, &stage.discriminator, &dp, truths, &fakes);
        if !tape.scalar(d_loss).is_finite() {
            return Err(diverged(epoch));
        }
        let g = collect_grads(&tape, d_loss, &dp);
        disc_opt.step(stage.discriminator.parameters_mut(), &g, hp.disc_lr);

        let mut tape = Tape::new();
        let gp = bind(&mut tape, &stage.generator);
        let dp = bind(&mut tape, &stage.discriminator);
        let g_loss = stage_generator_loss_tape(
            &mut tape,
            &stage.generator,
            &gp,
            &stage.discriminator,
            &dp,
            inputs,
            truths,
            hp,
        );
        let value = tape.scalar(g_loss);
        if !value.is_finite() {
            return Err(diverged(epoch));
        }
        let g = collect_grads(&tape, g_loss, &gp);
        gen_opt.step(stage.generator.parameters_mut(), &g, hp.generator_lr(epoch));
        if !stage.generator.all_finite() || !stage.discriminator.all_finite() {
            return Err(diverged(epoch));
        }
        if epoch % 50 == 0 || epoch + 1 == hp.epochs {
            log::debug!("stage {stage_index} epoch {epoch}: generator loss {value:.5}");
        }
    }
    Ok(())
}

fn check_trajectories(train: &[Trajectory]) -> Result<(usize, usize), EvolutionError> {
    let first = train.first().ok_or(EvolutionError::EmptyTrainingSet)?;
    let (len, r) = (first.states().len(), first.num_rois());
    for t in train {
        if t.states().len() != len {
            return Err(EvolutionError::InconsistentTrajectoryLength {
                subject: t.subject_id().to_string(),
                expected: len,
                found: t.states().len(),
            });
        }
        check_rois(r, t.baseline())?;
    }
    Ok((len - 1, r))
}

/// Trains one stage per follow-up timepoint on the given trajectories.
pub fn train_cascade(train: &[Trajectory], hp: &EvolutionHyperparams) -> Result<CascadeModel, EvolutionError> {
    hp.validate()?;
    let (num_stages, r) = check_trajectories(train)?;
    let mut model = CascadeModel::new(r, num_stages, hp);
    let mut inputs: Vec<ConnectivityMatrix> = train.iter().map(|t| t.baseline().clone()).collect();
    for i in 0..num_stages {
        let truths: Vec<ConnectivityMatrix> = train.iter().map(|t| t.states()[i + 1].clone()).collect();
        let stage = &mut model.stages[i];
        train_stage(stage, i, &inputs, &truths, hp)?;
        inputs = if hp.teacher_forcing {
            truths
        } else {
            inputs
                .iter()
                .map(|x| stage.generator.generate(x))
                .collect::<Result<Vec<_>, _>>()?
        };
    }
    Ok(model)
}

/// Feeds the baseline through every stage; returns one graph per follow-up.
pub fn predict_trajectory(
    model: &CascadeModel,
    baseline: &ConnectivityMatrix,
) -> Result<Vec<ConnectivityMatrix>, EvolutionError> {
    check_rois(model.num_rois, baseline)?;
    let mut current = baseline.clone();
    let mut out = Vec::with_capacity(model.stages.len());
    for stage in &model.stages {
        current = stage.generator.generate(&current)?;
        out.push(current.clone());
    }
    Ok(out)
}
