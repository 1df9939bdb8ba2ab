//! Population templates: the learned connectional template (CBT), the
//! elementwise average and the single random pick.
//!
//! The learned estimator embeds every node of every member graph with an
//! edge-weighted message-passing network, reads a candidate template off the
//! pairwise L1 distances between node embeddings, and fits the network so
//! each member's candidate is Frobenius-close to a random subset of the
//! population that is redrawn every epoch.

use ndarray::Array2;
use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::graph::{frobenius_distance, ConnectivityMatrix, GraphError, Population, Template};
use crate::nn::{glorot, Adam, Module, WeightDecay};
use crate::seed;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("template estimation diverged at epoch {epoch}: loss {loss}")]
    NonConvergence { epoch: usize, loss: f64 },
    #[error("invalid template config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub subset_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub embedding_dims: Vec<usize>,
    pub rng_seed: u64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            subset_size: 10,
            learning_rate: 0.0005,
            max_epochs: 100,
            early_stop_patience: 10,
            embedding_dims: vec![32, 16, 8],
            rng_seed: 0,
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<(), TemplateError> {
        let bad = |m: &str| Err(TemplateError::InvalidConfig(m.to_string()));
        if self.subset_size == 0 {
            return bad("subset_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("max_epochs and early_stop_patience must be positive");
        }
        if self.embedding_dims.is_empty() || self.embedding_dims.contains(&0) {
            return bad("embedding_dims must be a nonempty list of positive sizes");
        }
        Ok(())
    }
}

/// One edge-conditioned message-passing layer:
/// `H' = act((X H) W_msg / r + H W_self + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgnLayer {
    pub message: Array2<f64>,
    pub self_loop: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgnModel {
    num_rois: usize,
    layers: Vec<DgnLayer>,
}

impl Module for DgnModel {
    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{k}.message"), &l.message));
            out.push((format!("layer{k}.self"), &l.self_loop));
            out.push((format!("layer{k}.bias"), &l.bias));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.message, &mut l.self_loop, &mut l.bias])
            .collect()
    }
}

impl DgnModel {
    pub fn new(num_rois: usize, embedding_dims: &[usize], rng_seed: u64) -> Self {
        let mut rng = seed::rng(rng_seed);
        let mut layers = Vec::with_capacity(embedding_dims.len());
        let mut fan_in = num_rois;
        for &d in embedding_dims {
            layers.push(DgnLayer {
                message: glorot(fan_in, d, &mut rng),
                self_loop: glorot(fan_in, d, &mut rng),
                bias: Array2::zeros((1, d)),
            });
            fan_in = d;
        }
        Self { num_rois, layers }
    }

    pub fn num_rois(&self) -> usize {
        self.num_rois
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Records the forward pass for one graph; returns the candidate template.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], graph: &ConnectivityMatrix) -> Var {
        let x = tape.leaf(graph.weights().clone());
        let mut h = x;
        let inv_r = 1.0 / self.num_rois as f64;
        let last = self.layers.len() - 1;
        for k in 0..self.layers.len() {
            let (wm, ws, b) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
            let agg = tape.matmul(x, h);
            let msg = tape.matmul(agg, wm);
            let msg = tape.scale(msg, inv_r);
            let own = tape.matmul(h, ws);
            let pre = tape.add(msg, own);
            let pre = tape.add_row(pre, b);
            h = if k == last { pre } else { tape.relu(pre) };
        }
        tape.pairwise_l1(h)
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Candidate template for one member graph.
    pub fn candidate(&self, graph: &ConnectivityMatrix) -> Template {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let c = self.forward_tape(&mut tape, &params, graph);
        finalize_template(tape.value(c).clone())
    }

    /// Rescales the last layer so the mean candidate edge weight equals the
    /// mean population edge weight. Candidates are positively homogeneous in
    /// the last layer's parameters, so this is exact.
    pub fn match_output_scale(&mut self, pop: &Population) {
        let mean_edge = |ms: &[ConnectivityMatrix]| {
            let vals: Vec<f64> = ms.iter().flat_map(|m| m.upper_triangle()).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let candidates: Vec<Template> = pop.members().iter().map(|m| self.candidate(m)).collect();
        let (target, current) = (mean_edge(pop.members()), mean_edge(&candidates));
        if target > 0.0 && current > 0.0 {
            let k = target / current;
            let last = self.layers.last_mut().expect("at least one layer");
            last.message *= k;
            last.self_loop *= k;
            last.bias *= k;
        }
    }

    /// Elementwise median of all members' candidates.
    pub fn population_template(&self, pop: &Population) -> Template {
        let candidates: Vec<Template> = pop.members().iter().map(|m| self.candidate(m)).collect();
        elementwise_median(&candidates)
    }
}

/// Symmetrises, zeroes the diagonal and clamps negatives to zero.
fn finalize_template(raw: Array2<f64>) -> Template {
    let r = raw.nrows();
    let out = Array2::from_shape_fn((r, r), |(i, j)| {
        if i == j {
            0.0
        } else {
            (0.5 * (raw[[i, j]] + raw[[j, i]])).max(0.0)
        }
    });
    ConnectivityMatrix::from_trusted(out)
}

fn elementwise_median(ms: &[ConnectivityMatrix]) -> Template {
    let r = ms[0].num_rois();
    let mut buf = Vec::with_capacity(ms.len());
    let out = Array2::from_shape_fn((r, r), |(i, j)| {
        buf.clear();
        buf.extend(ms.iter().map(|m| m.get(i, j)));
        buf.sort_by(f64::total_cmp);
        let n = buf.len();
        if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        }
    });
    finalize_template(out)
}

/// Elementwise mean of the population.
pub fn linear_average_template(pop: &Population) -> Result<Template, TemplateError> {
    let first = pop.members().first().ok_or(TemplateError::EmptyPopulation)?;
    let mut sum = Array2::<f64>::zeros(first.weights().dim());
    for m in pop.members() {
        sum += m.weights();
    }
    sum /= pop.len() as f64;
    Ok(finalize_template(sum))
}

/// Uniformly random member index, reproducible from `seed`.
pub fn random_one_shot_select(pop: &Population, seed: u64) -> Result<usize, TemplateError> {
    if pop.is_empty() {
        return Err(TemplateError::EmptyPopulation);
    }
    Ok(seed::rng(seed).random_range(0..pop.len()))
}

/// Mean Frobenius distance from `t` to each member.
pub fn centeredness(t: &Template, pop: &Population) -> Result<f64, TemplateError> {
    if pop.is_empty() {
        return Err(TemplateError::EmptyPopulation);
    }
    let mut total = 0.0;
    for m in pop.members() {
        total += frobenius_distance(t, m)?;
    }
    Ok(total / pop.len() as f64)
}

/// Per-epoch record of a template estimation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub centeredness: f64,
}

#[derive(Debug, Clone)]
pub struct CbtEstimate {
    pub template: Template,
    pub model: DgnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn estimate_cbt(pop: &Population, cfg: &TemplateConfig) -> Result<Template, TemplateError> {
    estimate_cbt_detailed(pop, cfg).map(|e| e.template)
}

/// Trains the embedding network and returns the most centred template seen.
pub fn estimate_cbt_detailed(pop: &Population, cfg: &TemplateConfig) -> Result<CbtEstimate, TemplateError> {
    cfg.validate()?;
    if pop.is_empty() {
        return Err(TemplateError::EmptyPopulation);
    }
    let n = pop.len();
    let subset_size = if cfg.subset_size > n {
        log::warn!("subset size {} exceeds population size {n}; clamping", cfg.subset_size);
        n
    } else {
        cfg.subset_size
    };

    let mut model = DgnModel::new(pop.num_rois(), &cfg.embedding_dims, seed::derive(cfg.rng_seed, "dgn/init"));
    model.match_output_scale(pop);
    let mut rng = seed::rng(seed::derive(cfg.rng_seed, "dgn/train"));
    let mut opt = Adam::new(0.9, 0.999, 0.0, WeightDecay::Coupled);

    let mut best_template = model.population_template(pop);
    let mut best_centeredness = centeredness(&best_template, pop)?;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        let subset = sample(&mut rng, n, subset_size).into_vec();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &s in &order {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let c = model.forward_tape(&mut tape, &params, &pop.members()[s]);
            let mut loss: Option<Var> = None;
            for &j in &subset {
                let target = tape.leaf(pop.members()[j].weights().clone());
                let diff = tape.sub(c, target);
                let d = tape.frobenius_norm(diff);
                loss = Some(match loss {
                    Some(l) => tape.add(l, d),
                    None => d,
                });
            }
            let loss = loss.expect("subset is nonempty");
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(TemplateError::NonConvergence { epoch, loss: value });
            }
            epoch_loss += value;
            let grads = tape.backward(loss);
            let g: Vec<Array2<f64>> = params.iter().map(|&p| grads.wrt(p)).collect();
            opt.step(model.parameters_mut(), &g, cfg.learning_rate);
        }
        if !model.all_finite() {
            return Err(TemplateError::NonConvergence { epoch, loss: f64::NAN });
        }
        let mean_loss = epoch_loss / n as f64;
        let candidate = model.population_template(pop);
        let c = centeredness(&candidate, pop)?;
        history.push(EpochRecord {
            epoch,
            mean_loss,
            centeredness: c,
        });
        if c < best_centeredness {
            best_centeredness = c;
            best_template = candidate;
            best_model = model.clone();
            best_epoch = epoch;
        }
        if c < best_loss {
            best_loss = c;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                log::debug!("template estimation stopped early at epoch {epoch}");
                break;
            }
        }
    }

    Ok(CbtEstimate {
        template: best_template,
        model: best_model,
        history,
        best_epoch,
    })
}
