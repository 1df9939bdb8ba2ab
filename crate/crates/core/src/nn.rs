//! Shared model plumbing: named parameters, initialisation and Adam.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Implemented by every trainable model so optimisers and checkpoints can
/// walk its parameters in a fixed order.
pub trait Module {
    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)>;
    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn parameters(&self) -> Vec<&Array2<f64>> {
        self.named_parameters().into_iter().map(|(_, p)| p).collect()
    }

    fn all_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Overwrites parameters from `(name, array)` pairs listed in
    /// [`Module::named_parameters`] order.
    fn load_parameters(&mut self, arrays: &[(String, Array2<f64>)]) -> Result<(), String> {
        let expected: Vec<(String, (usize, usize))> = self
            .named_parameters()
            .into_iter()
            .map(|(n, p)| (n, p.dim()))
            .collect();
        if expected.len() != arrays.len() {
            return Err(format!("expected {} parameter arrays, found {}", expected.len(), arrays.len()));
        }
        for ((name, dim), (got_name, arr)) in expected.iter().zip(arrays) {
            if name != got_name || *dim != arr.dim() {
                return Err(format!("parameter `{got_name}` {:?} does not match `{name}` {dim:?}", arr.dim()));
            }
        }
        for (slot, (_, arr)) in self.parameters_mut().into_iter().zip(arrays) {
            slot.assign(arr);
        }
        Ok(())
    }
}

/// Glorot-uniform matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// Added to the gradient (classic Adam + L2).
    Coupled,
    /// Applied directly to the weights (AdamW).
    Decoupled,
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    mode: WeightDecay,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64, mode: WeightDecay) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            mode,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if self.mode == WeightDecay::Decoupled && self.weight_decay > 0.0 {
                p.mapv_inplace(|w| w * (1.0 - lr * self.weight_decay));
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for ((w, &g), (mi, vi)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = match self.mode {
                    WeightDecay::Coupled => g + self.weight_decay * *w,
                    WeightDecay::Decoupled => g,
                };
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
