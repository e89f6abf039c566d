//! Dense feed-forward Q-network: ReLU hidden layers, linear output, Huber loss
//! with exact backpropagation, Adam, and a linear learning-rate schedule.
//!
//! Everything is `f64` and plain `Vec` storage; the networks involved are
//! small enough that the simulator dominates run time.

mod adam;
mod checkpoint;

pub use adam::{AdamState, LrSchedule};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input has length {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch arrays disagree: {0}")]
    BatchShape(String),
    #[error("action index {index} out of range for {actions} outputs")]
    BadAction { index: usize, actions: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer sizes. Hidden layers use ReLU, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { input_dim: 1, hidden_dims: vec![512, 512, 128, 64], output_dim: 3 }
    }
}

impl MlpSpec {
    /// The reduced profile used for desk-scale runs.
    pub fn desk() -> Self {
        Self { input_dim: 1, hidden_dims: vec![64, 64], output_dim: 3 }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NeuralError::InvalidSpec(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `[input, hidden..., output]`
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    pub fn parameter_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Affine map `out = W·in + b` with `W` stored row-major as `rows × cols`
/// (`rows` = output width). Also reused for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(r, b)| {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Parameter-shaped collection of layers (gradients, moments).
pub type LayerSet = Vec<Layer>;

fn zeros_like(layers: &[Layer]) -> LayerSet {
    layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl QNetwork {
    /// He-normal weights (variance `2 / fan_in`) and zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.dims();
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut layer = Layer::zeros(fan_out, fan_in);
                for x in &mut layer.weights {
                    *x = normal.sample(&mut rng);
                }
                layer
            })
            .collect();
        Ok(Self { spec: spec.clone(), layers })
    }

    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::InvalidSpec("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(NeuralError::InvalidSpec(format!(
                    "layer {i} storage does not match {}x{}",
                    l.rows, l.cols
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[1].cols != w[0].rows {
                return Err(NeuralError::InvalidSpec(format!(
                    "layer {} takes {} inputs but layer {i} emits {}",
                    i + 1,
                    w[1].cols,
                    w[0].rows
                )));
            }
        }
        let spec = MlpSpec {
            input_dim: layers[0].cols,
            hidden_dims: layers[..layers.len() - 1].iter().map(|l| l.rows).collect(),
            output_dim: layers[layers.len() - 1].rows,
        };
        spec.validate()?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|x| x.is_finite()))
    }

    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if state.len() != self.spec.input_dim {
            return Err(NeuralError::DimensionMismatch { expected: self.spec.input_dim, got: state.len() });
        }
        let mut cur = state.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Mean Huber loss (threshold 1) of `Q(s)[a]` against `targets`, and its
    /// gradient with respect to every parameter. `states` is row-major
    /// `batch × input_dim`.
    pub fn loss_and_gradients(
        &self,
        states: &[f64],
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, LayerSet), NeuralError> {
        let batch = actions.len();
        let d_in = self.spec.input_dim;
        if batch == 0 || targets.len() != batch || states.len() != batch * d_in {
            return Err(NeuralError::BatchShape(format!(
                "{} states values, {} actions, {} targets (input_dim {d_in})",
                states.len(),
                batch,
                targets.len()
            )));
        }
        if !states.iter().chain(targets).all(|x| x.is_finite()) {
            return Err(NeuralError::NonFinite("batch inputs"));
        }
        if let Some(&index) = actions.iter().find(|&&a| a >= self.spec.output_dim) {
            return Err(NeuralError::BadAction { index, actions: self.spec.output_dim });
        }

        let mut grads = zeros_like(&self.layers);
        let n_layers = self.layers.len();
        let mut loss = 0.0;
        // activations[0] is the input, activations[i + 1] the output of layer i
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
        let mut delta = Vec::new();
        let mut prev_delta = Vec::new();
        for b in 0..batch {
            activations[0].clear();
            activations[0].extend_from_slice(&states[b * d_in..(b + 1) * d_in]);
            for (i, layer) in self.layers.iter().enumerate() {
                let (head, tail) = activations.split_at_mut(i + 1);
                layer.apply(&head[i], &mut tail[0]);
                if i + 1 < n_layers {
                    tail[0].iter_mut().for_each(|x| *x = x.max(0.0));
                }
            }
            let q = activations[n_layers][actions[b]];
            let residual = q - targets[b];
            loss += if residual.abs() <= 1.0 { 0.5 * residual * residual } else { residual.abs() - 0.5 };
            let dq = residual.clamp(-1.0, 1.0) / batch as f64;

            delta.clear();
            delta.resize(self.spec.output_dim, 0.0);
            delta[actions[b]] = dq;
            for i in (0..n_layers).rev() {
                let layer = &self.layers[i];
                let input = &activations[i];
                let g = &mut grads[i];
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[r] += d;
                    let row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (w, x) in row.iter_mut().zip(input) {
                        *w += d * x;
                    }
                }
                if i == 0 {
                    break;
                }
                prev_delta.clear();
                prev_delta.resize(layer.cols, 0.0);
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (p, w) in prev_delta.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // ReLU derivative (taken as 0 at the kink)
                for (p, a) in prev_delta.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut prev_delta);
            }
        }
        Ok((loss / batch as f64, grads))
    }

    pub fn copy_from(&mut self, other: &QNetwork) {
        self.layers.clone_from(&other.layers);
        self.spec.clone_from(&other.spec);
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(w1: f64, b1: f64, w2: f64, b2: f64) -> QNetwork {
        QNetwork::from_layers(vec![
            Layer { rows: 1, cols: 1, weights: vec![w1], bias: vec![b1] },
            Layer { rows: 1, cols: 1, weights: vec![w2], bias: vec![b2] },
        ])
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = MlpSpec { input_dim: 1, hidden_dims: vec![4], output_dim: 3 };
        let a = QNetwork::init(&spec, 42).unwrap();
        let b = QNetwork::init(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, QNetwork::init(&spec, 43).unwrap());
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn init_variance_matches_he_scaling() {
        let spec = MlpSpec { input_dim: 512, hidden_dims: vec![512], output_dim: 3 };
        let net = QNetwork::init(&spec, 7).unwrap();
        let w = &net.layers()[0].weights;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / 512.0;
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var} vs {expected}");
    }

    #[test]
    fn forward_cases() {
        let zero = QNetwork::from_layers(vec![Layer::zeros(4, 1), Layer::zeros(3, 4)]).unwrap();
        assert_eq!(zero.forward(&[0.7]).unwrap(), vec![0.0, 0.0, 0.0]);
        let net = tiny(2.0, -1.0, 3.0, 0.0);
        assert_eq!(net.forward(&[1.0]).unwrap(), vec![3.0]);
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.0]);
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(NeuralError::DimensionMismatch { .. })));
    }

    #[test]
    fn layers_must_chain() {
        assert!(QNetwork::from_layers(vec![Layer::zeros(4, 1), Layer::zeros(3, 5)]).is_err());
        assert!(QNetwork::from_layers(vec![]).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_loss_and_gradients() {
        let net = QNetwork::init(&MlpSpec { input_dim: 1, hidden_dims: vec![5], output_dim: 3 }, 3).unwrap();
        let states = [0.2, 0.9];
        let actions = [1, 2];
        let targets: Vec<f64> = states.iter().zip(actions).map(|(s, a)| net.forward(&[*s]).unwrap()[a]).collect();
        let (loss, grads) = net.loss_and_gradients(&states, &actions, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|l| l.values().all(|&g| g == 0.0)));
    }

    #[test]
    fn huber_quadratic_zone() {
        let net = tiny(2.0, -1.0, 3.0, 0.0);
        let (loss, _) = net.loss_and_gradients(&[1.0], &[0], &[3.4]).unwrap();
        assert!((loss - 0.5 * 0.4 * 0.4).abs() < 1e-15);
        let (loss, _) = net.loss_and_gradients(&[1.0], &[0], &[6.0]).unwrap();
        assert!((loss - 2.5).abs() < 1e-15);
    }

    #[test]
    fn batch_validation() {
        let net = tiny(1.0, 0.0, 1.0, 0.0);
        assert!(matches!(net.loss_and_gradients(&[1.0], &[0, 0], &[1.0]), Err(NeuralError::BatchShape(_))));
        assert!(matches!(net.loss_and_gradients(&[1.0], &[1], &[1.0]), Err(NeuralError::BadAction { .. })));
        assert!(matches!(net.loss_and_gradients(&[f64::NAN], &[0], &[1.0]), Err(NeuralError::NonFinite(_))));
    }

    /// Central finite differences of the mean Huber loss, perturbing one
    /// parameter at a time through the public forward pass only.
    fn finite_difference(net: &QNetwork, states: &[f64], actions: &[usize], targets: &[f64], h: f64) -> LayerSet {
        let loss = |n: &QNetwork| -> f64 {
            let d = n.spec().input_dim;
            actions
                .iter()
                .enumerate()
                .map(|(b, &a)| {
                    let r = n.forward(&states[b * d..(b + 1) * d]).unwrap()[a] - targets[b];
                    if r.abs() <= 1.0 {
                        0.5 * r * r
                    } else {
                        r.abs() - 0.5
                    }
                })
                .sum::<f64>()
                / actions.len() as f64
        };
        let mut out = zeros_like(net.layers());
        for (li, grad) in out.iter_mut().enumerate() {
            let count = grad.weights.len() + grad.bias.len();
            for k in 0..count {
                let mut plus = net.clone();
                let mut minus = net.clone();
                *plus.layers_mut()[li].values_mut().nth(k).unwrap() += h;
                *minus.layers_mut()[li].values_mut().nth(k).unwrap() -= h;
                *grad.values_mut().nth(k).unwrap() = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MlpSpec { input_dim: 1, hidden_dims: vec![5], output_dim: 3 };
        for trial in 0..10 {
            let net = QNetwork::init(&spec, trial).unwrap();
            let states: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let actions: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
            let targets: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, analytic) = net.loss_and_gradients(&states, &actions, &targets).unwrap();
            let numeric = finite_difference(&net, &states, &actions, &targets, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                for (x, y) in a.values().zip(n.values()) {
                    let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
                    assert!(rel < 1e-4 || (x - y).abs() < 1e-9, "analytic {x} numeric {y}");
                }
            }
        }
    }
}
