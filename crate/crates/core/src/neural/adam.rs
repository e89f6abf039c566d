use serde::{Deserialize, Serialize};

use super::{zeros_like, LayerSet, NeuralError, QNetwork};

/// Adam first/second moment estimates mirroring a network's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: LayerSet,
    pub second_moment: LayerSet,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &QNetwork) -> Self {
        Self {
            first_moment: zeros_like(net.layers()),
            second_moment: zeros_like(net.layers()),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn matches(&self, net: &QNetwork) -> bool {
        let same = |set: &LayerSet| {
            set.len() == net.layers().len() && set.iter().zip(net.layers()).all(|(a, b)| a.same_shape(b))
        };
        same(&self.first_moment) && same(&self.second_moment)
    }

    /// One bias-corrected Adam update at timestep `t + 1`.
    pub fn step(&mut self, net: &mut QNetwork, grads: &LayerSet, lr: f64) -> Result<(), NeuralError> {
        if !self.matches(net)
            || grads.len() != net.layers().len()
            || grads.iter().zip(net.layers()).any(|(g, l)| !g.same_shape(l))
        {
            return Err(NeuralError::Shape("gradient/moment shapes do not match the network".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((layer, g), m), v) in
            net.layers_mut().iter_mut().zip(grads).zip(self.first_moment.iter_mut()).zip(self.second_moment.iter_mut())
        {
            for (((p, g), m), v) in layer.values_mut().zip(g.values()).zip(m.values_mut()).zip(v.values_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear decay from `base` to `final_lr` over `total_steps`, constant after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 0.001, final_lr: 0.0, total_steps: 1_000_000 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        if step >= self.total_steps {
            return self.final_lr;
        }
        let f = step as f64 / self.total_steps as f64;
        self.base * (1.0 - f) + self.final_lr * f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Layer;

    fn scalar(theta: f64) -> QNetwork {
        QNetwork::from_layers(vec![Layer { rows: 1, cols: 1, weights: vec![theta], bias: vec![0.0] }]).unwrap()
    }

    fn unit_grad() -> LayerSet {
        vec![Layer { rows: 1, cols: 1, weights: vec![1.0], bias: vec![0.0] }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar(0.3);
        let mut adam = AdamState::new(&net);
        let zero = vec![Layer::zeros(1, 1)];
        adam.step(&mut net, &zero, 0.001).unwrap();
        assert_eq!(net.layers()[0].weights[0], 0.3);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → θ' = -0.001 / (1 + 1e-8)
        let mut net = scalar(0.0);
        let mut adam = AdamState::new(&net);
        adam.step(&mut net, &unit_grad(), 0.001).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((net.layers()[0].weights[0] - expected).abs() < 1e-18);
        assert!((net.layers()[0].weights[0] + 0.000999999990).abs() < 1e-15);
    }

    #[test]
    fn two_identical_steps() {
        let mut net = scalar(0.0);
        let mut adam = AdamState::new(&net);
        adam.step(&mut net, &unit_grad(), 0.001).unwrap();
        adam.step(&mut net, &unit_grad(), 0.001).unwrap();
        assert!((net.layers()[0].weights[0] + 0.002).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut net = scalar(0.0);
        let mut adam = AdamState::new(&net);
        let bad = vec![Layer::zeros(2, 1)];
        assert!(adam.step(&mut net, &bad, 0.001).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule { base: 0.001, final_lr: 0.0, total_steps: 1000 };
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(1000), 0.0);
        assert_eq!(s.lr_at(5000), 0.0);
        assert!((s.lr_at(500) - 0.0005).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for step in 0..=1100 {
            let lr = s.lr_at(step);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
