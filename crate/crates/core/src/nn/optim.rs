use serde::{Deserialize, Serialize};

use super::Parameters;

/// Moment estimates and step counter of an [`Adam`] optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam without weight decay, operating on the flat parameter layout of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] },
        }
    }

    pub fn step<P: Parameters>(&mut self, model: &mut P, grad: &P) {
        let g = grad.flatten();
        let mut p = model.flatten();
        assert_eq!(g.len(), self.state.m.len(), "optimizer/model size mismatch");
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.len() {
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g[i];
            *v = self.beta2 * *v + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        model.load_flat(&p);
    }
}
