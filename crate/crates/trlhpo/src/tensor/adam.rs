//! Adam with bias correction, keyed by parameter name so one optimizer
//! instance can own the moments for a whole network.

use std::collections::BTreeMap;

use super::Tensor;

/// First/second moment buffers for a single parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before updating that step's parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to `param` in place. `begin_step` must have
    /// been called for the current step.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "adam update shape mismatch");
        assert!(self.t > 0, "begin_step before update");
        let n = param.numel();
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| AdamState { m: vec![0.0; n], v: vec![0.0; n] });
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let p = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn export_state(&self) -> (u64, &BTreeMap<String, AdamState>) {
        (self.t, &self.state)
    }

    pub fn import_state(&mut self, t: u64, state: BTreeMap<String, AdamState>) {
        self.t = t;
        self.state = state;
    }
}
