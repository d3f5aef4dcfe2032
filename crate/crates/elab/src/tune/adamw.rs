//! AdamW over the soft rows of a prompt state.

use crate::lm::EmbeddingSequence;

use super::TuneConfig;

/// Adam with decoupled weight decay. Moments are kept per soft row, in the
/// order the rows appear in the prompt; one `step` call is one optimizer
/// step (the bias-correction counter advances once per call).
pub(crate) struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: &TuneConfig, param_count: usize) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            weight_decay: config.weight_decay,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// Applies one step to the given rows of `params`. `grad` is indexed by
    /// full-prefix position plus `grad_offset` (for a fixed leading row).
    pub fn step(
        &mut self,
        params: &mut EmbeddingSequence,
        grad: &EmbeddingSequence,
        rows: &[usize],
        grad_offset: usize,
    ) {
        let d = params.dim();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, &row) in rows.iter().enumerate() {
            let g = grad.row(row + grad_offset);
            let p = params.row_mut(row);
            let m = &mut self.m[slot * d..(slot + 1) * d];
            let v = &mut self.v[slot * d..(slot + 1) * d];
            for j in 0..d {
                // Decoupled decay acts on the parameter directly, not
                // through the gradient.
                p[j] *= 1.0 - self.lr * self.weight_decay;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
