//! Adaptive moment optimizer with decoupled weight decay.

use crate::numerics::tensor::Tensor;
use crate::params::ParamSet;

/// AdamW. Defaults follow the training setup used throughout the crate:
/// betas (0.9, 0.95), eps 1e-8, no weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(&t.shape().to_vec())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(&t.shape().to_vec())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is indexed by parameter ordinal; `None`
    /// entries (frozen or disconnected parameters) are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (ord, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = params.id_of_ordinal(ord);
            let m = self.m[ord].data_mut();
            let v = self.v[ord].data_mut();
            let p = params.tensor_mut(id).data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 5)^2
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::scalar(0.0));
        let mut opt = AdamW::new(0.1, &params);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = bound.get(x);
            let shifted = tape.add_scalar(xv, -5.0).unwrap();
            let sq = tape.mul(shifted, shifted).unwrap();
            let root = tape.sum_all(sq).unwrap();
            tape.backward(root).unwrap();
            let grads = bound.grads(&tape);
            opt.step(&mut params, &grads);
        }
        assert!((params.tensor(x).item() - 5.0).abs() < 1e-3);
    }
}
