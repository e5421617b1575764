use std::collections::BTreeMap;

use crate::autodiff::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    ///
    /// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`, with the
    /// decay term computed from the pre-update value.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                    expected: format!("gradient of {name} with shape {:?}", p.shape()),
                    actual: g.shape().to_vec(),
                }));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = gi.as_f64();
                let m_new = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * g * g;
                *mi = T::from_f64_lossy(m_new);
                *vi = T::from_f64_lossy(v_new);
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let p_old = pi.as_f64();
                let p_new = p_old
                    - self.lr * self.weight_decay * p_old
                    - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *pi = T::from_f64_lossy(p_new);
            }
        }
        Ok(())
    }
}
