//! Adaptive moment estimation without weight decay.

use crate::error::{MatError, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update with bias-corrected moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(MatError::shape("adam", &[grads.len()], &[store.len()]));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::lit(1.0 - BETA1.powi(self.t as i32));
        let c2 = T::lit(1.0 - BETA2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(EPSILON));
        for ((id, g), (m, v)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(MatError::shape("adam", g.shape(), p.shape()));
            }
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
