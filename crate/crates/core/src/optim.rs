//! Adam and a reduce-on-plateau learning-rate schedule.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Adam {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::contract(
                "adam",
                format!(
                    "{} moments, {} parameters, {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_same_shape("adam", g)?;
            p.expect_same_shape("adam", m)?;
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps, lr) = (T::one(), T::of(c.eps), T::of(lr));
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + (one - b1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + (one - b2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has gone
/// `patience` consecutive epochs without a strict improvement on the best
/// value seen; the counter restarts after every decay and every improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub lr: f64,
    pub best: Option<f64>,
    pub flat_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            lr,
            best: None,
            flat_epochs: 0,
        }
    }

    /// Records one epoch's loss and returns whether the rate was decayed.
    pub fn observe(&mut self, loss: f64) -> bool {
        let improved = match self.best {
            None => loss.is_finite(),
            Some(b) => loss < b,
        };
        if improved {
            self.best = Some(loss);
            self.flat_epochs = 0;
            return false;
        }
        self.flat_epochs += 1;
        if self.flat_epochs >= self.patience {
            self.lr *= self.factor;
            self.flat_epochs = 0;
            return true;
        }
        false
    }
}
