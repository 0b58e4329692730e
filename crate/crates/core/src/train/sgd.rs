//! Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = config;
        if !(learning_rate >= 0.0 && momentum >= 0.0 && weight_decay >= 0.0) {
            return Err(PnlError::config(format!("SGD hyperparameters must be nonnegative: {config:?}")));
        }
        Ok(SgdState {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v ← μv + (g + λp)`, then `p ← p − ηv`, tensor by tensor.
    /// Velocity buffers are created as zeros on the first call.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(PnlError::shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(PnlError::shape("parameter list changed between steps"));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(PnlError::shape(format!(
                    "tensor {i}: parameter {} / gradient {} / velocity {}",
                    p.len(),
                    g.len(),
                    v.len()
                )));
            }
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + (gi + wd * *pi);
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lr: f64, mu: f64, wd: f64) -> SgdState {
        SgdState::new(SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = state(0.1, 0.9, 0.0);
        let mut p = vec![1.0, -2.0];
        s.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut s = state(0.5, 0.0, 0.0);
        let mut p = vec![1.0];
        s.step(&mut [&mut p], &[vec![4.0]]).unwrap();
        assert_eq!(p, [1.0 - 0.5 * 4.0]);
    }

    #[test]
    fn two_steps_on_quadratic() {
        // f(p) = p², g = 2p
        let (lr, mu, wd) = (0.01, 0.9, 1e-4);
        let mut s = state(lr, mu, wd);
        let mut p = vec![3.0];
        let (mut hp, mut hv) = (3.0f64, 0.0f64);
        for _ in 0..2 {
            let g = vec![2.0 * p[0]];
            s.step(&mut [&mut p], &[g]).unwrap();
            hv = mu * hv + (2.0 * hp + wd * hp);
            hp -= lr * hv;
        }
        assert_eq!(p[0], hp);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SgdState::new(SgdConfig { learning_rate: -1.0, ..Default::default() }).is_err());
        let mut s = state(0.1, 0.0, 0.0);
        let mut p = vec![1.0, 2.0];
        assert!(matches!(s.step(&mut [&mut p], &[vec![1.0]]), Err(PnlError::Shape(_))));
    }
}
