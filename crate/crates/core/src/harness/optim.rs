//! Adam over a flat parameter vector.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(params: usize, learning_rate: f64, beta1: f64, beta2: f64) -> Result<Adam> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::NonPositive {
                what: "learning rate",
                value: learning_rate,
            });
        }
        for (what, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig {
                    reason: format!("{what} must be in [0, 1), got {b}"),
                });
            }
        }
        Ok(Adam {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        })
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimMismatch {
                what: "optimizer state",
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameter gradient",
                });
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
