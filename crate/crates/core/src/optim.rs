//! Adam with decoupled weight decay.
//!
//! For each parameter `p` with gradient `g`, at step `t`:
//!
//! ```text
//! p <- p - lr * wd * p
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every buffer in `params` from the matching `grads`
    /// buffer. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter buffers but {} gradient buffers",
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "buffer {k}: parameter length {} vs gradient length {}",
                    p.len(),
                    g.len()
                )));
            }
            let bad = g.iter().filter(|x| !x.is_finite()).count();
            if bad > 0 {
                let first = g.iter().position(|x| !x.is_finite()).unwrap_or(0);
                return Err(Error::NonFinite {
                    what: "gradient",
                    detail: format!(
                        "buffer {k} has {bad} non-finite entries (first at {first}: {})",
                        g[first]
                    ),
                });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(&grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::shape("optimizer state does not match parameter layout"));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = lr * weight_decay;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                if decay != 0.0 {
                    p[i] -= decay * p[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
