//! Adam with standard bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer over a fixed parameter list. Parameters whose gradient is
/// absent for a step (they were not part of that step's graph) are left
/// untouched, moments included.
pub struct Adam<E: Elem> {
    cfg: AdamConfig,
    t: u64,
    params: Vec<Tensor<E>>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(params: Vec<Tensor<E>>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| vec![E::ZERO; p.len()]).collect();
        let v = params.iter().map(|p| vec![E::ZERO; p.len()]).collect();
        Adam {
            cfg,
            t: 0,
            params,
            m,
            v,
        }
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    /// Moment state, exposed for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<E>], &[Vec<E>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Vec<E>>, v: Vec<Vec<E>>) {
        assert_eq!(m.len(), self.params.len(), "moment count mismatch");
        assert_eq!(v.len(), self.params.len(), "moment count mismatch");
        for (i, p) in self.params.iter().enumerate() {
            assert_eq!(m[i].len(), p.len(), "first-moment length mismatch at {i}");
            assert_eq!(v[i].len(), p.len(), "second-moment length mismatch at {i}");
        }
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self) {
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        // Bias corrections in f64 to keep powers accurate late in training.
        let c1 = E::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let c2 = E::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let lr = E::from_f64(self.cfg.lr);
        let eps = E::from_f64(self.cfg.eps);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_values(|vals| {
                for j in 0..vals.len() {
                    m[j] = b1 * m[j] + one_m_b1 * g[j];
                    v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                    let m_hat = m[j] * c1;
                    let v_hat = v[j] * c2;
                    vals[j] = vals[j] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
