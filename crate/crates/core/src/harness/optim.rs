//! First-order optimizers over a flat parameter vector.

use super::config::{OptimizerKind, TrainingConfig};

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    pub fn from_config(cfg: &TrainingConfig, n_params: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.learning_rate },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.learning_rate,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }

    /// Parameter change for one step on gradient `g`.
    pub fn delta(&mut self, g: &[f64]) -> Vec<f64> {
        match self {
            Optimizer::Sgd { lr } => g.iter().map(|x| -*lr * x).collect(),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t = t.saturating_add(1);
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                g.iter()
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .map(|(gi, (mi, vi))| {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * gi;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * gi * gi;
                        -*lr * (*mi / c1) / ((*vi / c2).sqrt() + *eps)
                    })
                    .collect()
            }
        }
    }

    pub fn step(&mut self, params: &mut [f64], g: &[f64]) {
        let d = self.delta(g);
        params.iter_mut().zip(d).for_each(|(p, d)| *p += d);
    }
}
