use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "adam needs betas in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub moments: Vec<(ParamId, Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            t: 0,
            moments: store
                .trainable_ids()
                .map(|id| {
                    let n = store.get(id).numel();
                    (id, vec![0.0; n], vec![0.0; n])
                })
                .collect(),
        }
    }

    /// Applies one update from the gradients held in `store`. Weight decay is
    /// decoupled: `theta -= lr * wd * theta` alongside the gradient step.
    pub fn step(&mut self, store: &mut ParamStore, opt: &Optimizer, lr: f64, wd: f64) {
        self.t += 1;
        match *opt {
            Optimizer::Sgd => {
                for (id, _, _) in &self.moments {
                    let t = store.get_mut(*id);
                    let grad = t.grad().map(<[f64]>::to_vec);
                    let data = t.data_mut();
                    match grad {
                        Some(g) => data.iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * (g + wd * *w)),
                        None => data.iter_mut().for_each(|w| *w -= lr * (wd * *w)),
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (id, m, v) in &mut self.moments {
                    let t = store.get_mut(*id);
                    let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; m.len()]);
                    let data = t.data_mut();
                    for i in 0..data.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        data[i] -= lr * (update + wd * data[i]);
                    }
                }
            }
        }
    }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for id in ids {
            let t = store.get_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                t.set_grad(Some(scaled));
            }
        }
    }
    norm
}
