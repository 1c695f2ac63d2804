use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, OptimizerKind};
use crate::nn::ParamStore;

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Moments {
    pub fn zeros(store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.iter().map(|(_, _, t)| t.numel()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Applies one update from the gradients held in `store`; `t` is the
/// 1-based step count used for bias correction.
pub fn apply_update(store: &mut ParamStore, moments: &mut Moments, cfg: &OptimizerConfig, t: u64) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (id, tensor) in store.iter_mut() {
        let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
            continue;
        };
        let i = id.index();
        let data = tensor.data_mut();
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (w, g) in data.iter_mut().zip(&grad) {
                    *w -= cfg.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
                for k in 0..data.len() {
                    let g = grad[k];
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    data[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
}
