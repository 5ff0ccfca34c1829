//! First-order optimizers over named parameter maps.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::nets::Params;

pub type Grads = BTreeMap<String, Vec<f32>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Stateful optimizer. Parameters without a gradient entry are left alone.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { momentum: f64, weight_decay: f64, velocity: BTreeMap<String, Vec<f32>> },
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64, t: u64, m: BTreeMap<String, Vec<f32>>, v: BTreeMap<String, Vec<f32>> },
}

impl Optimizer {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Optimizer::Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn adam(weight_decay: f64) -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(momentum, weight_decay),
            OptimizerKind::Adam => Self::adam(weight_decay),
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Grads, lr: f64) {
        match self {
            Optimizer::Sgd { momentum, weight_decay, velocity } => {
                let (mu, wd, lr) = (*momentum as f32, *weight_decay as f32, lr as f32);
                for (name, g) in grads {
                    let Some(p) = params.get_mut(name) else { continue };
                    let vel = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for ((w, &gi), v) in p.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                        let d = gi + wd * *w;
                        *v = mu * *v + d;
                        *w -= lr * *v;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps, weight_decay, t, m, v } => {
                *t += 1;
                let (b1, b2) = (*beta1, *beta2);
                let c1 = 1.0 - b1.powi(*t as i32);
                let c2 = 1.0 - b2.powi(*t as i32);
                let step = (lr * c2.sqrt() / c1) as f32;
                let (b1, b2, eps, wd) = (b1 as f32, b2 as f32, (*eps * c2.sqrt()) as f32, *weight_decay as f32);
                for (name, g) in grads {
                    let Some(p) = params.get_mut(name) else { continue };
                    let mm = m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let vv = v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(mm.iter_mut()).zip(vv.iter_mut()) {
                        let d = gi + wd * *w;
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        *w -= step * *mi / (vi.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Single cosine decay from `lr` at step 0 to 0 at `total`.
pub fn cosine_decay(lr: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr * (1.0 + (PI * t).cos())
}
