//! SGD with momentum and weight decay, plus the learning-rate schedules.

use crate::model::Param;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// SGD with classical momentum; weight decay is added to the gradient.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<u32, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    /// Applies one update to every parameter with a gradient entry.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &HashMap<u32, ArrayD<f64>>, lr: f64) {
        for p in params {
            let Some(g) = grads.get(&p.id) else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g += &(&p.value * self.weight_decay);
            }
            let buf = self
                .buffers
                .entry(p.id)
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            *buf *= self.momentum;
            *buf += &g;
            p.value -= &(&*buf * lr);
        }
    }

    /// Momentum buffers keyed by parameter name (for checkpoints).
    pub fn export_state(&self, params: &[&Param]) -> HashMap<String, Vec<f64>> {
        params
            .iter()
            .filter_map(|p| {
                self.buffers
                    .get(&p.id)
                    .map(|b| (p.name.clone(), b.iter().copied().collect()))
            })
            .collect()
    }

    pub fn import_state(&mut self, params: &[&Param], state: &HashMap<String, Vec<f64>>) {
        self.buffers.clear();
        for p in params {
            if let Some(data) = state.get(&p.name) {
                if let Ok(arr) = ArrayD::from_shape_vec(p.value.raw_dim(), data.clone()) {
                    self.buffers.insert(p.id, arr);
                }
            }
        }
    }
}

/// Pretraining schedule: linear warmup then cosine decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub warmup_from: f64,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl WarmupCosine {
    /// Appendix-style defaults: 0.01 → 0.5 over 10 epochs, cosine after.
    pub fn standard(total_epochs: usize) -> Self {
        WarmupCosine {
            warmup_from: 0.01,
            base_lr: 0.5,
            warmup_epochs: 10,
            total_epochs,
        }
    }

    /// Learning rate at the start of `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let w = self.warmup_epochs;
        if epoch < w {
            let t = epoch as f64 / w as f64;
            return self.warmup_from + (self.base_lr - self.warmup_from) * t;
        }
        let span = (self.total_epochs.saturating_sub(w)).max(1) as f64;
        let t = (epoch - w) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Finetuning schedule: fixed rate with ×`factor` drops at given epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDrops {
    pub base_lr: f64,
    pub drop_epochs: Vec<usize>,
    pub factor: f64,
}

impl StepDrops {
    pub fn standard() -> Self {
        StepDrops {
            base_lr: 0.1,
            drop_epochs: vec![15, 20],
            factor: 0.1,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}
