//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::backward::Gradients;
use crate::config::TrainConfig;
use crate::freeze::{FreezeMask, GroupMask};
use crate::model::{ParamGroup, TransformerModel};

/// Linear warmup over `ceil(warmup_ratio · total)` steps, then cosine decay
/// to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = libm::ceil(warmup_ratio * total_steps as f64) as usize;
        Self {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    /// Learning rate for the zero-based optimizer `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// First and second moment buffers of one tensor.
type Moments = (Vec<f32>, Vec<f32>);

/// AdamW moments for the trainable groups of one model.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    /// First and second moments per group, one buffer per tensor.
    state: BTreeMap<ParamGroup, Vec<Moments>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr`. Only scalars the mask
    /// leaves trainable are read or written; weight decay applies to
    /// matrices only.
    pub fn step(&mut self, model: &mut TransformerModel, grads: &Gradients, mask: &FreezeMask, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = libm::sqrt(bc2) as f32;
        let eps = self.eps as f32;
        let decay = (lr * self.weight_decay) as f32;
        for (group, gm) in mask.iter() {
            let bits = match gm {
                GroupMask::Frozen => continue,
                GroupMask::Trainable => None,
                GroupMask::Partial(b) => Some(b.as_slice()),
            };
            let (Some(g), Some(p)) = (grads.group(group), model.group_mut(group)) else {
                continue;
            };
            let gts = g.tensors();
            let params = p.tensors_mut();
            let state = self.state.entry(group).or_insert_with(|| {
                gts.iter().map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()])).collect()
            });
            let mut offset = 0;
            for ((param, (_, grad)), (m, v)) in params.into_iter().zip(&gts).zip(state.iter_mut()) {
                let is_matrix = param.shape().len() >= 2;
                let pd = param.data_mut();
                for (i, ((w, &gr), (mi, vi))) in pd.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())).enumerate() {
                    if let Some(b) = bits {
                        if !b[offset + i] {
                            continue;
                        }
                    }
                    *mi = b1 * *mi + (1.0 - b1) * gr;
                    *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                    if is_matrix {
                        *w -= decay * *w;
                    }
                    *w -= step_size * *mi / (libm::sqrtf(*vi) / bc2_sqrt + eps);
                }
                offset += pd.len();
            }
        }
    }
}
