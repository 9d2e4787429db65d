//! SGD with momentum, weight decay, and poly learning-rate decay.

use indexmap::IndexMap;

use super::{OptimizerConfig, Result, TrainError};
use crate::model::{Group, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: IndexMap<String, Vec<f64>>,
    pub step: usize,
    pub max_steps: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore, max_steps: usize) -> Self {
        let velocity = store
            .iter()
            .map(|(k, p)| (k.to_string(), vec![0.0; p.value.len()]))
            .collect();
        Self {
            config,
            velocity,
            step: 0,
            max_steps,
        }
    }

    /// `base_lr · (1 − step/max_steps)^power`, zero from `max_steps` on.
    pub fn lr(&self, step: usize) -> f64 {
        if self.max_steps == 0 || step >= self.max_steps {
            return 0.0;
        }
        let t = 1.0 - step as f64 / self.max_steps as f64;
        self.config.base_lr * t.powf(self.config.poly_power)
    }

    pub fn group_lr(&self, step: usize, group: Group) -> f64 {
        match group {
            Group::Encoder => self.lr(step),
            Group::Decoder => self.lr(step) * self.config.decoder_lr_multiplier,
        }
    }

    /// `v ← m·v + g + wd·p`, `p ← p − lr_group·v` for every parameter.
    pub fn sgd_step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<()> {
        for (name, p) in store.iter() {
            match grads.get(name) {
                None => return Err(TrainError::MissingGradient(name.to_string())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(TrainError::MissingGradient(format!(
                        "{name}: gradient shape {:?} differs from {:?}",
                        g.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let step = self.step;
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        let lrs = (
            self.group_lr(step, Group::Encoder),
            self.group_lr(step, Group::Decoder),
        );
        for (name, p) in store.iter_mut() {
            let lr = match p.group {
                Group::Encoder => lrs.0,
                Group::Decoder => lrs.1,
            };
            let decay = if p.decay { wd } else { 0.0 };
            let v = self.velocity.get_mut(name).expect("velocity per parameter");
            let g = grads[name].data();
            for ((x, vi), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = m * *vi + gi + decay * *x;
                *x -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}
