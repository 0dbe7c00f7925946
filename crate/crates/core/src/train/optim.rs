use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, SiameseModel};

/// `lr(t) = initial_lr * decay_factor ^ floor(t / decay_interval)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
}

impl LrSchedule {
    pub fn lr(&self, iteration: usize) -> f64 {
        if self.decay_interval == 0 {
            return self.initial_lr;
        }
        self.initial_lr * self.decay_factor.powi((iteration / self.decay_interval) as i32)
    }
}

/// Partition of a model's parameter groups into frozen and trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl FreezePlan {
    pub fn all_trainable(model: &SiameseModel) -> Self {
        Self {
            frozen: BTreeSet::new(),
            trainable: model.groups(),
        }
    }

    pub fn all_frozen(model: &SiameseModel) -> Self {
        Self {
            frozen: model.groups(),
            trainable: BTreeSet::new(),
        }
    }

    /// Trains `groups`, freezes everything else.
    pub fn only<I, S>(model: &SiameseModel, groups: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = model.groups();
        let trainable: BTreeSet<String> = groups.into_iter().map(Into::into).collect();
        if let Some(g) = trainable.iter().find(|g| !all.contains(*g)) {
            return Err(Error::UnknownGroup(g.clone()));
        }
        Ok(Self {
            frozen: all.difference(&trainable).cloned().collect(),
            trainable,
        })
    }

    /// Checks that the plan partitions exactly the model's groups.
    pub fn validate(&self, model: &SiameseModel) -> Result<()> {
        let all = model.groups();
        if let Some(g) = self.frozen.intersection(&self.trainable).next() {
            return Err(Error::Config(format!("group `{g}` is both frozen and trainable")));
        }
        if let Some(g) = self.frozen.union(&self.trainable).find(|g| !all.contains(*g)) {
            return Err(Error::UnknownGroup(g.clone()));
        }
        if let Some(g) = all
            .iter()
            .find(|g| !self.frozen.contains(*g) && !self.trainable.contains(*g))
        {
            return Err(Error::Config(format!("group `{g}` is neither frozen nor trainable")));
        }
        Ok(())
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable.contains(group)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + lr * (g + decay * w); w -= v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates trainable groups only; frozen groups are not touched at all.
    pub fn step(&mut self, model: &mut SiameseModel, grads: &Grads, plan: &FreezePlan, lr: f64) {
        for (name, p) in model.params.iter_mut() {
            if !plan.is_trainable(&p.group) {
                continue;
            }
            let g = grads.get(name);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.data.len()]);
            if v.len() != p.data.len() {
                *v = vec![0.0; p.data.len()];
            }
            for ((w, vel), &gv) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + lr * (gv + self.weight_decay * *w);
                *w -= *vel;
            }
        }
    }
}
