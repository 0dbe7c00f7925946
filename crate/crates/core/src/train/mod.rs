//! Optimisation loop, fine-tuning procedures and staged transfer.
//!
//! Two-stepped fine-tuning swaps the classification head for a fresh one
//! sized to the target identities, trains only that head while the backbone
//! and verification subnet stay frozen, then unfreezes everything. Staged
//! transfer chains two-stepped runs across datasets.

mod augment;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_dataset, AugmentBounds};
pub use optim::{FreezePlan, LrSchedule, Sgd};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::model::{DropoutMasks, LossReport, SiameseModel, BACKBONE_GROUP};
use crate::sampler::{BatchSampler, PairBatch};

/// A ChaCha stream derived from `seed`; distinct `stream`s never overlap.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub step1_iters: usize,
    pub step2_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_k: usize,
    pub batch_m: usize,
    pub augmentations_per_image: usize,
    pub augment_bounds: AugmentBounds,
    pub seed: u64,
    /// Seeds batch sampling separately; falls back to `seed`.
    #[serde(default)]
    pub sampler_seed: Option<u64>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults for the toy pipeline.
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_interval: 1500,
            step1_iters: 200,
            step2_iters: 2000,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_k: 8,
            batch_m: 2,
            augmentations_per_image: 0,
            augment_bounds: AugmentBounds::default(),
            seed: 0,
            sampler_seed: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: lr 0.001 decayed by 0.1 every 40K iterations,
    /// 32 identities x 2 images per batch, 5 augmentations per image.
    pub fn full_scale(step1_iters: usize, step2_iters: usize) -> Self {
        Self {
            initial_lr: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_interval: 40_000,
            step1_iters,
            step2_iters,
            batch_k: 32,
            batch_m: 2,
            augmentations_per_image: 5,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.initial_lr,
            decay_factor: self.lr_decay_factor,
            decay_interval: self.lr_decay_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.initial_lr must be > 0, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("train.momentum must be in [0, 1), weight_decay >= 0".into()));
        }
        self.augment_bounds.validate()
    }
}

/// Which part of a fine-tuning run a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// New classification head only.
    HeadOnly,
    /// All layers.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    TwoStepped,
    /// Replace the head and train everything for `step1 + step2` iterations.
    OneStepped,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub masks: DropoutMasks,
}

/// Everything a training step needs besides the model.
pub struct StepInput<'a> {
    pub dataset: &'a Dataset,
    pub batch: &'a PairBatch,
    /// person id -> class index of the current classification head
    pub classes: &'a BTreeMap<u32, usize>,
}

/// One forward/backward pass and parameter update. Frozen groups are left
/// bit-identical.
pub fn train_step(
    model: &mut SiameseModel,
    input: &StepInput<'_>,
    plan: &FreezePlan,
    lr: f64,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    plan.validate(model)?;
    let batch = input.batch;
    let images: Vec<&Image> = batch
        .images
        .iter()
        .map(|&i| input.dataset.records()[i].pixels.as_ref())
        .collect();
    let classes: Vec<usize> = batch
        .labels
        .iter()
        .map(|p| {
            input
                .classes
                .get(p)
                .copied()
                .ok_or_else(|| Error::Config(format!("identity {p} has no class in the head")))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = batch.labelled_pairs().collect();
    let pair_list: Vec<_> = pairs.iter().map(|&(p, _)| p).collect();
    let masks = model.draw_masks(images.len(), &pair_list, rng)?;
    let backbone_frozen = !plan.is_trainable(BACKBONE_GROUP);
    let (loss, grads) = model.batch_loss(&images, Some(&classes), &pairs, &masks, backbone_frozen)?;
    let iter = model.iteration;
    if !loss.total.is_finite() || !grads.is_finite() {
        let detail = loss
            .heads
            .iter()
            .map(|h| format!("{}={}", h.name, h.value))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::NonFiniteLoss { iter, detail });
    }
    opt.step(model, &grads, plan, lr);
    model.iteration += 1;
    Ok(StepRecord {
        iter,
        lr,
        loss,
        masks,
    })
}

/// Runs `iters` steps from one plan; `t0` offsets the learning-rate
/// schedule.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut SiameseModel,
    ds: &Dataset,
    classes: &BTreeMap<u32, usize>,
    sampler: &mut BatchSampler<ChaCha8Rng>,
    plan: &FreezePlan,
    cfg: &TrainConfig,
    t0: usize,
    iters: usize,
    phase: Phase,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn FnMut(Phase, &SiameseModel, &StepRecord),
) -> Result<()> {
    let schedule = cfg.schedule();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    for t in t0..t0 + iters {
        let batch = sampler.sample()?;
        let input = StepInput {
            dataset: ds,
            batch: &batch,
            classes,
        };
        let record = train_step(model, &input, plan, schedule.lr(t), &mut opt, rng)?;
        observer(phase, model, &record);
    }
    Ok(())
}

/// Replaces the classification head with a `N_t`-way one and fine-tunes.
/// Two-stepped mode trains the new head alone for `step1_iters`, then all
/// layers for `step2_iters`. A zero iteration budget is a no-op.
pub fn finetune(
    model: &mut SiameseModel,
    target: &Dataset,
    cfg: &TrainConfig,
    mode: FinetuneMode,
    observer: &mut dyn FnMut(Phase, &SiameseModel, &StepRecord),
) -> Result<()> {
    cfg.validate()?;
    // an empty budget leaves the model untouched, head included
    if cfg.step1_iters + cfg.step2_iters == 0 {
        return Ok(());
    }
    if !target.is_labelled() {
        return Err(Error::Unlabelled(target.name.clone()));
    }
    if target.num_identities() == 0 {
        return Err(Error::Empty("target identities"));
    }
    let mut aug_rng = seeded_rng(cfg.seed, 3);
    let ds = augment_dataset(target, cfg.augmentations_per_image, &cfg.augment_bounds, &mut aug_rng)?;
    let classes = ds.class_index();
    model.replace_classifier(classes.len(), &mut seeded_rng(cfg.seed, 0))?;
    let k = cfg.batch_k.min(ds.indices_by_identity().values().filter(|v| v.len() >= cfg.batch_m).count());
    let mut sampler = BatchSampler::new(&ds, k, cfg.batch_m, seeded_rng(cfg.sampler_seed.unwrap_or(cfg.seed), 1))?;
    let mut rng = seeded_rng(cfg.seed, 2);

    match mode {
        FinetuneMode::TwoStepped => {
            let head_only = FreezePlan::only(model, model.classifier_groups())?;
            run_phase(model, &ds, &classes, &mut sampler, &head_only, cfg, 0, cfg.step1_iters, Phase::HeadOnly, &mut rng, observer)?;
            let all = FreezePlan::all_trainable(model);
            run_phase(model, &ds, &classes, &mut sampler, &all, cfg, cfg.step1_iters, cfg.step2_iters, Phase::Full, &mut rng, observer)?;
        }
        FinetuneMode::OneStepped => {
            let all = FreezePlan::all_trainable(model);
            let iters = cfg.step1_iters + cfg.step2_iters;
            run_phase(model, &ds, &classes, &mut sampler, &all, cfg, 0, iters, Phase::Full, &mut rng, observer)?;
        }
    }
    Ok(())
}

pub fn two_stepped_finetune(model: &mut SiameseModel, target: &Dataset, cfg: &TrainConfig) -> Result<()> {
    finetune(model, target, cfg, FinetuneMode::TwoStepped, &mut |_, _, _| {})
}

/// One stage: one or more labelled datasets (merged with disjoint
/// identities) and its training configuration.
#[derive(Debug, Clone)]
pub struct Stage {
    pub datasets: Vec<Dataset>,
    pub config: TrainConfig,
}

/// Two-stepped fine-tuning applied stage after stage, each stage starting
/// from the previous stage's parameters.
pub fn staged_transfer(
    model: &mut SiameseModel,
    stages: &[Stage],
    observer: &mut dyn FnMut(usize, Phase, &SiameseModel, &StepRecord),
) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Empty("stage list"));
    }
    for (s, stage) in stages.iter().enumerate() {
        let ds = match stage.datasets.as_slice() {
            [] => return Err(Error::Empty("stage datasets")),
            [single] => single.clone(),
            many => Dataset::merge(format!("stage{s}"), many)?,
        };
        finetune(model, &ds, &stage.config, FinetuneMode::TwoStepped, &mut |p, m, r| {
            observer(s, p, m, r)
        })?;
    }
    Ok(())
}

/// Per-iteration loss log written as `iter,lr,total_loss,<head>...`.
#[derive(Debug, Clone, Default)]
pub struct LossLog {
    heads: Vec<String>,
    rows: Vec<(usize, f64, f64, Vec<f64>)>,
}

impl LossLog {
    pub fn push(&mut self, record: &StepRecord) {
        if self.heads.is_empty() {
            self.heads = record.loss.heads.iter().map(|h| h.name.clone()).collect();
        }
        let values = self
            .heads
            .iter()
            .map(|n| record.loss.head(n).map_or(f64::NAN, |h| h.value))
            .collect();
        self.rows.push((record.iter, record.lr, record.loss.total, values));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.2).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iter".to_string(), "lr".into(), "total_loss".into()];
        header.extend(self.heads.iter().cloned());
        w.write_record(&header)?;
        for (iter, lr, total, values) in &self.rows {
            let mut row = vec![iter.to_string(), lr.to_string(), total.to_string()];
            row.extend(values.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
