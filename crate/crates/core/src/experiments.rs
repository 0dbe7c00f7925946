//! Desk-scale synthetic benchmarks comparing training variants. Every
//! function is deterministic in its seed.
//!
//! All benchmarks share one synthetic domain: 16x8 colour images with pixel
//! noise 0.3, a toy convolutional backbone with 32-d features and
//! single-shot evaluation on 60 held-out identities.

use serde::{Deserialize, Serialize};

use crate::adapt::{co_train, evaluate_subspace, self_train, AdaptConfig};
use crate::data::{generate_synthetic, Dataset, Protocol, SyntheticSpec};
use crate::error::Result;
use crate::eval::evaluate;
use crate::model::{ModelConfig, SiameseModel};
use crate::train::{finetune, seeded_rng, two_stepped_finetune, FinetuneMode, TrainConfig};

pub const NOISE: f64 = 0.3;
pub const FEATURE_DIM: usize = 32;
pub const IMAGE: (usize, usize, usize) = (16, 8, 3);

fn spec(ids: usize, per_camera: usize, seed: u64, cameras: u64, first: u32) -> SyntheticSpec {
    SyntheticSpec::new(ids, per_camera, 2, seed)
        .with_noise(NOISE)
        .with_image_size(IMAGE.0, IMAGE.1, IMAGE.2)
        .with_camera_seed(cameras)
        .with_first_identity(first)
}

/// Labelled source domain: 30 identities, 2 images per camera.
pub fn source_domain(seed: u64) -> Result<Dataset> {
    generate_synthetic(&spec(30, 2, seed * 10 + 1, seed * 10 + 2, 0))
}

/// 60 held-out identities seen once per camera under `cameras`.
pub fn test_set(seed: u64, cameras: u64) -> Result<Dataset> {
    generate_synthetic(&spec(60, 1, seed * 10 + 5, cameras, 2000))
}

fn target_cameras(seed: u64) -> u64 {
    seed * 10 + 4
}

fn toy_model(num_classes: usize, seed: u64) -> Result<SiameseModel> {
    SiameseModel::new(ModelConfig::toy(IMAGE, FEATURE_DIM, num_classes), &mut seeded_rng(seed, 9))
}

fn rank1(model: &SiameseModel, test: &Dataset) -> Result<f64> {
    Ok(evaluate(model, test, Protocol::SingleShot, 0)?.rank1())
}

/// Model trained on the source domain with the default loss.
pub fn source_model(seed: u64) -> Result<SiameseModel> {
    let source = source_domain(seed)?;
    let mut model = toy_model(source.num_identities(), seed)?;
    let cfg = TrainConfig {
        step1_iters: 100,
        step2_iters: 1000,
        seed,
        ..TrainConfig::default()
    };
    two_stepped_finetune(&mut model, &source, &cfg)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableResult {
    pub rank1: f64,
    pub iterations: usize,
}

/// 20 identities with light noise, 4 images per camera: half trains, the
/// other half is the test set.
pub fn separable(seed: u64, iterations: usize) -> Result<SeparableResult> {
    let all = generate_synthetic(&SyntheticSpec::new(20, 4, 2, seed).with_noise(0.05))?;
    let held_out = |id: &str| id.ends_with("_02") || id.ends_with("_03");
    let train = all.filter(|r| !held_out(&r.image_id))?;
    let test = all.filter(|r| held_out(&r.image_id))?;
    let mut model = SiameseModel::new(
        ModelConfig::toy(all.image_shape(), FEATURE_DIM, train.num_identities()),
        &mut seeded_rng(seed, 9),
    )?;
    let cfg = TrainConfig {
        step1_iters: 0,
        step2_iters: iterations,
        seed,
        ..TrainConfig::default()
    };
    finetune(&mut model, &train, &cfg, FinetuneMode::TwoStepped, &mut |_, _, _| {})?;
    Ok(SeparableResult {
        rank1: rank1(&model, &test)?,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCombination {
    pub identification_only: f64,
    pub verification_only: f64,
    pub combined: f64,
}

/// Rank-1 after 1000 iterations with each loss alone and with both at the
/// default 3:1 verification to identification weighting.
pub fn loss_combination(seed: u64) -> Result<LossCombination> {
    let source = source_domain(seed)?;
    let test = test_set(seed, seed * 10 + 2)?;
    let run = |classification: f64, verification: f64| -> Result<f64> {
        let mut cfg = ModelConfig::toy(IMAGE, FEATURE_DIM, source.num_identities());
        cfg.loss.classification_weight = classification;
        cfg.loss.verification_weight = verification;
        let mut model = SiameseModel::new(cfg, &mut seeded_rng(seed, 9))?;
        let train = TrainConfig {
            step1_iters: 0,
            step2_iters: 1000,
            seed,
            ..TrainConfig::default()
        };
        finetune(&mut model, &source, &train, FinetuneMode::TwoStepped, &mut |_, _, _| {})?;
        rank1(&model, &test)
    };
    Ok(LossCombination {
        identification_only: run(1.0, 0.0)?,
        verification_only: run(0.0, 1.0)?,
        combined: run(1.0, 3.0)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneComparison {
    pub source_only: f64,
    pub two_stepped: f64,
    pub one_stepped: f64,
}

/// Source model fine-tuned on a small labelled target (10 identities) under
/// a shared 300-iteration budget.
pub fn finetune_modes(seed: u64) -> Result<FinetuneComparison> {
    let model = source_model(seed)?;
    let target = generate_synthetic(&spec(10, 2, seed * 10 + 3, target_cameras(seed), 1000))?;
    let test = test_set(seed, target_cameras(seed))?;
    let cfg = TrainConfig {
        step1_iters: 100,
        step2_iters: 200,
        seed: seed + 100,
        ..TrainConfig::default()
    };
    let run = |mode| -> Result<f64> {
        let mut m = model.clone();
        finetune(&mut m, &target, &cfg, mode, &mut |_, _, _| {})?;
        rank1(&m, &test)
    };
    Ok(FinetuneComparison {
        two_stepped: run(FinetuneMode::TwoStepped)?,
        one_stepped: run(FinetuneMode::OneStepped)?,
        source_only: rank1(&model, &test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedComparison {
    pub source_only: f64,
    pub self_training: f64,
    pub subspace: f64,
    /// Co-trained backbone with the dictionary model on top.
    pub co_training: f64,
    /// Co-trained backbone features alone.
    pub co_training_backbone: f64,
    pub label_agreement: Vec<f64>,
}

/// Settings for adapting to the unlabelled target benchmark.
pub fn adapt_config(seed: u64) -> AdaptConfig {
    AdaptConfig {
        rounds: 3,
        lambda: 0.3,
        knn_k: 1,
        seed,
        train: TrainConfig {
            step1_iters: 50,
            step2_iters: 600,
            initial_lr: 0.003,
            seed,
            ..TrainConfig::default()
        },
        ..AdaptConfig::default()
    }
}

/// Unlabelled target with 60 identities and 3 images per camera.
pub fn unlabelled_target(seed: u64) -> Result<Dataset> {
    Ok(generate_synthetic(&spec(60, 3, seed * 10 + 3, target_cameras(seed), 1000))?.unlabelled())
}

/// Source model adapted to an unlabelled target by self-training alone, by
/// the dictionary model alone and by co-training.
pub fn unsupervised(seed: u64) -> Result<UnsupervisedComparison> {
    let model = source_model(seed)?;
    let target = unlabelled_target(seed)?;
    let test = test_set(seed, target_cameras(seed))?;
    let cfg = adapt_config(seed);
    let mut st = model.clone();
    self_train(&mut st, &target, &cfg)?;
    let mut ct = model.clone();
    let report = co_train(&mut ct, &target, &cfg)?;
    Ok(UnsupervisedComparison {
        source_only: rank1(&model, &test)?,
        self_training: rank1(&st, &test)?,
        subspace: evaluate_subspace(&model, &test, Protocol::SingleShot, 0, &cfg)?.rank1(),
        co_training: evaluate_subspace(&ct, &test, Protocol::SingleShot, 0, &cfg)?.rank1(),
        co_training_backbone: rank1(&ct, &test)?,
        label_agreement: report.agreements(),
    })
}
