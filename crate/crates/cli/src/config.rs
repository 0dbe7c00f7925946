//! Experiment configuration: one TOML file with dotted keys, overridable
//! from the command line. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reid_core::adapt::AdaptConfig;
use reid_core::data::{Protocol, SyntheticSpec};
use reid_core::model::{BackboneConfig, DropoutMode, LossConfig, ModelConfig};
use reid_core::train::{AugmentBounds, TrainConfig};
use serde::{Deserialize, Serialize};

/// Offsets added to the global seed for each consumer of randomness.
pub mod seed_offset {
    pub const DATA: u64 = 0;
    pub const MODEL: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const ADAPT: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub batch: BatchSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub eval: EvalSection,
    pub adapt: AdaptSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            batch: BatchSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            augment: AugmentSection::default(),
            eval: EvalSection::default(),
            adapt: AdaptSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Datasets written by `synth`, each into `output_dir/<name>`.
    pub synthetic: Vec<SyntheticSection>,
    /// Training stages; each stage lists the manifests merged for it.
    pub train: Vec<Vec<PathBuf>>,
    /// Unlabelled target for `adapt`.
    pub target: Option<PathBuf>,
    /// Labelled test set for `eval`.
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub name: String,
    pub identities: usize,
    pub images_per_camera: usize,
    pub cameras: usize,
    pub noise: f64,
    pub image: [usize; 3],
    pub seed: Option<u64>,
    pub camera_seed: Option<u64>,
    pub first_identity: u32,
    pub unlabelled: bool,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            identities: 20,
            images_per_camera: 2,
            cameras: 2,
            noise: 0.05,
            image: [16, 8, 3],
            seed: None,
            camera_seed: None,
            first_identity: 0,
            unlabelled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSection {
    pub k: usize,
    pub m: usize,
    pub seed: Option<u64>,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self { k: 8, m: 2, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Toy,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub channels: [usize; 2],
    pub keep_prob: f64,
    /// Defaults to the feature dimension.
    pub verification_hidden: Option<usize>,
    pub verification_dropout: DropoutMode,
    pub verification_weight: f64,
    pub classification_weight: f64,
    pub aux_heads: usize,
    pub head_init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Toy,
            feature_dim: 32,
            channels: [6, 8],
            keep_prob: 0.5,
            verification_hidden: None,
            verification_dropout: DropoutMode::VerificationPairwiseConsistent,
            verification_weight: 3.0,
            classification_weight: 1.0,
            aux_heads: 0,
            head_init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub step1_iters: usize,
    pub step2_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: Option<u64>,
    /// Checkpoint to continue from instead of a fresh model.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            initial_lr: d.initial_lr,
            lr_decay_factor: d.lr_decay_factor,
            lr_decay_interval: d.lr_decay_interval,
            step1_iters: d.step1_iters,
            step2_iters: d.step2_iters,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            seed: None,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub count: usize,
    pub bounds: BoundsSection,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            count: 0,
            bounds: BoundsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_rotation_deg: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        let b = AugmentBounds::default();
        Self {
            max_translation: b.max_translation,
            min_scale: b.min_scale,
            max_scale: b.max_scale,
            max_rotation_deg: b.max_rotation_deg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Backbone features.
    Backbone,
    /// Dictionary codes learned over the backbone features of the test set.
    Subspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Protocol,
    /// Defaults to `output_dir/model.json`.
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub representation: Representation,
    pub export_features: bool,
    pub plot: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::SingleShot,
            checkpoint: None,
            seed: None,
            representation: Representation::Backbone,
            export_features: false,
            plot: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    CoTraining,
    SelfTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub method: AdaptMethod,
    pub rounds: usize,
    pub lambda: f64,
    /// When non-empty, `lambda` is chosen from these on a held-out half.
    pub lambda_candidates: Vec<f64>,
    pub k_atoms: Option<usize>,
    pub knn_k: usize,
    pub anchor_camera: Option<u32>,
    pub solver_iters: usize,
    pub seed: Option<u64>,
    /// Defaults to `output_dir/model.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            method: AdaptMethod::CoTraining,
            rounds: d.rounds,
            lambda: d.lambda,
            lambda_candidates: Vec::new(),
            k_atoms: d.k_atoms,
            knn_k: d.knn_k,
            anchor_camera: d.anchor_camera,
            solver_iters: d.solver_iters,
            seed: None,
            checkpoint: None,
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Sets `key` (dotted path) in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a section"),
        };
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("config: {}", e.message()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text, overrides).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn derived_seed(&self, explicit: Option<u64>, offset: u64) -> u64 {
        explicit.unwrap_or(self.seed.wrapping_add(offset))
    }

    pub fn synthetic_spec(&self, index: usize) -> SyntheticSpec {
        let s = &self.data.synthetic[index];
        let seed = self.derived_seed(s.seed, seed_offset::DATA + 100 * index as u64);
        let mut spec = SyntheticSpec::new(s.identities, s.images_per_camera, s.cameras, seed)
            .with_noise(s.noise)
            .with_image_size(s.image[0], s.image[1], s.image[2])
            .with_first_identity(s.first_identity);
        if let Some(c) = s.camera_seed {
            spec = spec.with_camera_seed(c);
        }
        spec
    }

    pub fn model_config(&self, input: (usize, usize, usize), num_classes: usize) -> ModelConfig {
        let m = &self.model;
        let backbone = match m.backbone {
            BackboneKind::Toy => BackboneConfig::Toy {
                input,
                channels: (m.channels[0], m.channels[1]),
                feature_dim: m.feature_dim,
            },
            BackboneKind::Linear => BackboneConfig::Linear {
                input,
                feature_dim: m.feature_dim,
            },
        };
        ModelConfig {
            backbone,
            num_classes,
            verification_hidden: m.verification_hidden.unwrap_or(m.feature_dim),
            keep_prob: m.keep_prob,
            verification_dropout: m.verification_dropout,
            loss: LossConfig {
                verification_weight: m.verification_weight,
                classification_weight: m.classification_weight,
                num_aux_heads: m.aux_heads,
            },
            head_init_scale: m.head_init_scale,
            pretrained: false,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let b = &self.augment.bounds;
        TrainConfig {
            initial_lr: t.initial_lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_interval: t.lr_decay_interval,
            step1_iters: t.step1_iters,
            step2_iters: t.step2_iters,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_k: self.batch.k,
            batch_m: self.batch.m,
            augmentations_per_image: self.augment.count,
            augment_bounds: AugmentBounds {
                max_translation: b.max_translation,
                min_scale: b.min_scale,
                max_scale: b.max_scale,
                max_rotation_deg: b.max_rotation_deg,
            },
            seed: self.derived_seed(t.seed, seed_offset::TRAIN),
            sampler_seed: Some(self.derived_seed(self.batch.seed, seed_offset::BATCH)),
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig {
            rounds: a.rounds,
            lambda: a.lambda,
            k_atoms: a.k_atoms,
            knn_k: a.knn_k,
            anchor_camera: a.anchor_camera,
            solver_iters: a.solver_iters,
            seed: self.derived_seed(a.seed, seed_offset::ADAPT),
            train: self.train_config(),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.derived_seed(self.eval.seed, seed_offset::EVAL)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.json")
    }
}
