//! The two-branch Siamese network: a shared backbone, the loss-specific
//! dropout unit, an identity classification subnet and a pairwise
//! verification subnet, optionally repeated on two intermediate taps.
//!
//! Parameter groups:
//!
//! | group                | contents                               |
//! |----------------------|----------------------------------------|
//! | `backbone`           | feature extractor                      |
//! | `classifier`         | `N`-way softmax on the final features  |
//! | `verifier`           | FC + two-node softmax on the final features |
//! | `aux{k}.classifier`  | classification head on tap `k`         |
//! | `aux{k}.verifier`    | verification head on tap `k`           |

mod backbone;
mod checkpoint;
mod dropout;
mod heads;
mod loss;
mod params;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use backbone::{
    Backbone, BackboneConfig, BackboneTrace, LinearBackbone, ToyCnn, BACKBONE_GROUP,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dropout::{apply_dropout, mask_vec, DropoutMode, DropoutUnit, Masked};
pub use heads::{
    cross_entropy, softmax, verification_logits, ClassificationSubnet, VerificationSubnet,
    VerificationTrace,
};
pub use loss::{
    combined_loss, point_name, HeadKind, HeadLoss, HeadOutputs, LogitGrads, LossConfig,
    LossReport,
};
pub use params::{Grads, Param, ParamStore};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::sampler::Pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub verification_hidden: usize,
    pub keep_prob: f64,
    /// Dropout applied ahead of the verification subnet. Pairwise-consistent
    /// unless an ablation asks for independent masks.
    pub verification_dropout: DropoutMode,
    pub loss: LossConfig,
    /// Standard deviation of new head weights is `scale / sqrt(fan_in)`.
    pub head_init_scale: f64,
    pub pretrained: bool,
}

impl ModelConfig {
    /// Toy configuration: no auxiliary heads, 3:1 verification weighting,
    /// keep probability 0.5.
    pub fn toy(input: (usize, usize, usize), feature_dim: usize, num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::toy(input, feature_dim),
            num_classes,
            verification_hidden: feature_dim,
            keep_prob: 0.5,
            verification_dropout: DropoutMode::VerificationPairwiseConsistent,
            loss: LossConfig::default(),
            head_init_scale: 1.0,
            pretrained: false,
        }
    }
}

/// Dropout masks for one training pass, per attachment point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMasks {
    /// One mask per image.
    pub classification: Vec<Vec<bool>>,
    /// Two masks per pair: `[2p]` for the first member, `[2p + 1]` for the second.
    pub verification: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub points: Vec<PointMasks>,
}

/// A verification pair with its same-identity target.
pub type LabelledPair = (Pair, bool);

#[derive(Debug, Clone)]
pub struct SiameseModel {
    config: ModelConfig,
    backbone: Arc<dyn Backbone>,
    pub params: ParamStore,
    /// Training iterations applied so far.
    pub iteration: usize,
}

impl SiameseModel {
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let backbone: Arc<dyn Backbone> = config.backbone.build()?.into();
        let model = Self::with_backbone(config, backbone, rng)?;
        Ok(model)
    }

    /// Builds a model around an externally supplied backbone.
    pub fn with_backbone(
        config: ModelConfig,
        backbone: Arc<dyn Backbone>,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        config.loss.validate()?;
        DropoutUnit::new(config.keep_prob, DropoutMode::ClassificationRandom)?;
        if backbone.tap_dims().len() < config.loss.num_aux_heads {
            return Err(Error::Config(format!(
                "backbone `{}` exposes {} taps, {} auxiliary heads requested",
                backbone.id(),
                backbone.tap_dims().len(),
                config.loss.num_aux_heads
            )));
        }
        if config.num_classes == 0 || config.verification_hidden == 0 {
            return Err(Error::Config("head widths must be >= 1".into()));
        }
        let mut model = Self {
            config,
            backbone,
            params: ParamStore::new(),
            iteration: 0,
        };
        model.backbone.init(&mut model.params, rng);
        let scale = model.config.head_init_scale;
        for v in model.verification_heads() {
            v.init(&mut model.params, scale, rng);
        }
        for c in model.classification_heads() {
            c.init(&mut model.params, scale, rng);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.config.loss
    }

    pub fn set_loss_config(&mut self, loss: LossConfig) -> Result<()> {
        loss.validate()?;
        if loss.num_aux_heads != self.config.loss.num_aux_heads {
            return Err(Error::Config("auxiliary head count is fixed at construction".into()));
        }
        self.config.loss = loss;
        Ok(())
    }

    pub fn set_pretrained(&mut self, pretrained: bool) {
        self.config.pretrained = pretrained;
    }

    fn point_dims(&self) -> Vec<usize> {
        let taps = self.backbone.tap_dims();
        std::iter::once(self.backbone.output_dim())
            .chain(taps.into_iter().take(self.config.loss.num_aux_heads))
            .collect()
    }

    fn group_prefix(point: usize) -> String {
        if point == 0 {
            String::new()
        } else {
            format!("aux{point}.")
        }
    }

    pub fn classification_heads(&self) -> Vec<ClassificationSubnet> {
        self.point_dims()
            .into_iter()
            .enumerate()
            .map(|(p, d)| ClassificationSubnet {
                group: format!("{}classifier", Self::group_prefix(p)),
                input_dim: d,
                num_classes: self.config.num_classes,
            })
            .collect()
    }

    pub fn verification_heads(&self) -> Vec<VerificationSubnet> {
        self.point_dims()
            .into_iter()
            .enumerate()
            .map(|(p, d)| VerificationSubnet {
                group: format!("{}verifier", Self::group_prefix(p)),
                input_dim: d,
                hidden: self.config.verification_hidden,
            })
            .collect()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.groups()
    }

    pub fn classifier_groups(&self) -> BTreeSet<String> {
        self.classification_heads().into_iter().map(|c| c.group).collect()
    }

    /// Replaces every classification head with a freshly initialised
    /// `num_classes`-way head (zero bias, small random weights).
    pub fn replace_classifier(&mut self, num_classes: usize, rng: &mut dyn RngCore) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("new classification head needs >= 1 class".into()));
        }
        for c in self.classification_heads() {
            self.params.remove_group(&c.group);
        }
        self.config.num_classes = num_classes;
        for c in self.classification_heads() {
            c.init(&mut self.params, self.config.head_init_scale, rng);
        }
        Ok(())
    }

    /// Dropout-free backbone output for each image.
    pub fn forward_features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| Ok(self.backbone.forward(&self.params, img)?.output))
            .collect()
    }

    /// Classification probabilities at the main attachment point, no dropout.
    pub fn class_probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        let y = self.backbone.forward(&self.params, image)?.output;
        self.classification_heads()[0].probabilities(&self.params, &y)
    }

    pub fn classification_unit(&self) -> DropoutUnit {
        DropoutUnit {
            keep_prob: self.config.keep_prob,
            mode: DropoutMode::ClassificationRandom,
        }
    }

    pub fn verification_unit(&self) -> DropoutUnit {
        DropoutUnit {
            keep_prob: self.config.keep_prob,
            mode: self.config.verification_dropout,
        }
    }

    pub fn draw_masks<R: Rng + ?Sized>(&self, num_images: usize, pairs: &[Pair], rng: &mut R) -> Result<DropoutMasks> {
        let cls = self.classification_unit();
        let ver = self.verification_unit();
        let loss = &self.config.loss;
        let points = self
            .point_dims()
            .into_iter()
            .map(|d| {
                let classification = if loss.classification_enabled() {
                    cls.draw(d, num_images, None, rng)?
                } else {
                    Vec::new()
                };
                let verification = if loss.verification_enabled() {
                    ver.draw(d, 0, Some(pairs), rng)?
                } else {
                    Vec::new()
                };
                Ok(PointMasks {
                    classification,
                    verification,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DropoutMasks { points })
    }

    /// Masks that keep everything.
    pub fn identity_masks(&self, num_images: usize, num_pairs: usize) -> DropoutMasks {
        DropoutMasks {
            points: self
                .point_dims()
                .into_iter()
                .map(|d| PointMasks {
                    classification: vec![vec![true; d]; num_images],
                    verification: vec![vec![true; d]; 2 * num_pairs],
                })
                .collect(),
        }
    }

    /// Combined loss of a batch and its gradient with respect to every
    /// parameter. The backbone backward pass is skipped when `backbone_frozen`
    /// is set; its gradient buffers then stay zero.
    pub fn batch_loss(
        &self,
        images: &[&Image],
        classes: Option<&[usize]>,
        pairs: &[LabelledPair],
        masks: &DropoutMasks,
        backbone_frozen: bool,
    ) -> Result<(LossReport, Grads)> {
        let loss_cfg = self.config.loss;
        let traces: Vec<BackboneTrace> = images
            .iter()
            .map(|img| self.backbone.forward(&self.params, img))
            .collect::<Result<_>>()?;
        let feature = |point: usize, i: usize| -> &[f64] {
            if point == 0 {
                &traces[i].output
            } else {
                &traces[i].taps[point - 1]
            }
        };
        if let Some(c) = classes {
            if c.len() != images.len() {
                return Err(Error::DimensionMismatch {
                    expected: images.len(),
                    found: c.len(),
                });
            }
            if let Some(&bad) = c.iter().find(|&&c| c >= self.config.num_classes) {
                return Err(Error::Config(format!(
                    "class index {bad} outside a {}-way head",
                    self.config.num_classes
                )));
            }
        }
        if pairs.iter().any(|&((i, j), _)| i >= images.len() || j >= images.len()) {
            return Err(Error::Sampling("pair index outside batch".into()));
        }

        let cls_heads = self.classification_heads();
        let ver_heads = self.verification_heads();
        let mut outputs = Vec::with_capacity(cls_heads.len());
        let mut ver_traces: Vec<Vec<VerificationTrace>> = Vec::with_capacity(cls_heads.len());
        for (point, (cls, ver)) in cls_heads.iter().zip(&ver_heads).enumerate() {
            let pm = &masks.points[point];
            let mut out = HeadOutputs::default();
            if loss_cfg.classification_enabled() && classes.is_some() {
                let logits = (0..images.len())
                    .map(|i| cls.logits(&self.params, &mask_vec(&pm.classification[i], feature(point, i))))
                    .collect::<Result<Vec<_>>>()?;
                out.class_logits = Some(logits);
            }
            let mut vt = Vec::new();
            if loss_cfg.verification_enabled() && !pairs.is_empty() {
                for (p, &((i, j), _)) in pairs.iter().enumerate() {
                    let a = mask_vec(&pm.verification[2 * p], feature(point, i));
                    let b = mask_vec(&pm.verification[2 * p + 1], feature(point, j));
                    vt.push(ver.forward(&self.params, &a, &b)?);
                }
                out.pair_logits = Some(vt.iter().map(|t| t.logits.clone()).collect());
            }
            ver_traces.push(vt);
            outputs.push(out);
        }
        let targets: Vec<bool> = pairs.iter().map(|&(_, same)| same).collect();
        let (report, logit_grads) = combined_loss(
            &loss_cfg,
            &outputs,
            classes,
            (!pairs.is_empty()).then_some(targets.as_slice()),
        )?;

        let mut grads = Grads::zeros_like(&self.params);
        let dims = self.point_dims();
        let mut g_feat: Vec<Vec<Vec<f64>>> = dims
            .iter()
            .map(|&d| vec![vec![0.0; d]; images.len()])
            .collect();
        for (point, lg) in logit_grads.iter().enumerate() {
            let pm = &masks.points[point];
            for (i, g) in lg.class_logits.iter().enumerate() {
                let x = mask_vec(&pm.classification[i], feature(point, i));
                let gx = cls_heads[point].backward(&self.params, &x, g, &mut grads);
                for ((acc, gv), &keep) in g_feat[point][i].iter_mut().zip(gx).zip(&pm.classification[i]) {
                    if keep {
                        *acc += gv;
                    }
                }
            }
            for (p, g) in lg.pair_logits.iter().enumerate() {
                let ((i, j), _) = pairs[p];
                let g_diff = ver_heads[point].backward(&self.params, &ver_traces[point][p], g, &mut grads);
                let (mi, mj) = (&pm.verification[2 * p], &pm.verification[2 * p + 1]);
                for (k, gd) in g_diff.iter().enumerate() {
                    if mi[k] {
                        g_feat[point][i][k] += gd;
                    }
                    if mj[k] {
                        g_feat[point][j][k] -= gd;
                    }
                }
            }
        }
        if !backbone_frozen {
            for (i, trace) in traces.iter().enumerate() {
                let taps: Vec<Vec<f64>> = (1..dims.len()).map(|p| g_feat[p][i].clone()).collect();
                self.backbone
                    .backward(&self.params, trace, &g_feat[0][i], &taps, &mut grads);
            }
        }
        Ok((report, grads))
    }
}
