use serde::{Deserialize, Serialize};

use super::heads::{cross_entropy, softmax};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub verification_weight: f64,
    pub classification_weight: f64,
    /// 0, or 2 for heads on two intermediate backbone taps.
    pub num_aux_heads: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            verification_weight: 3.0,
            classification_weight: 1.0,
            num_aux_heads: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.verification_weight, self.classification_weight];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 and not both zero, got {w:?}"
            )));
        }
        if !matches!(self.num_aux_heads, 0 | 2) {
            return Err(Error::Config(format!(
                "num_aux_heads must be 0 or 2, got {}",
                self.num_aux_heads
            )));
        }
        Ok(())
    }

    pub fn classification_enabled(&self) -> bool {
        self.classification_weight > 0.0
    }

    pub fn verification_enabled(&self) -> bool {
        self.verification_weight > 0.0
    }

    /// Number of attachment points carrying heads.
    pub fn attachment_points(&self) -> usize {
        1 + self.num_aux_heads
    }

    /// Enabled losses across all attachment points.
    pub fn num_losses(&self) -> usize {
        self.attachment_points()
            * (self.classification_enabled() as usize + self.verification_enabled() as usize)
    }
}

pub fn point_name(point: usize) -> String {
    if point == 0 {
        "main".to_string()
    } else {
        format!("aux{point}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Classification,
    Verification,
}

/// Raw logits of the heads at one attachment point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadOutputs {
    /// One logit vector per image.
    pub class_logits: Option<Vec<Vec<f64>>>,
    /// One two-node logit vector per pair.
    pub pair_logits: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadLoss {
    pub name: String,
    pub kind: HeadKind,
    /// Mean cross-entropy, before weighting.
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub heads: Vec<HeadLoss>,
}

impl LossReport {
    pub fn head(&self, name: &str) -> Option<&HeadLoss> {
        self.heads.iter().find(|h| h.name == name)
    }
}

/// Weighted gradients of the total loss with respect to each head's logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitGrads {
    pub class_logits: Vec<Vec<f64>>,
    pub pair_logits: Vec<Vec<f64>>,
}

fn mean_ce(logits: &[Vec<f64>], targets: impl Iterator<Item = usize> + Clone, weight: f64) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len().max(1) as f64;
    let value = logits
        .iter()
        .zip(targets.clone())
        .map(|(l, t)| cross_entropy(l, t))
        .sum::<f64>()
        / n;
    let grads = logits
        .iter()
        .zip(targets)
        .map(|(l, t)| {
            let mut g = softmax(l);
            g[t] -= 1.0;
            g.iter_mut().for_each(|v| *v *= weight / n);
            g
        })
        .collect();
    (value, grads)
}

/// Sum over attachment points of `w_v * BCE + w_c * CE`. Classification uses
/// the mean over images; verification the mean over pairs, with target node 1
/// meaning "same identity".
pub fn combined_loss(
    cfg: &LossConfig,
    outputs: &[HeadOutputs],
    classes: Option<&[usize]>,
    pair_targets: Option<&[bool]>,
) -> Result<(LossReport, Vec<LogitGrads>)> {
    cfg.validate()?;
    if outputs.len() != cfg.attachment_points() {
        return Err(Error::DimensionMismatch {
            expected: cfg.attachment_points(),
            found: outputs.len(),
        });
    }
    let mut heads = Vec::new();
    let mut all_grads = Vec::with_capacity(outputs.len());
    let mut total = 0.0;
    for (point, out) in outputs.iter().enumerate() {
        let prefix = point_name(point);
        let mut grads = LogitGrads::default();
        if cfg.verification_enabled() {
            let name = format!("{prefix}.verification");
            let logits = out.pair_logits.as_ref().ok_or(Error::MissingHeadInput {
                head: name.clone(),
                missing: "pair logits",
            })?;
            let targets = pair_targets.ok_or(Error::MissingHeadInput {
                head: name.clone(),
                missing: "pairs",
            })?;
            if targets.len() != logits.len() {
                return Err(Error::DimensionMismatch {
                    expected: logits.len(),
                    found: targets.len(),
                });
            }
            let (value, g) = mean_ce(
                logits,
                targets.iter().map(|&same| same as usize),
                cfg.verification_weight,
            );
            total += cfg.verification_weight * value;
            grads.pair_logits = g;
            heads.push(HeadLoss {
                name,
                kind: HeadKind::Verification,
                value,
                weight: cfg.verification_weight,
            });
        }
        if cfg.classification_enabled() {
            let name = format!("{prefix}.classification");
            let logits = out.class_logits.as_ref().ok_or(Error::MissingHeadInput {
                head: name.clone(),
                missing: "class logits",
            })?;
            let labels = classes.ok_or(Error::MissingHeadInput {
                head: name.clone(),
                missing: "labels",
            })?;
            if labels.len() != logits.len() {
                return Err(Error::DimensionMismatch {
                    expected: logits.len(),
                    found: labels.len(),
                });
            }
            let (value, g) = mean_ce(logits, labels.iter().copied(), cfg.classification_weight);
            total += cfg.classification_weight * value;
            grads.class_logits = g;
            heads.push(HeadLoss {
                name,
                kind: HeadKind::Classification,
                value,
                weight: cfg.classification_weight,
            });
        }
        all_grads.push(grads);
    }
    Ok((LossReport { total, heads }, all_grads))
}
