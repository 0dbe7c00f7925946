//! Loss-specific dropout.
//!
//! Classification features get an independent Bernoulli mask per image.
//! Verification features get one mask per compared pair, applied to both
//! members, so the difference taken by the verification subnet is never an
//! artefact of two different masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Independent mask per feature vector.
    ClassificationRandom,
    /// One shared mask per pair.
    VerificationPairwiseConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutUnit {
    /// Probability that a mask element is 1.
    pub keep_prob: f64,
    pub mode: DropoutMode,
}

/// Masked feature vectors. For pairings, entries `2p` and `2p + 1` are the
/// first and second member of pair `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub masks: Vec<Vec<bool>>,
    pub values: Vec<Vec<f64>>,
}

impl DropoutUnit {
    pub fn new(keep_prob: f64, mode: DropoutMode) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability {keep_prob} outside (0, 1]"
            )));
        }
        Ok(Self { keep_prob, mode })
    }

    pub fn draw_mask<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<bool> {
        if self.keep_prob >= 1.0 {
            return vec![true; dim];
        }
        (0..dim).map(|_| rng.random_bool(self.keep_prob)).collect()
    }

    /// Masks for `n` images or, with a pairing, two masks per pair.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        dim: usize,
        n: usize,
        pairing: Option<&[Pair]>,
        rng: &mut R,
    ) -> Result<Vec<Vec<bool>>> {
        match (self.mode, pairing) {
            (DropoutMode::VerificationPairwiseConsistent, None) => Err(Error::MissingPairing),
            (DropoutMode::VerificationPairwiseConsistent, Some(pairs)) => {
                let mut masks = Vec::with_capacity(2 * pairs.len());
                for _ in pairs {
                    let m = self.draw_mask(dim, rng);
                    masks.push(m.clone());
                    masks.push(m);
                }
                Ok(masks)
            }
            (DropoutMode::ClassificationRandom, Some(pairs)) => {
                Ok((0..2 * pairs.len()).map(|_| self.draw_mask(dim, rng)).collect())
            }
            (DropoutMode::ClassificationRandom, None) => {
                Ok((0..n).map(|_| self.draw_mask(dim, rng)).collect())
            }
        }
    }
}

pub fn mask_vec(mask: &[bool], y: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect()
}

/// `ỹ = r * y`, elementwise.
pub fn apply_dropout<R: Rng + ?Sized>(
    unit: &DropoutUnit,
    features: &[Vec<f64>],
    pairing: Option<&[Pair]>,
    rng: &mut R,
) -> Result<Masked> {
    let dim = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let masks = unit.draw(dim, features.len(), pairing, rng)?;
    let values = match pairing {
        Some(pairs) => pairs
            .iter()
            .enumerate()
            .flat_map(|(p, &(i, j))| {
                [
                    mask_vec(&masks[2 * p], &features[i]),
                    mask_vec(&masks[2 * p + 1], &features[j]),
                ]
            })
            .collect(),
        None => features
            .iter()
            .zip(&masks)
            .map(|(f, m)| mask_vec(m, f))
            .collect(),
    };
    Ok(Masked { masks, values })
}
