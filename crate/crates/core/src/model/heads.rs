//! Identity classification and pairwise verification subnets.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::backbone::{add_into, affine, affine_t, outer_acc};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn init_weights(rows: usize, cols: usize, scale: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let dist = Normal::new(0.0, scale / (cols as f64).sqrt()).expect("positive scale");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

/// A single `N`-way softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSubnet {
    pub group: String,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ClassificationSubnet {
    pub fn weight(&self) -> String {
        format!("{}.weight", self.group)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.group)
    }

    /// Zero bias, Gaussian weights with standard deviation
    /// `scale / sqrt(input_dim)`.
    pub fn init(&self, store: &mut ParamStore, scale: f64, rng: &mut dyn RngCore) {
        store.insert(
            self.weight(),
            &self.group,
            &[self.num_classes, self.input_dim],
            init_weights(self.num_classes, self.input_dim, scale, rng),
        );
        store.insert(self.bias(), &self.group, &[self.num_classes], vec![0.0; self.num_classes]);
    }

    pub fn logits(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(affine(params.get(&self.weight()), params.get(&self.bias()), x))
    }

    pub fn probabilities(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(params, x)?))
    }

    /// Backpropagates `g_logits`; returns the gradient with respect to `x`.
    pub fn backward(&self, params: &ParamStore, x: &[f64], g_logits: &[f64], grads: &mut Grads) -> Vec<f64> {
        outer_acc(grads.get_mut(&self.weight()), g_logits, x);
        add_into(grads.get_mut(&self.bias()), g_logits);
        affine_t(params.get(&self.weight()), g_logits, self.input_dim)
    }
}

/// `logits = head(FC(ReLU(a - b)))` with a two-node output.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationSubnet {
    pub group: String,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Intermediates of one verification forward pass.
#[derive(Debug, Clone)]
pub struct VerificationTrace {
    pub diff: Vec<f64>,
    pub relu: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl VerificationSubnet {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.group)
    }

    pub fn init(&self, store: &mut ParamStore, scale: f64, rng: &mut dyn RngCore) {
        store.insert(
            self.name("fc.weight"),
            &self.group,
            &[self.hidden, self.input_dim],
            init_weights(self.hidden, self.input_dim, scale, rng),
        );
        store.insert(self.name("fc.bias"), &self.group, &[self.hidden], vec![0.0; self.hidden]);
        store.insert(
            self.name("out.weight"),
            &self.group,
            &[2, self.hidden],
            init_weights(2, self.hidden, scale, rng),
        );
        store.insert(self.name("out.bias"), &self.group, &[2], vec![0.0; 2]);
    }

    pub fn forward(&self, params: &ParamStore, a: &[f64], b: &[f64]) -> Result<VerificationTrace> {
        for v in [a, b] {
            if v.len() != self.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim,
                    found: v.len(),
                });
            }
        }
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let relu: Vec<f64> = diff.iter().map(|v| v.max(0.0)).collect();
        let hidden = affine(
            params.get(&self.name("fc.weight")),
            params.get(&self.name("fc.bias")),
            &relu,
        );
        let logits = affine(
            params.get(&self.name("out.weight")),
            params.get(&self.name("out.bias")),
            &hidden,
        );
        Ok(VerificationTrace {
            diff,
            relu,
            hidden,
            logits,
        })
    }

    /// Returns the gradient with respect to the difference `a - b`.
    pub fn backward(
        &self,
        params: &ParamStore,
        trace: &VerificationTrace,
        g_logits: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        outer_acc(grads.get_mut(&self.name("out.weight")), g_logits, &trace.hidden);
        add_into(grads.get_mut(&self.name("out.bias")), g_logits);
        let g_hidden = affine_t(params.get(&self.name("out.weight")), g_logits, self.hidden);
        outer_acc(grads.get_mut(&self.name("fc.weight")), &g_hidden, &trace.relu);
        add_into(grads.get_mut(&self.name("fc.bias")), &g_hidden);
        let g_relu = affine_t(params.get(&self.name("fc.weight")), &g_hidden, self.input_dim);
        g_relu
            .into_iter()
            .zip(&trace.diff)
            .map(|(g, &d)| if d > 0.0 { g } else { 0.0 })
            .collect()
    }
}

pub fn verification_logits(
    subnet: &VerificationSubnet,
    params: &ParamStore,
    a: &[f64],
    b: &[f64],
) -> Result<Vec<f64>> {
    Ok(subnet.forward(params, a, b)?.logits)
}
