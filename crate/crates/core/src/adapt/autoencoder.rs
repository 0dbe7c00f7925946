//! Linear autoencoder over backbone features, used as an adaptation
//! baseline: pretrained on source features, fine-tuned on target features,
//! with the encoder output as the adapted representation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::eval::{extract_features, FeatureExtractor};
use crate::model::SiameseModel;
use crate::train::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Encoder width; defaults to half the feature dimension.
    pub hidden: Option<usize>,
    pub learning_rate: f64,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            learning_rate: 1e-3,
            pretrain_iters: 500,
            finetune_iters: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    /// `h x D`.
    pub encoder: DMatrix<f64>,
    pub encoder_bias: DVector<f64>,
    /// `D x h`.
    pub decoder: DMatrix<f64>,
    pub decoder_bias: DVector<f64>,
}

/// Per-tensor Adam moments.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Autoencoder {
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gauss = |rows: usize, cols: usize| {
            let scale = (1.0 / cols as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let encoder = gauss(hidden, dim);
        let decoder = gauss(dim, hidden);
        Self {
            encoder,
            encoder_bias: DVector::zeros(hidden),
            decoder,
            decoder_bias: DVector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.nrows()
    }

    fn check(&self, y: &DMatrix<f64>) -> Result<()> {
        if y.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: y.nrows(),
            });
        }
        Ok(())
    }

    /// Encodes every column of `y`.
    pub fn encode(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(y)?;
        let mut h = &self.encoder * y;
        for mut c in h.column_iter_mut() {
            c += &self.encoder_bias;
        }
        Ok(h)
    }

    pub fn reconstruct(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut r = &self.decoder * self.encode(y)?;
        for mut c in r.column_iter_mut() {
            c += &self.decoder_bias;
        }
        Ok(r)
    }

    /// Mean over columns of `0.5 ||y - f_d(f_e(y))||^2`.
    pub fn loss(&self, y: &DMatrix<f64>) -> Result<f64> {
        if y.ncols() == 0 {
            return Err(Error::Empty("feature matrix"));
        }
        Ok(0.5 * (self.reconstruct(y)? - y).norm_squared() / y.ncols() as f64)
    }

    /// Full-batch Adam on the mean reconstruction loss.
    pub fn fit(&mut self, y: &DMatrix<f64>, iters: usize, learning_rate: f64) -> Result<()> {
        self.check(y)?;
        if y.ncols() == 0 {
            return Err(Error::Empty("feature matrix"));
        }
        let n = y.ncols() as f64;
        let mut mom = Moments {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        };
        for _ in 0..iters {
            let h = self.encode(y)?;
            let mut r = &self.decoder * &h;
            for mut c in r.column_iter_mut() {
                c += &self.decoder_bias;
            }
            let err = (r - y) / n;
            let g_dec = &err * h.transpose();
            let g_dec_b = DMatrix::from_column_slice(err.nrows(), 1, err.column_sum().as_slice());
            let back = self.decoder.tr_mul(&err);
            let g_enc = &back * y.transpose();
            let g_enc_b = DMatrix::from_column_slice(back.nrows(), 1, back.column_sum().as_slice());
            let grads = [g_enc, g_enc_b, g_dec, g_dec_b];
            adam(&mut mom, self.tensors_mut(), &grads, learning_rate);
        }
        if !self.loss(y)?.is_finite() {
            return Err(Error::Solver("autoencoder diverged".into()));
        }
        Ok(())
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.encoder.as_mut_slice(),
            self.encoder_bias.as_mut_slice(),
            self.decoder.as_mut_slice(),
            self.decoder_bias.as_mut_slice(),
        ]
    }
}

fn adam(mom: &mut Moments, params: [&mut [f64]; 4], grads: &[DMatrix<f64>; 4], lr: f64) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    if mom.m.is_empty() {
        mom.m = grads.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
        mom.v = mom.m.clone();
    }
    mom.t += 1;
    let c1 = 1.0 - B1.powi(mom.t);
    let c2 = 1.0 - B2.powi(mom.t);
    for (i, p) in params.into_iter().enumerate() {
        let (m, v, g) = (&mut mom.m[i], &mut mom.v[i], &grads[i]);
        for (k, w) in p.iter_mut().enumerate() {
            m[k] = B1 * m[k] + (1.0 - B1) * g[k];
            v[k] = B2 * v[k] + (1.0 - B2) * g[k] * g[k];
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-8);
        }
    }
}

/// Backbone followed by an autoencoder's encoder.
#[derive(Debug, Clone)]
pub struct EncodedExtractor {
    pub model: SiameseModel,
    pub autoencoder: Autoencoder,
}

impl FeatureExtractor for EncodedExtractor {
    fn extractor_id(&self) -> String {
        format!("{}+ae{}", self.model.extractor_id(), self.autoencoder.hidden_dim())
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.model.input_shape()
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let y = DMatrix::from_column_slice(self.model.feature_dim(), 1, &self.model.extract(image)?);
        Ok(self.autoencoder.encode(&y)?.iter().copied().collect())
    }
}

/// Backbone features of every record, one column each.
pub fn feature_columns<E: FeatureExtractor + ?Sized>(extractor: &E, ds: &Dataset) -> Result<DMatrix<f64>> {
    let fm = extract_features(extractor, ds.records())?;
    Ok(DMatrix::from_fn(fm.dim(), fm.len(), |r, c| fm.rows[c][r]))
}

/// Half the feature dimension, at least 1.
pub fn default_hidden(feature_dim: usize) -> usize {
    (feature_dim / 2).max(1)
}

/// Pretrains on `source` features, fine-tunes on `target` features and
/// returns the encoder-output extractor.
pub fn autoencoder_baseline(
    model: &SiameseModel,
    source: &Dataset,
    target: &Dataset,
    cfg: &AutoencoderConfig,
) -> Result<EncodedExtractor> {
    let dim = model.feature_dim();
    let hidden = cfg.hidden.unwrap_or_else(|| default_hidden(dim));
    if hidden == 0 || hidden > dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: hidden,
        });
    }
    let mut ae = Autoencoder::random(dim, hidden, &mut seeded_rng(cfg.seed, 0));
    ae.fit(&feature_columns(model, source)?, cfg.pretrain_iters, cfg.learning_rate)?;
    ae.fit(&feature_columns(model, target)?, cfg.finetune_iters, cfg.learning_rate)?;
    Ok(EncodedExtractor {
        model: model.clone(),
        autoencoder: ae,
    })
}
