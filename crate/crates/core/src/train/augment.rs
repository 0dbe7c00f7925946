//! Random small 2D affine transforms about the image centre.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, ImageRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentBounds {
    /// Maximum shift along each axis, as a fraction of that side.
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            max_translation: 0.05,
            min_scale: 0.95,
            max_scale: 1.05,
            max_rotation_deg: 5.0,
        }
    }
}

impl AugmentBounds {
    pub fn identity() -> Self {
        Self {
            max_translation: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            max_rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=0.5).contains(&self.max_translation)
            && self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.max_scale <= 4.0
            && (0.0..=180.0).contains(&self.max_rotation_deg);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augment.bounds out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    tx: f64,
    ty: f64,
    scale: f64,
    angle: f64,
}

fn draw<R: Rng + ?Sized>(b: &AugmentBounds, h: usize, w: usize, rng: &mut R) -> Affine {
    let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    Affine {
        tx: sym(rng, b.max_translation) * w as f64,
        ty: sym(rng, b.max_translation) * h as f64,
        scale: if b.max_scale > b.min_scale {
            rng.random_range(b.min_scale..=b.max_scale)
        } else {
            b.min_scale
        },
        angle: sym(rng, b.max_rotation_deg).to_radians(),
    }
}

/// Inverse-maps every output pixel into the source and samples bilinearly,
/// clamping to the border.
fn warp(img: &Image, t: Affine) -> Image {
    let (h, w, c) = img.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.angle.sin_cos();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy - t.ty;
            let dx = x as f64 - cx - t.tx;
            let sy = ((cos * dy - sin * dx) / t.scale + cy).clamp(0.0, h as f64 - 1.0);
            let sx = ((sin * dy + cos * dx) / t.scale + cx).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.set(y, x, ch, (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// `count` randomly transformed copies of `record`, labels preserved.
pub fn augment<R: Rng + ?Sized>(
    record: &ImageRecord,
    count: usize,
    bounds: &AugmentBounds,
    rng: &mut R,
) -> Result<Vec<ImageRecord>> {
    bounds.validate()?;
    let (h, w, _) = record.pixels.shape();
    Ok((0..count)
        .map(|k| ImageRecord {
            image_id: format!("{}#aug{k}", record.image_id),
            pixels: Arc::new(warp(&record.pixels, draw(bounds, h, w, rng))),
            ..record.clone()
        })
        .collect())
}

/// Originals followed by their augmented copies.
pub fn augment_dataset<R: Rng + ?Sized>(
    ds: &Dataset,
    count: usize,
    bounds: &AugmentBounds,
    rng: &mut R,
) -> Result<Dataset> {
    if count == 0 {
        return Ok(ds.clone());
    }
    let mut records = ds.records().to_vec();
    for r in ds.records() {
        records.extend(augment(r, count, bounds, rng)?);
    }
    Dataset::new(ds.name.clone(), ds.image_shape(), records)
}
