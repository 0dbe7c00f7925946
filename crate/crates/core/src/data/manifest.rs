use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, ImageRecord, Split};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["image_id", "path", "person_id", "camera_id", "split"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: String,
    path: String,
    person_id: Option<u32>,
    camera_id: u32,
    split: String,
}

/// Loads a CSV manifest. Image paths are resolved relative to the manifest's
/// directory. The first image fixes the dataset shape.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::MissingManifest(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            row: 0,
            reason: format!(
                "header must be `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut ids = HashSet::new();
    let mut records = Vec::new();
    let mut shape = None;
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row_no = i + 1;
        let malformed = |reason: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row: row_no,
            reason,
        };
        let row = row.map_err(|e| malformed(e.to_string()))?;
        if row.image_id.is_empty() {
            return Err(malformed("empty image_id".into()));
        }
        let split: Split = row.split.parse().map_err(malformed)?;
        if !ids.insert(row.image_id.clone()) {
            return Err(Error::DuplicateImageId {
                path: path.to_path_buf(),
                row: row_no,
                image_id: row.image_id,
            });
        }
        let image_path = base.join(&row.path);
        if !image_path.is_file() {
            return Err(Error::MissingImage {
                path: path.to_path_buf(),
                row: row_no,
                image: image_path,
            });
        }
        let pixels = read_image(&image_path).map_err(|reason| Error::UnreadableImage {
            path: path.to_path_buf(),
            row: row_no,
            image: image_path.clone(),
            reason,
        })?;
        let expected = *shape.get_or_insert(pixels.shape());
        if pixels.shape() != expected {
            return Err(Error::ShapeMismatch {
                image_id: row.image_id,
                expected,
                found: pixels.shape(),
            });
        }
        records.push(ImageRecord {
            image_id: row.image_id,
            person_id: row.person_id,
            camera_id: row.camera_id,
            pixels: Arc::new(pixels),
            split,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, shape.unwrap_or((0, 0, 0)), records)
}

/// Writes `ds` as `manifest.csv` plus one 16-bit PNG per record under
/// `dir/images`. Returns the manifest path.
pub fn write_manifest(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    for (i, r) in ds.records().iter().enumerate() {
        let rel = format!("images/{i:06}_{}.png", sanitize(&r.image_id));
        write_image(&r.pixels, &dir.join(&rel))?;
        writer.serialize(Row {
            image_id: r.image_id.clone(),
            path: rel,
            person_id: r.person_id,
            camera_id: r.camera_id,
            split: r.split.to_string(),
        })?;
    }
    writer.flush()?;
    Ok(manifest)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn read_image(path: &Path) -> std::result::Result<Image, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let is_gray = matches!(img.color().channel_count(), 1 | 2);
    if is_gray {
        let buf = img.to_luma16();
        let data = buf.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect();
        Image::from_vec(h, w, 1, data).map_err(|e| e.to_string())
    } else {
        let buf = img.to_rgb16();
        let data = buf
            .pixels()
            .flat_map(|p| p.0)
            .map(|v| f64::from(v) / 65535.0)
            .collect();
        Image::from_vec(h, w, 3, data).map_err(|e| e.to_string())
    }
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes an image in `[0, 1]` as a 16-bit grayscale or RGB PNG.
pub(crate) fn write_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.shape();
    let data: Vec<u16> = img.data().iter().map(|&v| quantize(v)).collect();
    let dynamic = match c {
        1 => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, data)
                .expect("buffer sized from shape"),
        ),
        3 => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, data)
                .expect("buffer sized from shape"),
        ),
        other => {
            return Err(Error::Config(format!(
                "cannot write {other}-channel image as PNG"
            )))
        }
    };
    dynamic.save(path)?;
    Ok(())
}
