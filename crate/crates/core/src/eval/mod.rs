//! Single-image-representation retrieval: every image is embedded once, and
//! probes are ranked against the gallery by Euclidean distance.

mod metrics;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use metrics::{average_precision, compute_cmc, compute_map, Cmc, EvalReport, RANKS};

use crate::data::{make_probe_gallery, Dataset, Image, ImageRecord, ProbeGallery, Protocol};
use crate::error::{Error, Result};
use crate::model::SiameseModel;

/// Anything that maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn extractor_id(&self) -> String;
    fn input_shape(&self) -> (usize, usize, usize);
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

impl FeatureExtractor for SiameseModel {
    fn extractor_id(&self) -> String {
        format!("{}@{}", self.backbone().id(), &self.params.hash()[..12])
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.backbone().input_shape()
    }

    /// Backbone output with dropout disabled.
    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_features(&[image])?.remove(0))
    }
}

/// Feature rows aligned with an ordered image id list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub extractor: String,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>, extractor: impl Into<String>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                found: rows.len(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver("non-finite feature value".into()));
            }
        }
        Ok(Self {
            ids,
            rows,
            extractor: extractor.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Writes row-major little-endian `f32` values to `path` and the ids, one
    /// per line under an `image_id` header, to the sidecar path.
    pub fn export(&self, path: &Path) -> Result<PathBuf> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for row in &self.rows {
            for &v in row {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        let sidecar = sidecar_path(path);
        let mut w = csv::Writer::from_path(&sidecar)?;
        w.write_record(["image_id"])?;
        for id in &self.ids {
            w.write_record([id])?;
        }
        w.flush()?;
        Ok(sidecar)
    }

    pub fn import(path: &Path, extractor: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut reader = csv::Reader::from_path(sidecar_path(path))?;
        let ids: Vec<String> = reader
            .records()
            .map(|r| Ok(r?.get(0).unwrap_or_default().to_string()))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if ids.is_empty() {
            return Self::new(ids, Vec::new(), extractor);
        }
        if values.len() % ids.len() != 0 || bytes.len() % 4 != 0 {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                found: values.len(),
            });
        }
        let dim = values.len() / ids.len();
        let rows = values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        Self::new(ids, rows, extractor)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".ids.csv");
    path.with_file_name(name)
}

pub fn extract_features<E: FeatureExtractor + ?Sized>(extractor: &E, images: &[ImageRecord]) -> Result<FeatureMatrix> {
    let shape = extractor.input_shape();
    let rows = images
        .iter()
        .map(|r| {
            if r.pixels.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "image `{}` has shape {:?}, extractor expects {shape:?}",
                    r.image_id,
                    r.pixels.shape()
                )));
            }
            extractor.extract(&r.pixels)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::new(
        images.iter().map(|r| r.image_id.clone()).collect(),
        rows,
        extractor.extractor_id(),
    )
}

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery indices by ascending Euclidean distance; ties keep the lower
/// index first.
pub fn rank_gallery(probe: &[f64], gallery: &FeatureMatrix) -> Result<Vec<usize>> {
    if !gallery.is_empty() && probe.len() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim(),
            found: probe.len(),
        });
    }
    let dist: Vec<f64> = gallery.rows.iter().map(|g| sq_euclidean(probe, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Ranks every query against the gallery and scores the result. Query
/// groups are mean-pooled. Gallery entries sharing both identity and camera
/// with the query are dropped from its ranking.
pub fn evaluate_features(
    split: &ProbeGallery,
    probe_feats: &FeatureMatrix,
    gallery_feats: &FeatureMatrix,
) -> Result<EvalReport> {
    if split.query_groups.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let gallery_ids: Vec<u32> = split
        .gallery
        .iter()
        .map(|r| r.person_id.ok_or_else(|| Error::Unlabelled("gallery".into())))
        .collect::<Result<_>>()?;
    let mut rankings = Vec::with_capacity(split.query_groups.len());
    let mut probe_ids = Vec::with_capacity(split.query_groups.len());
    for group in &split.query_groups {
        let dim = probe_feats.dim();
        let mut query = vec![0.0; dim];
        for &i in group {
            for (q, v) in query.iter_mut().zip(&probe_feats.rows[i]) {
                *q += v;
            }
        }
        query.iter_mut().for_each(|q| *q /= group.len() as f64);
        let head = &split.probes[group[0]];
        let person = head.person_id.ok_or_else(|| Error::Unlabelled("probe".into()))?;
        let ranking: Vec<usize> = rank_gallery(&query, gallery_feats)?
            .into_iter()
            .filter(|&g| !(gallery_ids[g] == person && split.gallery[g].camera_id == head.camera_id))
            .collect();
        rankings.push(ranking);
        probe_ids.push(person);
    }
    let cmc = compute_cmc(&rankings, &probe_ids, &gallery_ids)?;
    // mAP over the probes that have a match, same set the CMC counts
    let (matched_rankings, matched_ids): (Vec<_>, Vec<_>) = rankings
        .into_iter()
        .zip(probe_ids)
        .filter(|(r, p)| r.iter().any(|&g| gallery_ids[g] == *p))
        .unzip();
    let map = compute_map(&matched_rankings, &matched_ids, &gallery_ids)?;
    Ok(EvalReport::from_parts(cmc, map, split.protocol, split.query_groups.len()))
}

/// Splits a labelled test set, extracts features and scores retrieval.
pub fn evaluate<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    test: &Dataset,
    protocol: Protocol,
    seed: u64,
) -> Result<EvalReport> {
    let split = make_probe_gallery(test, protocol, seed)?;
    let probes = extract_features(extractor, &split.probes)?;
    let gallery = extract_features(extractor, &split.gallery)?;
    evaluate_features(&split, &probes, &gallery)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("g{i}")).collect();
        FeatureMatrix::new(ids, rows, "test").unwrap()
    }

    #[test]
    fn probe_itself_ranks_first() {
        let g = fm(vec![vec![1.0, 1.0], vec![0.0, 0.5], vec![3.0, -1.0]]);
        let order = rank_gallery(&[0.0, 0.5], &g).unwrap();
        assert_eq!(order[0], 1);
        assert_eq!(sq_euclidean(&[0.0, 0.5], &g.rows[1]), 0.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = fm(vec![vec![5.0], vec![1.0], vec![-1.0]]);
        assert_eq!(rank_gallery(&[0.0], &g).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn dimension_mismatch() {
        let g = fm(vec![vec![1.0, 2.0]]);
        assert!(rank_gallery(&[1.0], &g).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = fm(vec![vec![0.5, -1.25], vec![2.0, 3.0]]);
        let path = dir.path().join("f.bin");
        let sidecar = m.export(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 16);
        assert_eq!(fs::read_to_string(sidecar).unwrap(), "image_id\ng0\ng1\n");
        let back = FeatureMatrix::import(&path, "test").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_matrix_is_valid() {
        let m = FeatureMatrix::new(Vec::new(), Vec::new(), "x").unwrap();
        assert!(m.is_empty());
        assert!(FeatureMatrix::new(vec!["a".into()], vec![vec![f64::NAN]], "x").is_err());
    }
}
