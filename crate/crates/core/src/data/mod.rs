//! Person images, datasets and evaluation splits.
//!
//! A [`Dataset`] is a flat list of [`ImageRecord`]s sharing one declared
//! image shape. Labelled datasets carry a `person_id` on every record;
//! unlabelled target datasets carry none. Mixing the two is rejected.

mod manifest;
mod protocol;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, write_manifest, MANIFEST_HEADER};
pub use protocol::{make_probe_gallery, ProbeGallery, Protocol};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Dense `H x W x C` image stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Squared Euclidean distance between two images of equal shape.
    pub fn sq_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Probe,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Probe => "probe",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "probe" => Ok(Split::Probe),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One person detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub person_id: Option<u32>,
    pub camera_id: u32,
    pub pixels: Arc<Image>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    records: Vec<ImageRecord>,
    image_shape: (usize, usize, usize),
    cameras: BTreeSet<u32>,
    num_identities: usize,
    labelled: bool,
}

impl Dataset {
    /// Builds a dataset, checking shapes, pixel range and labelling.
    pub fn new(
        name: impl Into<String>,
        image_shape: (usize, usize, usize),
        records: Vec<ImageRecord>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.pixels.shape() != image_shape {
                return Err(Error::ShapeMismatch {
                    image_id: r.image_id.clone(),
                    expected: image_shape,
                    found: r.pixels.shape(),
                });
            }
            if !r.pixels.in_unit_range() {
                return Err(Error::InvalidSynthetic(format!(
                    "image `{}` has pixel values outside [0, 1]",
                    r.image_id
                )));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Config(format!("duplicate image_id `{}`", r.image_id)));
            }
        }
        let labelled_count = records.iter().filter(|r| r.person_id.is_some()).count();
        if labelled_count != 0 && labelled_count != records.len() {
            return Err(Error::MixedLabelling);
        }
        let labelled = labelled_count > 0;
        let num_identities = records
            .iter()
            .filter_map(|r| r.person_id)
            .collect::<BTreeSet<_>>()
            .len();
        let cameras = records.iter().map(|r| r.camera_id).collect();
        Ok(Self {
            name: name.into(),
            records,
            image_shape,
            cameras,
            num_identities,
            labelled,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn cameras(&self) -> &BTreeSet<u32> {
        &self.cameras
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn is_labelled(&self) -> bool {
        self.labelled
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<u32> {
        self.records
            .iter()
            .filter_map(|r| r.person_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Maps each identity to a contiguous class index in ascending id order.
    pub fn class_index(&self) -> BTreeMap<u32, usize> {
        self.identities()
            .into_iter()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect()
    }

    /// Record indices grouped by identity, in ascending identity order.
    pub fn indices_by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(p) = r.person_id {
                map.entry(p).or_default().push(i);
            }
        }
        map
    }

    /// Sub-dataset of the records whose split is in `splits`.
    pub fn filter_split(&self, splits: &[Split]) -> Result<Dataset> {
        self.filter(|r| splits.contains(&r.split))
    }

    pub fn filter(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Result<Dataset> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(self.name.clone(), self.image_shape, records)
    }

    /// Same records with identity labels removed.
    pub fn unlabelled(&self) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| ImageRecord {
                person_id: None,
                ..r.clone()
            })
            .collect();
        Dataset::new(self.name.clone(), self.image_shape, records)
            .expect("stripping labels keeps a dataset valid")
    }

    /// Replaces the identity labels with `labels[i]` for record `i`.
    pub fn relabelled(&self, labels: &[u32]) -> Result<Dataset> {
        if labels.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                expected: self.records.len(),
                found: labels.len(),
            });
        }
        let records = self
            .records
            .iter()
            .zip(labels)
            .map(|(r, &l)| ImageRecord {
                person_id: Some(l),
                ..r.clone()
            })
            .collect();
        Dataset::new(self.name.clone(), self.image_shape, records)
    }

    /// Merges labelled datasets into one, offsetting identities so that the
    /// identity sets of the inputs stay disjoint. Image ids are prefixed with
    /// the source dataset name.
    pub fn merge(name: impl Into<String>, parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let shape = first.image_shape;
        let mut records = Vec::new();
        let mut offset = 0u32;
        for part in parts {
            if !part.is_labelled() {
                return Err(Error::Unlabelled(part.name.clone()));
            }
            let index = part.class_index();
            for r in &part.records {
                let class = index[&r.person_id.expect("labelled")] as u32;
                records.push(ImageRecord {
                    image_id: format!("{}/{}", part.name, r.image_id),
                    person_id: Some(offset + class),
                    ..r.clone()
                });
            }
            offset += index.len() as u32;
        }
        let merged = Dataset::new(name, shape, records)?;
        let expected: usize = parts.iter().map(Dataset::num_identities).sum();
        if merged.num_identities() != expected {
            return Err(Error::Config(format!(
                "identity collision after merge: {} != {expected}",
                merged.num_identities()
            )));
        }
        Ok(merged)
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn record(id: &str, person: Option<u32>, camera: u32, value: f64) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            person_id: person,
            camera_id: camera,
            pixels: Arc::new(Image::from_vec(2, 2, 1, vec![value; 4]).unwrap()),
            split: Split::Train,
        }
    }
}
