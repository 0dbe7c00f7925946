//! Pseudo-labels from cross-view nearest-neighbour assignment.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::graph::column_sq_distance;
use crate::error::{Error, Result};

/// Each anchor-view image is its own class; every other image takes the
/// class of its nearest anchor-view image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabeling {
    pub ids: Vec<String>,
    /// Pseudo-class per entry of `ids`.
    pub labels: Vec<u32>,
    pub anchor_view: u32,
    pub matched_views: Vec<u32>,
    pub num_classes: usize,
}

impl SoftLabeling {
    pub fn label(&self, image_id: &str) -> Option<u32> {
        self.ids.iter().position(|i| i == image_id).map(|p| self.labels[p])
    }

    /// Anchor images hold distinct classes `0..num_classes`; every other
    /// label names one of them.
    pub fn check(&self, views: &[u32]) -> Result<()> {
        if views.len() != self.labels.len() || self.ids.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len(),
                found: views.len(),
            });
        }
        let anchors: Vec<u32> = self
            .labels
            .iter()
            .zip(views)
            .filter(|(_, &v)| v == self.anchor_view)
            .map(|(&l, _)| l)
            .collect();
        let distinct: BTreeSet<u32> = anchors.iter().copied().collect();
        let ok = anchors.len() == self.num_classes
            && distinct.len() == anchors.len()
            && self.labels.iter().all(|&l| (l as usize) < self.num_classes);
        if ok {
            Ok(())
        } else {
            Err(Error::Solver("soft labeling violates its structure".into()))
        }
    }

    /// Fraction of non-anchor images whose class is the same in `other`.
    pub fn agreement(&self, other: &SoftLabeling, views: &[u32]) -> f64 {
        let (same, total) = self
            .labels
            .iter()
            .zip(&other.labels)
            .zip(views)
            .filter(|(_, &v)| v != self.anchor_view)
            .fold((0usize, 0usize), |(s, t), ((a, b), _)| (s + usize::from(a == b), t + 1));
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    }
}

/// Labels the columns of `points` (one per image, aligned with `ids` and
/// `views`). Ties go to the lower anchor index.
pub fn soft_labels(points: &DMatrix<f64>, ids: &[String], views: &[u32], anchor_view: u32) -> Result<SoftLabeling> {
    let m = points.ncols();
    if ids.len() != m || views.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: ids.len().min(views.len()),
        });
    }
    let anchors: Vec<usize> = (0..m).filter(|&i| views[i] == anchor_view).collect();
    if anchors.is_empty() {
        return Err(Error::Empty("anchor view"));
    }
    let mut labels = vec![0u32; m];
    for (class, &a) in anchors.iter().enumerate() {
        labels[a] = class as u32;
    }
    for i in (0..m).filter(|&i| views[i] != anchor_view) {
        let mut best = (f64::INFINITY, 0usize);
        for (class, &a) in anchors.iter().enumerate() {
            let d = column_sq_distance(points, i, a);
            if d < best.0 {
                best = (d, class);
            }
        }
        labels[i] = best.1 as u32;
    }
    let matched_views: BTreeSet<u32> = views.iter().copied().filter(|&v| v != anchor_view).collect();
    Ok(SoftLabeling {
        ids: ids.to_vec(),
        labels,
        anchor_view,
        matched_views: matched_views.into_iter().collect(),
        num_classes: anchors.len(),
    })
}

/// Fraction of non-anchor images `b` whose nearest anchor image `a` has `b`
/// as its nearest image within `b`'s view.
pub fn mutual_consistency(points: &DMatrix<f64>, views: &[u32], anchor_view: u32) -> f64 {
    let m = points.ncols();
    let nearest = |i: usize, keep: &dyn Fn(usize) -> bool| {
        (0..m)
            .filter(|&j| j != i && keep(j))
            .map(|j| (column_sq_distance(points, i, j), j))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, j)| j)
    };
    let others: Vec<usize> = (0..m).filter(|&i| views[i] != anchor_view).collect();
    if others.is_empty() {
        return 0.0;
    }
    let mutual = others
        .iter()
        .filter(|&&b| {
            nearest(b, &|j| views[j] == anchor_view)
                .and_then(|a| nearest(a, &|j| views[j] == views[b]))
                == Some(b)
        })
        .count();
    mutual as f64 / others.len() as f64
}
