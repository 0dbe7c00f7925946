use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Protocol;
use crate::error::{Error, Result};

pub const RANKS: [usize; 4] = [1, 5, 10, 20];

/// CMC curve over ranks `1..=G` plus the number of probes excluded because
/// their identity never occurs in their ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmc {
    pub curve: Vec<f64>,
    pub excluded: usize,
}

fn first_hit(ranking: &[usize], probe: u32, gallery_ids: &[u32]) -> Option<usize> {
    ranking.iter().position(|&g| gallery_ids[g] == probe)
}

/// `curve[k - 1]` is the fraction of (non-excluded) probes whose first
/// correct match sits at rank `<= k`.
pub fn compute_cmc(rankings: &[Vec<usize>], probe_ids: &[u32], gallery_ids: &[u32]) -> Result<Cmc> {
    if rankings.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    if rankings.len() != probe_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: rankings.len(),
            found: probe_ids.len(),
        });
    }
    let g = gallery_ids.len();
    let mut hits_at = vec![0usize; g];
    let mut counted = 0usize;
    for (ranking, &p) in rankings.iter().zip(probe_ids) {
        if let Some(r) = first_hit(ranking, p, gallery_ids) {
            hits_at[r] += 1;
            counted += 1;
        }
    }
    let excluded = rankings.len() - counted;
    if counted == 0 {
        return Err(Error::Empty("probe set after excluding unmatched probes"));
    }
    let mut acc = 0usize;
    let curve = hits_at
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / counted as f64
        })
        .collect();
    Ok(Cmc { curve, excluded })
}

/// Average precision of one ranking: mean of precision@k over the ranks k
/// holding a correct match.
pub fn average_precision(ranking: &[usize], probe: u32, gallery_ids: &[u32]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &g) in ranking.iter().enumerate() {
        if gallery_ids[g] == probe {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn compute_map(rankings: &[Vec<usize>], probe_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    if rankings.len() != probe_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: rankings.len(),
            found: probe_ids.len(),
        });
    }
    let mut total = 0.0;
    for (ranking, &p) in rankings.iter().zip(probe_ids) {
        total += average_precision(ranking, p, gallery_ids).ok_or(Error::ProbeWithoutMatch(p))?;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    /// CMC at ranks 1, 5, 10 and 20 (the last value when the gallery is
    /// shorter).
    pub rank_table: BTreeMap<usize, f64>,
    pub map: f64,
    pub protocol: Protocol,
    pub num_queries: usize,
    pub excluded_probes: usize,
}

impl EvalReport {
    pub fn from_parts(cmc: Cmc, map: f64, protocol: Protocol, num_queries: usize) -> Self {
        let rank_table = RANKS
            .iter()
            .filter_map(|&r| {
                let idx = r.min(cmc.curve.len()).checked_sub(1)?;
                Some((r, cmc.curve[idx]))
            })
            .collect();
        Self {
            cmc: cmc.curve,
            rank_table,
            map,
            protocol,
            num_queries,
            excluded_probes: cmc.excluded,
        }
    }

    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}
