//! Identity-balanced minibatches and balanced ordered pair generation.
//!
//! A batch holds `K` identities with `M` distinct images each. All ordered
//! cross-identity pairs become negatives; all ordered same-identity pairs
//! (excluding self-pairs) become positives, which are then duplicated
//! uniformly at random until both lists have the same length.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// An ordered pair of batch positions.
pub type Pair = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
    /// Number of distinct positive pairs before duplication.
    pub unique_positives: usize,
    /// True when the batch has no negatives, so nothing was balanced.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    /// Record indices into the sampled dataset, grouped by identity.
    pub images: Vec<usize>,
    /// Identity of each batch position.
    pub labels: Vec<u32>,
    pub positive_pairs: Vec<Pair>,
    pub negative_pairs: Vec<Pair>,
    /// Draw counter of the sampler when this batch was produced.
    pub seed_state: u64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Positives followed by negatives, with their same-identity targets.
    pub fn labelled_pairs(&self) -> impl Iterator<Item = (Pair, bool)> + '_ {
        self.positive_pairs
            .iter()
            .map(|&p| (p, true))
            .chain(self.negative_pairs.iter().map(|&p| (p, false)))
    }
}

/// Exhaustive ordered pairs with balancing by positive duplication.
pub fn generate_pairs<R: Rng + ?Sized>(labels: &[u32], rng: &mut R) -> Result<PairSet> {
    let n = labels.len();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    let unique_positives = positives.len();
    let degenerate = negatives.is_empty();
    if !degenerate {
        while positives.len() < negatives.len() {
            let extra = positives[..unique_positives]
                .choose(rng)
                .copied()
                .expect("non-empty");
            positives.push(extra);
        }
    }
    Ok(PairSet {
        positives,
        negatives,
        unique_positives,
        degenerate,
    })
}

/// Draws identity-balanced batches from a labelled dataset.
pub struct BatchSampler<R> {
    /// identity -> record indices, only identities with at least `m` images
    pools: Vec<(u32, Vec<usize>)>,
    k: usize,
    m: usize,
    rng: R,
    draws: u64,
}

impl<R: Rng> BatchSampler<R> {
    pub fn new(ds: &Dataset, k: usize, m: usize, rng: R) -> Result<Self> {
        if m < 2 {
            return Err(Error::Sampling(format!(
                "M = {m}: at least two images per identity are needed for positive pairs"
            )));
        }
        if k == 0 {
            return Err(Error::Sampling("K must be >= 1".into()));
        }
        if !ds.is_labelled() {
            return Err(Error::Unlabelled(ds.name.clone()));
        }
        let pools: Vec<_> = ds
            .indices_by_identity()
            .into_iter()
            .filter(|(_, v)| v.len() >= m)
            .collect();
        if pools.len() < k {
            return Err(Error::Sampling(format!(
                "K = {k} identities requested but only {} have >= {m} images",
                pools.len()
            )));
        }
        Ok(Self {
            pools,
            k,
            m,
            rng,
            draws: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sample(&mut self) -> Result<PairBatch> {
        let seed_state = self.draws;
        self.draws += 1;
        let mut chosen: Vec<usize> = (0..self.pools.len()).collect();
        chosen.shuffle(&mut self.rng);
        chosen.truncate(self.k);
        chosen.sort_unstable();

        let mut images = Vec::with_capacity(self.k * self.m);
        let mut labels = Vec::with_capacity(self.k * self.m);
        for c in chosen {
            let (person, pool) = &self.pools[c];
            for &idx in pool.choose_multiple(&mut self.rng, self.m) {
                images.push(idx);
                labels.push(*person);
            }
        }
        let pairs = generate_pairs(&labels, &mut self.rng)?;
        Ok(PairBatch {
            images,
            labels,
            positive_pairs: pairs.positives,
            negative_pairs: pairs.negatives,
            seed_state,
        })
    }
}

/// One-shot convenience wrapper around [`BatchSampler`].
pub fn sample_batch<R: Rng>(ds: &Dataset, k: usize, m: usize, rng: R) -> Result<PairBatch> {
    BatchSampler::new(ds, k, m, rng)?.sample()
}
