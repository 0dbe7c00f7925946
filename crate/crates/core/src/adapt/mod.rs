//! Unsupervised adaptation to an unlabelled multi-camera target: soft
//! labels, graph-regularised dictionary learning, and co-training that
//! alternates the two with deep self-training.

mod autoencoder;
mod dictionary;
mod graph;
mod labels;

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use autoencoder::{
    autoencoder_baseline, default_hidden, feature_columns, Autoencoder, AutoencoderConfig, EncodedExtractor,
};
pub use dictionary::{
    default_k_atoms, init_dictionary, objective_terms, solve_from, solve_graph_dictionary, DictModel, HalfStep,
    SolverConfig, SolverRecord, SINGULAR_EPS,
};
pub use graph::{build_cross_view_graph, graph_penalty, laplacian, trace_penalty};
pub use labels::{mutual_consistency, soft_labels, SoftLabeling};

use crate::data::{make_probe_gallery, Dataset, Protocol};
use crate::error::{Error, Result};
use crate::eval::{evaluate_features, EvalReport, FeatureMatrix};
use crate::model::SiameseModel;
use crate::train::{seeded_rng, two_stepped_finetune, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub rounds: usize,
    pub lambda: f64,
    pub k_atoms: Option<usize>,
    pub knn_k: usize,
    /// Defaults to the lowest camera id of the target.
    pub anchor_camera: Option<u32>,
    pub solver_iters: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            lambda: 1.0,
            k_atoms: None,
            knn_k: 3,
            anchor_camera: None,
            solver_iters: 100,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl AdaptConfig {
    fn solver(&self, round: usize) -> SolverConfig {
        SolverConfig {
            lambda: self.lambda,
            k_atoms: self.k_atoms,
            max_iters: self.solver_iters,
            tol: 1e-6,
            seed: self.seed.wrapping_add(round as u64),
        }
    }

    fn anchor(&self, target: &Dataset) -> Result<u32> {
        let cams = target.cameras();
        let anchor = match self.anchor_camera {
            Some(a) => a,
            None => *cams.iter().next().ok_or(Error::Empty("target"))?,
        };
        if !cams.contains(&anchor) {
            return Err(Error::Config(format!("adapt.anchor_camera {anchor} not present in target")));
        }
        if cams.len() < 2 {
            return Err(Error::Config("target needs at least two cameras".into()));
        }
        Ok(anchor)
    }
}

/// Where each round's soft labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    /// Codes of the graph-regularised dictionary model (co-training).
    Codes,
    /// Backbone features directly (self-training alone).
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub num_pseudo_classes: usize,
    /// Share of non-anchor labels unchanged since the previous round.
    pub label_agreement: Option<f64>,
    /// Solver half-step history, empty for feature-space labels.
    pub solver: Vec<SolverRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoTrainReport {
    pub rounds: Vec<RoundReport>,
}

impl CoTrainReport {
    pub fn agreements(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.label_agreement).collect()
    }
}

/// Writes `iter,objective,recon_term,graph_term` rows for completed
/// iterations of a solver history.
pub fn write_solver_history<W: Write>(history: &[SolverRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "objective", "recon_term", "graph_term"])?;
    for r in history.iter().filter(|r| r.step == HalfStep::Atoms) {
        w.write_record([
            r.iter.to_string(),
            r.objective.to_string(),
            r.recon_term.to_string(),
            r.graph_term.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Soft labels from backbone features.
pub fn soft_labels_from_features(features: &FeatureMatrix, views: &[u32], anchor_view: u32) -> Result<SoftLabeling> {
    let cols = DMatrix::from_fn(features.dim(), features.len(), |r, c| features.rows[c][r]);
    soft_labels(&cols, &features.ids, views, anchor_view)
}

fn views_of(ds: &Dataset) -> Vec<u32> {
    ds.records().iter().map(|r| r.camera_id).collect()
}

fn ids_of(ds: &Dataset) -> Vec<String> {
    ds.records().iter().map(|r| r.image_id.clone()).collect()
}

/// Fine-tunes on `target` with pseudo-classes standing in for identities.
pub fn self_train_round(
    model: &mut SiameseModel,
    target: &Dataset,
    labeling: &SoftLabeling,
    cfg: &TrainConfig,
) -> Result<()> {
    if labeling.num_classes < 2 {
        return Err(Error::TooFewClasses {
            needed: 2,
            found: labeling.num_classes,
        });
    }
    let labels = target
        .records()
        .iter()
        .map(|r| {
            labeling
                .label(&r.image_id)
                .ok_or_else(|| Error::Config(format!("soft labeling does not cover image `{}`", r.image_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo = target.relabelled(&labels)?;
    two_stepped_finetune(model, &pseudo, cfg)
}

/// Codes of the graph-regularised dictionary model over the backbone
/// features of `ds`.
pub fn fit_codes(model: &SiameseModel, ds: &Dataset, cfg: &AdaptConfig, round: usize) -> Result<DictModel> {
    let y = feature_columns(model, ds)?;
    let w = build_cross_view_graph(&y, &views_of(ds), cfg.knn_k)?;
    solve_graph_dictionary(&y, &w, &cfg.solver(round))
}

/// Runs `cfg.rounds` rounds of label generation followed by self-training.
/// Labels are replaced wholesale each round.
pub fn adapt_rounds(
    model: &mut SiameseModel,
    target: &Dataset,
    cfg: &AdaptConfig,
    source: LabelSource,
) -> Result<CoTrainReport> {
    if cfg.rounds == 0 {
        return Err(Error::Config("adapt.rounds must be >= 1".into()));
    }
    let anchor = cfg.anchor(target)?;
    let views = views_of(target);
    let ids = ids_of(target);
    let mut report = CoTrainReport::default();
    let mut previous: Option<SoftLabeling> = None;
    for round in 0..cfg.rounds {
        let (labeling, solver) = match source {
            LabelSource::Codes => {
                let dict = fit_codes(model, target, cfg, round)?;
                (soft_labels(&dict.codes, &ids, &views, anchor)?, dict.history)
            }
            LabelSource::Features => (soft_labels(&feature_columns(model, target)?, &ids, &views, anchor)?, Vec::new()),
        };
        labeling.check(&views)?;
        let train = TrainConfig {
            seed: cfg.train.seed.wrapping_add(round as u64),
            ..cfg.train
        };
        self_train_round(model, target, &labeling, &train)?;
        report.rounds.push(RoundReport {
            round,
            num_pseudo_classes: labeling.num_classes,
            label_agreement: previous.as_ref().map(|p| labeling.agreement(p, &views)),
            solver,
        });
        previous = Some(labeling);
    }
    Ok(report)
}

/// Alternates the dictionary model, which labels the target from its
/// codes, with deep self-training on those labels.
pub fn co_train(model: &mut SiameseModel, target: &Dataset, cfg: &AdaptConfig) -> Result<CoTrainReport> {
    adapt_rounds(model, target, cfg, LabelSource::Codes)
}

/// Self-training alone: labels from the backbone's own features.
pub fn self_train(model: &mut SiameseModel, target: &Dataset, cfg: &AdaptConfig) -> Result<CoTrainReport> {
    adapt_rounds(model, target, cfg, LabelSource::Features)
}

/// Scores the dictionary model alone: codes are learned over the backbone
/// features of the whole probe and gallery set, and retrieval ranks codes.
pub fn evaluate_subspace(
    model: &SiameseModel,
    test: &Dataset,
    protocol: Protocol,
    split_seed: u64,
    cfg: &AdaptConfig,
) -> Result<EvalReport> {
    let split = make_probe_gallery(test, protocol, split_seed)?;
    let records: Vec<_> = split.probes.iter().chain(&split.gallery).cloned().collect();
    let all = Dataset::new(test.name.clone(), test.image_shape(), records)?;
    let dict = fit_codes(model, &all, cfg, 0)?;
    let column = |c: usize| dict.codes.column(c).iter().copied().collect::<Vec<_>>();
    let np = split.probes.len();
    let probes = FeatureMatrix::new(
        split.probes.iter().map(|r| r.image_id.clone()).collect(),
        (0..np).map(column).collect(),
        "subspace",
    )?;
    let gallery = FeatureMatrix::new(
        split.gallery.iter().map(|r| r.image_id.clone()).collect(),
        (np..all.len()).map(column).collect(),
        "subspace",
    )?;
    evaluate_features(&split, &probes, &gallery)
}

/// Picks the graph weight by one co-training round on a random half of the
/// target, scored on the other half by cross-view mutual nearest-neighbour
/// consistency. Ties go to the smaller weight.
pub fn select_lambda(model: &SiameseModel, target: &Dataset, candidates: &[f64], cfg: &AdaptConfig) -> Result<f64> {
    match candidates {
        [] => return Err(Error::Empty("lambda candidates")),
        [only] => return Ok(*only),
        _ => {}
    }
    let anchor = cfg.anchor(target)?;
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.shuffle(&mut seeded_rng(cfg.seed, 5));
    let half: BTreeSet<&str> = order[..target.len() / 2]
        .iter()
        .map(|&i| target.records()[i].image_id.as_str())
        .collect();
    let fit = target.filter(|r| half.contains(r.image_id.as_str()))?;
    let score = target.filter(|r| !half.contains(r.image_id.as_str()))?;
    let one_round = AdaptConfig {
        rounds: 1,
        anchor_camera: Some(anchor),
        ..*cfg
    };
    let mut best: Option<(f64, f64)> = None;
    for &lambda in candidates {
        let mut m = model.clone();
        co_train(&mut m, &fit, &AdaptConfig { lambda, ..one_round })?;
        let s = mutual_consistency(&feature_columns(&m, &score)?, &views_of(&score), anchor);
        let better = match best {
            None => true,
            Some((bs, bl)) => s > bs || (s == bs && lambda < bl),
        };
        if better {
            best = Some((s, lambda));
        }
    }
    Ok(best.expect("at least two candidates").1)
}
