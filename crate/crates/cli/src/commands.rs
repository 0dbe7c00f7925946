//! One function per subcommand. Each writes its artifacts under the
//! configured output directory and returns their paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use reid_core::adapt::{co_train, evaluate_subspace, select_lambda, self_train, write_solver_history};
use reid_core::data::{generate_synthetic, load_manifest, make_probe_gallery, write_manifest, Dataset};
use reid_core::eval::{evaluate, extract_features, rank_gallery, EvalReport, FeatureExtractor};
use reid_core::model::{load_checkpoint, save_checkpoint, verification_logits, SiameseModel};
use reid_core::train::{seeded_rng, staged_transfer, LossLog, Stage};
use serde::Serialize;

use crate::config::{seed_offset, AdaptMethod, ExperimentConfig, Representation};
use crate::plot::cmc_svg;

/// A manifest path, or a directory holding `manifest.csv`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.csv")
    } else {
        path.to_path_buf()
    }
}

fn load(path: &Path, section: &str) -> Result<Dataset> {
    let manifest = resolve_manifest(path);
    load_manifest(&manifest).with_context(|| format!("[{section}] loading {}", manifest.display()))
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating output_dir {}", cfg.output_dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, section: &str) -> Result<SiameseModel> {
    load_checkpoint(path).with_context(|| format!("[{section}] loading checkpoint {}", path.display()))
}

fn check_shape(model: &SiameseModel, ds: &Dataset, section: &str) -> Result<()> {
    ensure!(
        model.input_shape() == ds.image_shape(),
        "[{section}] checkpoint expects images of shape {:?}, dataset `{}` has {:?}",
        model.input_shape(),
        ds.name,
        ds.image_shape()
    );
    Ok(())
}

/// Untrained model seeded from the global seed plus the model offset.
pub fn fresh_model(cfg: &ExperimentConfig, shape: (usize, usize, usize), num_classes: usize) -> Result<SiameseModel> {
    let mc = cfg.model_config(shape, num_classes.max(1));
    SiameseModel::new(mc, &mut seeded_rng(cfg.derived_seed(None, seed_offset::MODEL), 0)).context("[model]")
}

/// Writes every `[[data.synthetic]]` dataset to `output_dir/<name>`.
/// Existing manifests are only replaced with `force`.
pub fn cmd_synth(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>> {
    ensure!(!cfg.data.synthetic.is_empty(), "[data] synthetic: no datasets configured");
    let mut written = Vec::new();
    for (i, s) in cfg.data.synthetic.iter().enumerate() {
        let dir = cfg.output_dir.join(&s.name);
        let manifest = dir.join("manifest.csv");
        if manifest.exists() && !force {
            bail!(
                "[data] synthetic `{}`: {} exists, pass --force to overwrite",
                s.name,
                manifest.display()
            );
        }
        if force && dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        let mut ds = generate_synthetic(&cfg.synthetic_spec(i)).with_context(|| format!("[data] synthetic `{}`", s.name))?;
        ds.name = s.name.clone();
        if s.unlabelled {
            ds = ds.unlabelled();
        }
        written.push(write_manifest(&ds, &dir).with_context(|| format!("writing {}", dir.display()))?);
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub iterations: usize,
}

/// Staged two-stepped transfer over `[data] train`, from a fresh model or
/// from `[train] resume`. The resolved configuration is saved next to the
/// checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutputs> {
    ensure!(!cfg.data.train.is_empty(), "[data] train: no stages configured");
    let tc = cfg.train_config();
    tc.validate().context("[train]")?;
    let mut stages = Vec::new();
    for (s, manifests) in cfg.data.train.iter().enumerate() {
        ensure!(!manifests.is_empty(), "[data] train: stage {s} lists no manifests");
        let datasets = manifests
            .iter()
            .map(|p| load(p, "data.train"))
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { datasets, config: tc });
    }
    let first = &stages[0].datasets;
    let shape = first[0].image_shape();
    let mut model = match &cfg.train.resume {
        Some(path) => load_model(path, "train.resume")?,
        None => {
            let classes: usize = first.iter().map(Dataset::num_identities).sum();
            fresh_model(cfg, shape, classes)?
        }
    };
    for stage in &stages {
        for ds in &stage.datasets {
            check_shape(&model, ds, "data.train")?;
        }
    }
    let mut log = LossLog::default();
    staged_transfer(&mut model, &stages, &mut |_, _, _, r| log.push(r)).context("[train]")?;
    ensure_output_dir(cfg)?;
    let checkpoint = cfg.checkpoint_path();
    save_checkpoint(&model, &checkpoint).with_context(|| format!("writing {}", checkpoint.display()))?;
    let loss_log = cfg.output_dir.join("loss.csv");
    log.save(&loss_log).with_context(|| format!("writing {}", loss_log.display()))?;
    let resolved = cfg.output_dir.join("config.toml");
    fs::write(&resolved, cfg.to_toml()?).with_context(|| format!("writing {}", resolved.display()))?;
    Ok(TrainOutputs {
        checkpoint,
        loss_log,
        iterations: model.iteration,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptSummary {
    pub method: AdaptMethod,
    pub lambda: f64,
    pub rounds: Vec<RoundSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub num_pseudo_classes: usize,
    pub label_agreement: Option<f64>,
    pub final_objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutputs {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub diagnostics: Vec<PathBuf>,
    pub summary: AdaptSummary,
}

/// Adapts the trained model to the unlabelled `[data] target`.
pub fn cmd_adapt(cfg: &ExperimentConfig) -> Result<AdaptOutputs> {
    let source = cfg.adapt.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let mut model = load_model(&source, "adapt.checkpoint")?;
    let target_path = cfg.data.target.as_ref().context("[data] target: not configured")?;
    let target = load(target_path, "data.target")?.unlabelled();
    check_shape(&model, &target, "data.target")?;
    let mut ac = cfg.adapt_config();
    if !cfg.adapt.lambda_candidates.is_empty() {
        ac.lambda = select_lambda(&model, &target, &cfg.adapt.lambda_candidates, &ac).context("[adapt] lambda_candidates")?;
    }
    let report = match cfg.adapt.method {
        AdaptMethod::CoTraining => co_train(&mut model, &target, &ac),
        AdaptMethod::SelfTraining => self_train(&mut model, &target, &ac),
    }
    .context("[adapt]")?;
    ensure_output_dir(cfg)?;
    let mut diagnostics = Vec::new();
    for r in report.rounds.iter().filter(|r| !r.solver.is_empty()) {
        let path = cfg.output_dir.join(format!("solver_round{}.csv", r.round));
        write_solver_history(&r.solver, fs::File::create(&path)?)?;
        diagnostics.push(path);
    }
    let summary = AdaptSummary {
        method: cfg.adapt.method,
        lambda: ac.lambda,
        rounds: report
            .rounds
            .iter()
            .map(|r| RoundSummary {
                round: r.round,
                num_pseudo_classes: r.num_pseudo_classes,
                label_agreement: r.label_agreement,
                final_objective: r.solver.last().map(|s| s.objective),
            })
            .collect(),
    };
    let report_path = cfg.output_dir.join("adapt_report.json");
    write_json(&report_path, &summary)?;
    let checkpoint = cfg.output_dir.join("adapted.json");
    save_checkpoint(&model, &checkpoint).with_context(|| format!("writing {}", checkpoint.display()))?;
    Ok(AdaptOutputs {
        checkpoint,
        report: report_path,
        diagnostics,
        summary,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub report: EvalReport,
    pub json: PathBuf,
    pub plot: Option<PathBuf>,
    pub features: Vec<PathBuf>,
}

/// `rank-k` lines for the standard ranks.
pub fn rank_table_text(report: &EvalReport) -> String {
    let mut s = String::new();
    for (rank, acc) in &report.rank_table {
        s.push_str(&format!("rank-{rank:<3} {:6.2}%\n", acc * 100.0));
    }
    s.push_str(&format!("mAP      {:6.2}%\n", report.map * 100.0));
    s
}

/// Scores the checkpoint on `[data] test`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutputs> {
    let path = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let model = load_model(&path, "eval.checkpoint")?;
    let test_path = cfg.data.test.as_ref().context("[data] test: not configured")?;
    let test = load(test_path, "data.test")?;
    check_shape(&model, &test, "data.test")?;
    let seed = cfg.eval_seed();
    let protocol = cfg.eval.protocol;
    let report = match cfg.eval.representation {
        Representation::Backbone => evaluate(&model, &test, protocol, seed),
        Representation::Subspace => evaluate_subspace(&model, &test, protocol, seed, &cfg.adapt_config()),
    }
    .context("[eval]")?;
    ensure_output_dir(cfg)?;
    let json = cfg.output_dir.join("eval.json");
    write_json(&json, &report)?;
    let plot = if cfg.eval.plot {
        let p = cfg.output_dir.join("cmc.svg");
        fs::write(&p, cmc_svg(&report.cmc, &format!("CMC, {protocol}")))?;
        Some(p)
    } else {
        None
    };
    let mut features = Vec::new();
    if cfg.eval.export_features {
        let split = make_probe_gallery(&test, protocol, seed).context("[eval]")?;
        for (name, records) in [("probe", &split.probes), ("gallery", &split.gallery)] {
            let fm = extract_features(&model, records)?;
            let p = cfg.output_dir.join(format!("{name}_features.f32"));
            let sidecar = fm.export(&p)?;
            features.push(p);
            features.push(sidecar);
        }
    }
    Ok(EvalOutputs {
        report,
        json,
        plot,
        features,
    })
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// One 8-bit grayscale PNG per channel of `layer` per image, each scaled by
/// its own maximum so an all-zero map stays black.
pub fn cmd_dump_responses(cfg: &ExperimentConfig, layer: &str, images: &[String], limit: usize) -> Result<Vec<PathBuf>> {
    let path = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let model = load_model(&path, "eval.checkpoint")?;
    let test_path = cfg.data.test.as_ref().context("[data] test: not configured")?;
    let ds = load(test_path, "data.test")?;
    check_shape(&model, &ds, "data.test")?;
    let by_id: BTreeMap<&str, usize> = ds.records().iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
    let chosen: Vec<usize> = if images.is_empty() {
        (0..ds.len().min(limit)).collect()
    } else {
        images
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().with_context(|| format!("[data] test: no image `{id}`")))
            .collect::<Result<_>>()?
    };
    let dir = cfg.output_dir.join("responses");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for i in chosen {
        let record = &ds.records()[i];
        let response = model
            .backbone()
            .layer_response(&model.params, &record.pixels, layer)
            .with_context(|| format!("layer `{layer}`"))?;
        let (h, w, c) = response.shape();
        for ch in 0..c {
            let values: Vec<f64> = (0..h * w).map(|p| response.get(p / w, p % w, ch)).collect();
            let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let pixels: Vec<u8> = values
                .iter()
                .map(|v| if peak > 0.0 { (v.abs() / peak * 255.0).round() as u8 } else { 0 })
                .collect();
            let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
            let p = dir.join(format!("{}_{layer}_c{ch:02}.png", sanitize(&record.image_id)));
            img.save(&p).with_context(|| format!("writing {}", p.display()))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub probes: usize,
    pub gallery: usize,
    /// Embed every image once, then rank by distance.
    pub sir_seconds: f64,
    /// Run the backbone on both images and the verification head for
    /// every probe-gallery pair.
    pub cir_seconds: f64,
    pub speedup: f64,
}

/// Times single-image against cross-image scoring on `[data] test` (or a
/// synthetic gallery). Timings vary between runs.
pub fn cmd_bench_sir_cir(cfg: &ExperimentConfig, probes: usize, gallery: usize) -> Result<BenchReport> {
    let path = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let ds = match &cfg.data.test {
        Some(p) => load(p, "data.test")?,
        None => generate_synthetic(&reid_core::data::SyntheticSpec::new(probes + gallery, 1, 1, cfg.eval_seed()))?,
    };
    let model = if path.exists() {
        load_model(&path, "eval.checkpoint")?
    } else {
        fresh_model(cfg, ds.image_shape(), 2)?
    };
    check_shape(&model, &ds, "data.test")?;
    ensure!(ds.len() >= 2, "[data] test: need at least two images");
    let probes = probes.min(ds.len() - 1).max(1);
    let gallery = gallery.min(ds.len() - probes).max(1);
    let (p_recs, g_recs) = ds.records().split_at(probes);
    let g_recs = &g_recs[..gallery];

    let start = Instant::now();
    let g_feats = extract_features(&model, g_recs)?;
    let p_feats = extract_features(&model, p_recs)?;
    for row in &p_feats.rows {
        std::hint::black_box(rank_gallery(row, &g_feats)?);
    }
    let sir_seconds = start.elapsed().as_secs_f64();

    let head = model.verification_heads().remove(0);
    let start = Instant::now();
    for p in p_recs {
        let mut scores = Vec::with_capacity(g_recs.len());
        for g in g_recs {
            let a = model.extract(&p.pixels)?;
            let b = model.extract(&g.pixels)?;
            let logits = verification_logits(&head, &model.params, &a, &b)?;
            scores.push(logits[1] - logits[0]);
        }
        std::hint::black_box(scores);
    }
    let cir_seconds = start.elapsed().as_secs_f64();
    let report = BenchReport {
        probes,
        gallery,
        sir_seconds,
        cir_seconds,
        speedup: cir_seconds / sir_seconds.max(f64::MIN_POSITIVE),
    };
    ensure_output_dir(cfg)?;
    write_json(&cfg.output_dir.join("bench.json"), &report)?;
    Ok(report)
}
