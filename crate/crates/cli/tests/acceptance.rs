//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero when any criterion fails. Positional arguments select criteria
//! by substring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use reid_core::adapt::{build_cross_view_graph, init_dictionary, laplacian, objective_terms, solve_from, trace_penalty};
use reid_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use reid_core::eval::{compute_cmc, compute_map};
use reid_core::experiments;
use reid_core::model::{ModelConfig, SiameseModel, BACKBONE_GROUP};
use reid_core::sampler::{generate_pairs, sample_batch, BatchSampler, Pair};
use reid_core::train::{finetune, seeded_rng, train_step, FinetuneMode, FreezePlan, Phase, Sgd, StepInput, TrainConfig};
use sha2::{Digest, Sha256};

/// Chi-square critical value for one degree of freedom at alpha = 0.01.
const CHI2_CRIT_1DOF: f64 = 6.635;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

fn within(limit: Duration, start: Instant, mut o: Outcome) -> Outcome {
    let took = start.elapsed();
    if took > limit {
        o.passed = false;
        let _ = write!(o.detail, "; took {took:.1?}, limit {limit:?}");
    } else {
        let _ = write!(o.detail, "; {took:.1?}");
    }
    o
}

fn brute_pairs(labels: &[u32]) -> (BTreeSet<Pair>, BTreeSet<Pair>) {
    let mut pos = BTreeSet::new();
    let mut neg = BTreeSet::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                pos.insert((i, j));
            } else {
                neg.insert((i, j));
            }
        }
    }
    (pos, neg)
}

fn pair_counts() -> Outcome {
    let start = Instant::now();
    let ds = generate_synthetic(&SyntheticSpec::new(40, 1, 2, 1).with_image_size(2, 2, 1)).unwrap();
    let batch = sample_batch(&ds, 32, 2, seeded_rng(0, 0)).unwrap();
    let (neg, pos) = (batch.negative_pairs.len(), batch.positive_pairs.len());
    let mut failures = Vec::new();
    let mut rng = seeded_rng(1, 0);
    for k in 1..=5usize {
        for m in 1..=4usize {
            let labels: Vec<u32> = (0..k as u32).flat_map(|p| std::iter::repeat_n(p, m)).collect();
            let (bp, bn) = brute_pairs(&labels);
            match generate_pairs(&labels, &mut rng) {
                Err(_) if bp.is_empty() => {}
                Err(e) => failures.push(format!("K={k} M={m}: {e}")),
                Ok(set) => {
                    let unique: BTreeSet<Pair> = set.positives.iter().copied().collect();
                    let negatives: BTreeSet<Pair> = set.negatives.iter().copied().collect();
                    let want_pos = if bn.is_empty() { bp.len() } else { bp.len().max(bn.len()) };
                    if unique != bp
                        || negatives != bn
                        || set.negatives.len() != bn.len()
                        || set.positives.len() != want_pos
                        || set.unique_positives != bp.len()
                    {
                        failures.push(format!("K={k} M={m}"));
                    }
                }
            }
        }
    }
    let ok = neg == 3968 && pos == 3968 && failures.is_empty();
    within(
        Duration::from_secs(5),
        start,
        Outcome::new(
            ok,
            format!("K=32 M=2 gives {neg} negatives and {pos} positives; enumeration mismatches {failures:?}"),
        ),
    )
}

fn small_model(aux: usize, classes: usize, seed: u64) -> SiameseModel {
    let mut cfg = ModelConfig::toy((8, 4, 3), 6, classes);
    cfg.loss.num_aux_heads = aux;
    SiameseModel::new(cfg, &mut seeded_rng(seed, 0)).unwrap()
}

fn small_data(ids: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(ids, 2, 2, seed).with_image_size(8, 4, 3).with_noise(0.1)).unwrap()
}

/// Verification pairs kept greedily so that no image appears twice.
fn disjoint_pairs(pairs: &[Pair]) -> Vec<Pair> {
    let mut used = BTreeSet::new();
    pairs
        .iter()
        .copied()
        .filter(|&(i, j)| {
            let fresh = !used.contains(&i) && !used.contains(&j);
            if fresh {
                used.insert(i);
                used.insert(j);
            }
            fresh
        })
        .collect()
}

fn dropout_consistency() -> Outcome {
    let start = Instant::now();
    let ds = small_data(8, 3);
    let mut model = small_model(2, ds.num_identities(), 3);
    let classes = ds.class_index();
    let mut sampler = BatchSampler::new(&ds, 4, 2, seeded_rng(3, 1)).unwrap();
    let plan = FreezePlan::all_trainable(&model);
    let mut opt = Sgd::new(0.9, 5e-4);
    let mut rng = seeded_rng(3, 2);
    let mut violations = 0usize;
    // table[first kept][second kept]
    let mut table = [[0f64; 2]; 2];
    for _ in 0..1000 {
        let batch = sampler.sample().unwrap();
        let input = StepInput {
            dataset: &ds,
            batch: &batch,
            classes: &classes,
        };
        let record = train_step(&mut model, &input, &plan, 1e-3, &mut opt, &mut rng).unwrap();
        let pairs: Vec<Pair> = batch.labelled_pairs().map(|(p, _)| p).collect();
        for point in &record.masks.points {
            violations += (0..pairs.len())
                .filter(|p| point.verification[2 * p] != point.verification[2 * p + 1])
                .count();
            for (i, j) in disjoint_pairs(&pairs) {
                for (&a, &b) in point.classification[i].iter().zip(&point.classification[j]) {
                    table[usize::from(a)][usize::from(b)] += 1.0;
                }
            }
        }
    }
    let n: f64 = table.iter().flatten().sum();
    let mut chi2 = 0.0;
    for row in &table {
        for (b, &observed) in row.iter().enumerate() {
            let expected = row.iter().sum::<f64>() * (table[0][b] + table[1][b]) / n;
            chi2 += (observed - expected).powi(2) / expected;
        }
    }
    let ok = violations == 0 && chi2 < CHI2_CRIT_1DOF;
    within(
        Duration::from_secs(60),
        start,
        Outcome::new(
            ok,
            format!(
                "1000 steps, {violations} paired-mask violations; classification chi-square {chi2:.3} over {n} unit pairs (critical {CHI2_CRIT_1DOF})"
            ),
        ),
    )
}

fn freeze_integrity() -> Outcome {
    let start = Instant::now();
    let ds = small_data(10, 4);
    let mut model = small_model(2, 3, 4);
    let frozen: Vec<String> = model.groups().difference(&model.classifier_groups()).cloned().collect();
    let hashes = |m: &SiameseModel| -> BTreeMap<String, String> {
        frozen.iter().map(|g| (g.clone(), m.params.group_hash(g).unwrap())).collect()
    };
    let before = hashes(&model);
    let cfg = TrainConfig {
        step1_iters: 50,
        step2_iters: 50,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut step1_changes = 0usize;
    let mut step1_steps = 0usize;
    let mut last = None;
    finetune(&mut model, &ds, &cfg, FinetuneMode::TwoStepped, &mut |phase, m, _| {
        let now = hashes(m);
        match phase {
            Phase::HeadOnly => {
                step1_steps += 1;
                step1_changes += now.iter().filter(|(g, h)| before[*g] != **h).count();
            }
            Phase::Full => last = Some(now),
        }
    })
    .unwrap();
    let end = last.unwrap_or_default();
    let unchanged: Vec<&String> = frozen.iter().filter(|g| end.get(*g) == before.get(*g)).collect();
    let ok = step1_steps == 50 && step1_changes == 0 && unchanged.is_empty();
    within(
        Duration::from_secs(120),
        start,
        Outcome::new(
            ok,
            format!(
                "{} non-head groups incl. {BACKBONE_GROUP}: {step1_changes} hash changes over {step1_steps} step-1 iterations, unchanged after step 2 {unchanged:?}",
                frozen.len()
            ),
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let ds = small_data(6, 5);
    let model = small_model(2, ds.num_identities(), 5);
    let batch = sample_batch(&ds, 3, 2, seeded_rng(5, 1)).unwrap();
    let class_of = ds.class_index();
    let classes: Vec<usize> = batch.labels.iter().map(|p| class_of[p]).collect();
    let images: Vec<_> = batch.images.iter().map(|&i| ds.records()[i].pixels.as_ref()).collect();
    let pairs: Vec<_> = batch.labelled_pairs().collect();
    let pair_list: Vec<Pair> = pairs.iter().map(|&(p, _)| p).collect();
    let mut rng = seeded_rng(5, 2);
    let masks = model.draw_masks(images.len(), &pair_list, &mut rng).unwrap();
    let loss = |m: &SiameseModel| m.batch_loss(&images, Some(&classes), &pairs, &masks, false).unwrap().0.total;
    let (_, grads) = model.batch_loss(&images, Some(&classes), &pairs, &masks, false).unwrap();
    let coords = model.params.coordinates();
    let picked: Vec<_> = coords.choose_multiple(&mut rng, 100).cloned().collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, off) in &picked {
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(name)[*off] += delta;
            loss(&m)
        };
        // fourth-order central stencil
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let analytic = grads.get(name)[*off];
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{off}]");
        }
    }
    within(
        Duration::from_secs(120),
        start,
        Outcome::new(
            worst <= 1e-4 && picked.len() == 100,
            format!("{} coordinates, worst relative error {worst:.2e} at {worst_at}", picked.len()),
        ),
    )
}

fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn pairwise_penalty(z: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..z.ncols() {
        for j in 0..z.ncols() {
            total += w[(i, j)] * (z.column(i) - z.column(j)).norm_squared();
        }
    }
    total
}

fn project_columns(mut d: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in d.column_iter_mut() {
        let n = col.norm();
        if n > 1.0 {
            col /= n;
        }
    }
    d
}

/// The same alternation with each convex block minimised by accelerated
/// projected gradient steps of size 1 / Lipschitz constant.
fn projected_gradient_oracle(y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64, d0: DMatrix<f64>, outer: usize) -> f64 {
    let l = laplacian(w);
    let l_max = SymmetricEigen::new(l.clone()).eigenvalues.amax();
    let mut d = d0;
    let mut z = DMatrix::zeros(d.ncols(), y.ncols());
    for _ in 0..outer {
        let lip_z = 2.0 * (SymmetricEigen::new(d.tr_mul(&d)).eigenvalues.amax() + 2.0 * lambda * l_max);
        let (mut v, mut t) = (z.clone(), 1.0f64);
        for _ in 0..20_000 {
            let grad = -2.0 * d.tr_mul(&(y - &d * &v)) + 4.0 * lambda * &v * &l;
            let next = &v - grad / lip_z;
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let moved = (&next - &z).amax();
            v = &next + (&next - &z) * ((t - 1.0) / t_next);
            z = next;
            t = t_next;
            if moved < 1e-10 {
                break;
            }
        }
        let lip_d = 2.0 * SymmetricEigen::new(&z * z.transpose()).eigenvalues.amax().max(1e-12);
        let (mut v, mut t) = (d.clone(), 1.0f64);
        for _ in 0..20_000 {
            let grad = -2.0 * (y - &v * &z) * z.transpose();
            let next = project_columns(&v - grad / lip_d);
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let moved = (&next - &d).amax();
            v = &next + (&next - &d) * ((t - 1.0) / t_next);
            d = next;
            t = t_next;
            if moved < 1e-10 {
                break;
            }
        }
    }
    (y - &d * &z).norm_squared() + lambda * pairwise_penalty(&z, w)
}

fn solver_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(6, 0);
    let mut rises = 0usize;
    let mut norm_violations = 0usize;
    let mut worst_gap = 0.0f64;
    let mut worst_identity = 0.0f64;
    for instance in 0..50u64 {
        let rows = rng.random_range(3..9);
        let m = rng.random_range(6..14);
        let k = rng.random_range(2..=rows.min(m));
        let lambda = rng.random_range(0.01..1.0);
        let y = gaussian(rows, m, &mut rng);
        let views: Vec<u32> = (0..m).map(|i| (i % 2) as u32).collect();
        let w = build_cross_view_graph(&gaussian(3, m, &mut rng), &views, 2).unwrap();
        let d0 = init_dictionary(&y, k, instance);
        let model = solve_from(&y, &w, lambda, d0.clone(), 200, 1e-6).unwrap();
        rises += model
            .history
            .windows(2)
            .filter(|p| p[1].objective > p[0].objective * (1.0 + 1e-9) + 1e-12)
            .count();
        norm_violations += model.dictionary.column_iter().filter(|c| c.norm() > 1.0 + 1e-9).count();
        let outer = model.history.last().map_or(1, |r| r.iter + 1);
        let oracle = projected_gradient_oracle(&y, &w, lambda, d0, outer);
        worst_gap = worst_gap.max((model.objective() - oracle) / oracle);
        let l = laplacian(&w);
        let (_, _, graph) = objective_terms(&y, &model.dictionary, &model.codes, &l, lambda);
        let pairwise = pairwise_penalty(&model.codes, &w);
        let trace = trace_penalty(&model.codes, &l);
        worst_identity = worst_identity.max((pairwise - trace).abs()).max((graph - pairwise).abs());
    }
    let ok = rises == 0 && norm_violations == 0 && worst_gap <= 0.01 && worst_identity <= 1e-10;
    within(
        Duration::from_secs(120),
        start,
        Outcome::new(
            ok,
            format!(
                "50 instances: {rises} objective rises, {norm_violations} atoms outside the unit ball, worst excess over oracle {:.3}%, pairwise/trace gap {worst_identity:.1e}",
                worst_gap * 100.0
            ),
        ),
    )
}

/// Fraction of matched probes with a correct gallery entry in the top `k`.
fn brute_cmc(rankings: &[Vec<usize>], probes: &[u32], gallery: &[u32]) -> Vec<f64> {
    let matched: Vec<usize> = (0..probes.len())
        .filter(|&q| rankings[q].iter().any(|&g| gallery[g] == probes[q]))
        .collect();
    (1..=gallery.len())
        .map(|k| {
            let hits = matched
                .iter()
                .filter(|&&q| rankings[q].iter().take(k).any(|&g| gallery[g] == probes[q]))
                .count();
            hits as f64 / matched.len() as f64
        })
        .collect()
}

/// AP as the mean of `i / rank_i`, where `rank_i` is the position of the
/// `i`-th correct match.
fn brute_ap(ranking: &[usize], probe: u32, gallery: &[u32]) -> f64 {
    let ranks: Vec<usize> = ranking
        .iter()
        .enumerate()
        .filter(|(_, &g)| gallery[g] == probe)
        .map(|(pos, _)| pos + 1)
        .collect();
    ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(7, 0);
    let mut worst = 0.0f64;
    let instances = 2000;
    for _ in 0..instances {
        let g = rng.random_range(1..=50usize);
        let ids = rng.random_range(1..=g.min(10) as u32);
        let gallery: Vec<u32> = (0..g).map(|_| rng.random_range(0..ids)).collect();
        let present: Vec<u32> = gallery.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let q = rng.random_range(1..=8usize);
        let probes: Vec<u32> = (0..q).map(|_| *present.choose(&mut rng).unwrap()).collect();
        let rankings: Vec<Vec<usize>> = (0..q)
            .map(|_| {
                let mut r: Vec<usize> = (0..g).collect();
                r.shuffle(&mut rng);
                r
            })
            .collect();
        let cmc = compute_cmc(&rankings, &probes, &gallery).unwrap();
        for (a, b) in cmc.curve.iter().zip(brute_cmc(&rankings, &probes, &gallery)) {
            worst = worst.max((a - b).abs());
        }
        let map = compute_map(&rankings, &probes, &gallery).unwrap();
        let brute = (0..q).map(|i| brute_ap(&rankings[i], probes[i], &gallery)).sum::<f64>() / q as f64;
        worst = worst.max((map - brute).abs());
    }
    let hand = compute_map(&[vec![0, 1, 2, 3]], &[4], &[4, 1, 4, 2]).unwrap();
    let ok = worst <= 1e-9 && (hand - 0.8333).abs() < 1e-4;
    within(
        Duration::from_secs(30),
        start,
        Outcome::new(
            ok,
            format!("{instances} random instances, worst deviation {worst:.1e}; hits at ranks 1 and 3 give AP {hand:.4}"),
        ),
    )
}

fn supervised_learning() -> Outcome {
    let start = Instant::now();
    let r = experiments::separable(0, 2000).unwrap();
    within(
        Duration::from_secs(600),
        start,
        Outcome::new(
            r.rank1 >= 0.95,
            format!("rank-1 {:.1}% after {} iterations", r.rank1 * 100.0, r.iterations),
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.1}", x * 100.0)).collect::<Vec<_>>().join("/")
}

fn loss_combination_direction() -> Outcome {
    let start = Instant::now();
    let runs: Vec<_> = SEEDS.iter().map(|&s| experiments::loss_combination(s).unwrap()).collect();
    let both: Vec<f64> = runs.iter().map(|r| r.combined).collect();
    let sid: Vec<f64> = runs.iter().map(|r| r.identification_only).collect();
    let pv: Vec<f64> = runs.iter().map(|r| r.verification_only).collect();
    let best_single = mean(&sid).max(mean(&pv));
    let ok = mean(&both) >= best_single - 0.01 && mean(&both) > best_single;
    within(
        Duration::from_secs(45 * 60),
        start,
        Outcome::new(
            ok,
            format!(
                "mean rank-1 SID+PV {:.1}%, SID {:.1}%, PV {:.1}% (per seed {} | {} | {})",
                mean(&both) * 100.0,
                mean(&sid) * 100.0,
                mean(&pv) * 100.0,
                pct(&both),
                pct(&sid),
                pct(&pv)
            ),
        ),
    )
}

fn finetune_direction() -> Outcome {
    let start = Instant::now();
    let runs: Vec<_> = SEEDS.iter().map(|&s| experiments::finetune_modes(s).unwrap()).collect();
    let two: Vec<f64> = runs.iter().map(|r| r.two_stepped).collect();
    let one: Vec<f64> = runs.iter().map(|r| r.one_stepped).collect();
    within(
        Duration::from_secs(30 * 60),
        start,
        Outcome::new(
            mean(&two) >= mean(&one),
            format!(
                "mean rank-1 two-stepped {:.1}%, one-stepped {:.1}% (per seed {} | {})",
                mean(&two) * 100.0,
                mean(&one) * 100.0,
                pct(&two),
                pct(&one)
            ),
        ),
    )
}

fn unsupervised_direction() -> Outcome {
    let start = Instant::now();
    let runs: Vec<_> = SEEDS.iter().map(|&s| experiments::unsupervised(s).unwrap()).collect();
    let co: Vec<f64> = runs.iter().map(|r| r.co_training).collect();
    let st: Vec<f64> = runs.iter().map(|r| r.self_training).collect();
    let sub: Vec<f64> = runs.iter().map(|r| r.subspace).collect();
    let src: Vec<f64> = runs.iter().map(|r| r.source_only).collect();
    let drifted = runs.iter().filter(|r| r.co_training < 0.8 * r.source_only).count();
    let ok = mean(&co) >= mean(&st) && mean(&co) >= mean(&sub) && mean(&co) >= mean(&src) && drifted == 0;
    within(
        Duration::from_secs(60 * 60),
        start,
        Outcome::new(
            ok,
            format!(
                "mean rank-1 co-training {:.1}%, self-training {:.1}%, subspace {:.1}%, source-only {:.1}%; {drifted} seeds below 0.8x source-only (co-training per seed {})",
                mean(&co) * 100.0,
                mean(&st) * 100.0,
                mean(&sub) * 100.0,
                mean(&src) * 100.0,
                pct(&co)
            ),
        ),
    )
}

const PIPELINE: &str = r#"
seed = 11
output_dir = "out"

[[data.synthetic]]
name = "source"
identities = 8
images_per_camera = 2
image = [8, 4, 3]

[[data.synthetic]]
name = "target"
identities = 8
images_per_camera = 2
image = [8, 4, 3]
first_identity = 100
unlabelled = true

[[data.synthetic]]
name = "test"
identities = 8
images_per_camera = 1
image = [8, 4, 3]
first_identity = 200

[data]
train = [["out/source"]]
target = "out/target"
test = "out/test"

[model]
feature_dim = 8

[train]
step1_iters = 5
step2_iters = 20

[eval]
export_features = true

[adapt]
rounds = 2
solver_iters = 20
"#;

/// Digest of every file under `dir` keyed by relative path, timing reports
/// excluded.
fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "bench.json") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn run_pipeline(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    std::fs::write(dir.join("exp.toml"), PIPELINE).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 7] = [
        &["synth"],
        &["train"],
        &["adapt"],
        &["eval"],
        &["--set", "eval.representation=\"subspace\"", "--set", "output_dir=\"out/subspace\"", "--set", "eval.checkpoint=\"out/adapted.json\"", "eval"],
        &["dump-responses", "--layer", "conv1", "--limit", "2"],
        &["bench-sir-cir", "--probes", "4", "--gallery", "8"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_reid"))
            .current_dir(dir)
            .args(["--config", "exp.toml"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(tree_hashes(&dir.join("out")))
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = match (run_pipeline(a.path()), run_pipeline(b.path())) {
        (Ok(first), Ok(second)) => {
            let keys: BTreeSet<&String> = first.keys().chain(second.keys()).collect();
            let differing: Vec<&String> = keys.into_iter().filter(|k| first.get(*k) != second.get(*k)).collect();
            Outcome::new(
                differing.is_empty() && !first.is_empty(),
                format!("{} artifacts from every command hashed across two runs, differing {differing:?}", first.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    };
    within(Duration::from_secs(600), start, o)
}

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("pair-count exactness", pair_counts),
        ("pairwise-consistent dropout", dropout_consistency),
        ("two-stepped freeze integrity", freeze_integrity),
        ("gradient correctness", gradient_check),
        ("solver correctness", solver_correctness),
        ("metric oracles", metric_oracles),
        ("supervised desk-scale learning", supervised_learning),
        ("loss-combination direction", loss_combination_direction),
        ("two-stepped vs one-stepped direction", finetune_direction),
        ("unsupervised co-training direction", unsupervised_direction),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = std::panic::catch_unwind(check).unwrap_or_else(|_| Outcome::new(false, "panicked"));
        failed += usize::from(!o.passed);
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {name:<38} {verdict}  {}", i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
