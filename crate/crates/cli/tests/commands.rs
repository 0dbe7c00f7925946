use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use reid_cli::commands::{
    cmd_adapt, cmd_dump_responses, cmd_eval, cmd_synth, cmd_train, fresh_model, rank_table_text, resolve_manifest,
};
use reid_cli::config::ExperimentConfig;
use reid_core::data::{load_manifest, write_manifest, Dataset, Image, ImageRecord, Split};
use reid_core::eval::RANKS;
use reid_core::model::{load_checkpoint, save_checkpoint};
use sha2::{Digest, Sha256};

fn config(dir: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 3
output_dir = "{out}"

[[data.synthetic]]
name = "source"
identities = 6
images_per_camera = 2
image = [8, 4, 3]

[[data.synthetic]]
name = "target"
identities = 6
images_per_camera = 2
image = [8, 4, 3]
first_identity = 100
unlabelled = true

[data]
train = [["{out}/source"]]
target = "{out}/target"
test = "{out}/source"

[model]
feature_dim = 8

[train]
step1_iters = 3
step2_iters = 6
{extra}
"#,
        out = dir.join("out").display()
    );
    ExperimentConfig::from_toml(&text, &[]).unwrap()
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn synth_is_deterministic_and_creates_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cmd_synth(&config(a.path(), ""), false).unwrap();
    let second = cmd_synth(&config(b.path(), ""), false).unwrap();
    assert_eq!(first.len(), 2);
    for (x, y) in first.iter().zip(&second) {
        assert_eq!(digest(x), digest(y));
    }
    assert!(!load_manifest(&first[1]).unwrap().is_labelled());
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let written = cmd_synth(&cfg, false).unwrap();
    let err = cmd_synth(&cfg, false).unwrap_err().to_string();
    assert!(err.contains("[data] synthetic `source`") && err.contains("--force"), "{err}");
    let again = cmd_synth(&cfg, true).unwrap();
    assert_eq!(digest(&written[0]), digest(&again[0]));
}

#[test]
fn zero_iterations_keep_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.train.step1_iters = 0;
    cfg.train.step2_iters = 0;
    cmd_synth(&cfg, false).unwrap();
    let out = cmd_train(&cfg).unwrap();
    let source = load_manifest(&resolve_manifest(&cfg.data.train[0][0])).unwrap();
    let init = fresh_model(&cfg, source.image_shape(), source.num_identities()).unwrap();
    assert_eq!(load_checkpoint(&out.checkpoint).unwrap().params.hash(), init.params.hash());
    assert_eq!(out.iterations, 0);
}

#[test]
fn resumed_training_continues_iteration_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    cmd_synth(&cfg, false).unwrap();
    let first = cmd_train(&cfg).unwrap();
    assert_eq!(first.iterations, 9);
    let kept = dir.path().join("first.json");
    fs::copy(&first.checkpoint, &kept).unwrap();
    let mut resumed = cfg.clone();
    resumed.train.resume = Some(kept);
    let second = cmd_train(&resumed).unwrap();
    assert_eq!(second.iterations, 18);
    let log = fs::read_to_string(&second.loss_log).unwrap();
    let iters: Vec<usize> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (9..18).collect::<Vec<_>>());
    let resolved = fs::read_to_string(dir.path().join("out/config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&resolved, &[]).unwrap(), resumed);
}

#[test]
fn training_errors_name_their_section() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.data.train = vec![vec![dir.path().join("missing")]];
    let err = format!("{:#}", cmd_train(&cfg).unwrap_err());
    assert!(err.contains("[data.train]") && err.contains("missing"), "{err}");
    cfg.data.train.clear();
    assert!(cmd_train(&cfg).unwrap_err().to_string().contains("[data] train"));
}

/// Four identities, each seen twice as the exact same flat colour.
fn identical_views(dir: &Path) -> PathBuf {
    let records = (0..4u32)
        .flat_map(|p| {
            (0..2u32).map(move |c| {
                let value = 0.2 * f64::from(p + 1);
                let data = (0..8 * 4 * 3).map(|i| if i % 3 == (p as usize % 3) { value } else { 0.1 }).collect();
                ImageRecord {
                    image_id: format!("p{p}_c{c}"),
                    person_id: Some(p),
                    camera_id: c,
                    pixels: Arc::new(Image::from_vec(8, 4, 3, data).unwrap()),
                    split: Split::Gallery,
                }
            })
        })
        .collect();
    let ds = Dataset::new("identical", (8, 4, 3), records).unwrap();
    write_manifest(&ds, &dir.join("identical")).unwrap()
}

#[test]
fn identical_views_give_a_perfect_rank_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cmd_synth(&cfg, false).unwrap();
    cmd_train(&cfg).unwrap();
    cfg.data.test = Some(identical_views(dir.path()));
    let out = cmd_eval(&cfg).unwrap();
    assert!(out.report.rank_table.values().all(|&v| v == 1.0), "{:?}", out.report.rank_table);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out.json).unwrap()).unwrap();
    for key in ["cmc", "rank_table", "map", "protocol"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["protocol"], "single_shot");
    for &r in &RANKS {
        let idx = r.min(out.report.cmc.len()) - 1;
        assert_eq!(out.report.rank_table[&r], out.report.cmc[idx]);
    }
    assert!(fs::read_to_string(out.plot.unwrap()).unwrap().starts_with("<svg"));
    assert!(rank_table_text(&out.report).starts_with("rank-1 "));
}

#[test]
fn evaluation_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cmd_synth(&cfg, false).unwrap();
    let model = fresh_model(&cfg, (16, 8, 3), 2).unwrap();
    let path = dir.path().join("other.json");
    save_checkpoint(&model, &path).unwrap();
    cfg.eval.checkpoint = Some(path);
    let err = cmd_eval(&cfg).unwrap_err().to_string();
    assert!(err.contains("[data.test]") && err.contains("(16, 8, 3)"), "{err}");
}

#[test]
fn exported_features_have_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.eval.export_features = true;
    cfg.eval.plot = false;
    cmd_synth(&cfg, false).unwrap();
    cmd_train(&cfg).unwrap();
    let out = cmd_eval(&cfg).unwrap();
    assert!(out.plot.is_none());
    let names: Vec<String> = out.features.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(
        names,
        ["probe_features.f32", "probe_features.f32.ids.csv", "gallery_features.f32", "gallery_features.f32.ids.csv"]
    );
}

#[test]
fn adapt_writes_report_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[adapt]\nrounds = 2\nsolver_iters = 10\n");
    cmd_synth(&cfg, false).unwrap();
    cmd_train(&cfg).unwrap();
    let out = cmd_adapt(&cfg).unwrap();
    assert_eq!(out.summary.rounds.len(), 2);
    assert_eq!(out.diagnostics.len(), 2);
    assert!(out.summary.rounds[0].label_agreement.is_none());
    assert!(out.summary.rounds[1].label_agreement.is_some());
    assert!(load_checkpoint(&out.checkpoint).is_ok());
    let header = fs::read_to_string(&out.diagnostics[0]).unwrap();
    assert!(header.starts_with("iter,objective,recon_term,graph_term"));
}

#[test]
fn adapt_without_target_names_the_section() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cmd_synth(&cfg, false).unwrap();
    cmd_train(&cfg).unwrap();
    cfg.data.target = None;
    assert!(cmd_adapt(&cfg).unwrap_err().to_string().contains("[data] target"));
}

#[test]
fn response_maps_count_and_zero_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cmd_synth(&cfg, false).unwrap();
    let written = cmd_dump_responses(&cfg, "conv1", &[], 3).unwrap_err();
    assert!(format!("{written:#}").contains("eval.checkpoint"));

    let mut model = fresh_model(&cfg, (8, 4, 3), 6).unwrap();
    model.params.get_mut("backbone.conv1.bias").iter_mut().for_each(|b| *b = 0.0);
    let ckpt = dir.path().join("zero_bias.json");
    save_checkpoint(&model, &ckpt).unwrap();
    let zero = ImageRecord {
        image_id: "black".into(),
        person_id: Some(0),
        camera_id: 0,
        pixels: Arc::new(Image::zeros(8, 4, 3)),
        split: Split::Probe,
    };
    let manifest = write_manifest(&Dataset::new("zero", (8, 4, 3), vec![zero]).unwrap(), &dir.path().join("zero")).unwrap();
    cfg.eval.checkpoint = Some(ckpt);
    cfg.data.test = Some(manifest);
    let files = cmd_dump_responses(&cfg, "conv1", &["black".to_string()], 4).unwrap();
    assert_eq!(files.len(), cfg.model.channels[0]);
    for f in &files {
        let img = image::open(f).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0));
    }

    cfg.data.test = Some(dir.path().join("out/source"));
    let files = cmd_dump_responses(&cfg, "conv2", &[], 3).unwrap();
    assert_eq!(files.len(), 3 * cfg.model.channels[1]);
    let err = format!("{:#}", cmd_dump_responses(&cfg, "conv9", &[], 1).unwrap_err());
    assert!(err.contains("conv9"), "{err}");
    let err = cmd_dump_responses(&cfg, "conv1", &["nobody".into()], 1).unwrap_err().to_string();
    assert!(err.contains("nobody"), "{err}");
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_reid");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["synth", "train", "adapt", "eval", "dump-responses", "bench-sir-cir"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    fs::write(dir.path().join("bad.toml"), "[train]\nstep3_iters = 1\n").unwrap();
    let out = Command::new(bin)
        .current_dir(dir.path())
        .args(["--config", "bad.toml", "train"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step3_iters") && err.contains("bad.toml"), "{err}");
}
