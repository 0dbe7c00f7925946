use reid_core::adapt::*;
use reid_core::data::{generate_synthetic, Dataset, Image, Protocol, SyntheticSpec};
use reid_core::eval::{evaluate, FeatureExtractor};
use reid_core::model::{ModelConfig, SiameseModel};
use reid_core::train::{seeded_rng, TrainConfig};
use reid_core::{Error, Result};

/// Raw pixels as features.
struct Pixels((usize, usize, usize));

impl FeatureExtractor for Pixels {
    fn extractor_id(&self) -> String {
        "pixels".into()
    }
    fn input_shape(&self) -> (usize, usize, usize) {
        self.0
    }
    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(image.data().to_vec())
    }
}

fn two_view(ids: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(ids, 1, 2, seed)).unwrap()
}

fn views(ds: &Dataset) -> Vec<u32> {
    ds.records().iter().map(|r| r.camera_id).collect()
}

fn ids(ds: &Dataset) -> Vec<String> {
    ds.records().iter().map(|r| r.image_id.clone()).collect()
}

fn person(ds: &Dataset, i: usize) -> Option<u32> {
    ds.records()[i].person_id
}

fn small_model(ds: &Dataset, classes: usize) -> SiameseModel {
    SiameseModel::new(ModelConfig::toy(ds.image_shape(), 16, classes), &mut seeded_rng(1, 9)).unwrap()
}

#[test]
fn noise_free_soft_labels_follow_identity() {
    for seed in [7, 8, 9] {
        let ds = two_view(10, seed);
        let y = feature_columns(&Pixels(ds.image_shape()), &ds).unwrap();
        let labels = soft_labels(&y, &ids(&ds), &views(&ds), 0).unwrap();
        labels.check(&views(&ds)).unwrap();
        let anchors: Vec<usize> = (0..ds.len()).filter(|&i| ds.records()[i].camera_id == 0).collect();
        for i in (0..ds.len()).filter(|&i| ds.records()[i].camera_id == 1) {
            let a = anchors[labels.labels[i] as usize];
            assert_eq!(person(&ds, a), person(&ds, i), "seed {seed}");
        }
    }
}

#[test]
fn noise_free_graph_links_counterparts() {
    let ds = two_view(8, 7);
    let y = feature_columns(&Pixels(ds.image_shape()), &ds).unwrap();
    let w = build_cross_view_graph(&y, &views(&ds), 1).unwrap();
    for i in 0..ds.len() {
        for j in 0..ds.len() {
            if w[(i, j)] != 0.0 {
                assert_eq!(person(&ds, i), person(&ds, j));
            }
        }
        assert!(w.row(i).sum() >= 1.0);
    }
}

#[test]
fn feature_labels_from_matrix() {
    let ds = two_view(4, 7);
    let fm = reid_core::eval::extract_features(&Pixels(ds.image_shape()), ds.records()).unwrap();
    let labels = soft_labels_from_features(&fm, &views(&ds), 0).unwrap();
    assert_eq!(labels.num_classes, 4);
    assert_eq!(labels.matched_views, vec![1]);
    assert_eq!(labels.label(&ds.records()[0].image_id), Some(labels.labels[0]));
}

fn true_labels(ds: &Dataset) -> SoftLabeling {
    // anchor classes in anchor order; view-1 images copy their identity's class
    let anchors: Vec<usize> = (0..ds.len()).filter(|&i| ds.records()[i].camera_id == 0).collect();
    let labels = (0..ds.len())
        .map(|i| anchors.iter().position(|&a| person(ds, a) == person(ds, i)).unwrap() as u32)
        .collect();
    SoftLabeling {
        ids: ids(ds),
        labels,
        anchor_view: 0,
        matched_views: vec![1],
        num_classes: anchors.len(),
    }
}

#[test]
fn self_training_resizes_the_head() {
    let ds = two_view(6, 3);
    let mut model = small_model(&ds, 3);
    let cfg = TrainConfig {
        step1_iters: 2,
        step2_iters: 2,
        batch_k: 4,
        ..TrainConfig::default()
    };
    self_train_round(&mut model, &ds.unlabelled(), &true_labels(&ds), &cfg).unwrap();
    assert_eq!(model.num_classes(), 6);
}

#[test]
fn zero_iteration_round_changes_nothing() {
    let ds = two_view(6, 3);
    let mut model = small_model(&ds, 3);
    let before = model.params.hash();
    let cfg = TrainConfig {
        step1_iters: 0,
        step2_iters: 0,
        ..TrainConfig::default()
    };
    self_train_round(&mut model, &ds.unlabelled(), &true_labels(&ds), &cfg).unwrap();
    assert_eq!(model.params.hash(), before);
    assert_eq!(model.num_classes(), 3);
}

#[test]
fn one_class_labeling_rejected() {
    let ds = two_view(1, 3);
    let mut model = small_model(&ds, 2);
    let err = self_train_round(&mut model, &ds.unlabelled(), &true_labels(&ds), &TrainConfig::default());
    assert!(matches!(err, Err(Error::TooFewClasses { needed: 2, found: 1 })));
}

#[test]
fn correct_soft_labels_do_not_hurt() {
    let ds = generate_synthetic(&SyntheticSpec::new(12, 1, 2, 21)).unwrap();
    let test = generate_synthetic(&SyntheticSpec::new(12, 1, 2, 21)).unwrap();
    let mut model = small_model(&ds, 12);
    let before = evaluate(&model, &test, Protocol::SingleShot, 0).unwrap().rank1();
    let cfg = TrainConfig {
        step1_iters: 20,
        step2_iters: 200,
        batch_k: 6,
        ..TrainConfig::default()
    };
    self_train_round(&mut model, &ds.unlabelled(), &true_labels(&ds), &cfg).unwrap();
    let after = evaluate(&model, &test, Protocol::SingleShot, 0).unwrap().rank1();
    assert!(after >= before, "{after} < {before}");
}

fn adapt_cfg(rounds: usize) -> AdaptConfig {
    AdaptConfig {
        rounds,
        knn_k: 1,
        lambda: 0.3,
        train: TrainConfig {
            step1_iters: 3,
            step2_iters: 3,
            batch_k: 4,
            ..TrainConfig::default()
        },
        ..AdaptConfig::default()
    }
}

#[test]
fn one_round_is_one_pass() {
    let ds = generate_synthetic(&SyntheticSpec::new(8, 1, 2, 5).with_noise(0.1)).unwrap().unlabelled();
    let mut model = small_model(&ds, 4);
    let report = co_train(&mut model, &ds, &adapt_cfg(1)).unwrap();
    assert_eq!(report.rounds.len(), 1);
    assert!(report.rounds[0].label_agreement.is_none());
    assert!(!report.rounds[0].solver.is_empty());
    assert_eq!(model.num_classes(), 8);
    let mut again = small_model(&ds, 4);
    let three = co_train(&mut again, &ds, &adapt_cfg(3)).unwrap();
    assert_eq!(three.agreements().len(), 2);
    assert!(co_train(&mut again, &ds, &adapt_cfg(0)).is_err());
}

#[test]
fn missing_anchor_camera_rejected() {
    let ds = two_view(4, 5).unlabelled();
    let mut model = small_model(&ds, 4);
    let cfg = AdaptConfig {
        anchor_camera: Some(7),
        ..adapt_cfg(1)
    };
    assert!(matches!(co_train(&mut model, &ds, &cfg), Err(Error::Config(_))));
}

#[test]
fn three_cameras_match_against_the_anchor() {
    let ds = generate_synthetic(&SyntheticSpec::new(5, 1, 3, 4)).unwrap();
    let y = feature_columns(&Pixels(ds.image_shape()), &ds).unwrap();
    let labels = soft_labels(&y, &ids(&ds), &views(&ds), 1).unwrap();
    assert_eq!(labels.matched_views, vec![0, 2]);
    assert_eq!(labels.num_classes, 5);
    labels.check(&views(&ds)).unwrap();
}

#[test]
fn lambda_selection_rules() {
    let ds = generate_synthetic(&SyntheticSpec::new(8, 1, 2, 5).with_noise(0.1)).unwrap().unlabelled();
    let model = small_model(&ds, 4);
    let cfg = adapt_cfg(1);
    assert_eq!(select_lambda(&model, &ds, &[0.7], &cfg).unwrap(), 0.7);
    assert!(matches!(select_lambda(&model, &ds, &[], &cfg), Err(Error::Empty(_))));
    let a = select_lambda(&model, &ds, &[0.0, 0.3], &cfg).unwrap();
    let b = select_lambda(&model, &ds, &[0.0, 0.3], &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn graph_weight_wins_selection() {
    let mut wins = 0;
    for seed in 0..5 {
        let model = reid_core::experiments::source_model(seed).unwrap();
        let target = reid_core::experiments::unlabelled_target(seed).unwrap();
        let cfg = AdaptConfig {
            train: TrainConfig {
                step2_iters: 100,
                ..reid_core::experiments::adapt_config(seed).train
            },
            ..reid_core::experiments::adapt_config(seed)
        };
        if select_lambda(&model, &target, &[0.0, 0.3], &cfg).unwrap() == 0.3 {
            wins += 1;
        }
    }
    assert!(wins >= 3, "graph weight chosen on {wins} of 5 seeds");
}

#[test]
fn autoencoder_baseline_end_to_end() {
    let source = generate_synthetic(&SyntheticSpec::new(6, 1, 2, 1).with_noise(0.1)).unwrap();
    let target = generate_synthetic(&SyntheticSpec::new(6, 1, 2, 2).with_noise(0.1)).unwrap();
    let model = small_model(&source, 6);
    let cfg = AutoencoderConfig {
        pretrain_iters: 50,
        finetune_iters: 50,
        ..AutoencoderConfig::default()
    };
    let adapted = autoencoder_baseline(&model, &source, &target.unlabelled(), &cfg).unwrap();
    assert_eq!(adapted.autoencoder.hidden_dim(), 8);
    let y = adapted.extract(&target.records()[0].pixels).unwrap();
    assert_eq!(y.len(), 8);
    let bad = AutoencoderConfig {
        hidden: Some(64),
        ..cfg
    };
    assert!(matches!(
        autoencoder_baseline(&model, &source, &target, &bad),
        Err(Error::DimensionMismatch { .. })
    ));
}
