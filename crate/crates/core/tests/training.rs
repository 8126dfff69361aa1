use std::collections::HashMap;

use camalkit::attention::{extract_attention, gradcam_for_model, gradcam_per_sample_oracle};
use camalkit::backend::{Model, ReferenceModel, ScalarTargetSelector};
use camalkit::datasets::{generate_synthetic, make_folds, Dataset, SplitRole, SyntheticSpec};
use camalkit::evaluation::{binarize_attention, iou, DEFAULT_TAU};
use camalkit::training::{train_classifier, train_scalar_target_probe, MaskSource, Method, RunArtifacts, TrainConfig};

fn synthetic() -> Dataset {
    generate_synthetic(&SyntheticSpec::default()).unwrap()
}

fn fold0(d: &Dataset) -> (Vec<usize>, Vec<usize>) {
    make_folds(d, 10, 0).unwrap().split(d, 0).unwrap()
}

fn epoch_mean(run: &RunArtifacts, epoch: usize) -> f64 {
    let v: Vec<f64> = run.log.iter().filter(|r| r.epoch == epoch).filter_map(|r| r.camal_term.map(f64::from)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn camal_loss_log_is_bit_reproducible() {
    let d = synthetic();
    let (train, _) = fold0(&d);
    let cfg = TrainConfig { method: Method::Camal, epochs: 2, seed: 11, ..Default::default() };
    let a = train_classifier(&cfg, &d, &train, 0, None).unwrap();
    let b = train_classifier(&cfg, &d, &train, 0, None).unwrap();
    assert_eq!(a.log.len(), 2 * train.len().div_ceil(cfg.batch_size));
    assert_eq!(a.log, b.log);
    assert!(a.weights().bit_identical(b.weights()));
}

#[test]
fn camal_term_decreases_over_training() {
    let d = synthetic();
    let (train, _) = fold0(&d);
    let cfg = TrainConfig { method: Method::Camal, seed: 0, ..Default::default() };
    let run = train_classifier(&cfg, &d, &train, 0, None).unwrap();
    let first = epoch_mean(&run, 0);
    let last = epoch_mean(&run, cfg.epochs - 1);
    assert!(last < first, "first epoch {first:.4}, last epoch {last:.4}");
}

#[test]
fn prior_with_ground_truth_pseudo_masks_matches_camal() {
    let d = generate_synthetic(&SyntheticSpec { samples_per_class: 8, ..Default::default() }).unwrap();
    let train: Vec<usize> = (0..d.len()).collect();
    let camal = TrainConfig { method: Method::Camal, epochs: 2, seed: 5, ..Default::default() };
    let prior = TrainConfig {
        method: Method::Prior,
        mask_source: MaskSource::ExternalDirectory,
        pseudo_mask_dir: Some("unused".into()),
        ..camal.clone()
    };
    let pseudo: HashMap<String, _> = d.samples.iter().map(|s| (s.sample_id.clone(), s.mask.clone())).collect();
    let a = train_classifier(&camal, &d, &train, 0, None).unwrap();
    let b = train_classifier(&prior, &d, &train, 0, Some(&pseudo)).unwrap();
    assert!(a.weights().bit_identical(b.weights()));
    assert_eq!(a.log, b.log);
}

#[test]
fn value_head_gradients_match_the_per_sample_oracle() {
    let d = generate_synthetic(&SyntheticSpec { samples_per_class: 3, ..Default::default() }).unwrap();
    let idx: Vec<usize> = (0..d.len()).collect();
    let (images, _, _) = d.batch(&idx, SplitRole::Train).unwrap();
    for name in ["cnn", "vit"] {
        let model = ReferenceModel::build(name, 3, (64, 64), true, 2).unwrap();
        let layer = model.default_capture_layer();
        let batch = gradcam_for_model(&model, &images, &ScalarTargetSelector::ValueHead, &layer).unwrap();
        let oracle = gradcam_per_sample_oracle(&model, &images, &ScalarTargetSelector::ValueHead, &layer).unwrap();
        for (a, b) in batch.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-5, "{name}: {a} vs {b}");
        }
    }
}

fn probe_iou(run: &RunArtifacts, d: &Dataset, indices: &[usize]) -> f64 {
    let layer = run.model.default_capture_layer();
    let mut total = 0.0;
    for chunk in indices.chunks(32) {
        let (images, _, _) = d.batch(chunk, SplitRole::Test).unwrap();
        let maps = extract_attention(&run.model, &images, &ScalarTargetSelector::ValueHead, &layer).unwrap();
        for (j, &i) in chunk.iter().enumerate() {
            total += iou(binarize_attention(maps.sample(j), DEFAULT_TAU).view(), d.samples[i].mask.view()).unwrap();
        }
    }
    total / indices.len() as f64
}

#[test]
fn scalar_target_probe_aligns_attention() {
    let d = synthetic();
    let (train, test) = fold0(&d);
    let cfg = TrainConfig { method: Method::Camal, seed: 0, ..Default::default() };
    let camal = train_scalar_target_probe(&cfg, &d, &train).unwrap();
    let collapsed = train_scalar_target_probe(&TrainConfig { lambda: 0.0, ..cfg.clone() }, &d, &train).unwrap();
    let plain = train_scalar_target_probe(&TrainConfig { method: Method::Vanilla, ..cfg.clone() }, &d, &train).unwrap();
    assert!(collapsed.weights().bit_identical(plain.weights()));
    let (with, without) = (probe_iou(&camal, &d, &test), probe_iou(&plain, &d, &test));
    assert!(with > without, "probe IoU with the regularizer {with:.3}, without {without:.3}");
}
