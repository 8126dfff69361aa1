use camalkit::backend::Model;
use camalkit::datasets::{generate_synthetic, make_folds, SyntheticSpec};
use camalkit::evaluation::{default_k_grid, representative_faithfulness_suite};
use camalkit::training::{train_classifier, Method, TrainConfig};

#[test]
fn auc_is_stable_under_k_grid_refinement() {
    let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, test) = make_folds(&d, 10, 0).unwrap().split(&d, 0).unwrap();
    let fine: Vec<f64> = (0..=100).map(f64::from).collect();
    for method in [Method::Vanilla, Method::Camal] {
        let run = train_classifier(&TrainConfig { method, ..Default::default() }, &d, &train, 0, None).unwrap();
        let layer = run.model.default_capture_layer();
        let coarse = representative_faithfulness_suite(&run.model, &d, &test, &layer, 1, &default_k_grid(), 0).unwrap();
        let refined = representative_faithfulness_suite(&run.model, &d, &test, &layer, 1, &fine, 0).unwrap();
        assert_eq!(coarse.curves.len(), refined.curves.len());
        for (a, b) in coarse.curves.iter().zip(&refined.curves) {
            assert_eq!((&a.sample_id, a.curve.mode), (&b.sample_id, b.curve.mode));
            let diff = (a.curve.auc - b.curve.auc).abs();
            assert!(diff < 0.02, "{:?} {} {:?}: {:.4} vs {:.4}", method, a.sample_id, a.curve.mode, a.curve.auc, b.curve.auc);
        }
    }
}
