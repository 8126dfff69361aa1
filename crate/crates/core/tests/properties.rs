use approx::assert_abs_diff_eq;
use camalkit::attention::{gradcam_batch, normalize_minmax, AttentionMapBatch};
use camalkit::autodiff::{Tape, Tensor};
use camalkit::backend::{
    self, spatial_to_tokens_array, tokens_to_spatial_array, Model, ReferenceModel, ReshapeKind, ScalarTargetSelector, SpatialReshapeRule,
};
use camalkit::datasets::{generate_synthetic, SyntheticSpec};
use camalkit::evaluation::{iou, morphology, perturb_masks, shift_toward_center, PerturbKind, RegularizerKind};
use camalkit::regularizers::{alpha_beta_arrays, camal_term, MaskBatch};
use camalkit::stats::{self, PMethod, TrialMatrix};
use ndarray::{s, Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;

fn unit_map(h: usize, w: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn binary_map(h: usize, w: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(any::<bool>(), h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v.into_iter().map(|b| b as u8 as f32).collect()).unwrap())
}

/// Rectangle of ones at `(y, x)` with size `(rh, rw)` inside an `n x n` grid.
fn rect(n: usize) -> impl Strategy<Value = Array2<f32>> {
    (1..n - 1, 1..n - 1).prop_flat_map(move |(rh, rw)| (Just(rh), Just(rw), 0..=n - rh, 0..=n - rw)).prop_map(move |(rh, rw, y, x)| {
        let mut m = Array2::zeros((n, n));
        m.slice_mut(s![y..y + rh, x..x + rw]).fill(1.0);
        m
    })
}

fn non_degenerate(m: &Array2<f32>) -> bool {
    let ones = m.iter().filter(|&&v| v == 1.0).count();
    ones > 0 && ones < m.len()
}

fn batch1(m: &Array2<f32>) -> Array3<f32> {
    m.clone().insert_axis(ndarray::Axis(0))
}

fn matrix(m: usize, k: usize) -> impl Strategy<Value = TrialMatrix> {
    prop::collection::vec(-5.0f64..5.0, m * k)
        .prop_map(move |v| TrialMatrix::new(Array2::from_shape_vec((m, k), v).unwrap(), (0..m).map(|i| i.to_string()).collect()).unwrap())
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[b, 3, h, w]), || rng.random_range(-1.0f32..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn alpha_beta_and_camal_term_stay_in_range(h in unit_map(8, 8), m in binary_map(8, 8)) {
        prop_assume!(non_degenerate(&m));
        let masks = MaskBatch::new(batch1(&m)).unwrap();
        let ab = alpha_beta_arrays(&batch1(&h), &masks).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.alpha[0]) && (0.0..=1.0).contains(&ab.beta[0]));
        let t = camal_term(&ab).unwrap();
        prop_assert!((-1.0..=1.0).contains(&t));
    }

    #[test]
    fn complement_swaps_alpha_and_beta(h in unit_map(6, 7), m in binary_map(6, 7)) {
        prop_assume!(non_degenerate(&m));
        let masks = MaskBatch::new(batch1(&m)).unwrap();
        let ab = alpha_beta_arrays(&batch1(&h), &masks).unwrap();
        let flipped = alpha_beta_arrays(&batch1(&h), &masks.complement()).unwrap();
        prop_assert_eq!(ab.alpha[0], flipped.beta[0]);
        prop_assert_eq!(ab.beta[0], flipped.alpha[0]);
    }

    #[test]
    fn raising_attention_inside_never_raises_the_term(h in unit_map(8, 8), m in binary_map(8, 8), bump in unit_map(8, 8)) {
        prop_assume!(non_degenerate(&m));
        let masks = MaskBatch::new(batch1(&m)).unwrap();
        let base = camal_term(&alpha_beta_arrays(&batch1(&h), &masks).unwrap()).unwrap();
        let inside = ndarray::Zip::from(&h).and(&m).and(&bump).map_collect(|&h, &m, &d| if m == 1.0 { (h + d).min(1.0) } else { h });
        let outside = ndarray::Zip::from(&h).and(&m).and(&bump).map_collect(|&h, &m, &d| if m == 0.0 { (h + d).min(1.0) } else { h });
        let t_in = camal_term(&alpha_beta_arrays(&batch1(&inside), &masks).unwrap()).unwrap();
        let t_out = camal_term(&alpha_beta_arrays(&batch1(&outside), &masks).unwrap()).unwrap();
        prop_assert!(t_in <= base + 1e-6);
        prop_assert!(t_out >= base - 1e-6);
    }

    #[test]
    fn erosion_raises_camal_term_and_leaves_suppress_only_at_zero(m in rect(16)) {
        let p = perturb_masks(m.view(), PerturbKind::Erode, &[1, 2, 3, 4]).unwrap();
        let camal: Vec<f64> = p.maps.iter().map(|h| RegularizerKind::Camal.response(&m, h).unwrap()).collect();
        let suppress: Vec<f64> = p.maps.iter().map(|h| RegularizerKind::SuppressOnly.response(&m, h).unwrap()).collect();
        prop_assert!(camal.windows(2).all(|w| w[1] > w[0]), "{:?}", camal);
        prop_assert!(suppress.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn camal_response_is_monotone_in_severity(seed in any::<u64>()) {
        let spec = SyntheticSpec { samples_per_class: 1, seed, ..Default::default() };
        for sample in generate_synthetic(&spec).unwrap().samples {
            let m = sample.mask;
            for kind in PerturbKind::ALL {
            let p = perturb_masks(m.view(), kind, &kind.default_severities()).unwrap();
            let r: Vec<f64> = p.maps.iter().map(|h| RegularizerKind::Camal.response(&m, h).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[1] >= w[0]), "{:?} {:?}", kind, r);
            if kind != PerturbKind::Shift {
                prop_assert!(r.windows(2).all(|w| w[1] > w[0]), "{:?} {:?}", kind, r);
            }
            }
        }
    }

    #[test]
    fn erosion_and_dilation_are_ordered(m in binary_map(10, 10), r in 1usize..3) {
        let e = morphology(m.view(), r, false);
        let d = morphology(m.view(), r, true);
        prop_assert!(ndarray::Zip::from(&e).and(&m).and(&d).all(|&e, &m, &d| e <= m && m <= d));
        prop_assert_eq!(morphology(e.view(), 0, true), e.clone());
        prop_assert!(ndarray::Zip::from(&morphology(m.view(), r + 1, false)).and(&e).all(|&a, &b| a <= b));
    }

    #[test]
    fn shifting_preserves_or_loses_pixels(m in rect(16), s in 1usize..6) {
        let shifted = shift_toward_center(m.view(), s);
        prop_assert!(shifted.sum() <= m.sum());
    }

    #[test]
    fn iou_is_symmetric_and_one_only_for_equal_masks(a in binary_map(6, 6), b in binary_map(6, 6)) {
        let ab = iou(a.view(), b.view()).unwrap();
        prop_assert_eq!(ab, iou(b.view(), a.view()).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a == b && a.sum() > 0.0);
    }

    #[test]
    fn iou_grows_with_intersection_at_fixed_union(a in binary_map(6, 6), b in binary_map(6, 6), pick in 0usize..36) {
        let union = ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| x.max(y));
        prop_assume!(union.sum() > 0.0);
        let (y, x) = (pick / 6, pick % 6);
        prop_assume!(union[[y, x]] == 1.0);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2[[y, x]] = 1.0;
        b2[[y, x]] = 1.0;
        prop_assert!(iou(a2.view(), b2.view()).unwrap() >= iou(a.view(), b.view()).unwrap());
    }

    #[test]
    fn normalized_maps_lie_in_unit_interval(v in prop::collection::vec(-10.0f32..10.0, 2 * 5 * 5)) {
        let cam = Array3::from_shape_vec((2, 5, 5), v).unwrap();
        let n = normalize_minmax(&cam);
        prop_assert!(n.values.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn normalized_cams_ignore_positive_scaling(f in prop::collection::vec(-2.0f32..2.0, 2 * 3 * 4 * 4), g in prop::collection::vec(-2.0f32..2.0, 2 * 3 * 4 * 4), c in 0.1f32..10.0) {
        let feats = ArrayD::from_shape_vec(IxDyn(&[2, 3, 4, 4]), f).unwrap();
        let grads = ArrayD::from_shape_vec(IxDyn(&[2, 3, 4, 4]), g).unwrap();
        let a = normalize_minmax(&gradcam_batch(&feats, &grads).unwrap());
        let b = normalize_minmax(&gradcam_batch(&feats, &grads.mapv(|v| v * c)).unwrap());
        assert_maps_close(&a, &b, 1e-4);
    }

    #[test]
    fn token_reshape_inverts(b in 1usize..3, gh in 1usize..4, gw in 1usize..4, c in 1usize..5, drop in any::<bool>(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = gh * gw + drop as usize;
        let seq = ArrayD::from_shape_simple_fn(IxDyn(&[b, n, c]), || rng.random_range(-1.0f32..1.0));
        let kind = if drop { ReshapeKind::DropLeadingToken } else { ReshapeKind::Identity };
        let maps = tokens_to_spatial_array(&seq, SpatialReshapeRule { kind, grid: (gh, gw) }).unwrap();
        prop_assert_eq!(maps.shape(), &[b, c, gh, gw]);
        let back = spatial_to_tokens_array(&maps).unwrap();
        let expected = seq.slice_axis(ndarray::Axis(1), ndarray::Slice::from(drop as usize..)).to_owned();
        prop_assert_eq!(back, expected);
    }

    #[test]
    fn poi_is_antisymmetric(x in matrix(3, 4), y in matrix(3, 4)) {
        let sum = stats::poi(&x, &y).unwrap() + stats::poi(&y, &x).unwrap();
        prop_assert_eq!(sum, 1.0);
    }

    #[test]
    fn bootstrap_interval_contains_the_point(x in matrix(2, 5), seed in any::<u64>()) {
        let ci = stats::stratified_bootstrap(&x, |m| Ok(m.mean()), 1000, 0.95, seed).unwrap();
        prop_assert!(ci.low <= ci.point && ci.point <= ci.high, "{:?}", ci);
        let again = stats::stratified_bootstrap(&x, |m| Ok(m.mean()), 1000, 0.95, seed).unwrap();
        prop_assert_eq!(ci, again);
    }

    #[test]
    fn wsrt_is_antisymmetric(a in prop::collection::vec(-3.0f64..3.0, 8), b in prop::collection::vec(-3.0f64..3.0, 8)) {
        let ab = stats::wsrt_one_tailed(&a, &b).unwrap();
        let ba = stats::wsrt_one_tailed(&b, &a).unwrap();
        prop_assert_eq!(ab.r_plus, ba.r_minus);
        prop_assert_eq!(ab.r_minus, ba.r_plus);
    }

    #[test]
    fn wsrt_exact_and_normal_agree_at_twenty(a in prop::collection::vec(-3.0f64..3.0, 20), b in prop::collection::vec(-3.0f64..3.0, 20)) {
        let exact = stats::wsrt_one_tailed_using(&a, &b, PMethod::Exact).unwrap();
        let normal = stats::wsrt_one_tailed_using(&a, &b, PMethod::Normal).unwrap();
        prop_assert!((exact.p_value - normal.p_value).abs() < 0.01, "{} vs {}", exact.p_value, normal.p_value);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::vec(-5.0f64..5.0, 6), ys in prop::collection::vec(-5.0f64..5.0, 6)) {
        let base = stats::correlations(&xs, &ys).unwrap().spearman;
        let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let ty: Vec<f64> = ys.iter().map(|y| y * y * y - 7.0).collect();
        let moved = stats::correlations(&tx, &ty).unwrap().spearman;
        match (base, moved) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

fn assert_maps_close(a: &AttentionMapBatch, b: &AttentionMapBatch, tol: f32) {
    for (x, y) in a.values.iter().zip(b.values.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = tol);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradients_scale_linearly_with_the_target(model_name in prop::sample::select(vec!["cnn", "vit"]), c in -4.0f32..4.0, seed in 0u64..1000) {
        let model = ReferenceModel::build(model_name, 3, (16, 16), false, seed).unwrap();
        let x = images(3, 16, 16, seed);
        let layer = model.default_capture_layer();
        let labels = ScalarTargetSelector::GroundTruthLogit(vec![0, 1, 2]);
        let tape = Tape::new();
        let fwd = backend::forward_with_capture(&model, &tape, &x, &layer).unwrap();
        let y = backend::select_scalar(fwd.logits, &labels).unwrap();
        let g = backend::gradients_for_summed_target(&fwd.features, y, false).unwrap().value();
        let gc = backend::gradients_for_summed_target(&fwd.features, y.scale(c), false).unwrap().value();
        for (a, b) in g.iter().zip(gc.iter()) {
            prop_assert!((a * c - b).abs() <= 1e-5 * (1.0 + (a * c).abs()), "{} vs {}", a * c, b);
        }
    }

    #[test]
    fn summed_and_per_sample_gradients_agree(model_name in prop::sample::select(vec!["cnn", "vit"]), b in 1usize..5, seed in 0u64..1000) {
        let model = ReferenceModel::build(model_name, 3, (16, 16), false, seed).unwrap();
        let x = images(b, 16, 16, seed + 1);
        let layer = model.default_capture_layer();
        let sel = ScalarTargetSelector::GroundTruthLogit((0..b).map(|i| i % 3).collect());
        let tape = Tape::new();
        let fwd = backend::forward_with_capture(&model, &tape, &x, &layer).unwrap();
        let y = backend::select_scalar(fwd.logits, &sel).unwrap();
        let batch = backend::gradients_for_summed_target(&fwd.features, y, false).unwrap().value();
        let per = backend::gradients_per_sample(&fwd.features, y, false).unwrap().value();
        for (p, q) in batch.iter().zip(per.iter()) {
            prop_assert!((p - q).abs() <= 1e-5);
        }
    }
}
