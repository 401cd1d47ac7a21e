use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avtopo::data::{
    augment, fragment_mask_detailed, generate_synthetic_tree, preprocess, split_ids, AugmentationConfig,
    FundusSample, RgbImage, SyntheticTreeSpec,
};
use avtopo::losses::{loss_value, soft_skeleton_tensor, tversky_loss, LossConfig};
use avtopo::metrics::skeleton::thin;
use avtopo::metrics::{
    betti0_error, cl_dice_metric, component_count, dice_iou, hd95, MetricsReport, ScopeMetrics,
};
use avtopo::tffm::build_graph;
use avtopo::{Mask, Tensor};

fn mask_strategy(max: usize) -> impl Strategy<Value = Mask> {
    (3..=max, 3..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| Mask::from_fn(h, w, |r, c| bits[r * w + c]))
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (3..=max, 3..=max).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| (Mask::from_fn(h, w, |r, c| a[r * w + c]), Mask::from_fn(h, w, |r, c| b[r * w + c])))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn union_never_adds_components((a, b) in mask_pair(16)) {
        let u = a.or(&b).unwrap();
        prop_assert!(component_count(&u) <= component_count(&a) + component_count(&b));
        prop_assert!(component_count(&a) <= a.count());
    }

    #[test]
    fn pairwise_metrics_are_symmetric((a, b) in mask_pair(14)) {
        prop_assert_eq!(betti0_error(&a, &b).unwrap(), betti0_error(&b, &a).unwrap());
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        let (d1, i1) = dice_iou(&a, &b).unwrap();
        let (d2, i2) = dice_iou(&b, &a).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12 && (i1 - i2).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d1) && i1 <= d1 + 1e-12);
        let cl = cl_dice_metric(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&cl));
    }

    #[test]
    fn self_comparison_is_perfect(m in mask_strategy(16)) {
        prop_assert_eq!(hd95(&m, &m).unwrap(), 0.0);
        prop_assert_eq!(betti0_error(&m, &m).unwrap(), 0);
        prop_assert_eq!(dice_iou(&m, &m).unwrap().0, 1.0);
        if m.any() {
            prop_assert!((cl_dice_metric(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn thinning_is_contained_idempotent_and_keeps_components(m in mask_strategy(18)) {
        let s = thin(&m);
        prop_assert!(!s.and_not(&m).unwrap().any());
        prop_assert_eq!(thin(&s), s.clone());
        prop_assert_eq!(component_count(&s), component_count(&m));
    }

    #[test]
    fn soft_skeleton_stays_below_input(v in prop::collection::vec(0.0f64..1.0, 2 * 10 * 10)) {
        let p = Tensor::new(&[1, 2, 10, 10], v).unwrap();
        let s = soft_skeleton_tensor(&p, 10).unwrap();
        for (a, b) in s.data().iter().zip(p.data()) {
            prop_assert!(*a >= 0.0 && *a <= b + 1e-7);
        }
    }

    #[test]
    fn tversky_loss_is_bounded(
        p in prop::collection::vec(0.0f64..1.0, 2 * 6 * 6),
        t in prop::collection::vec(any::<bool>(), 2 * 6 * 6),
        alpha in 0.0f64..1.0,
    ) {
        let cfg = LossConfig::default().with_alpha(alpha);
        let p = Tensor::new(&[1, 2, 6, 6], p).unwrap();
        let t = Tensor::new(&[1, 2, 6, 6], t.into_iter().map(|b| f64::from(u8::from(b))).collect()).unwrap();
        let l = loss_value(&p, &t, None, |g, p, t, v| tversky_loss(g, p, t, v, &cfg)).unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&l));
        let perfect = loss_value(&t, &t, None, |g, p, t, v| tversky_loss(g, p, t, v, &cfg)).unwrap();
        prop_assert!(perfect < 1e-6);
    }

    #[test]
    fn graph_rows_have_k_neighbours_and_a_self_loop(
        n in 2usize..30,
        c in 1usize..5,
        seed in any::<u64>(),
        kfrac in 0.0f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0));
        let k = 1 + ((n - 2) as f64 * kfrac) as usize;
        let g = build_graph(&x, k).unwrap();
        for i in 0..n {
            prop_assert!(g.adjacency[i * n + i]);
            prop_assert_eq!(g.neighbors(i).count(), k + 1);
        }
    }

    #[test]
    fn fragmenting_adds_one_component_per_break(seed in 0u64..40, n in 0usize..5) {
        let spec = SyntheticTreeSpec { canvas: 96, roots: 1, depth: 2, seed, ..Default::default() };
        let (s, _) = generate_synthetic_tree(&spec).unwrap();
        prop_assume!(s.artery.any());
        let f = fragment_mask_detailed(&s.artery, n, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(f.breaks.len() <= n);
        prop_assert!(!f.mask.and_not(&s.artery).unwrap().any());
        prop_assert_eq!(betti0_error(&f.mask, &s.artery).unwrap(), f.breaks.len());
    }

    #[test]
    fn split_is_a_deterministic_partition(count in 0usize..60, seed in any::<u64>()) {
        let ids: Vec<String> = (0..count).map(|i| format!("s{i:03}")).collect();
        let a = split_ids(ids.clone(), seed);
        let mut rev = ids.clone();
        rev.reverse();
        prop_assert_eq!(&a, &split_ids(rev, seed));
        let mut all: Vec<String> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids);
        prop_assert_eq!(a.val.len(), count / 10);
        prop_assert_eq!(a.test.len(), count / 10);
    }

    #[test]
    fn augmentation_and_resizing_keep_masks_binary(seed in any::<u64>(), size in 32usize..80) {
        let spec = SyntheticTreeSpec { canvas: 48, seed: seed % 1000, ..Default::default() };
        let (s, _) = generate_synthetic_tree(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&s, &AugmentationConfig::default(), &mut rng);
        let r = preprocess(&a, size).unwrap();
        prop_assert_eq!(r.dims(), (size, size));
        for m in [&r.artery, &r.vein, &r.crossing, &r.uncertain] {
            prop_assert!(m.is_binary());
        }
        prop_assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn csv_rows_match_header() {
    let m = Mask::from_ascii(&["##..", ".#..", "...."]);
    let scope = ScopeMetrics::compute(&m, &m, &Default::default()).unwrap();
    let r = MetricsReport {
        id: "x".into(),
        artery: scope,
        vein: scope,
        combined: scope,
    };
    assert_eq!(MetricsReport::csv_row(&r).len(), MetricsReport::csv_header().len());
    assert_eq!(MetricsReport::csv_header().len(), 1 + 3 * ScopeMetrics::FIELDS.len());
}

#[test]
fn blank_sample_roundtrips_through_preprocess() {
    let s = FundusSample {
        id: "blank".into(),
        image: RgbImage::filled(40, 40, [0.2, 0.1, 0.05]),
        artery: Mask::empty(40, 40),
        vein: Mask::empty(40, 40),
        crossing: Mask::empty(40, 40),
        uncertain: Mask::empty(40, 40),
    };
    let p = preprocess(&s, 40).unwrap();
    assert_eq!(p, s);
}
