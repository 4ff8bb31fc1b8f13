mod common;

use geoinpaint::mask::{
    apply_op, area_ratio, maskmix, mix_with_plan, synthesize_mask, synthesize_occlusion, AugmentOp, MixConfig,
    MixPlan, OcclusionMask, OcclusionSpec,
};
use geoinpaint::Error;
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_mask(max: usize) -> impl Strategy<Value = OcclusionMask> {
    (1..max, 1..max).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| OcclusionMask::from_fn(h, w, |r, c| bits[r * w + c]))
    })
}

fn arb_config() -> impl Strategy<Value = MixConfig> {
    (0.05f64..0.95, 0.0f64..0.5, 0.0f64..0.6, 0.0f64..90.0, 0.2f64..4.0, 0.2f64..4.0).prop_map(
        |(threshold, max_translate, max_shear, max_rotate_degrees, dirichlet_alpha, beta_alpha)| MixConfig {
            threshold,
            max_translate,
            max_shear,
            max_rotate_degrees,
            dirichlet_alpha,
            beta_alpha,
            fixed_weights: None,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn maskmix_output_is_binary(seed in arb_mask(24), cfg in arb_config(), rng_seed in any::<u64>()) {
        let out = maskmix(&seed, &cfg, &mut ChaCha8Rng::seed_from_u64(rng_seed)).unwrap();
        prop_assert_eq!(out.dims(), seed.dims());
        prop_assert!(out.grid().iter().all(|&v| v <= 1));
        let a = area_ratio(&out);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn identity_mix_returns_the_seed(seed in arb_mask(24), threshold in 0.01f64..1.0) {
        prop_assert_eq!(mix_with_plan(&seed, &MixPlan::identity(), threshold), seed);
    }

    #[test]
    fn identity_ops_compose_to_identity(seed in arb_mask(24), depth in 1usize..6) {
        let mut m = seed.clone();
        for _ in 0..depth {
            m = apply_op(&m, &AugmentOp::IDENTITY);
        }
        prop_assert_eq!(m, seed);
    }

    #[test]
    fn sampled_plans_respect_ranges(cfg in arb_config(), rng_seed in any::<u64>(), h in 4usize..64, w in 4usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let plan = cfg.sample_plan(h, w, &mut rng).unwrap();
        prop_assert!(plan.weights.iter().all(|&x| x >= 0.0));
        prop_assert!((plan.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for op in plan.branches.iter().flatten() {
            match *op {
                AugmentOp::Translate { dx, dy } => {
                    prop_assert!(dx.abs() <= cfg.max_translate * w as f64 + 1e-9);
                    prop_assert!(dy.abs() <= cfg.max_translate * h as f64 + 1e-9);
                }
                AugmentOp::Shear { shear_x, shear_y } => {
                    prop_assert!(shear_x.abs() <= cfg.max_shear + 1e-12 && shear_y.abs() <= cfg.max_shear + 1e-12);
                }
                AugmentOp::Rotate { degrees } => prop_assert!(degrees.abs() <= cfg.max_rotate_degrees + 1e-9),
            }
        }
    }

    #[test]
    fn maskmix_replays_from_rng_seed(seed in arb_mask(20), cfg in arb_config(), rng_seed in any::<u64>()) {
        let a = maskmix(&seed, &cfg, &mut ChaCha8Rng::seed_from_u64(rng_seed)).unwrap();
        let b = maskmix(&seed, &cfg, &mut ChaCha8Rng::seed_from_u64(rng_seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthesized_area_is_within_spec(lo in 0.02f64..0.6, width in 0.05f64..0.3, rng_seed in any::<u64>()) {
        let spec = OcclusionSpec::new(lo, (lo + width).min(0.95));
        let pool = common::blob_pool(48, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        match synthesize_mask(48, 48, &pool, &spec, &mut rng) {
            Ok(m) => prop_assert!(spec.contains(area_ratio(&m))),
            Err(e) => prop_assert!(matches!(e, Error::OcclusionRetriesExhausted { .. }), "{}", e),
        }
    }
}

#[test]
fn occluded_image_matches_clean_outside_the_mask() {
    let pool = common::blob_pool(32, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = Array3::from_shape_fn((32, 32, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
    for _ in 0..20 {
        let (occluded, m) = synthesize_occlusion(&image, &pool, &OcclusionSpec::default(), &mut rng).unwrap();
        for ((y, x, c), v) in occluded.indexed_iter() {
            if m.get(y, x) {
                assert_eq!(*v, geoinpaint::data::FILL_VALUE);
            } else {
                assert_eq!(*v, image[[y, x, c]]);
            }
        }
    }
}

#[test]
fn invalid_specs_and_empty_pools_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pool = common::blob_pool(16, 2, 0);
    for (lo, hi) in [(0.0, 0.5), (0.5, 0.4), (0.2, 1.0), (-0.1, 0.3)] {
        assert!(synthesize_mask(16, 16, &pool, &OcclusionSpec::new(lo, hi), &mut rng).is_err());
    }
    assert!(synthesize_mask(16, 16, &[], &OcclusionSpec::default(), &mut rng).is_err());
    // an all-clear seed can never reach the requested area
    let blank = [OcclusionMask::zeros(16, 16)];
    let err = synthesize_mask(16, 16, &blank, &OcclusionSpec::default(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::OcclusionRetriesExhausted { attempts: 50, .. }));
}
