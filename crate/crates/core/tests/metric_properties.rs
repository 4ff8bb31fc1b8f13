use geoinpaint::metrics::{average_precision, miou, psnr, recall_at_k, relevance_lists, ssim, RecallK};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> Array3<f32> {
    Array3::from_shape_fn((h, w, 3), |_| rng.random_range(lo..hi))
}

fn embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), a in 0.01f32..0.12, step in 0.01f32..0.12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = image(&mut rng, 12, 10, 0.25, 0.75);
        let noise = Array3::from_shape_fn((12, 10, 3), |_| if rng.random_bool(0.5) { 1.0f32 } else { -1.0 });
        let small = &target + &(&noise * a);
        let large = &target + &(&noise * (a + step));
        prop_assert!(psnr(&small, &target).unwrap() > psnr(&large, &target).unwrap());
    }

    #[test]
    fn ssim_is_bounded_reflexive_and_symmetric(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = image(&mut rng, h, w, 0.0, 1.0);
        let b = image(&mut rng, h, w, 0.0, 1.0);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_grows_with_k_and_saturates(seed in any::<u64>(), n in 2usize..30, d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery = embeddings(&mut rng, n, d);
        let queries = embeddings(&mut rng, n, d);
        let truth: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..n))).collect();
        let mut last = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&queries, &gallery, &truth, RecallK::Rank(k)).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 100.0);
    }

    #[test]
    fn retrieval_scores_ignore_embedding_scale(seed in any::<u64>(), n in 2usize..20, scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery = embeddings(&mut rng, n, 6);
        let queries = embeddings(&mut rng, n, 6);
        let truth: Vec<Option<usize>> = (0..n).map(|i| Some((i * 7) % n)).collect();
        let scaled: Vec<Vec<f32>> = queries.iter().map(|q| q.iter().map(|x| x * scale).collect()).collect();
        let ap = |q: &[Vec<f32>]| average_precision(&relevance_lists(q, &gallery, &truth).unwrap()).unwrap();
        prop_assert_eq!(ap(&queries), ap(&scaled));
        let r = |q: &[Vec<f32>]| recall_at_k(q, &gallery, &truth, RecallK::Rank(1)).unwrap();
        prop_assert_eq!(r(&queries), r(&scaled));
    }

    #[test]
    fn miou_ignores_class_naming(seed in any::<u64>(), perm in Just(vec![0u8, 1, 2, 3, 4]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label = |rng: &mut ChaCha8Rng| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..5u8) };
        let gt = Array2::from_shape_fn((9, 7), |_| label(&mut rng));
        let pred = Array2::from_shape_fn((9, 7), |_| rng.random_range(0..5u8));
        let rename = |m: &Array2<u8>| m.mapv(|v| if v == 255 { 255 } else { perm[v as usize] });
        let before = miou(&pred, &gt, 5, 255).unwrap();
        let after = miou(&rename(&pred), &rename(&gt), 5, 255).unwrap();
        prop_assert!((before - after).abs() < 1e-12, "{before} vs {after}");
    }
}
