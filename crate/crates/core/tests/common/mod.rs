#![allow(dead_code)]

use std::f64::consts::PI;

use geoinpaint::adapters::AdapterConfig;
use geoinpaint::config::{Precision, RunConfig};
use geoinpaint::data::{Sample, TaskKind, TaskLabel};
use geoinpaint::loss::LpipsConfig;
use geoinpaint::mask::{synthesize_mask, OcclusionMask, OcclusionSpec};
use geoinpaint::model::{EncoderDecoderConfig, GeneratorConfig, PatchDiscriminatorConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth striped scenes whose orientation and tint depend on the class.
pub fn toy_images(n: usize, size: usize, classes: u32, seed: u64) -> Vec<(Array3<f32>, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i as u32 % classes;
            let theta = PI * class as f64 / classes as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let (s, c) = theta.sin_cos();
            let tint = [0.5 + 0.3 * (theta).cos(), 0.5, 0.5 - 0.3 * (theta).cos()];
            let img = Array3::from_shape_fn((size, size, 3), |(y, x, ch)| {
                let u = (x as f64 * c + y as f64 * s) / size as f64;
                let wave = (2.0 * PI * 2.0 * u + phase).sin();
                (tint[ch] + 0.2 * wave).clamp(0.0, 1.0) as f32
            });
            (img, class)
        })
        .collect()
}

/// Elliptical blobs used as occlusion seeds.
pub fn blob_pool(size: usize, count: usize, seed: u64) -> Vec<OcclusionMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let cy = rng.random_range(0.3..0.7) * size as f64;
            let cx = rng.random_range(0.3..0.7) * size as f64;
            let ry = rng.random_range(0.15..0.35) * size as f64;
            let rx = rng.random_range(0.15..0.35) * size as f64;
            OcclusionMask::from_fn(size, size, |r, c| {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            })
        })
        .collect()
}

/// `n` toy samples with one fixed synthesized mask each.
pub fn toy_samples(n: usize, size: usize, classes: u32, seed: u64) -> Vec<Sample> {
    let pool = blob_pool(size, 8, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a5c);
    toy_images(n, size, classes, seed)
        .into_iter()
        .map(|(img, class)| {
            let mask = synthesize_mask(size, size, &pool, &OcclusionSpec::default(), &mut rng).unwrap();
            Sample::new(img, mask, TaskLabel::Class(class)).unwrap()
        })
        .collect()
}

/// Small networks everywhere, stub adapter, f32 unless overridden.
pub fn tiny_config(size: usize, classes: usize) -> RunConfig {
    RunConfig {
        task: TaskKind::Classification,
        image_size: Some(size),
        lambda: Some(5.0),
        batch_size: 4,
        max_steps: 10,
        precision: Precision::F32,
        checkpoint_every: 0,
        log_every: 0,
        generator: GeneratorConfig {
            network: EncoderDecoderConfig::tiny(),
            pretrained_encoder: None,
        },
        discriminator: PatchDiscriminatorConfig::tiny(),
        perceptual: LpipsConfig::tiny(),
        adapter: AdapterConfig::stub(classes),
        ..RunConfig::default()
    }
}
