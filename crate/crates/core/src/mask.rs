//! Binary occlusion masks, their geometric augmentation, and MaskMix.
//!
//! Polarity is fixed throughout the crate: `1` marks an occluded pixel,
//! `0` a clear one.

use std::cell::Cell;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of parallel augmentation branches mixed with the seed.
pub const BRANCH_COUNT: usize = 3;
/// Number of chained operations per branch.
pub const CHAIN_DEPTH: usize = 3;
/// Attempts `synthesize_occlusion` makes before giving up.
pub const SYNTHESIS_ATTEMPTS: usize = 50;

thread_local! {
    static MASKMIX_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `maskmix` invocations made on the current thread.
pub fn maskmix_invocations() -> u64 {
    MASKMIX_CALLS.with(|c| c.get())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    grid: Array2<u8>,
}

impl OcclusionMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            grid: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            grid: Array2::ones((height, width)),
        }
    }

    /// Builds a mask from a grid whose cells must all be 0 or 1.
    pub fn from_grid(grid: Array2<u8>) -> Result<Self> {
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask cells must be 0 or 1".into()));
        }
        Ok(Self { grid })
    }

    /// Builds a mask by marking every cell where `pred(row, col)` holds.
    pub fn from_fn(height: usize, width: usize, mut pred: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            grid: Array2::from_shape_fn((height, width), |(r, c)| u8::from(pred(r, c))),
        }
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[[row, col]] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, occluded: bool) {
        self.grid[[row, col]] = u8::from(occluded);
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Mask values as `f32` in row-major order.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.grid.iter().map(|&v| f32::from(v)).collect()
    }

    /// Nearest-neighbour resize; the result is binary by construction.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let (h, w) = self.dims();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let grid = Array2::from_shape_fn((height, width), |(r, c)| {
            let sr = ((r as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
            let sc = ((c as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
            self.grid[[sr.min(h - 1), sc.min(w - 1)]]
        });
        Self { grid }
    }

    /// Loads a single-channel PNG; pixels at or above 128 are occluded.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |r, c| {
            img.get_pixel(c as u32, r as u32).0[0] >= 128
        }))
    }

    /// Writes an 8-bit PNG with 255 for occluded pixels and 0 elsewhere.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = self.dims();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
            image::Luma([if self.grid[[r as usize, c as usize]] == 1 { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Fraction of occluded pixels.
pub fn area_ratio(mask: &OcclusionMask) -> f64 {
    let total = mask.height() * mask.width();
    if total == 0 {
        return 0.0;
    }
    mask.count() as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Shift by `dx` columns and `dy` rows.
    Translate { dx: f64, dy: f64 },
    /// Forward map `x' = x + shear_x * y`, `y' = shear_y * x + y` about the centre.
    Shear { shear_x: f64, shear_y: f64 },
    /// Counter-clockwise rotation about the centre, as seen with rows running downward.
    Rotate { degrees: f64 },
}

impl AugmentOp {
    pub const IDENTITY: AugmentOp = AugmentOp::Translate { dx: 0.0, dy: 0.0 };

    fn affine(&self) -> Affine {
        match *self {
            AugmentOp::Translate { dx, dy } => Affine::translation(dx, dy),
            AugmentOp::Shear { shear_x, shear_y } => Affine {
                a: 1.0,
                b: shear_x,
                c: shear_y,
                d: 1.0,
                tx: 0.0,
                ty: 0.0,
            },
            AugmentOp::Rotate { degrees } => Affine::rotation(degrees),
        }
    }
}

/// Forward affine map on centred coordinates `(x, y)` (x right, y down):
/// `x' = a x + b y + tx`, `y' = c x + d y + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 1.0,
            tx: dx,
            ty: dy,
        }
    }

    pub fn rotation(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self {
            a: c,
            b: s,
            c: -s,
            d: c,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn scaling(factor: f64) -> Self {
        Self {
            a: factor,
            b: 0.0,
            c: 0.0,
            d: factor,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// Composite map applying `self` first, then `next`.
    pub fn then(&self, next: &Affine) -> Affine {
        Affine {
            a: next.a * self.a + next.b * self.c,
            b: next.a * self.b + next.b * self.d,
            c: next.c * self.a + next.d * self.c,
            d: next.c * self.b + next.d * self.d,
            tx: next.a * self.tx + next.b * self.ty + next.tx,
            ty: next.c * self.tx + next.d * self.ty + next.ty,
        }
    }

    fn inverse_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let det = self.a * self.d - self.b * self.c;
        if det.abs() < 1e-12 {
            return None;
        }
        let (x, y) = (x - self.tx, y - self.ty);
        Some(((self.d * x - self.b * y) / det, (-self.c * x + self.a * y) / det))
    }
}

/// Resamples `mask` through `forward` with nearest-neighbour lookup.
/// Pixels mapping outside the source frame become clear.
pub fn warp(mask: &OcclusionMask, forward: &Affine) -> OcclusionMask {
    let (h, w) = mask.dims();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let grid = Array2::from_shape_fn((h, w), |(r, c)| {
        let Some((sx, sy)) = forward.inverse_point(c as f64 - cx, r as f64 - cy) else {
            return 0;
        };
        let sc = (sx + cx).round();
        let sr = (sy + cy).round();
        if sr < 0.0 || sc < 0.0 || sr >= h as f64 || sc >= w as f64 {
            0
        } else {
            mask.grid[[sr as usize, sc as usize]]
        }
    });
    OcclusionMask { grid }
}

pub fn apply_op(mask: &OcclusionMask, op: &AugmentOp) -> OcclusionMask {
    warp(mask, &op.affine())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Cut-off of the final thresholding; mixed values at or above it are occluded.
    pub threshold: f64,
    /// Translation range as a fraction of the image side.
    pub max_translate: f64,
    pub max_shear: f64,
    pub max_rotate_degrees: f64,
    /// Concentration of the symmetric Dirichlet over branch weights.
    pub dirichlet_alpha: f64,
    /// Both shape parameters of the Beta draw splitting seed and branch mass.
    pub beta_alpha: f64,
    /// Pins `[w1, w2, w3, w4]` instead of sampling them.
    pub fixed_weights: Option<[f64; 4]>,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_translate: 0.25,
            max_shear: 0.3,
            max_rotate_degrees: 45.0,
            dirichlet_alpha: 1.0,
            beta_alpha: 1.0,
            fixed_weights: None,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "maskmix threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        if self.max_translate < 0.0 || self.max_shear < 0.0 || self.max_rotate_degrees < 0.0 {
            return Err(Error::Config("maskmix ranges must be nonnegative".into()));
        }
        if self.max_shear >= 1.0 {
            return Err(Error::Config("maskmix shear range must be below 1".into()));
        }
        if self.dirichlet_alpha <= 0.0 || self.beta_alpha <= 0.0 {
            return Err(Error::Config("maskmix concentrations must be positive".into()));
        }
        if let Some(w) = self.fixed_weights {
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config("maskmix weights must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Draws one operation with its kind and parameters sampled uniformly.
    pub fn sample_op<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> AugmentOp {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        match rng.random_range(0..3) {
            0 => AugmentOp::Translate {
                dx: sym(rng, self.max_translate * width as f64),
                dy: sym(rng, self.max_translate * height as f64),
            },
            1 => AugmentOp::Shear {
                shear_x: sym(rng, self.max_shear),
                shear_y: sym(rng, self.max_shear),
            },
            _ => AugmentOp::Rotate {
                degrees: sym(rng, self.max_rotate_degrees),
            },
        }
    }

    /// Samples branch chains and mixing weights.
    pub fn sample_plan<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Result<MixPlan> {
        let mut branches = [[AugmentOp::IDENTITY; CHAIN_DEPTH]; BRANCH_COUNT];
        for chain in branches.iter_mut() {
            for op in chain.iter_mut() {
                *op = self.sample_op(height, width, rng);
            }
        }
        let weights = match self.fixed_weights {
            Some(w) => w,
            None => {
                let dir = Dirichlet::new([self.dirichlet_alpha; BRANCH_COUNT])
                    .map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
                let beta = Beta::new(self.beta_alpha, self.beta_alpha)
                    .map_err(|e| Error::Config(format!("beta: {e}")))?;
                let split: [f64; BRANCH_COUNT] = dir.sample(rng);
                let m: f64 = beta.sample(rng);
                [m * split[0], m * split[1], m * split[2], 1.0 - m]
            }
        };
        Ok(MixPlan { branches, weights })
    }
}

/// One concrete MaskMix draw: three op chains and `[w1, w2, w3, w4]`,
/// where `w4` weighs the untouched seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub branches: [[AugmentOp; CHAIN_DEPTH]; BRANCH_COUNT],
    pub weights: [f64; 4],
}

impl MixPlan {
    pub fn identity() -> Self {
        Self {
            branches: [[AugmentOp::IDENTITY; CHAIN_DEPTH]; BRANCH_COUNT],
            weights: [0.0, 0.0, 0.0, 1.0],
        }
    }
}

/// Evaluates the mix for a fixed plan and thresholds the weighted sum.
pub fn mix_with_plan(seed: &OcclusionMask, plan: &MixPlan, threshold: f64) -> OcclusionMask {
    let mut acc = seed.grid.mapv(|v| plan.weights[3] * f64::from(v));
    for (chain, &w) in plan.branches.iter().zip(&plan.weights[..BRANCH_COUNT]) {
        if w == 0.0 {
            continue;
        }
        let augmented = chain.iter().fold(seed.clone(), |m, op| apply_op(&m, op));
        acc.zip_mut_with(&augmented.grid, |a, &v| *a += w * f64::from(v));
    }
    OcclusionMask {
        grid: acc.mapv(|v| u8::from(v >= threshold)),
    }
}

/// MaskMix: mixes the seed with three randomly augmented copies of itself
/// and thresholds the result back to a binary mask.
pub fn maskmix<R: Rng + ?Sized>(seed: &OcclusionMask, cfg: &MixConfig, rng: &mut R) -> Result<OcclusionMask> {
    MASKMIX_CALLS.with(|c| c.set(c.get() + 1));
    cfg.validate()?;
    if seed.is_empty() {
        return Err(Error::EmptySeed);
    }
    let plan = cfg.sample_plan(seed.height(), seed.width(), rng)?;
    Ok(mix_with_plan(seed, &plan, cfg.threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionSpec {
    pub area_lo: f64,
    pub area_hi: f64,
    pub max_rotate_degrees: f64,
    /// Translation range as a fraction of the image side.
    pub max_translate: f64,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self::new(0.15, 0.60)
    }
}

impl OcclusionSpec {
    pub fn new(area_lo: f64, area_hi: f64) -> Self {
        Self {
            area_lo,
            area_hi,
            max_rotate_degrees: 180.0,
            max_translate: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area_lo > 0.0 && self.area_lo <= self.area_hi && self.area_hi < 1.0) {
            return Err(Error::Config(format!(
                "occlusion area bounds [{}, {}] must satisfy 0 < lo <= hi < 1",
                self.area_lo, self.area_hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.area_lo && ratio <= self.area_hi
    }
}

/// Places a random seed from `pool` on an `height x width` canvas with a
/// random rotation, translation and resize, retrying until the occluded
/// area falls inside `spec`.
pub fn synthesize_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    seed_pool: &[OcclusionMask],
    spec: &OcclusionSpec,
    rng: &mut R,
) -> Result<OcclusionMask> {
    spec.validate()?;
    if seed_pool.is_empty() {
        return Err(Error::Empty("seed pool"));
    }
    for _ in 0..SYNTHESIS_ATTEMPTS {
        let seed = seed_pool[rng.random_range(0..seed_pool.len())].resize_nearest(height, width);
        let seed_area = area_ratio(&seed);
        // Draw a target area and derive the resize factor from it; cropping
        // at the frame border is what the retry loop absorbs.
        let target = rng.random_range(spec.area_lo..=spec.area_hi);
        let scale = if seed_area > 0.0 {
            (target / seed_area).sqrt().clamp(0.2, 5.0)
        } else {
            1.0
        };
        let degrees = rng.random_range(-spec.max_rotate_degrees..=spec.max_rotate_degrees);
        let tx = spec.max_translate * width as f64;
        let ty = spec.max_translate * height as f64;
        let dx = if tx > 0.0 { rng.random_range(-tx..=tx) } else { 0.0 };
        let dy = if ty > 0.0 { rng.random_range(-ty..=ty) } else { 0.0 };
        let forward = Affine::scaling(scale)
            .then(&Affine::rotation(degrees))
            .then(&Affine::translation(dx, dy));
        let placed = warp(&seed, &forward);
        if !placed.is_empty() && spec.contains(area_ratio(&placed)) {
            return Ok(placed);
        }
    }
    Err(Error::OcclusionRetriesExhausted {
        lo: spec.area_lo,
        hi: spec.area_hi,
        attempts: SYNTHESIS_ATTEMPTS,
    })
}

/// Synthesizes a mask for `image` (H×W×3) and returns the occluded image with it.
pub fn synthesize_occlusion<R: Rng + ?Sized>(
    image: &Array3<f32>,
    seed_pool: &[OcclusionMask],
    spec: &OcclusionSpec,
    rng: &mut R,
) -> Result<(Array3<f32>, OcclusionMask)> {
    let (h, w, _) = image.dim();
    let mask = synthesize_mask(h, w, seed_pool, spec, rng)?;
    let occluded = crate::data::compose_occluded(image, &mask)?;
    Ok((occluded, mask))
}

/// Loads every PNG in `dir` (sorted by file name) as a seed mask.
pub fn load_seed_pool(dir: impl AsRef<Path>) -> Result<Vec<OcclusionMask>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    let pool = paths
        .iter()
        .map(OcclusionMask::load_png)
        .collect::<Result<Vec<_>>>()?;
    if pool.is_empty() {
        return Err(Error::Empty("seed pool directory"));
    }
    Ok(pool)
}
