//! Reconstruction, perceptual and adversarial losses and their composition.

use std::path::PathBuf;

use candle_core::{Device, DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softplus, Init, ParamStore};
use crate::vgg::{vgg16_stages, VggFeatures, VggStage};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn l1_loss(reconstruction: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(reconstruction, target, "l1_loss")?;
    Ok((reconstruction - target)?.abs()?.mean_all()?)
}

// ---------------------------------------------------------------------------
// Perceptual distance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpipsConfig {
    pub stages: Vec<VggStage>,
    /// Safetensors holding `features.<idx>.*` and `lin<k>.weight` (or the
    /// reference `lin<k>.model.1.weight`) tensors.
    pub weights: Option<PathBuf>,
    /// Seed for the stand-in features used when no weights are supplied.
    pub seed: u64,
}

impl Default for LpipsConfig {
    fn default() -> Self {
        Self {
            stages: vgg16_stages(),
            weights: None,
            seed: 0x1b1b5,
        }
    }
}

impl LpipsConfig {
    pub fn tiny() -> Self {
        Self {
            stages: [(8, 1), (16, 1), (16, 1)]
                .into_iter()
                .map(|(width, convs)| VggStage { width, convs })
                .collect(),
            ..Self::default()
        }
    }
}

/// Input shift and scale applied after mapping `[0, 1]` to `[-1, 1]`.
pub const LPIPS_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
pub const LPIPS_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// Learned perceptual distance over a frozen feature stack: per tap, unit-
/// normalise channels, square the difference, weight channels with the
/// nonnegative linear head, average spatially; sum over taps.
pub struct Lpips {
    store: ParamStore,
    features: VggFeatures,
    lins: Vec<Tensor>,
    shift: Tensor,
    scale: Tensor,
}

impl Lpips {
    pub fn new(cfg: &LpipsConfig, device: &Device, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(device, dtype, cfg.seed, false);
        let features = VggFeatures::new(&mut store, "features", 3, &cfg.stages)?;
        let lins = features
            .stage_widths()
            .iter()
            .enumerate()
            .map(|(k, &c)| store.param(&format!("lin{k}.weight"), &[1, c, 1, 1], Init::Ones))
            .collect::<Result<Vec<_>>>()?;
        match &cfg.weights {
            Some(path) => {
                let tensors = crate::nn::read_safetensors(path, device)?;
                store.load_tensors(&tensors, true, |n| {
                    Some(match n.strip_suffix(".model.1.weight") {
                        Some(lin) => format!("{lin}.weight"),
                        None => n.strip_prefix("net.").unwrap_or(n).to_string(),
                    })
                })?;
            }
            None => log::warn!("perceptual loss is using seeded stand-in features; supply LPIPS weights for real runs"),
        }
        let shift = Tensor::new(&LPIPS_SHIFT, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let scale = Tensor::new(&LPIPS_SCALE, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            store,
            features,
            lins,
            shift,
            scale,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Per-sample distances, shape N.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "perceptual_loss")?;
        if a.dims4()?.1 != 3 {
            return Err(Error::Shape("perceptual loss takes 3-channel images".into()));
        }
        let prep = |x: &Tensor| -> Result<Tensor> {
            Ok(x.affine(2.0, -1.0)?.broadcast_sub(&self.shift)?.broadcast_div(&self.scale)?)
        };
        let fa = self.features.taps(&prep(a)?)?;
        let fb = self.features.taps(&prep(b)?)?;
        let mut total: Option<Tensor> = None;
        for ((x, y), lin) in fa.iter().zip(&fb).zip(&self.lins) {
            let d = (unit_normalize(x)? - unit_normalize(y)?)?.sqr()?;
            let weighted = d.broadcast_mul(lin)?.sum_keepdim(1)?;
            let per_sample = weighted.mean((1, 2, 3))?;
            total = Some(match total {
                Some(t) => (t + per_sample)?,
                None => per_sample,
            });
        }
        Ok(total.expect("at least one tap"))
    }

    /// Batch mean of `distance`.
    pub fn loss(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.distance(a, b)?.mean_all()?)
    }

    /// Linear-head weights per tap, as flat vectors.
    pub fn lin_weights(&self) -> Result<Vec<Vec<f64>>> {
        self.lins
            .iter()
            .map(|l| Ok(l.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?))
            .collect()
    }
}

/// `x / (‖x‖₂ over channels + 1e-10)`. The 1e-20 under the root keeps the
/// gradient finite for all-zero feature vectors (common after ReLU).
fn unit_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-20)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-10)?)?)
}

// ---------------------------------------------------------------------------
// Adversarial terms (binary cross-entropy on patch logits)

/// Mean binary cross-entropy of `logits` against a constant target (0 or 1).
pub fn bce_with_logits(logits: &Tensor, target_real: bool) -> Result<Tensor> {
    let x = if target_real { logits.neg()? } else { logits.clone() };
    Ok(softplus(&x)?.mean_all()?)
}

/// Discriminator loss to minimise: `−[log D(real) + log(1 − D(fake))]`,
/// each averaged over the patch grid and batch.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok((bce_with_logits(real_logits, true)? + bce_with_logits(fake_logits, false)?)?)
}

/// Non-saturating generator surrogate: `−log D(fake)` summed over both discriminators.
pub fn generator_adversarial_loss(fake_coarse_logits: &Tensor, fake_refined_logits: &Tensor) -> Result<Tensor> {
    Ok((bce_with_logits(fake_coarse_logits, true)? + bce_with_logits(fake_refined_logits, true)?)?)
}

/// Value of the minimax objective
/// `E log Dc(I, Igt) + E log(1 − Dc(I, Gc)) + E log Dr(I, Igt) + E log(1 − Dr(I, Gr))`.
pub fn gan_objective(
    coarse_real: &Tensor,
    coarse_fake: &Tensor,
    refined_real: &Tensor,
    refined_fake: &Tensor,
) -> Result<f64> {
    let d = (discriminator_loss(coarse_real, coarse_fake)? + discriminator_loss(refined_real, refined_fake)?)?;
    Ok(-d.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// Composition

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_task: f64,
}

impl LossWeights {
    pub fn new(lambda_task: f64) -> Result<Self> {
        if !(lambda_task >= 0.0) || !lambda_task.is_finite() {
            return Err(Error::Config(format!("task weight {lambda_task} must be finite and >= 0")));
        }
        Ok(Self { lambda_task })
    }
}

/// Generator-side loss terms of one step, as graph tensors.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub l1_coarse: Tensor,
    pub l1_refined: Tensor,
    pub perceptual_refined: Tensor,
    pub gan_generator: Tensor,
    pub task: Tensor,
}

/// `L1(coarse) + L1(refined) + LPIPS(refined) + GAN + λ·task`.
pub fn overall_loss(terms: &GeneratorTerms, weights: &LossWeights) -> Result<Tensor> {
    let recon = (&terms.l1_coarse + &terms.l1_refined)?;
    let total = ((recon + &terms.perceptual_refined)? + &terms.gan_generator)?;
    Ok((total + (&terms.task * weights.lambda_task)?)?)
}

/// Scalar values of every loss in one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    #[serde(rename = "l1_c")]
    pub l1_coarse: f64,
    #[serde(rename = "l1_r")]
    pub l1_refined: f64,
    #[serde(rename = "lpips")]
    pub perceptual_refined: f64,
    #[serde(rename = "g_adv")]
    pub gan_generator: f64,
    #[serde(rename = "d_c")]
    pub gan_discriminator_coarse: f64,
    #[serde(rename = "d_r")]
    pub gan_discriminator_refined: f64,
    pub task: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total` recomputed from the scalar components.
    pub fn composed_total(&self, weights: &LossWeights) -> f64 {
        self.l1_coarse + self.l1_refined + self.perceptual_refined + self.gan_generator + weights.lambda_task * self.task
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l1_coarse,
            self.l1_refined,
            self.perceptual_refined,
            self.gan_generator,
            self.gan_discriminator_coarse,
            self.gan_discriminator_refined,
            self.task,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_tensor(&[2, 3, 4, 4], &mut rng);
        assert_eq!(scalar(&l1_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let shifted = (&a + 0.1).unwrap();
        assert!((scalar(&l1_loss(&shifted, &a).unwrap()).unwrap() - 0.1).abs() < 1e-12);
        let b = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let va: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = b.flatten_all().unwrap().to_vec1().unwrap();
        let mut s = 0.0;
        for i in 0..va.len() {
            s += (va[i] - vb[i]).abs();
        }
        let got = scalar(&l1_loss(&a, &b).unwrap()).unwrap();
        assert!((got - s / va.len() as f64).abs() < 1e-12);
        assert!(l1_loss(&a, &b.narrow(3, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn gan_objective_at_half_probability() {
        let z = Tensor::zeros((2, 1, 5, 5), DType::F64, &Device::Cpu).unwrap();
        let v = gan_objective(&z, &z, &z, &z).unwrap();
        assert!((v - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 2.7726).abs() < 1e-4);
    }

    #[test]
    fn optimal_discriminator_limits() {
        let real = Tensor::full(40f64, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let fake = Tensor::full(-40f64, (1, 1, 3, 3), &Device::Cpu).unwrap();
        assert!(scalar(&discriminator_loss(&real, &fake).unwrap()).unwrap() < 1e-15);
        assert!(scalar(&generator_adversarial_loss(&fake, &fake).unwrap()).unwrap() > 79.0);
    }

    #[test]
    fn bce_equals_flat_loop_over_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = rand_tensor(&[3, 1, 6, 6], &mut rng).affine(8.0, -4.0).unwrap();
        let v: Vec<f64> = logits.flatten_all().unwrap().to_vec1().unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let real: f64 = v.iter().map(|&x| -sig(x).ln()).sum::<f64>() / v.len() as f64;
        let fake: f64 = v.iter().map(|&x| -(1.0 - sig(x)).ln()).sum::<f64>() / v.len() as f64;
        assert!((scalar(&bce_with_logits(&logits, true).unwrap()).unwrap() - real).abs() < 1e-12);
        assert!((scalar(&bce_with_logits(&logits, false).unwrap()).unwrap() - fake).abs() < 1e-12);
    }

    fn terms(rng: &mut ChaCha8Rng) -> GeneratorTerms {
        let mut s = || Tensor::new(rng.random::<f64>(), &Device::Cpu).unwrap();
        GeneratorTerms {
            l1_coarse: s(),
            l1_refined: s(),
            perceptual_refined: s(),
            gan_generator: s(),
            task: s(),
        }
    }

    #[test]
    fn overall_matches_hand_sum_and_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = terms(&mut rng);
            let lambda = rng.random_range(0.0..10.0);
            let got = scalar(&overall_loss(&t, &LossWeights::new(lambda).unwrap()).unwrap()).unwrap();
            let v = |x: &Tensor| scalar(x).unwrap();
            let expect = v(&t.l1_coarse) + v(&t.l1_refined) + v(&t.perceptual_refined) + v(&t.gan_generator)
                + lambda * v(&t.task);
            assert!((got - expect).abs() < 1e-12);
            let at0 = scalar(&overall_loss(&t, &LossWeights::new(0.0).unwrap()).unwrap()).unwrap();
            let at1 = scalar(&overall_loss(&t, &LossWeights::new(1.0).unwrap()).unwrap()).unwrap();
            assert!((got - (at0 + lambda * (at1 - at0))).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_lambda_ignores_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = terms(&mut rng);
        let w = LossWeights::new(0.0).unwrap();
        let a = scalar(&overall_loss(&t, &w).unwrap()).unwrap();
        t.task = Tensor::new(1234.5f64, &Device::Cpu).unwrap();
        assert_eq!(a, scalar(&overall_loss(&t, &w).unwrap()).unwrap());
        assert!(LossWeights::new(-1.0).is_err());
    }

    #[test]
    fn lpips_zero_on_identical_and_symmetric() {
        let lp = Lpips::new(&LpipsConfig::tiny(), &Device::Cpu, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&[2, 3, 16, 16], &mut rng);
        let b = rand_tensor(&[2, 3, 16, 16], &mut rng);
        assert_eq!(scalar(&lp.loss(&a, &a).unwrap()).unwrap(), 0.0);
        let ab = scalar(&lp.loss(&a, &b).unwrap()).unwrap();
        let ba = scalar(&lp.loss(&b, &a).unwrap()).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn lpips_gradient_finite_on_blank_images() {
        let lp = Lpips::new(&LpipsConfig::tiny(), &Device::Cpu, DType::F64).unwrap();
        let x = candle_core::Var::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::full(0.5f64, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let grads = lp.loss(x.as_tensor(), &target).unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
