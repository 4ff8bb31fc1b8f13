//! Adversarial training, evaluation and test-time reconstruction.

use std::io::Write;

use candle_core::{DType, Device, Tensor};

use crate::adapters::TaskAdapter;
use crate::config::RunConfig;
use crate::data::{make_batch, tensor_to_images, Batch, BatchLabels, Dataset, MaskPolicy};
use crate::error::{Error, Result};
use crate::loss::{
    discriminator_loss, generator_adversarial_loss, l1_loss, overall_loss, scalar, GeneratorTerms, LossBreakdown,
    LossWeights, Lpips,
};
use crate::mask::OcclusionMask;
use crate::metrics::{self, ConfusionMatrix, MetricReport, RecallK, TaskMetrics};
use crate::model::{compose_discriminator_input, Generator, GeneratorOutput, PatchDiscriminator};
use crate::nn::{Adam, Mode, ParamStore};

/// Environment variable that turns on deterministic mode when set to a
/// non-empty value other than `0`.
pub const DETERMINISTIC_ENV: &str = "GEOINPAINT_DETERMINISTIC";

/// Pins the tensor backend to one worker thread when deterministic mode is
/// requested. Must run before the first tensor operation. Returns whether the
/// mode is on.
pub fn init_deterministic_mode() -> bool {
    let on = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
    if on {
        // SAFETY: called at startup, before any worker thread exists.
        unsafe { std::env::set_var("RAYON_NUM_THREADS", "1") };
    }
    on
}

const EMA_DECAY: f64 = 0.98;

/// Everything needed to continue training: the three networks, their
/// optimisers, the step counter and the running loss averages. The data
/// stream is a pure function of `(seed, step)`, so these fields are the
/// whole rng state.
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub averages: Option<LossBreakdown>,
    pub(crate) g_store: ParamStore,
    pub(crate) dc_store: ParamStore,
    pub(crate) dr_store: ParamStore,
    generator: Generator,
    disc_coarse: PatchDiscriminator,
    disc_refined: PatchDiscriminator,
    pub(crate) g_opt: Adam,
    pub(crate) dc_opt: Adam,
    pub(crate) dr_opt: Adam,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let mut g_store = ParamStore::new(device, dtype, cfg.seed, true);
        let generator = Generator::new(&mut g_store, &cfg.generator)?;
        let mut dc_store = ParamStore::new(device, dtype, cfg.seed.wrapping_add(1), true);
        let disc_coarse = PatchDiscriminator::new(&mut dc_store, "disc_coarse", &cfg.discriminator)?;
        let mut dr_store = ParamStore::new(device, dtype, cfg.seed.wrapping_add(2), true);
        let disc_refined = PatchDiscriminator::new(&mut dr_store, "disc_refined", &cfg.discriminator)?;
        Ok(Self {
            step: 0,
            seed: cfg.seed,
            averages: None,
            g_opt: Adam::new(g_store.trainable_vars(), cfg.optimizer),
            dc_opt: Adam::new(dc_store.trainable_vars(), cfg.optimizer),
            dr_opt: Adam::new(dr_store.trainable_vars(), cfg.optimizer),
            g_store,
            dc_store,
            dr_store,
            generator,
            disc_coarse,
            disc_refined,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.g_store
    }

    pub fn discriminator_stores(&self) -> (&ParamStore, &ParamStore) {
        (&self.dc_store, &self.dr_store)
    }

    /// Generator-side loss terms (graph tensors) for a batch; every network runs in `mode`.
    pub fn generator_terms(
        &self,
        batch: &Batch,
        adapter: &TaskAdapter,
        lpips: &Lpips,
        mode: Mode,
    ) -> Result<(GeneratorTerms, GeneratorOutput)> {
        let out = self.generator.forward(&batch.generator_input, &batch.mask, mode)?;
        Ok((self.terms_for(&out, batch, adapter, lpips, mode)?, out))
    }

    fn terms_for(
        &self,
        out: &GeneratorOutput,
        batch: &Batch,
        adapter: &TaskAdapter,
        lpips: &Lpips,
        mode: Mode,
    ) -> Result<GeneratorTerms> {
        let fake_c = compose_discriminator_input(&out.coarse, &batch.occluded, &batch.mask)?;
        let fake_r = compose_discriminator_input(&out.refined, &batch.occluded, &batch.mask)?;
        Ok(GeneratorTerms {
            l1_coarse: l1_loss(&out.coarse, &batch.clean)?,
            l1_refined: l1_loss(&out.refined, &batch.clean)?,
            perceptual_refined: lpips.loss(&out.refined, &batch.clean)?,
            gan_generator: generator_adversarial_loss(
                &self.disc_coarse.forward(&batch.occluded, &fake_c, mode)?,
                &self.disc_refined.forward(&batch.occluded, &fake_r, mode)?,
            )?,
            // The task network only ever sees valid images at test time; unclamped,
            // the residual can saturate its logits with out-of-range pixels.
            task: adapter.task_loss(&fake_r.clamp(0.0, 1.0)?, &batch.labels)?,
        })
    }

    /// One discriminator update (both discriminators, on detached fakes)
    /// followed by one generator update.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        adapter: &TaskAdapter,
        lpips: &Lpips,
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        let out = self.generator.forward(&batch.generator_input, &batch.mask, Mode::Train)?;
        let (d_c, d_r) = self.discriminator_step(batch, &out)?;
        // Generator update against the freshly updated discriminators.
        let breakdown = LossBreakdown {
            gan_discriminator_coarse: d_c,
            gan_discriminator_refined: d_r,
            ..self.generator_step(batch, &out, adapter, lpips, weights)?
        };
        self.step = breakdown.step;
        self.update_averages(&breakdown);
        Ok(breakdown)
    }

    /// Updates both discriminators on `out` composed into the batch and
    /// detached, so no gradient reaches the generator. Returns `(d_c, d_r)`.
    pub fn discriminator_step(&mut self, batch: &Batch, out: &GeneratorOutput) -> Result<(f64, f64)> {
        let fake_c = compose_discriminator_input(&out.coarse.detach(), &batch.occluded, &batch.mask)?;
        let fake_r = compose_discriminator_input(&out.refined.detach(), &batch.occluded, &batch.mask)?;
        let d_c = discriminator_loss(
            &self.disc_coarse.forward(&batch.occluded, &batch.clean, Mode::Train)?,
            &self.disc_coarse.forward(&batch.occluded, &fake_c, Mode::Train)?,
        )?;
        let d_r = discriminator_loss(
            &self.disc_refined.forward(&batch.occluded, &batch.clean, Mode::Train)?,
            &self.disc_refined.forward(&batch.occluded, &fake_r, Mode::Train)?,
        )?;
        let (d_c_val, d_r_val) = (scalar(&d_c)?, scalar(&d_r)?);
        if !d_c_val.is_finite() || !d_r_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                detail: format!("discriminator losses d_c={d_c_val} d_r={d_r_val}"),
            });
        }
        let d_grads = (d_c + d_r)?.backward()?;
        self.dc_opt.step(&d_grads)?;
        self.dr_opt.step(&d_grads)?;
        Ok((d_c_val, d_r_val))
    }

    /// Updates the generator only; the discriminators and frozen networks
    /// receive no update. The returned breakdown has zero discriminator terms
    /// and does not advance the step counter.
    pub fn generator_step(
        &mut self,
        batch: &Batch,
        out: &GeneratorOutput,
        adapter: &TaskAdapter,
        lpips: &Lpips,
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        let terms = self.terms_for(out, batch, adapter, lpips, Mode::Train)?;
        let total = overall_loss(&terms, weights)?;
        let breakdown = LossBreakdown {
            step: self.step + 1,
            l1_coarse: scalar(&terms.l1_coarse)?,
            l1_refined: scalar(&terms.l1_refined)?,
            perceptual_refined: scalar(&terms.perceptual_refined)?,
            gan_generator: scalar(&terms.gan_generator)?,
            gan_discriminator_coarse: 0.0,
            gan_discriminator_refined: 0.0,
            task: scalar(&terms.task)?,
            total: scalar(&total)?,
        };
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: breakdown.step,
                detail: serde_json::to_string(&breakdown).unwrap_or_default(),
            });
        }
        let mut g_grads = total.backward()?;
        adapter.strip_grads(&mut g_grads);
        lpips.store().strip_grads(&mut g_grads);
        self.g_opt.step(&g_grads)?;
        Ok(breakdown)
    }

    fn update_averages(&mut self, b: &LossBreakdown) {
        self.averages = Some(match self.averages {
            None => *b,
            Some(a) => {
                let m = |x: f64, y: f64| EMA_DECAY * x + (1.0 - EMA_DECAY) * y;
                LossBreakdown {
                    step: b.step,
                    l1_coarse: m(a.l1_coarse, b.l1_coarse),
                    l1_refined: m(a.l1_refined, b.l1_refined),
                    perceptual_refined: m(a.perceptual_refined, b.perceptual_refined),
                    gan_generator: m(a.gan_generator, b.gan_generator),
                    gan_discriminator_coarse: m(a.gan_discriminator_coarse, b.gan_discriminator_coarse),
                    gan_discriminator_refined: m(a.gan_discriminator_refined, b.gan_discriminator_refined),
                    task: m(a.task, b.task),
                    total: m(a.total, b.total),
                }
            }
        });
    }
}

/// `R_refined` composed into the occluded image and clamped to `[0, 1]`:
/// the test-time output. `occluded` is N×3×H×W, `mask` N×1×H×W.
pub fn reconstruct(generator: &Generator, occluded: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let input = Tensor::cat(&[occluded, mask], 1)?;
    let out = generator.forward(&input, mask, Mode::Eval)?;
    Ok(compose_discriminator_input(&out.refined, occluded, mask)?.clamp(0.0, 1.0)?)
}

/// Inpaints one image. Sizes must be divisible by 32.
pub fn inpaint(
    generator: &Generator,
    image: &ndarray::Array3<f32>,
    mask: &OcclusionMask,
    device: &Device,
    dtype: DType,
) -> Result<ndarray::Array3<f32>> {
    let occluded = crate::data::compose_occluded(image, mask)?;
    let x = crate::data::images_to_tensor(&[&occluded], device, dtype)?;
    let m = crate::data::masks_to_tensor(&[mask], device, dtype)?;
    Ok(tensor_to_images(&reconstruct(generator, &x, &m)?)?.remove(0))
}

/// Which images are scored during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Composed generator reconstructions.
    Generator,
    /// The occluded input itself (identity reconstruction).
    Occluded,
    /// Clean images (task-network upper bound).
    Clean,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Generator => "generator",
            EvalMode::Occluded => "occluded",
            EvalMode::Clean => "clean",
        }
    }
}

/// Scores every sample of `dataset` with its fixed mask. MaskMix is never applied.
pub fn evaluate(
    generator: Option<&Generator>,
    dataset: &Dataset,
    adapter: &TaskAdapter,
    mode: EvalMode,
    batch_size: usize,
    device: &Device,
    dtype: DType,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    if adapter.kind().task() != dataset.task() {
        return Err(Error::Config("adapter does not match the dataset task".into()));
    }
    let policy = MaskPolicy::default();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let (mut masked_sum, mut masked_n) = (0.0, 0usize);
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    let (mut queries, mut gallery) = (Vec::new(), Vec::new());
    let mut confusion = ConfusionMatrix::new(adapter.config().num_classes);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|&i| dataset.sample(i, &policy, &mut Dataset::sample_rng(0, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&samples, dataset.image_size(), device, dtype)?;
        let scored = match mode {
            EvalMode::Generator => {
                let g = generator.ok_or_else(|| Error::Config("generator evaluation needs a checkpoint".into()))?;
                reconstruct(g, &batch.occluded, &batch.mask)?
            }
            EvalMode::Occluded => batch.occluded.clone(),
            EvalMode::Clean => batch.clean.clone(),
        };
        let images = tensor_to_images(&scored)?;
        let clean = tensor_to_images(&batch.clean)?;
        for ((img, gt), s) in images.iter().zip(&clean).zip(&samples) {
            psnr_sum += metrics::psnr(img, gt)?;
            ssim_sum += metrics::ssim(img, gt)?;
            let mask = s.mask.resize_nearest(dataset.image_size(), dataset.image_size());
            if let Some(p) = metrics::masked_psnr(img, gt, &mask)? {
                masked_sum += p;
                masked_n += 1;
            }
        }
        match &batch.labels {
            BatchLabels::Classes(ids) => {
                preds.extend(adapter.predict_classes(&scored)?);
                truth.extend(ids.iter().copied());
            }
            BatchLabels::Pairs { satellite, .. } => {
                queries.extend(adapter.embed(&scored, false)?);
                gallery.extend(adapter.embed(satellite, true)?);
            }
            BatchLabels::ClassMaps(maps) => {
                let gt = maps.to_dtype(DType::U32)?;
                let (n, h, w) = gt.dims3()?;
                let v: Vec<u32> = gt.flatten_all()?.to_vec1()?;
                for (i, pred) in adapter.predict_maps(&scored)?.iter().enumerate() {
                    let g = ndarray::Array2::from_shape_fn((h, w), |(y, x)| v[(i * h + y) * w + x] as u8);
                    confusion.add(pred, &g, crate::data::IGNORE_INDEX)?;
                }
                debug_assert_eq!(n, chunk.len());
            }
        }
    }
    let n = dataset.len();
    let task = match dataset.task() {
        crate::data::TaskKind::Classification => TaskMetrics::Classification {
            accuracy: metrics::accuracy(&preds, &truth)?,
        },
        crate::data::TaskKind::Geolocation => {
            let pairs: Vec<Option<usize>> = (0..n).map(Some).collect();
            let r = |k| metrics::recall_at_k(&queries, &gallery, &pairs, k);
            TaskMetrics::Geolocation {
                recall_1: r(RecallK::Rank(1))?,
                recall_5: r(RecallK::Rank(5))?,
                recall_10: r(RecallK::Rank(10))?,
                recall_top1pct: r(RecallK::TopOnePercent)?,
                ap: metrics::average_precision(&metrics::relevance_lists(&queries, &gallery, &pairs)?)?,
            }
        }
        crate::data::TaskKind::Segmentation => TaskMetrics::Segmentation { miou: confusion.miou()? },
    };
    let psnr = psnr_sum / n as f64;
    let masked = masked_sum / masked_n.max(1) as f64;
    let report = MetricReport {
        mode: mode.name().into(),
        samples: n,
        psnr: psnr.is_finite().then_some(psnr),
        ssim: ssim_sum / n as f64,
        masked_psnr: (masked_n > 0 && masked.is_finite()).then_some(masked),
        task,
    };
    report.validate()?;
    Ok(report)
}

/// Training driver: owns the data stream, the frozen networks and the state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    pub adapter: TaskAdapter,
    pub lpips: Lpips,
    dataset: Dataset,
    policy: MaskPolicy,
    weights: LossWeights,
    device: Device,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, dataset: Dataset, device: &Device) -> Result<Self> {
        let state = TrainState::new(cfg, device)?;
        Self::with_state(cfg, dataset, state, device)
    }

    pub fn with_state(cfg: &RunConfig, dataset: Dataset, state: TrainState, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        if dataset.task() != cfg.task || dataset.image_size() != cfg.image_size() {
            return Err(Error::Config(format!(
                "dataset ({:?}, {}px) does not match the run ({:?}, {}px)",
                dataset.task(),
                dataset.image_size(),
                cfg.task,
                cfg.image_size()
            )));
        }
        let dtype = cfg.precision.dtype();
        Ok(Self {
            adapter: TaskAdapter::new(&cfg.adapter, device, dtype)?,
            lpips: Lpips::new(&cfg.perceptual, device, dtype)?,
            policy: MaskPolicy {
                spec: cfg.occlusion.clone(),
                maskmix: cfg.maskmix_enabled.then(|| cfg.maskmix.clone()),
            },
            weights: cfg.loss_weights()?,
            cfg: cfg.clone(),
            state,
            dataset,
            device: device.clone(),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// The batch consumed by training step `step` (0-based), a pure function of `(seed, step)`.
    pub fn batch_for_step(&self, step: u64) -> Result<Batch> {
        let samples = self
            .dataset
            .step_indices(self.state.seed, step, self.cfg.batch_size)
            .into_iter()
            .map(|(idx, pos)| self.dataset.sample(idx, &self.policy, &mut Dataset::sample_rng(self.state.seed, pos)))
            .collect::<Result<Vec<_>>>()?;
        make_batch(&samples, self.dataset.image_size(), &self.device, self.cfg.precision.dtype())
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.batch_for_step(self.state.step)?;
        self.state.train_step(&batch, &self.adapter, &self.lpips, &self.weights)
    }

    /// Runs until `max_steps`, writing every breakdown to `log` as JSON lines
    /// and calling `checkpoint` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        mut log: Option<&mut dyn Write>,
        mut checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Option<LossBreakdown>> {
        let mut last = None;
        while self.state.step < self.cfg.max_steps {
            let b = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&b).map_err(|e| Error::Config(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
            }
            if self.cfg.log_every > 0 && b.step % self.cfg.log_every == 0 {
                log::info!(
                    "step {} total {:.4} l1_r {:.4} task {:.4} d_c {:.4} d_r {:.4}",
                    b.step,
                    b.total,
                    b.l1_refined,
                    b.task,
                    b.gan_discriminator_coarse,
                    b.gan_discriminator_refined
                );
            }
            if self.cfg.checkpoint_every > 0 && b.step % self.cfg.checkpoint_every == 0 {
                checkpoint(self)?;
            }
            last = Some(b);
        }
        Ok(last)
    }
}
