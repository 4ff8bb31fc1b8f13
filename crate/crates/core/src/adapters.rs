//! Frozen task networks and their losses.
//!
//! Every adapter lives in a non-trainable [`ParamStore`]; images enter in
//! `[0, 1]` and are normalised inside the adapter.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{BatchLabels, TaskKind, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, global_avg_pool, log_softmax, Adam, AdamConfig, BatchNorm2d, Conv2d, Init, Linear, Mode, ParamStore};
use crate::vgg::{vgg16_stages, VggFeatures, VggStage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Classification,
    Geolocation,
    Segmentation,
    TestStub,
}

impl AdapterKind {
    pub fn task(self) -> TaskKind {
        match self {
            AdapterKind::Classification | AdapterKind::TestStub => TaskKind::Classification,
            AdapterKind::Geolocation => TaskKind::Geolocation,
            AdapterKind::Segmentation => TaskKind::Segmentation,
        }
    }
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    /// Safetensors with the frozen weights. Without it the network keeps its
    /// seeded initialisation, which is only useful for wiring tests.
    pub weights_path: Option<PathBuf>,
    pub num_classes: usize,
    pub num_identities: usize,
    /// Square-ring parts of the geolocation network.
    pub parts: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Convolutional stages of the classification and geolocation backbones.
    pub backbone: Vec<VggStage>,
    /// Hidden width of the classification head.
    pub hidden: usize,
    /// Channel width of the stub and of the segmentation branches.
    pub width: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Classification,
            weights_path: None,
            num_classes: 7,
            num_identities: 2,
            parts: 4,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            backbone: vgg16_stages(),
            hidden: 4096,
            width: 32,
            seed: 0xada9,
        }
    }
}

impl AdapterConfig {
    pub fn stub(num_classes: usize) -> Self {
        Self {
            kind: AdapterKind::TestStub,
            num_classes,
            width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("adapter: {m}")));
        if self.num_classes == 0 || self.num_identities == 0 || self.parts == 0 || self.width == 0 {
            return bad("class, identity, part counts and width must be positive");
        }
        if self.kind == AdapterKind::Segmentation && self.num_classes > IGNORE_INDEX as usize {
            return bad("segmentation supports at most 255 classes");
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return bad("normalisation std must be positive");
        }
        Ok(())
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, Init::Kaiming { fan_in: cin * k * k })?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, Mode::Eval)?.relu()?)
    }
}

enum Net {
    Vgg {
        features: VggFeatures,
        fc: [Linear; 3],
    },
    Stub {
        conv1: Conv2d,
        conv2: Conv2d,
        fc: Linear,
    },
    Lpn {
        street: VggFeatures,
        satellite: VggFeatures,
        classifiers: Vec<Linear>,
        parts: usize,
    },
    Seg {
        stem: [ConvBn; 2],
        high: Vec<ConvBn>,
        transition: ConvBn,
        low: Vec<ConvBn>,
        fuse: Conv2d,
        head: Conv2d,
    },
}

const VGG_POOL: usize = 7;
/// Output stride of the segmentation stem.
const SEG_STRIDE: usize = 4;

fn build(store: &mut ParamStore, cfg: &AdapterConfig) -> Result<Net> {
    let k = |fan_in: usize| Init::Kaiming { fan_in };
    Ok(match cfg.kind {
        AdapterKind::Classification => {
            let features = VggFeatures::new(store, "features", 3, &cfg.backbone)?;
            let c = *features.stage_widths().last().expect("nonempty");
            let flat = c * VGG_POOL * VGG_POOL;
            Net::Vgg {
                features,
                fc: [
                    Linear::new(store, "classifier.0", flat, cfg.hidden, k(flat))?,
                    Linear::new(store, "classifier.3", cfg.hidden, cfg.hidden, k(cfg.hidden))?,
                    Linear::new(store, "classifier.6", cfg.hidden, cfg.num_classes, k(cfg.hidden))?,
                ],
            }
        }
        AdapterKind::TestStub => {
            let w = cfg.width;
            Net::Stub {
                conv1: Conv2d::new(store, "conv1", 3, w, 3, 2, 1, true, k(27))?,
                conv2: Conv2d::new(store, "conv2", w, 2 * w, 3, 2, 1, true, k(9 * w))?,
                fc: Linear::new(store, "fc", 2 * w, cfg.num_classes, Init::Normal(0.01))?,
            }
        }
        AdapterKind::Geolocation => {
            let street = VggFeatures::new(store, "street.features", 3, &cfg.backbone)?;
            let satellite = VggFeatures::new(store, "satellite.features", 3, &cfg.backbone)?;
            let c = *street.stage_widths().last().expect("nonempty");
            let classifiers = (0..cfg.parts)
                .map(|p| Linear::new(store, &format!("classifier{p}"), c, cfg.num_identities, Init::Normal(0.01)))
                .collect::<Result<_>>()?;
            Net::Lpn {
                street,
                satellite,
                classifiers,
                parts: cfg.parts,
            }
        }
        AdapterKind::Segmentation => {
            let w = cfg.width;
            Net::Seg {
                stem: [ConvBn::new(store, "stem.0", 3, w, 3, 2)?, ConvBn::new(store, "stem.1", w, w, 3, 2)?],
                high: (0..2)
                    .map(|i| ConvBn::new(store, &format!("branch_high.{i}"), w, w, 3, 1))
                    .collect::<Result<_>>()?,
                transition: ConvBn::new(store, "transition", w, 2 * w, 3, 2)?,
                low: (0..2)
                    .map(|i| ConvBn::new(store, &format!("branch_low.{i}"), 2 * w, 2 * w, 3, 1))
                    .collect::<Result<_>>()?,
                fuse: Conv2d::new(store, "fuse", 2 * w, w, 1, 1, 0, true, k(2 * w))?,
                head: Conv2d::new(store, "head", w, cfg.num_classes, 1, 1, 0, true, k(w))?,
            }
        }
    })
}

/// Ring index of every cell of an `h`×`w` map split into `parts` concentric
/// square rings, ring 0 at the centre.
pub fn square_ring_index(h: usize, w: usize, parts: usize) -> Array2<usize> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 + 0.5 - h as f64 / 2.0).abs() / (h as f64 / 2.0);
        let dx = (x as f64 + 0.5 - w as f64 / 2.0).abs() / (w as f64 / 2.0);
        (((dy.max(dx)) * parts as f64).floor() as usize).min(parts - 1)
    })
}

/// Mean feature of every ring: N×C×H×W → `parts` tensors of N×C.
fn ring_pool(x: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    let idx = square_ring_index(h, w, parts);
    let mut counts = vec![0usize; parts];
    idx.iter().for_each(|&p| counts[p] += 1);
    if counts.contains(&0) {
        return Err(Error::Shape(format!("{h}×{w} feature map is too small for {parts} ring parts")));
    }
    let mut weights = vec![0f64; h * w * parts];
    for (i, &p) in idx.iter().enumerate() {
        weights[i * parts + p] = 1.0 / counts[p] as f64;
    }
    let weights = Tensor::from_vec(weights, (h * w, parts), x.device())?.to_dtype(x.dtype())?;
    let pooled = x.reshape((n * c, h * w))?.matmul(&weights)?.reshape((n, c, parts))?;
    (0..parts).map(|p| Ok(pooled.narrow(2, p, 1)?.squeeze(2)?)).collect()
}

fn one_hot(targets: &[u32], classes: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f64; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= classes {
            return Err(Error::Label(format!("label {t} outside 0..{classes}")));
        }
        v[i * classes + t as usize] = 1.0;
    }
    Ok(Tensor::from_vec(v, (targets.len(), classes), device)?.to_dtype(dtype)?)
}

/// Mean cross-entropy of N×C logits against class ids.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(Error::Shape(format!("{n} logit rows for {} targets", targets.len())));
    }
    let oh = one_hot(targets, c, logits.device(), logits.dtype())?;
    Ok((log_softmax(logits)? * oh)?.sum_all()?.affine(-1.0 / n as f64, 0.0)?)
}

/// Sum over parts of the per-part mean cross-entropy.
pub fn summed_part_cross_entropy(part_logits: &[Tensor], targets: &[u32]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for l in part_logits {
        let ce = cross_entropy(l, targets)?;
        total = Some(match total {
            Some(t) => (t + ce)?,
            None => ce,
        });
    }
    total.ok_or(Error::Empty("part logits"))
}

/// Mean per-pixel cross-entropy of N×C×H×W logits against N×H×W class ids,
/// skipping `ignore_index` pixels.
pub fn pixel_cross_entropy(logits: &Tensor, targets: &Tensor, ignore_index: u32) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if targets.dims() != [n, h, w] {
        return Err(Error::Shape(format!("class maps {:?} do not match logits {:?}", targets.dims(), logits.dims())));
    }
    let ids: Vec<u32> = targets.to_dtype(DType::U32)?.flatten_all()?.to_vec1()?;
    let mut oh = vec![0f64; ids.len() * c];
    let mut valid = 0usize;
    for (i, &t) in ids.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        if t as usize >= c {
            return Err(Error::Label(format!("class {t} outside 0..{c}")));
        }
        oh[i * c + t as usize] = 1.0;
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Empty("non-ignored pixels"));
    }
    let oh = Tensor::from_vec(oh, (n, h, w, c), logits.device())?.to_dtype(logits.dtype())?;
    let lsm = log_softmax(&logits.permute((0, 2, 3, 1))?)?;
    Ok((lsm * oh)?.sum_all()?.affine(-1.0 / valid as f64, 0.0)?)
}

/// A frozen task network with its loss head.
pub struct TaskAdapter {
    cfg: AdapterConfig,
    store: ParamStore,
    net: Net,
    mean: Tensor,
    std: Tensor,
}

impl TaskAdapter {
    /// Builds the network in a frozen store and loads `cfg.weights_path` when set.
    pub fn new(cfg: &AdapterConfig, device: &Device, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(device, dtype, cfg.seed, false);
        let adapter = Self::with_store(cfg, &mut store)?;
        if let Some(path) = &cfg.weights_path {
            let n = store.load(path, true)?;
            log::info!("loaded {n} frozen {:?} tensors from {}", cfg.kind, path.display());
        } else {
            log::warn!("{:?} adapter has no weights file; using its seeded initialisation", cfg.kind);
        }
        Ok(Self { store, ..adapter })
    }

    fn with_store(cfg: &AdapterConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let net = build(store, cfg)?;
        let device = store.device().clone();
        let dtype = store.dtype();
        let stat = |v: [f64; 3]| -> Result<Tensor> { Ok(Tensor::new(&v, &device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?) };
        Ok(Self {
            cfg: cfg.clone(),
            store: ParamStore::new(&device, dtype, 0, false),
            net,
            mean: stat(cfg.mean)?,
            std: stat(cfg.std)?,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn kind(&self) -> AdapterKind {
        self.cfg.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Digest over every parameter and buffer.
    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        if image.dims4()?.1 != 3 {
            return Err(Error::Shape(format!("adapters take N×3×H×W images, got {:?}", image.dims())));
        }
        Ok(image.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    /// Class logits, N×C. Classification and stub adapters only.
    pub fn class_logits(&self, image: &Tensor) -> Result<Tensor> {
        let x = self.normalize(image)?;
        match &self.net {
            Net::Vgg { features, fc } => {
                let f = adaptive_avg_pool(&features.forward(&x)?, VGG_POOL)?.flatten_from(1)?;
                let h = fc[0].forward(&f)?.relu()?;
                let h = fc[1].forward(&h)?.relu()?;
                fc[2].forward(&h)
            }
            Net::Stub { conv1, conv2, fc } => {
                let h = conv1.forward(&x)?.relu()?;
                let h = conv2.forward(&h)?.relu()?;
                fc.forward(&global_avg_pool(&h)?)
            }
            _ => Err(self.wrong_kind("class logits")),
        }
    }

    fn wrong_kind(&self, what: &str) -> Error {
        Error::Config(format!("{what} are not available from a {:?} adapter", self.cfg.kind))
    }

    /// Ring-pooled part features of one view, `parts` tensors of N×C.
    pub fn part_features(&self, image: &Tensor, satellite_view: bool) -> Result<Vec<Tensor>> {
        let Net::Lpn {
            street, satellite, parts, ..
        } = &self.net
        else {
            return Err(self.wrong_kind("part features"));
        };
        let features = if satellite_view { satellite } else { street };
        ring_pool(&features.forward(&self.normalize(image)?)?, *parts)
    }

    /// Per-part identity logits of one view.
    pub fn part_logits(&self, image: &Tensor, satellite_view: bool) -> Result<Vec<Tensor>> {
        let Net::Lpn { classifiers, .. } = &self.net else {
            return Err(self.wrong_kind("part logits"));
        };
        self.part_features(image, satellite_view)?
            .iter()
            .zip(classifiers)
            .map(|(f, c)| c.forward(f))
            .collect()
    }

    /// Concatenated part features, L2-normalised per sample: one vector per image.
    pub fn embed(&self, image: &Tensor, satellite_view: bool) -> Result<Vec<Vec<f32>>> {
        let parts = self.part_features(image, satellite_view)?;
        let cat = Tensor::cat(&parts, 1)?.to_dtype(DType::F64)?;
        let norm = (cat.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-12)?;
        let rows: Vec<Vec<f64>> = cat.broadcast_div(&norm)?.to_vec2()?;
        Ok(rows.into_iter().map(|r| r.into_iter().map(|v| v as f32).collect()).collect())
    }

    /// Per-pixel class logits at input resolution, N×C×H×W.
    pub fn segment_logits(&self, image: &Tensor) -> Result<Tensor> {
        let Net::Seg {
            stem,
            high,
            transition,
            low,
            fuse,
            head,
        } = &self.net
        else {
            return Err(self.wrong_kind("segmentation logits"));
        };
        let (_, _, h, w) = image.dims4()?;
        if h % (2 * SEG_STRIDE) != 0 || w % (2 * SEG_STRIDE) != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                multiple: 2 * SEG_STRIDE,
            });
        }
        let mut x = self.normalize(image)?;
        for s in stem {
            x = s.forward(&x)?;
        }
        let mut hi = x.clone();
        for b in high {
            hi = b.forward(&hi)?;
        }
        let mut lo = transition.forward(&x)?;
        for b in low {
            lo = b.forward(&lo)?;
        }
        let lo = fuse.forward(&lo)?.upsample_nearest2d(h / SEG_STRIDE, w / SEG_STRIDE)?;
        let y = head.forward(&(hi + lo)?.relu()?)?;
        Ok(y.upsample_nearest2d(h, w)?)
    }

    /// The task loss of a batch of `[0, 1]` images.
    pub fn task_loss(&self, image: &Tensor, labels: &BatchLabels) -> Result<Tensor> {
        match (self.cfg.kind, labels) {
            (AdapterKind::Classification | AdapterKind::TestStub, BatchLabels::Classes(ids)) => {
                cross_entropy(&self.class_logits(image)?, ids)
            }
            (AdapterKind::Geolocation, BatchLabels::Pairs { identities, satellite }) => {
                if satellite.dims() != image.dims() {
                    return Err(Error::Shape(format!(
                        "satellite view {:?} does not pair with {:?}",
                        satellite.dims(),
                        image.dims()
                    )));
                }
                let street = summed_part_cross_entropy(&self.part_logits(image, false)?, identities)?;
                let sat = summed_part_cross_entropy(&self.part_logits(satellite, true)?, identities)?;
                Ok((street + sat)?)
            }
            (AdapterKind::Segmentation, BatchLabels::ClassMaps(maps)) => {
                pixel_cross_entropy(&self.segment_logits(image)?, maps, IGNORE_INDEX as u32)
            }
            (kind, _) => Err(Error::Label(format!("labels do not match a {kind:?} adapter"))),
        }
    }

    /// Arg-max class per image.
    pub fn predict_classes(&self, image: &Tensor) -> Result<Vec<u32>> {
        Ok(self.class_logits(image)?.argmax(D::Minus1)?.to_vec1()?)
    }

    /// Arg-max class map per image.
    pub fn predict_maps(&self, image: &Tensor) -> Result<Vec<Array2<u8>>> {
        let ids = self.segment_logits(image)?.argmax(1)?;
        let (n, h, w) = ids.dims3()?;
        let v: Vec<u32> = ids.flatten_all()?.to_vec1()?;
        Ok((0..n)
            .map(|i| Array2::from_shape_fn((h, w), |(y, x)| v[(i * h + y) * w + x] as u8))
            .collect())
    }

    /// Removes gradients recorded for adapter parameters.
    pub fn strip_grads(&self, grads: &mut candle_core::backprop::GradStore) {
        self.store.strip_grads(grads);
    }
}

/// Trains a stub classifier on clean images and writes its weights.
/// `images` is N×3×H×W in `[0, 1]`.
pub fn train_stub_classifier(
    cfg: &AdapterConfig,
    images: &Tensor,
    labels: &[u32],
    steps: usize,
    lr: f64,
    out: &Path,
) -> Result<f64> {
    if cfg.kind != AdapterKind::TestStub {
        return Err(Error::Config("only the stub adapter is trained here".into()));
    }
    let mut store = ParamStore::new(images.device(), images.dtype(), cfg.seed, true);
    let adapter = TaskAdapter::with_store(cfg, &mut store)?;
    let mut opt = Adam::new(
        store.trainable_vars(),
        AdamConfig {
            lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
    );
    let labels = BatchLabels::Classes(labels.to_vec());
    for _ in 0..steps {
        let loss = adapter.task_loss(images, &labels)?;
        opt.step(&loss.backward()?)?;
    }
    store.save(out)?;
    crate::loss::scalar(&adapter.task_loss(images, &labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn naive_ce(row: &[f64], t: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - row[t]
    }

    #[test]
    fn uniform_and_confident_ce() {
        let l = tensor(vec![0.3; 14], &[2, 7]);
        assert!((val(&cross_entropy(&l, &[0, 6]).unwrap()) - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.9459).abs() < 1e-4);
        let mut v = vec![0.0; 7];
        v[3] = 60.0;
        assert!(val(&cross_entropy(&tensor(v, &[1, 7]), &[3]).unwrap()) < 1e-20);
        assert!(cross_entropy(&l, &[0, 7]).is_err());
    }

    #[test]
    fn ce_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (n, c) = (rng.random_range(1..5), rng.random_range(2..9));
            let v: Vec<f64> = (0..n * c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
            let expect: f64 = (0..n).map(|i| naive_ce(&v[i * c..(i + 1) * c], t[i] as usize)).sum::<f64>() / n as f64;
            let got = val(&cross_entropy(&tensor(v, &[n, c]), &t).unwrap());
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn part_ce_closed_form_and_loop() {
        let parts: Vec<Tensor> = (0..4).map(|_| tensor(vec![1.5, 1.5], &[1, 2])).collect();
        let v = val(&summed_part_cross_entropy(&parts, &[1]).unwrap());
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 2.7726).abs() < 1e-4);
        let one = tensor(vec![0.2, -1.0, 3.0], &[1, 3]);
        assert_eq!(
            val(&summed_part_cross_entropy(std::slice::from_ref(&one), &[2]).unwrap()),
            val(&cross_entropy(&one, &[2]).unwrap())
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, c, p) = (3, 5, 4);
        let raw: Vec<Vec<f64>> = (0..p).map(|_| (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let t = [0u32, 4, 2];
        let expect: f64 = raw
            .iter()
            .map(|v| (0..n).map(|i| naive_ce(&v[i * c..(i + 1) * c], t[i] as usize)).sum::<f64>() / n as f64)
            .sum();
        let ts: Vec<Tensor> = raw.into_iter().map(|v| tensor(v, &[n, c])).collect();
        assert!((val(&summed_part_cross_entropy(&ts, &t).unwrap()) - expect).abs() < 1e-10);
    }

    #[test]
    fn pixel_ce_cases() {
        let logits = Tensor::zeros((1, 7, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let maps = Tensor::from_vec(vec![0u32, 1, 2, 3, 255, 6], (1, 2, 3), &Device::Cpu).unwrap();
        assert!((val(&pixel_cross_entropy(&logits, &maps, 255).unwrap()) - 7f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, c, h, w) = (2, 4, 3, 3);
        let v: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t: Vec<u32> = (0..n * h * w)
            .map(|_| if rng.random_bool(0.2) { 255 } else { rng.random_range(0..c as u32) })
            .collect();
        let (mut sum, mut cnt) = (0.0, 0);
        for i in 0..n {
            for p in 0..h * w {
                let tt = t[i * h * w + p];
                if tt == 255 {
                    continue;
                }
                let row: Vec<f64> = (0..c).map(|k| v[(i * c + k) * h * w + p]).collect();
                sum += naive_ce(&row, tt as usize);
                cnt += 1;
            }
        }
        let got = pixel_cross_entropy(&tensor(v, &[n, c, h, w]), &Tensor::from_vec(t, (n, h, w), &Device::Cpu).unwrap(), 255);
        assert!((val(&got.unwrap()) - sum / cnt as f64).abs() < 1e-10);
        assert!(pixel_cross_entropy(&logits, &Tensor::zeros((1, 2, 2), DType::U32, &Device::Cpu).unwrap(), 255).is_err());
    }

    #[test]
    fn rings_cover_map_concentrically() {
        let idx = square_ring_index(8, 8, 4);
        assert_eq!(idx[[3, 3]], 0);
        assert_eq!(idx[[0, 0]], 3);
        assert_eq!(idx[[0, 4]], 3);
        assert_eq!(idx[[2, 5]], 1);
        for p in 0..4 {
            assert!(idx.iter().any(|&v| v == p));
        }
        assert!(square_ring_index(5, 5, 1).iter().all(|&v| v == 0));
    }

    fn small_cfg(kind: AdapterKind) -> AdapterConfig {
        AdapterConfig {
            kind,
            backbone: vec![VggStage { width: 4, convs: 1 }, VggStage { width: 8, convs: 1 }],
            hidden: 16,
            width: 4,
            num_classes: 3,
            num_identities: 5,
            ..AdapterConfig::default()
        }
    }

    #[test]
    fn every_kind_yields_finite_nonnegative_loss_and_keeps_params_gradient_free() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = |n: usize| {
            let v: Vec<f64> = (0..n * 3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
            Tensor::from_vec(v, (n, 3, 32, 32), &dev).unwrap()
        };
        let cases = [
            (AdapterKind::Classification, BatchLabels::Classes(vec![0, 2])),
            (AdapterKind::TestStub, BatchLabels::Classes(vec![1, 1])),
            (
                AdapterKind::Geolocation,
                BatchLabels::Pairs {
                    identities: vec![4, 0],
                    satellite: img(2),
                },
            ),
            (
                AdapterKind::Segmentation,
                BatchLabels::ClassMaps(Tensor::zeros((2, 32, 32), DType::U32, &dev).unwrap()),
            ),
        ];
        for (kind, labels) in cases {
            let a = TaskAdapter::new(&small_cfg(kind), &dev, DType::F64).unwrap();
            let before = a.checksum().unwrap();
            let x = candle_core::Var::from_tensor(&img(2)).unwrap();
            let loss = a.task_loss(x.as_tensor(), &labels).unwrap();
            let v = val(&loss);
            assert!(v.is_finite() && v >= 0.0, "{kind:?}: {v}");
            let mut grads = loss.backward().unwrap();
            a.strip_grads(&mut grads);
            assert!(grads.get(x.as_tensor()).is_some(), "{kind:?} not differentiable in the image");
            for (_, t) in a.store().parameter_tensors() {
                assert!(grads.get(t).is_none());
            }
            assert_eq!(before, a.checksum().unwrap());
        }
    }

    #[test]
    fn mismatched_labels_are_rejected() {
        let a = TaskAdapter::new(&small_cfg(AdapterKind::TestStub), &Device::Cpu, DType::F64).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        assert!(a.task_loss(&x, &BatchLabels::ClassMaps(Tensor::zeros((1, 32, 32), DType::U32, &Device::Cpu).unwrap())).is_err());
        assert!(a.part_features(&x, false).is_err());
    }

    #[test]
    fn checksum_detects_tiny_perturbation_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(AdapterKind::TestStub);
        let a = TaskAdapter::new(&cfg, &Device::Cpu, DType::F64).unwrap();
        let path = dir.path().join("stub.safetensors");
        a.store().save(&path).unwrap();
        let loaded = AdapterConfig {
            weights_path: Some(path.clone()),
            ..cfg.clone()
        };
        let b = TaskAdapter::new(&loaded, &Device::Cpu, DType::F64).unwrap();
        let c = TaskAdapter::new(&loaded, &Device::Cpu, DType::F64).unwrap();
        assert_eq!(b.checksum().unwrap(), c.checksum().unwrap());
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());

        let mut tensors = crate::nn::read_safetensors(&path, &Device::Cpu).unwrap();
        let w = tensors.get_mut("fc.bias").unwrap();
        *w = (&*w + 1e-6).unwrap();
        candle_core::safetensors::save(&tensors, &path).unwrap();
        let d = TaskAdapter::new(&loaded, &Device::Cpu, DType::F64).unwrap();
        assert_ne!(b.checksum().unwrap(), d.checksum().unwrap());
    }

    #[test]
    fn stub_learns_a_separable_toy_problem() {
        let dir = tempfile::tempdir().unwrap();
        let dev = Device::Cpu;
        // class 0: dark images, class 1: bright images
        let mut v = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..8 {
            let base = if i % 2 == 0 { 0.1 } else { 0.8 };
            v.extend((0..3 * 16 * 16).map(|_| base + rng.random_range(0.0..0.1)));
            labels.push((i % 2) as u32);
        }
        let images = Tensor::from_vec(v, (8, 3, 16, 16), &dev).unwrap();
        let cfg = AdapterConfig {
            num_classes: 2,
            ..AdapterConfig::stub(2)
        };
        let path = dir.path().join("stub.safetensors");
        let final_loss = train_stub_classifier(&cfg, &images, &labels, 150, 1e-2, &path).unwrap();
        assert!(final_loss < 0.1, "{final_loss}");
        let a = TaskAdapter::new(&AdapterConfig { weights_path: Some(path), ..cfg }, &dev, DType::F64).unwrap();
        assert_eq!(a.predict_classes(&images).unwrap(), labels);
    }
}
