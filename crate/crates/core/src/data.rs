//! Manifest-driven ingestion of (clean, occluded, mask, label) samples and
//! their assembly into tensor batches.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, MixConfig, OcclusionMask, OcclusionSpec};

/// Intensity written into occluded pixels of the composed input image.
pub const FILL_VALUE: f32 = 0.0;
/// Segmentation label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Geolocation,
    Segmentation,
}

impl TaskKind {
    /// Task-loss weight used when none is configured.
    pub fn default_lambda(self) -> f64 {
        match self {
            TaskKind::Classification | TaskKind::Segmentation => 5.0,
            TaskKind::Geolocation => 1.2,
        }
    }

    pub fn default_image_size(self) -> usize {
        match self {
            TaskKind::Segmentation => 512,
            _ => 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

// ---------------------------------------------------------------------------
// Images

/// Loads an 8-bit RGB image as H×W×3 in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        f32::from(img.get_pixel(c as u32, r as u32).0[k]) / 255.0
    }))
}

/// Writes an H×W×3 image, clamping to `[0, 1]` and rounding to 8 bits.
pub fn save_rgb(path: impl AsRef<Path>, img: &Array3<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, _) = img.dim();
    let out = image::RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let px = |k: usize| (img[[r as usize, c as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a single-channel class-id map.
pub fn load_class_map(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0]
    }))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Array3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (h, w, ch) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let sy = h as f32 / height as f32;
    let sx = w as f32 / width as f32;
    let axis = |dst: usize, scale: f32, len: usize| {
        let pos = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f32)
    };
    let mut out = Array3::zeros((height, width, ch));
    for r in 0..height {
        let (r0, r1, fy) = axis(r, sy, h);
        for c in 0..width {
            let (c0, c1, fx) = axis(c, sx, w);
            for k in 0..ch {
                let top = img[[r0, c0, k]] * (1.0 - fx) + img[[r0, c1, k]] * fx;
                let bottom = img[[r1, c0, k]] * (1.0 - fx) + img[[r1, c1, k]] * fx;
                out[[r, c, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_class_map(map: &Array2<u8>, height: usize, width: usize) -> Array2<u8> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.clone();
    }
    Array2::from_shape_fn((height, width), |(r, c)| {
        let sr = ((r as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sc = ((c as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        map[[sr.min(h - 1), sc.min(w - 1)]]
    })
}

/// `clean ⊙ (1 − M) + fill ⊙ M`.
pub fn compose_occluded(clean: &Array3<f32>, mask: &OcclusionMask) -> Result<Array3<f32>> {
    let (h, w, ch) = clean.dim();
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
        if mask.get(r, c) {
            FILL_VALUE
        } else {
            clean[[r, c, k]]
        }
    }))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    task: TaskKind,
    image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Class(u32),
    Pair { identity: u32, satellite: PathBuf },
    Map(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image: PathBuf,
    #[serde(default)]
    mask: Option<PathBuf>,
    #[serde(default)]
    seed_pool: Option<PathBuf>,
    label: RawLabel,
    split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelRef {
    Class(u32),
    Pair { identity: u32, satellite: PathBuf },
    Map(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskRef {
    /// A pre-baked mask file.
    File(PathBuf),
    /// A directory of seed masks sampled at load time.
    SeedPool(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: MaskRef,
    pub label: LabelRef,
    pub split: Split,
}

/// Validated dataset description. Paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub image_size: usize,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Reads a JSON-lines manifest: a header line `{"task", "image_size"}`
/// followed by one record per line.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, htext) = lines.next().ok_or_else(|| err(1, "manifest is empty".into()))?;
    let header: ManifestHeader = serde_json::from_str(htext).map_err(|e| err(hline, e.to_string()))?;
    if header.image_size == 0 || header.image_size % 32 != 0 {
        return Err(err(hline, format!("image_size {} is not a positive multiple of 32", header.image_size)));
    }

    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut records = Vec::new();
    let mut seen: BTreeMap<PathBuf, Split> = BTreeMap::new();
    for (line, raw_text) in lines {
        let raw: RawRecord = serde_json::from_str(raw_text).map_err(|e| err(line, e.to_string()))?;
        let image = resolve(&raw.image);
        if !image.is_file() {
            return Err(err(line, format!("image {} does not exist", image.display())));
        }
        let mask = match (raw.mask, raw.seed_pool) {
            (Some(m), None) => {
                let m = resolve(&m);
                if !m.is_file() {
                    return Err(err(line, format!("mask {} does not exist", m.display())));
                }
                MaskRef::File(m)
            }
            (None, Some(pool)) => {
                if raw.split == Split::Test {
                    return Err(err(line, "test records need a pre-baked mask".into()));
                }
                let pool = resolve(&pool);
                if !pool.is_dir() {
                    return Err(err(line, format!("seed pool {} is not a directory", pool.display())));
                }
                MaskRef::SeedPool(pool)
            }
            _ => return Err(err(line, "exactly one of `mask` or `seed_pool` is required".into())),
        };
        let label = match (header.task, raw.label) {
            (TaskKind::Classification, RawLabel::Class(c)) => LabelRef::Class(c),
            (TaskKind::Geolocation, RawLabel::Pair { identity, satellite }) => {
                let satellite = resolve(&satellite);
                if !satellite.is_file() {
                    return Err(err(line, format!("satellite view {} does not exist", satellite.display())));
                }
                LabelRef::Pair { identity, satellite }
            }
            (TaskKind::Segmentation, RawLabel::Map(p)) => {
                let p = resolve(&p);
                if !p.is_file() {
                    return Err(err(line, format!("label map {} does not exist", p.display())));
                }
                LabelRef::Map(p)
            }
            (task, other) => return Err(err(line, format!("label {other:?} is not valid for {task:?}"))),
        };
        if let Some(prev) = seen.insert(image.clone(), raw.split) {
            if prev != raw.split {
                return Err(err(line, format!("{} appears in both splits", image.display())));
            }
        }
        records.push(ManifestRecord {
            image,
            mask,
            label,
            split: raw.split,
        });
    }
    Ok(DatasetManifest {
        task: header.task,
        image_size: header.image_size,
        records,
    })
}

// ---------------------------------------------------------------------------
// Samples

#[derive(Clone, Debug, PartialEq)]
pub enum TaskLabel {
    Class(u32),
    Pair { identity: u32, satellite: Array3<f32> },
    ClassMap(Array2<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Array3<f32>,
    pub occluded: Array3<f32>,
    pub mask: OcclusionMask,
    pub label: TaskLabel,
}

impl Sample {
    pub fn new(clean: Array3<f32>, mask: OcclusionMask, label: TaskLabel) -> Result<Self> {
        let occluded = compose_occluded(&clean, &mask)?;
        Ok(Self {
            clean,
            occluded,
            mask,
            label,
        })
    }
}

#[derive(Clone, Debug)]
enum ImageSource {
    File(PathBuf),
    Memory(Arc<Array3<f32>>),
}

impl ImageSource {
    fn load(&self) -> Result<Array3<f32>> {
        match self {
            ImageSource::File(p) => load_rgb(p),
            ImageSource::Memory(a) => Ok((**a).clone()),
        }
    }
}

#[derive(Clone, Debug)]
enum MaskSource {
    File(PathBuf),
    Memory(OcclusionMask),
    Pool(Arc<Vec<OcclusionMask>>),
}

#[derive(Clone, Debug)]
enum LabelSource {
    Class(u32),
    Pair { identity: u32, satellite: ImageSource },
    MapFile(PathBuf),
    Map(Array2<u8>),
}

#[derive(Clone, Debug)]
struct Item {
    image: ImageSource,
    mask: MaskSource,
    label: LabelSource,
}

/// How occlusion masks are produced for seed-pool records and, in
/// training, how pre-baked masks are augmented.
#[derive(Clone, Debug, Default)]
pub struct MaskPolicy {
    pub spec: OcclusionSpec,
    /// MaskMix settings; `None` disables augmentation (always the case at test time).
    pub maskmix: Option<MixConfig>,
}

/// One split of a dataset. Images are decoded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    task: TaskKind,
    image_size: usize,
    items: Vec<Item>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut pools: BTreeMap<PathBuf, Arc<Vec<OcclusionMask>>> = BTreeMap::new();
        let mut items = Vec::new();
        for rec in manifest.split(split) {
            let mask = match &rec.mask {
                MaskRef::File(p) => MaskSource::File(p.clone()),
                MaskRef::SeedPool(dir) => {
                    let pool = match pools.get(dir) {
                        Some(p) => p.clone(),
                        None => {
                            let p = Arc::new(mask::load_seed_pool(dir)?);
                            pools.insert(dir.clone(), p.clone());
                            p
                        }
                    };
                    MaskSource::Pool(pool)
                }
            };
            let label = match &rec.label {
                LabelRef::Class(c) => LabelSource::Class(*c),
                LabelRef::Pair { identity, satellite } => LabelSource::Pair {
                    identity: *identity,
                    satellite: ImageSource::File(satellite.clone()),
                },
                LabelRef::Map(p) => LabelSource::MapFile(p.clone()),
            };
            items.push(Item {
                image: ImageSource::File(rec.image.clone()),
                mask,
                label,
            });
        }
        Ok(Self {
            task: manifest.task,
            image_size: manifest.image_size,
            items,
        })
    }

    /// Wraps in-memory samples with fixed masks.
    pub fn from_samples(task: TaskKind, image_size: usize, samples: Vec<Sample>) -> Self {
        let items = samples
            .into_iter()
            .map(|s| Item {
                image: ImageSource::Memory(Arc::new(s.clean)),
                mask: MaskSource::Memory(s.mask),
                label: match s.label {
                    TaskLabel::Class(c) => LabelSource::Class(c),
                    TaskLabel::Pair { identity, satellite } => LabelSource::Pair {
                        identity,
                        satellite: ImageSource::Memory(Arc::new(satellite)),
                    },
                    TaskLabel::ClassMap(m) => LabelSource::Map(m),
                },
            })
            .collect();
        Self {
            task,
            image_size,
            items,
        }
    }

    /// Wraps in-memory images whose masks are drawn from `pool` on every load.
    pub fn from_images_with_pool(
        task: TaskKind,
        image_size: usize,
        images: Vec<(Array3<f32>, TaskLabel)>,
        pool: Vec<OcclusionMask>,
    ) -> Self {
        let pool = Arc::new(pool);
        let items = images
            .into_iter()
            .map(|(img, label)| Item {
                image: ImageSource::Memory(Arc::new(img)),
                mask: MaskSource::Pool(pool.clone()),
                label: match label {
                    TaskLabel::Class(c) => LabelSource::Class(c),
                    TaskLabel::Pair { identity, satellite } => LabelSource::Pair {
                        identity,
                        satellite: ImageSource::Memory(Arc::new(satellite)),
                    },
                    TaskLabel::ClassMap(m) => LabelSource::Map(m),
                },
            })
            .collect();
        Self {
            task,
            image_size,
            items,
        }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Loads sample `index` resized to the dataset's image size. `rng` drives
    /// mask synthesis and MaskMix; samples with fixed masks and no MaskMix
    /// do not consume it.
    pub fn sample(&self, index: usize, policy: &MaskPolicy, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let item = &self.items[index];
        let s = self.image_size;
        let clean = resize_bilinear(&item.image.load()?, s, s);
        let base = match &item.mask {
            MaskSource::File(p) => OcclusionMask::load_png(p)?.resize_nearest(s, s),
            MaskSource::Memory(m) => m.resize_nearest(s, s),
            MaskSource::Pool(pool) => mask::synthesize_mask(s, s, pool, &policy.spec, rng)?,
        };
        let mask = match &policy.maskmix {
            Some(cfg) if !base.is_empty() => mask::maskmix(&base, cfg, rng)?,
            _ => base,
        };
        let label = match &item.label {
            LabelSource::Class(c) => TaskLabel::Class(*c),
            LabelSource::Pair { identity, satellite } => TaskLabel::Pair {
                identity: *identity,
                satellite: resize_bilinear(&satellite.load()?, s, s),
            },
            LabelSource::MapFile(p) => TaskLabel::ClassMap(resize_class_map(&load_class_map(p)?, s, s)),
            LabelSource::Map(m) => TaskLabel::ClassMap(resize_class_map(m, s, s)),
        };
        Sample::new(clean, mask, label)
    }

    /// Independent rng stream for sample slot `position` of a run seeded with `seed`.
    pub fn sample_rng(seed: u64, position: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(position);
        rng
    }

    /// Dataset order for `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Dataset indices feeding training step `step`, with each slot's global position.
    pub fn step_indices(&self, seed: u64, step: u64, batch_size: usize) -> Vec<(usize, u64)> {
        let n = self.items.len() as u64;
        let mut cache: Option<(u64, Vec<usize>)> = None;
        (0..batch_size as u64)
            .map(|j| {
                let pos = step * batch_size as u64 + j;
                let epoch = pos / n;
                if cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    cache = Some((epoch, self.epoch_order(seed, epoch)));
                }
                let order = &cache.as_ref().expect("filled above").1;
                (order[(pos % n) as usize], pos)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Batches

#[derive(Clone, Debug)]
pub enum BatchLabels {
    Classes(Vec<u32>),
    Pairs { identities: Vec<u32>, satellite: Tensor },
    /// N×H×W class ids as `u32`.
    ClassMaps(Tensor),
}

/// Stacked NCHW tensors. `generator_input` is the occluded image with the
/// mask appended as a fourth channel.
#[derive(Clone, Debug)]
pub struct Batch {
    pub clean: Tensor,
    pub occluded: Tensor,
    pub mask: Tensor,
    pub generator_input: Tensor,
    pub labels: BatchLabels,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.clean.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks H×W×3 images into an N×3×H×W tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or(Error::Empty("image list"))?;
    let (h, w, ch) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * ch);
    for img in images {
        if img.dim() != (h, w, ch) {
            return Err(Error::Shape(format!("image {:?} differs from {:?}", img.dim(), (h, w, ch))));
        }
        let chw = img.view().permuted_axes([2, 0, 1]);
        data.extend(chw.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), ch, h, w), device)?.to_dtype(dtype)?)
}

/// Splits an N×C×H×W tensor into H×W×C arrays.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (n, ch, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let per = ch * h * w;
    Ok((0..n)
        .map(|i| {
            let chunk = &flat[i * per..(i + 1) * per];
            Array3::from_shape_fn((h, w, ch), |(r, c, k)| chunk[k * h * w + r * w + c])
        })
        .collect())
}

pub fn masks_to_tensor(masks: &[&OcclusionMask], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or(Error::Empty("mask list"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::Shape("masks differ in size".into()));
        }
        data.extend(m.to_f32_vec());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Resizes every sample to `size`×`size`, recomposes the occluded image from
/// the resized clean image and re-binarized mask, and stacks the result.
pub fn make_batch(samples: &[Sample], size: usize, device: &Device, dtype: DType) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    let mut clean = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    let mut occluded = Vec::with_capacity(samples.len());
    for s in samples {
        let c = resize_bilinear(&s.clean, size, size);
        let m = s.mask.resize_nearest(size, size);
        occluded.push(compose_occluded(&c, &m)?);
        clean.push(c);
        masks.push(m);
    }
    let clean_t = images_to_tensor(&clean.iter().collect::<Vec<_>>(), device, dtype)?;
    let occluded_t = images_to_tensor(&occluded.iter().collect::<Vec<_>>(), device, dtype)?;
    let mask_t = masks_to_tensor(&masks.iter().collect::<Vec<_>>(), device, dtype)?;
    let generator_input = Tensor::cat(&[&occluded_t, &mask_t], 1)?;

    let labels = match &samples[0].label {
        TaskLabel::Class(_) => BatchLabels::Classes(
            samples
                .iter()
                .map(|s| match s.label {
                    TaskLabel::Class(c) => Ok(c),
                    _ => Err(Error::Label("mixed label kinds in batch".into())),
                })
                .collect::<Result<_>>()?,
        ),
        TaskLabel::Pair { .. } => {
            let mut ids = Vec::new();
            let mut sats = Vec::new();
            for s in samples {
                match &s.label {
                    TaskLabel::Pair { identity, satellite } => {
                        ids.push(*identity);
                        sats.push(resize_bilinear(satellite, size, size));
                    }
                    _ => return Err(Error::Label("mixed label kinds in batch".into())),
                }
            }
            BatchLabels::Pairs {
                identities: ids,
                satellite: images_to_tensor(&sats.iter().collect::<Vec<_>>(), device, dtype)?,
            }
        }
        TaskLabel::ClassMap(_) => {
            let mut data = Vec::with_capacity(samples.len() * size * size);
            for s in samples {
                match &s.label {
                    TaskLabel::ClassMap(m) => {
                        data.extend(resize_class_map(m, size, size).iter().map(|&v| u32::from(v)))
                    }
                    _ => return Err(Error::Label("mixed label kinds in batch".into())),
                }
            }
            BatchLabels::ClassMaps(Tensor::from_vec(data, (samples.len(), size, size), device)?)
        }
    };
    Ok(Batch {
        clean: clean_t,
        occluded: occluded_t,
        mask: mask_t,
        generator_input,
        labels,
    })
}

/// Distinct identities in order of first appearance.
pub fn distinct<T: Copy + Eq + std::hash::Hash>(values: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut seen = HashSet::new();
    values.into_iter().filter(|v| seen.insert(*v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::io::Write;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
    }

    fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> OcclusionMask {
        OcclusionMask::from_fn(h, w, |_, _| rng.random_bool(0.35))
    }

    #[test]
    fn compose_with_empty_and_full_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(6, 5, &mut rng);
        assert_eq!(compose_occluded(&img, &OcclusionMask::zeros(6, 5)).unwrap(), img);
        let full = compose_occluded(&img, &OcclusionMask::ones(6, 5)).unwrap();
        assert!(full.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(9, 11, &mut rng);
        let m = random_mask(9, 11, &mut rng);
        let out = compose_occluded(&img, &m).unwrap();
        for r in 0..9 {
            for c in 0..11 {
                for k in 0..3 {
                    let expect = if m.get(r, c) { 0.0 } else { img[[r, c, k]] };
                    assert_eq!(out[[r, c, k]], expect);
                }
            }
        }
    }

    #[test]
    fn compose_rejects_size_mismatch() {
        let img = Array3::zeros((4, 4, 3));
        assert!(compose_occluded(&img, &OcclusionMask::zeros(4, 5)).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(8, 8, &mut rng);
        assert_eq!(resize_bilinear(&img, 8, 8), img);
        let flat = Array3::from_elem((10, 10, 3), 0.25f32);
        assert!(resize_bilinear(&flat, 4, 7).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    fn batch_of(n: usize, size: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|i| {
                Sample::new(
                    random_image(size, size, &mut rng),
                    random_mask(size, size, &mut rng),
                    TaskLabel::Class(i as u32),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_shapes_at_256() {
        let samples = batch_of(2, 64);
        let b = make_batch(&samples, 256, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(b.clean.dims(), &[2, 3, 256, 256]);
        assert_eq!(b.generator_input.dims(), &[2, 4, 256, 256]);
        assert_eq!(b.mask.dims(), &[2, 1, 256, 256]);
    }

    #[test]
    fn single_sample_without_resize_is_unchanged() {
        let samples = batch_of(1, 32);
        let b = make_batch(&samples, 32, &Device::Cpu, DType::F32).unwrap();
        let back = tensor_to_images(&b.clean).unwrap();
        assert_eq!(back[0], samples[0].clean);
        let occ = tensor_to_images(&b.occluded).unwrap();
        assert_eq!(occ[0], samples[0].occluded);
        match b.labels {
            BatchLabels::Classes(c) => assert_eq!(c, vec![0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn downsized_masks_stay_binary_and_occluded_agrees() {
        let samples = batch_of(2, 512);
        let b = make_batch(&samples, 256, &Device::Cpu, DType::F32).unwrap();
        let m: Vec<f32> = b.mask.flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        let keep = (1.0 - &b.mask).unwrap().broadcast_as(b.clean.shape()).unwrap();
        let a: Vec<f32> = (&b.clean * &keep).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let o: Vec<f32> = (&b.occluded * &keep).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, o);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(make_batch(&[], 32, &Device::Cpu, DType::F32).is_err());
    }

    fn write_png(path: &Path, size: u32) {
        image::RgbImage::from_pixel(size, size, image::Rgb([10, 20, 30])).save(path).unwrap();
    }

    fn manifest_dir(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png", "d.png"] {
            write_png(&dir.path().join(name), 8);
        }
        OcclusionMask::ones(8, 8).save_png(dir.path().join("m.png")).unwrap();
        std::fs::create_dir(dir.path().join("seeds")).unwrap();
        OcclusionMask::from_fn(8, 8, |r, _| r < 3)
            .save_png(dir.path().join("seeds/s0.png"))
            .unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        (dir, path)
    }

    const HEADER: &str = r#"{"task": "classification", "image_size": 32}"#;

    #[test]
    fn well_formed_manifest() {
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "seed_pool": "seeds", "label": 0, "split": "train"}"#,
            r#"{"image": "b.png", "seed_pool": "seeds", "label": 1, "split": "train"}"#,
            r#"{"image": "c.png", "mask": "m.png", "label": 0, "split": "test"}"#,
            r#"{"image": "d.png", "mask": "m.png", "label": 1, "split": "test"}"#,
        ]);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.split(Split::Train).count(), 2);
        assert_eq!(m.split(Split::Test).count(), 2);
        assert_eq!(m.image_size, 32);
    }

    #[test]
    fn unknown_split_is_rejected() {
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "mask": "m.png", "label": 0, "split": "validation"}"#,
        ]);
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn image_in_both_splits_is_rejected() {
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "mask": "m.png", "label": 0, "split": "train"}"#,
            r#"{"image": "a.png", "mask": "m.png", "label": 0, "split": "test"}"#,
        ]);
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn unknown_fields_and_bad_labels_are_rejected() {
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "mask": "m.png", "label": 0, "split": "train", "extra": 1}"#,
        ]);
        assert!(load_manifest(&path).is_err());
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "mask": "m.png", "label": "x.png", "split": "train"}"#,
        ]);
        assert!(load_manifest(&path).is_err());
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "seed_pool": "seeds", "label": 0, "split": "test"}"#,
        ]);
        assert!(load_manifest(&path).is_err());
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "missing.png", "mask": "m.png", "label": 0, "split": "train"}"#,
        ]);
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn missing_manifest_file() {
        assert!(matches!(load_manifest("/nonexistent/m.jsonl"), Err(Error::Io { .. })));
    }

    #[test]
    fn dataset_samples_respect_invariant() {
        let (_d, path) = manifest_dir(&[
            HEADER,
            r#"{"image": "a.png", "seed_pool": "seeds", "label": 0, "split": "train"}"#,
            r#"{"image": "c.png", "mask": "m.png", "label": 1, "split": "test"}"#,
        ]);
        let m = load_manifest(&path).unwrap();
        let train = Dataset::from_manifest(&m, Split::Train).unwrap();
        let policy = MaskPolicy {
            spec: OcclusionSpec::new(0.15, 0.6),
            maskmix: Some(MixConfig::default()),
        };
        let mut rng = Dataset::sample_rng(7, 0);
        let s = train.sample(0, &policy, &mut rng).unwrap();
        assert_eq!(s.clean.dim(), (32, 32, 3));
        for r in 0..32 {
            for c in 0..32 {
                if !s.mask.get(r, c) {
                    for k in 0..3 {
                        assert_eq!(s.clean[[r, c, k]], s.occluded[[r, c, k]]);
                    }
                }
            }
        }
        let test = Dataset::from_manifest(&m, Split::Test).unwrap();
        let t = test.sample(0, &MaskPolicy::default(), &mut rng).unwrap();
        assert_eq!(t.mask.count(), 32 * 32);
    }

    #[test]
    fn step_order_is_deterministic_and_covers_epoch() {
        let samples = batch_of(5, 8);
        let ds = Dataset::from_samples(TaskKind::Classification, 8, samples);
        let a = ds.step_indices(3, 0, 5);
        assert_eq!(a, ds.step_indices(3, 0, 5));
        let mut idx: Vec<usize> = a.iter().map(|(i, _)| *i).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_ne!(ds.epoch_order(3, 0), ds.epoch_order(3, 1));
    }
}
