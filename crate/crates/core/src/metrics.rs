//! Image-quality and task metrics.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::OcclusionMask;

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio with peak 1; `+inf` for identical images.
/// Images here are H×W×C in `[0, 1]`, as produced by the data pipeline.
pub fn psnr(reconstruction: &Array3<f32>, target: &Array3<f32>) -> Result<f64> {
    check_same(reconstruction.shape(), target.shape(), "psnr")?;
    if target.is_empty() {
        return Err(Error::Empty("psnr image"));
    }
    let sum: f64 = reconstruction
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(sum / target.len() as f64))
}

/// PSNR restricted to occluded pixels (all channels). `None` when the mask is empty.
pub fn masked_psnr(reconstruction: &Array3<f32>, target: &Array3<f32>, mask: &OcclusionMask) -> Result<Option<f64>> {
    check_same(reconstruction.shape(), target.shape(), "masked_psnr")?;
    let (h, w, _) = target.dim();
    check_same(&[h, w], &[mask.height(), mask.width()], "masked_psnr mask")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((y, x, c), &t) in target.indexed_iter() {
        if mask.get(y, x) {
            sum += (reconstruction[[y, x, c]] as f64 - t as f64).powi(2);
            n += 1;
        }
    }
    Ok((n > 0).then(|| psnr_from_mse(sum / n as f64)))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filter of one plane.
fn filter_valid(plane: &Array2<f64>, g: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..SSIM_WINDOW).map(|k| g[k] * plane[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..SSIM_WINDOW).map(|k| g[k] * rows[[y + k, x]]).sum();
        }
    }
    out
}

/// Mean structural similarity (Gaussian 11×11 window, σ = 1.5, data range 1),
/// averaged over valid window positions and then over channels.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same(a.shape(), b.shape(), "ssim")?;
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let g = gaussian_1d();
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.index_axis(ndarray::Axis(2), ch).mapv(f64::from);
        let y = b.index_axis(ndarray::Axis(2), ch).mapv(f64::from);
        let mx = filter_valid(&x, &g);
        let my = filter_valid(&y, &g);
        let sxx = filter_valid(&(&x * &x), &g) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &g) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &g) - &mx * &my;
        let num = (2.0 * &mx * &my + SSIM_C1) * (2.0 * &sxy + SSIM_C2);
        let den = (&mx * &mx + &my * &my + SSIM_C1) * (sxx + syy + SSIM_C2);
        total += (num / den).mean().expect("nonempty");
    }
    Ok(total / c as f64)
}

/// Percentage of equal entries.
pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    check_same(&[predictions.len()], &[labels.len()], "accuracy")?;
    if labels.is_empty() {
        return Err(Error::Empty("accuracy inputs"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Retrieval cutoff: a fixed rank or the top 1% of the gallery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecallK {
    Rank(usize),
    TopOnePercent,
}

impl RecallK {
    pub fn resolve(self, gallery_size: usize) -> usize {
        match self {
            RecallK::Rank(k) => k,
            RecallK::TopOnePercent => gallery_size.div_ceil(100).max(1),
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gallery indices ordered by decreasing cosine similarity; ties go to the lower index.
pub fn rank_gallery(query: &[f32], gallery: &[Vec<f32>]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
    order
}

/// 1-based rank of the true match of every query.
pub fn match_ranks(queries: &[Vec<f32>], gallery: &[Vec<f32>], truth: &[Option<usize>]) -> Result<Vec<usize>> {
    check_same(&[queries.len()], &[truth.len()], "ground truth per query")?;
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Empty("retrieval queries or gallery"));
    }
    queries
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(q, (emb, t))| {
            let t = t.ok_or_else(|| Error::Label(format!("query {q} has no ground-truth match")))?;
            if t >= gallery.len() {
                return Err(Error::Label(format!("query {q} matches gallery item {t} out of {}", gallery.len())));
            }
            Ok(rank_gallery(emb, gallery).iter().position(|&g| g == t).expect("present") + 1)
        })
        .collect()
}

/// Percentage of queries whose true match is within the top `k`.
pub fn recall_at_k(queries: &[Vec<f32>], gallery: &[Vec<f32>], truth: &[Option<usize>], k: RecallK) -> Result<f64> {
    let k = k.resolve(gallery.len());
    if k == 0 {
        return Err(Error::Config("recall cutoff must be at least 1".into()));
    }
    let ranks = match_ranks(queries, gallery, truth)?;
    Ok(100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean over queries of the average precision of a ranked relevance list
/// (precision averaged at each relevant position), as a percentage. With a
/// single relevant item this is `1/rank`.
pub fn average_precision(rankings: &[Vec<bool>]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Empty("ranking lists"));
    }
    let mut total = 0.0;
    for (q, list) in rankings.iter().enumerate() {
        let relevant = list.iter().filter(|&&r| r).count();
        if relevant == 0 {
            return Err(Error::Label(format!("query {q} has no relevant item")));
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (i, &r) in list.iter().enumerate() {
            if r {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        total += sum / relevant as f64;
    }
    Ok(100.0 * total / rankings.len() as f64)
}

/// Relevance lists for one-true-match retrieval, ready for `average_precision`.
pub fn relevance_lists(queries: &[Vec<f32>], gallery: &[Vec<f32>], truth: &[Option<usize>]) -> Result<Vec<Vec<bool>>> {
    let ranks = match_ranks(queries, gallery, truth)?;
    Ok(ranks
        .into_iter()
        .map(|r| (1..=gallery.len()).map(|i| i == r).collect())
        .collect())
}

/// Accumulated pixel confusion counts, `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>, ignore_index: u8) -> Result<()> {
        check_same(pred.shape(), gt.shape(), "miou maps")?;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::Label(format!("class {} outside 0..{}", p.max(g), self.num_classes)));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU for classes appearing in gt or prediction.
    pub fn ious(&self) -> BTreeMap<usize, f64> {
        let n = self.num_classes;
        let mut out = BTreeMap::new();
        for c in 0..n {
            let inter = self.counts[c * n + c];
            let gt: u64 = (0..n).map(|p| self.counts[c * n + p]).sum();
            let pred: u64 = (0..n).map(|g| self.counts[g * n + c]).sum();
            let union = gt + pred - inter;
            if union > 0 {
                out.insert(c, inter as f64 / union as f64);
            }
        }
        out
    }

    pub fn miou(&self) -> Result<f64> {
        let ious = self.ious();
        if ious.is_empty() {
            return Err(Error::Empty("non-ignored pixels"));
        }
        Ok(ious.values().sum::<f64>() / ious.len() as f64)
    }
}

/// Mean IoU of one prediction map, in `[0, 1]`.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize, ignore_index: u8) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore_index)?;
    cm.miou()
}

/// Task metrics, keyed by task kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskMetrics {
    Classification {
        accuracy: f64,
    },
    Geolocation {
        recall_1: f64,
        recall_5: f64,
        recall_10: f64,
        recall_top1pct: f64,
        ap: f64,
    },
    Segmentation {
        miou: f64,
    },
}

/// Averaged metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// What was scored: `generator`, `occluded` or `clean`.
    pub mode: String,
    pub samples: usize,
    /// Mean full-image PSNR; `None` (JSON null) when every pair is identical.
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub masked_psnr: Option<f64>,
    pub task: TaskMetrics,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        let ok = self.samples > 0
            && (-1.0..=1.0).contains(&self.ssim)
            && match &self.task {
                TaskMetrics::Classification { accuracy } => pct(*accuracy),
                TaskMetrics::Geolocation {
                    recall_1,
                    recall_5,
                    recall_10,
                    recall_top1pct,
                    ap,
                } => [*recall_1, *recall_5, *recall_10, *recall_top1pct, *ap].into_iter().all(pct),
                TaskMetrics::Segmentation { miou } => (0.0..=1.0).contains(miou),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("metric report out of range: {self:?}")))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Header and value line of the flat CSV form.
    pub fn csv(&self) -> (String, String) {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "inf".into());
        let mut cols = vec![
            ("mode", self.mode.clone()),
            ("samples", self.samples.to_string()),
            ("psnr", f(self.psnr)),
            ("ssim", format!("{:.4}", self.ssim)),
            ("masked_psnr", f(self.masked_psnr)),
        ];
        match &self.task {
            TaskMetrics::Classification { accuracy } => cols.push(("accuracy", format!("{accuracy:.2}"))),
            TaskMetrics::Geolocation {
                recall_1,
                recall_5,
                recall_10,
                recall_top1pct,
                ap,
            } => {
                cols.push(("recall_1", format!("{recall_1:.2}")));
                cols.push(("recall_5", format!("{recall_5:.2}")));
                cols.push(("recall_10", format!("{recall_10:.2}")));
                cols.push(("recall_top1pct", format!("{recall_top1pct:.2}")));
                cols.push(("ap", format!("{ap:.2}")));
            }
            TaskMetrics::Segmentation { miou } => cols.push(("miou", format!("{miou:.4}"))),
        }
        let header = cols.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",");
        let row = cols.into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",");
        (header, row)
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        if let Some(dir) = json_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        let (h, r) = self.csv();
        std::fs::write(&csv_path, format!("{h}\n{r}\n")).map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, c), |_| rng.random::<f32>())
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(&mut rng, 8, 8, 3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = Array3::<f32>::zeros((8, 8, 3));
        let d = z.mapv(|_| 16.0 / 255.0);
        assert!((psnr(&d, &z).unwrap() - 24.0484).abs() < 1e-3);
        assert!(psnr(&a, &Array3::zeros((8, 7, 3))).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = Array3::<f32>::from_elem((8, 8, 1), 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.3] {
            let noisy = base.mapv(|v| v + amp);
            let p = psnr(&noisy, &base).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn masked_psnr_only_counts_hole() {
        let z = Array3::<f32>::zeros((4, 4, 3));
        let mut r = z.clone();
        r[[0, 0, 0]] = 1.0;
        let mut m = OcclusionMask::zeros(4, 4);
        m.set(3, 3, true);
        assert_eq!(masked_psnr(&r, &z, &m).unwrap(), Some(f64::INFINITY));
        assert_eq!(masked_psnr(&r, &z, &OcclusionMask::zeros(4, 4)).unwrap(), None);
    }

    #[test]
    fn ssim_basic_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 16, 3);
        let b = random_image(&mut rng, 16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        let x = Array3::from_elem((12, 12, 1), 100.0 / 255.0);
        let y = Array3::from_elem((12, 12, 1), 200.0 / 255.0);
        assert!((ssim(&x, &y).unwrap() - 0.8).abs() < 1e-3);
        assert!(ssim(&Array3::zeros((10, 10, 1)), &Array3::zeros((10, 10, 1))).is_err());
    }

    #[test]
    fn ssim_averages_channels_of_hwc_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 12, 3);
        let mut b = a.clone();
        b.index_axis_mut(ndarray::Axis(2), 1).fill(0.5);
        let per: Vec<f64> = (0..3)
            .map(|c| {
                let one = |x: &Array3<f32>| x.index_axis(ndarray::Axis(2), c).to_owned().insert_axis(ndarray::Axis(2));
                ssim(&one(&a), &one(&b)).unwrap()
            })
            .collect();
        assert_eq!(per[0], 1.0);
        assert!(per[1] < 0.5);
        assert!((ssim(&a, &b).unwrap() - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]).unwrap(), 50.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn recall_hand_ranked() {
        // gallery items on the unit circle; queries placed so truth ranks 1, 2, 3
        let gallery = vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]];
        let queries = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let truth = [Some(0), Some(1), Some(2)];
        let r = |k| recall_at_k(&queries, &gallery, &truth, RecallK::Rank(k)).unwrap();
        assert!((r(1) - 100.0 / 3.0).abs() < 1e-9);
        assert!((r(2) - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r(3), 100.0);
        assert_eq!(
            recall_at_k(&[vec![1.0]], &[vec![2.0]], &[Some(0)], RecallK::Rank(1)).unwrap(),
            100.0
        );
        assert!(recall_at_k(&queries, &gallery, &[Some(0), None, Some(1)], RecallK::Rank(1)).is_err());
        assert_eq!(RecallK::TopOnePercent.resolve(250), 3);
        assert_eq!(RecallK::TopOnePercent.resolve(7), 1);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[vec![true, false]]).unwrap(), 100.0);
        assert_eq!(average_precision(&[vec![false, true, false]]).unwrap(), 50.0);
        // hits at 1 and 3: (1 + 2/3) / 2
        let v = average_precision(&[vec![true, false, true]]).unwrap();
        assert!((v - 100.0 * (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn miou_cases() {
        let pred = ndarray::arr2(&[[0u8, 0], [1, 1]]);
        let gt = ndarray::arr2(&[[0u8, 1], [1, 1]]);
        assert!((miou(&pred, &gt, 2, 255).unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(miou(&gt, &gt, 2, 255).unwrap(), 1.0);
        let ign = ndarray::arr2(&[[255u8, 1], [1, 1]]);
        assert_eq!(miou(&pred, &ign, 2, 255).unwrap(), 0.5 * (0.0 + 2.0 / 3.0) / 0.5 / 2.0);
        assert!(miou(&pred, &ndarray::Array2::zeros((3, 2)), 2, 255).is_err());
    }

    #[test]
    fn report_json_and_csv() {
        let r = MetricReport {
            mode: "occluded".into(),
            samples: 2,
            psnr: None,
            ssim: 0.5,
            masked_psnr: Some(10.0),
            task: TaskMetrics::Classification { accuracy: 50.0 },
        };
        r.validate().unwrap();
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let (h, row) = r.csv();
        assert_eq!(h, "mode,samples,psnr,ssim,masked_psnr,accuracy");
        assert_eq!(row, "occluded,2,inf,0.5000,10.0000,50.00");
    }
}
