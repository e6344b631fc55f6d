//! Image quality metrics, dataset evaluation and efficiency benchmarking.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Image, PairedDataset, RealDataset};
use crate::error::{Error, Result};
use crate::losses::ssim_loss;
use crate::net::{Dehazer, ModelHandle};
use hazekit_tape::Tensor;

/// Side of the square minimum filter of the dark channel.
pub const DARK_CHANNEL_WINDOW: usize = 7;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

fn single(img: &Image) -> Result<[usize; 2]> {
    let s = img.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Dimension(format!("expected one RGB image [1, 3, H, W], got {s:?}")));
    }
    if s[2] == 0 || s[3] == 0 {
        return Err(Error::Input("image has no pixels".into()));
    }
    Ok([s[2], s[3]])
}

/// Shannon entropy in bits of the 256-bin histogram of BT.601 luma.
pub fn entropy(img: &Image) -> Result<f64> {
    let [h, w] = single(img)?;
    let plane = h * w;
    let d = img.data();
    let mut hist = [0usize; 256];
    for i in 0..plane {
        let y = 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64;
        hist[(y.clamp(0.0, 1.0) * 255.0).round_ties_even() as usize] += 1;
    }
    let n = plane as f64;
    Ok(hist.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum::<f64>().max(0.0))
}

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::Input("empty images".into()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(sum / pred.numel() as f64)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let m = mse(pred, target)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// `1 - ssim_loss`, i.e. mean SSIM.
pub fn ssim_metric(pred: &Image, target: &Image) -> Result<f64> {
    Ok(1.0 - ssim_loss(pred, target)?)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Per-pixel RGB minimum followed by a square minimum filter with mirror
/// padding, for every image of the batch.
pub fn dark_channel(img: &Image, window: usize) -> Vec<Vec<f32>> {
    let [n, c, h, w] = img.dims4();
    let plane = h * w;
    let r = (window / 2) as isize;
    (0..n)
        .map(|b| {
            let base = &img.data()[b * c * plane..(b + 1) * c * plane];
            let dmin: Vec<f32> =
                (0..plane).map(|i| (0..c).map(|ch| base[ch * plane + i]).fold(f32::INFINITY, f32::min)).collect();
            // separable: rows then columns
            let mut rows = vec![0.0f32; plane];
            for y in 0..h {
                for x in 0..w {
                    rows[y * w + x] =
                        (-r..=r).map(|dx| dmin[y * w + reflect(x as isize + dx, w)]).fold(f32::INFINITY, f32::min);
                }
            }
            let mut out = vec![0.0f32; plane];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] =
                        (-r..=r).map(|dy| rows[reflect(y as isize + dy, h) * w + x]).fold(f32::INFINITY, f32::min);
                }
            }
            out
        })
        .collect()
}

/// Mean dark channel over every pixel of the batch; in `[0, 1]`.
pub fn haze_density_proxy(img: &Image) -> f64 {
    let channels = dark_channel(img, DARK_CHANNEL_WINDOW);
    let count: usize = channels.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    channels.iter().flatten().map(|&v| v as f64).sum::<f64>() / count as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    pub entropy: f64,
    pub haze_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: BTreeMap<String, ImageMetrics>,
    pub aggregate: ImageMetrics,
}

impl MetricReport {
    /// Builds the report with aggregates as arithmetic means.
    pub fn from_images(per_image: BTreeMap<String, ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Input("no images were evaluated".into()));
        }
        let n = per_image.len() as f64;
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| per_image.values().map(f).sum::<f64>() / n;
        let has_gt = per_image.values().all(|m| m.psnr.is_some() && m.ssim.is_some());
        let aggregate = ImageMetrics {
            psnr: has_gt.then(|| mean(&|m| m.psnr.unwrap_or(0.0))),
            ssim: has_gt.then(|| mean(&|m| m.ssim.unwrap_or(0.0))),
            entropy: mean(&|m| m.entropy),
            haze_density: mean(&|m| m.haze_density),
        };
        Ok(Self { per_image, aggregate })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per image, then an `aggregate` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image", "psnr", "ssim", "entropy", "haze_density"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (id, m) in self.per_image.iter().chain(std::iter::once((&"aggregate".to_string(), &self.aggregate))) {
            w.write_record([id.clone(), opt(m.psnr), opt(m.ssim), m.entropy.to_string(), m.haze_density.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Restores every input with `model` and scores the outputs, against
/// `targets` when ground truth is requested.
pub fn evaluate(
    model: &dyn Dehazer,
    inputs: &[Image],
    targets: Option<&[Image]>,
    with_ground_truth: bool,
) -> Result<MetricReport> {
    if inputs.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let targets = match (with_ground_truth, targets) {
        (true, None) => return Err(Error::Input("ground truth requested but the dataset has none".into())),
        (true, Some(t)) if t.len() != inputs.len() => {
            return Err(Error::Input(format!("{} inputs but {} targets", inputs.len(), t.len())))
        }
        (true, t) => t,
        (false, _) => None,
    };
    let mut per_image = BTreeMap::new();
    for (i, x) in inputs.iter().enumerate() {
        single(x)?;
        let y = model.dehaze_batch(x)?;
        let (psnr_v, ssim_v) = match targets {
            Some(t) => (Some(psnr(&y, &t[i])?), Some(ssim_metric(&y, &t[i])?)),
            None => (None, None),
        };
        per_image.insert(
            format!("{i:04}"),
            ImageMetrics { psnr: psnr_v, ssim: ssim_v, entropy: entropy(&y)?, haze_density: haze_density_proxy(&y) },
        );
    }
    MetricReport::from_images(per_image)
}

pub fn evaluate_paired(model: &dyn Dehazer, data: &PairedDataset) -> Result<MetricReport> {
    evaluate(model, &data.hazy, Some(&data.clean), true)
}

pub fn evaluate_real(model: &dyn Dehazer, data: &RealDataset) -> Result<MetricReport> {
    evaluate(model, &data.images, None, false)
}

/// Mean PSNR of restored inputs against their targets.
pub fn mean_psnr(model: &dyn Dehazer, data: &PairedDataset) -> Result<f64> {
    Ok(evaluate_paired(model, data)?.aggregate.psnr.expect("paired evaluation has PSNR"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub shape: [usize; 4],
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params: u64,
    pub flops: u64,
    pub flops_shape: [usize; 4],
    pub latency_ms: Vec<LatencyEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup: 3, runs: 20 }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Parameter count, FLOPs at the first shape and median forward latency at
/// every shape, timed on the calling thread with a monotonic clock.
pub fn bench_efficiency(model: &ModelHandle, shapes: &[[usize; 4]], opts: BenchOptions) -> Result<EfficiencyReport> {
    let first = *shapes.first().ok_or_else(|| Error::Input("at least one input shape is required".into()))?;
    if opts.runs == 0 {
        return Err(Error::Config("benchmark needs at least one timed run".into()));
    }
    let flops = model.flops_estimate(&first)?;
    let mut latency_ms = Vec::with_capacity(shapes.len());
    for &shape in shapes {
        model.config().check_input(&shape)?;
        let x: Image = Tensor::full(shape.to_vec(), 0.5);
        for _ in 0..opts.warmup {
            std::hint::black_box(model.forward(&x)?);
        }
        let mut times: Vec<f64> = (0..opts.runs)
            .map(|_| {
                let t0 = Instant::now();
                let out = model.forward(&x);
                let dt = t0.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(out).map(|_| dt)
            })
            .collect::<Result<_>>()?;
        latency_ms.push(LatencyEntry { shape, median_ms: median(&mut times) });
    }
    Ok(EfficiencyReport { params: model.param_count(), flops, flops_shape: first, latency_ms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_levels(levels: &[u8], h: usize, w: usize) -> Image {
        let plane: Vec<f32> = (0..h * w).map(|i| levels[i % levels.len()] as f32 / 255.0).collect();
        Tensor::new(vec![1, 3, h, w], [plane.clone(), plane.clone(), plane].concat())
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy(&gray_levels(&[77], 4, 4)).unwrap(), 0.0);
        assert!((entropy(&gray_levels(&[0, 255], 4, 4)).unwrap() - 1.0).abs() < 1e-12);
        let all: Vec<u8> = (0..=255).collect();
        assert!((entropy(&gray_levels(&all, 16, 16)).unwrap() - 8.0).abs() < 1e-12);
        let empty: Image = Tensor::zeros(vec![1, 3, 0, 4]);
        assert!(matches!(entropy(&empty), Err(Error::Input(_))));
    }

    #[test]
    fn psnr_closed_forms() {
        let a: Image = Tensor::full(vec![1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b: Image = Tensor::new(vec![1, 3, 4, 4], vec![0.5f32; 48]).map(|v| v + 0.1);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-5, "{v}");
        let c: Image = Tensor::full(vec![1, 3, 4, 5], 0.5);
        assert!(matches!(psnr(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn proxy_extremes() {
        assert_eq!(haze_density_proxy(&Tensor::zeros(vec![1, 3, 9, 9])), 0.0);
        assert_eq!(haze_density_proxy(&Tensor::full(vec![1, 3, 9, 9], 1.0)), 1.0);
    }

    #[test]
    fn dark_channel_takes_local_minimum() {
        let mut img: Image = Tensor::full(vec![1, 3, 9, 9], 0.8);
        img.data_mut()[2 * 81 + 4 * 9 + 4] = 0.1;
        let dc = &dark_channel(&img, 7)[0];
        assert_eq!(dc[4 * 9 + 4], 0.1);
        assert_eq!(dc[9 + 1], 0.1);
        assert_eq!(dc[0], 0.8);
    }

    #[test]
    fn reflect_mirrors_without_repeating_the_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-3, 5), 3);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(7, 5), 1);
        assert_eq!(reflect(-2, 2), 0);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
