//! Image quality metrics on the 0-255 scale: MSE, PSNR, SSIM and their
//! foreground-restricted variants, plus dataset-level evaluation.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};
use crate::model::{blend, Network};
use crate::nn::Mode;
use crate::resample::bilinear_resize;

pub const PIXEL_MAX: f64 = 255.0;
/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// MSE floor that produces the cap: 255^2 / 10^(cap / 10).
pub const MSE_FLOOR: f64 = PIXEL_MAX * PIXEL_MAX / 1e10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * PIXEL_MAX) * (0.01 * PIXEL_MAX);
pub const SSIM_C2: f64 = (0.03 * PIXEL_MAX) * (0.03 * PIXEL_MAX);

/// A (C, H, W) image held as f64 values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(HarmonizeError::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// From a (C, H, W) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel mean on the 0-255 scale.
    fn gray255(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        out.iter().map(|v| v * PIXEL_MAX / self.channels as f64).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..self.clone() }
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(HarmonizeError::Shape(format!(
            "images differ: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

fn foreground(mask: &Image, h: usize, w: usize) -> Result<Vec<bool>> {
    if (mask.height, mask.width) != (h, w) {
        return Err(HarmonizeError::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height, mask.width
        )));
    }
    Ok(mask.plane(0).iter().map(|&m| m >= 0.5).collect())
}

/// Mean squared 0-255 error over the selected pixels (all when `select` is None).
fn squared_error(a: &Image, b: &Image, select: Option<&[bool]>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for (i, (x, y)) in a.plane(c).iter().zip(b.plane(c)).enumerate() {
            if select.is_none_or(|s| s[i]) {
                let d = PIXEL_MAX * (x - y);
                sum += d * d;
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    squared_error(a, b, None).ok_or_else(|| HarmonizeError::Argument("empty image".into()))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (PIXEL_MAX * PIXEL_MAX / mse.max(MSE_FLOOR)).log10()
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// MSE over pixels with mask >= 0.5.
pub fn fmse(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let sel = foreground(mask, a.height, a.width)?;
    squared_error(a, b, Some(&sel))
        .ok_or_else(|| HarmonizeError::EmptyRegion("fMSE: mask has no foreground pixels".into()))
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Local SSIM values for every valid (fully inside) window, row-major over
/// window top-left corners: ((h - 10) x (w - 10)) values.
fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, usize, usize)> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(HarmonizeError::Argument(format!(
            "SSIM needs at least {k}x{k} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    let (oh, ow) = (h - k + 1, w - k + 1);
    // separable weighted moments: filter rows, then columns
    let filter = |src: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..k).map(|i| g[i] * src(y * w + x + i)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        out
    };
    let mu_a = filter(&|i| a[i]);
    let mu_b = filter(&|i| b[i]);
    let aa = filter(&|i| a[i] * a[i]);
    let bb = filter(&|i| b[i] * b[i]);
    let ab = filter(&|i| a[i] * b[i]);
    let map = (0..oh * ow)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect();
    Ok((map, oh, ow))
}

fn ssim_mean(a: &Image, b: &Image, select: Option<&[bool]>) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let (map, oh, ow) = ssim_map(&a.gray255(), &b.gray255(), a.height, a.width)?;
    let half = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            let centre = (y + half) * a.width + x + half;
            if select.is_none_or(|s| s[centre]) {
                sum += map[y * ow + x];
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| (100.0 * sum / count as f64).clamp(0.0, 100.0)))
}

/// Mean local SSIM of the channel-averaged images, x100, clamped to [0, 100].
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_mean(a, b, None)?.unwrap_or(0.0))
}

/// Mean local SSIM over windows whose centre pixel is foreground.
pub fn fssim(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    let sel = foreground(mask, a.height, a.width)?;
    ssim_mean(a, b, Some(&sel))?
        .ok_or_else(|| HarmonizeError::EmptyRegion("fSSIM: no window centred on foreground".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when the mask has no foreground.
    pub fmse: Option<f64>,
    pub fssim: Option<f64>,
    pub resolution: usize,
}

fn absent_if_empty(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(HarmonizeError::EmptyRegion(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn image_report(harmonized: &Image, target: &Image, mask: &Image) -> Result<MetricReport> {
    let m = mse(harmonized, target)?;
    Ok(MetricReport {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(harmonized, target)?,
        fmse: absent_if_empty(fmse(harmonized, target, mask))?,
        fssim: absent_if_empty(fssim(harmonized, target, mask))?,
        resolution: harmonized.height.max(harmonized.width),
    })
}

/// Mean of each field; optional fields over the reports that carry them.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(HarmonizeError::Argument("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean_opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(MetricReport {
        mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        fmse: mean_opt(&|r| r.fmse),
        fssim: mean_opt(&|r| r.fssim),
        resolution: reports[0].resolution,
    })
}

/// Anything that maps (N, 3, S, S) composites and (N, 1, S, S) masks to
/// harmonized images of the same shape.
pub trait Harmonizer {
    fn name(&self) -> &str;
    fn harmonize(&self, composite: &Tensor, mask: &Tensor) -> Result<Tensor>;
}

/// The identity "model": returns the composite unchanged.
pub struct CompositeBaseline;

impl Harmonizer for CompositeBaseline {
    fn name(&self) -> &str {
        "composite"
    }

    fn harmonize(&self, composite: &Tensor, _mask: &Tensor) -> Result<Tensor> {
        Ok(composite.clone())
    }
}

impl Harmonizer for Network {
    fn name(&self) -> &str {
        "network"
    }

    fn harmonize(&self, composite: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let dt = self.dtype();
        let out = self.forward(&composite.to_dtype(dt)?, &mask.to_dtype(dt)?, Mode::Eval)?;
        Ok(out.to_dtype(composite.dtype())?)
    }
}

/// Wraps a harmonizer so that its output keeps the composite background.
pub struct Blended<'a, H: Harmonizer + ?Sized>(pub &'a H);

impl<H: Harmonizer + ?Sized> Harmonizer for Blended<'_, H> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn harmonize(&self, composite: &Tensor, mask: &Tensor) -> Result<Tensor> {
        blend(&self.0.harmonize(composite, mask)?, composite, mask)
    }
}

/// One evaluation item: (3, H, W) composite and target, (1, H, W) mask.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub composite: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(flatten)]
    pub report: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub resolution: usize,
    pub records: Vec<ImageRecord>,
    pub aggregate: Option<MetricReport>,
}

fn resize_to(t: &Tensor, s: usize) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    if (h, w) == (s, s) {
        return Ok(t.clone());
    }
    Ok(bilinear_resize(&t.unsqueeze(0)?, s, s)?.squeeze(0)?)
}

fn evaluate_item<H: Harmonizer + ?Sized>(model: &H, item: &Result<EvalItem>, resolution: usize) -> Result<MetricReport> {
    let item = match item {
        Ok(i) => i,
        Err(e) => return Err(HarmonizeError::Argument(e.to_string())),
    };
    let comp = resize_to(&item.composite.to_dtype(DType::F32)?, resolution)?;
    let mask = resize_to(&item.mask.to_dtype(DType::F32)?, resolution)?;
    let target = resize_to(&item.target.to_dtype(DType::F32)?, resolution)?;
    let out = model.harmonize(&comp.unsqueeze(0)?, &mask.unsqueeze(0)?)?.squeeze(0)?;
    if out.dims() != comp.dims() {
        return Err(HarmonizeError::Shape(format!(
            "{} produced {:?} for input {:?}",
            model.name(),
            out.dims(),
            comp.dims()
        )));
    }
    image_report(
        &Image::from_tensor(&out.clamp(0.0, 1.0)?)?,
        &Image::from_tensor(&target)?,
        &Image::from_tensor(&mask)?,
    )
}

/// Per-image metrics at `resolution` (bilinear resize of all inputs), then
/// averaged. Item failures are recorded, not fatal.
pub fn evaluate_dataset<H: Harmonizer + ?Sized>(
    model: &H,
    items: &[Result<EvalItem>],
    resolution: usize,
) -> Result<EvalSummary> {
    if items.is_empty() {
        return Err(HarmonizeError::Argument("evaluation dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let id = match item {
            Ok(it) => it.id.clone(),
            Err(_) => format!("item{i}"),
        };
        match evaluate_item(model, item, resolution) {
            Ok(r) => records.push(ImageRecord {
                id,
                report: Some(r),
                error: None,
            }),
            Err(e) => {
                log::warn!("evaluation of {id} failed: {e}");
                records.push(ImageRecord {
                    id,
                    report: None,
                    error: Some(e.to_string()),
                })
            }
        }
    }
    let ok: Vec<MetricReport> = records.iter().filter_map(|r| r.report).collect();
    Ok(EvalSummary {
        model: model.name().to_string(),
        resolution,
        aggregate: if ok.is_empty() { None } else { Some(aggregate(&ok)?) },
        records,
    })
}

/// Writes one JSON record per image followed by an aggregate record.
pub fn write_jsonl(summary: &EvalSummary, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| HarmonizeError::io(path, e))?;
    let mut line = |v: serde_json::Value| -> Result<()> {
        writeln!(f, "{v}").map_err(|e| HarmonizeError::io(path, e))
    };
    for r in &summary.records {
        let mut v = serde_json::to_value(r)?;
        v["model"] = summary.model.clone().into();
        v["resolution"] = summary.resolution.into();
        line(v)?;
    }
    line(serde_json::json!({
        "id": "aggregate",
        "model": summary.model,
        "resolution": summary.resolution,
        "images": summary.records.iter().filter(|r| r.report.is_some()).count(),
        "aggregate": summary.aggregate,
    }))
}

/// Convenience for (3, H, W) tensors on the CPU.
pub fn tensor_report(harmonized: &Tensor, target: &Tensor, mask: &Tensor) -> Result<MetricReport> {
    image_report(
        &Image::from_tensor(harmonized)?,
        &Image::from_tensor(target)?,
        &Image::from_tensor(mask)?,
    )
}
