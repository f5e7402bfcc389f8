//! Dataset handling: iHarmony4-style directory layout, triplet resolution,
//! augmentation, and a procedural toy dataset generator.
//!
//! Layout under a dataset root:
//! `composite_images/<name>_<mask>_<variant>.<ext>`, `masks/<name>_<mask>.png`,
//! `real_images/<name>.<ext>`, plus `<Subset>_<split>.txt` list files naming
//! the composites of each split.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};
use crate::metrics::{mse, psnr_from_mse, EvalItem, Image};
use crate::model::Network;
use crate::nn::Mode;

pub const COMPOSITE_DIR: &str = "composite_images";
pub const MASK_DIR: &str = "masks";
pub const TARGET_DIR: &str = "real_images";
/// Canvas scale before cropping to the training size.
pub const RESIZE_RATIO: f64 = 1.125;
pub const FLIP_PROBABILITY: f64 = 0.5;
/// Full iHarmony4 split sizes.
pub const IHARMONY4_TRAIN: usize = 65742;
pub const IHARMONY4_TEST: usize = 7404;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// (C, H, W) float image in [0, 1].
pub type Rgb32 = ImageBuffer<Rgb<f32>, Vec<f32>>;
pub type Gray32 = ImageBuffer<Luma<f32>, Vec<f32>>;

#[derive(Debug, Clone)]
pub struct Sample {
    /// (3, H, W)
    pub composite: Tensor,
    /// (1, H, W)
    pub mask: Tensor,
    /// (3, H, W)
    pub target: Tensor,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub composite: PathBuf,
    pub mask: PathBuf,
    pub target: PathBuf,
    pub subset: String,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        self.composite
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

/// `name_mask_variant.ext` -> (`name_mask.png`, `name.ext`).
pub fn resolve_triplet(composite: &str) -> Result<(String, String)> {
    let malformed = |reason: &str| HarmonizeError::Manifest {
        path: PathBuf::from(composite),
        reason: reason.to_string(),
    };
    let (stem, ext) = composite
        .rsplit_once('.')
        .filter(|(s, e)| !s.is_empty() && !e.is_empty())
        .ok_or_else(|| malformed("missing file extension"))?;
    let (mask_stem, _variant) = stem
        .rsplit_once('_')
        .ok_or_else(|| malformed("expected name_maskid_variantid"))?;
    let (name, _mask_id) = mask_stem
        .rsplit_once('_')
        .ok_or_else(|| malformed("expected name_maskid_variantid"))?;
    if name.is_empty() || mask_stem.ends_with('_') || stem.ends_with('_') {
        return Err(malformed("empty name component"));
    }
    Ok((format!("{mask_stem}.png"), format!("{name}.{ext}")))
}

fn entry_for(root: &Path, composite_name: &str, subset: &str) -> Result<ManifestEntry> {
    let (mask, target) = resolve_triplet(composite_name)?;
    Ok(ManifestEntry {
        composite: root.join(COMPOSITE_DIR).join(composite_name),
        mask: root.join(MASK_DIR).join(mask),
        target: root.join(TARGET_DIR).join(target),
        subset: subset.to_string(),
    })
}

impl DatasetManifest {
    /// Reads every `<Subset>_<split>.txt` list under `root`. Lines may be bare
    /// file names or paths; only the file name is used.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let suffix = format!("_{}.txt", split.as_str());
        let mut lists: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| HarmonizeError::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(&suffix) && n.len() > suffix.len())
            })
            .collect();
        lists.sort();
        if lists.is_empty() {
            return Err(HarmonizeError::Manifest {
                path: root.to_path_buf(),
                reason: format!("no *{suffix} list file"),
            });
        }
        let mut entries = Vec::new();
        for list in lists {
            let name = list.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let subset = name[..name.len() - suffix.len()].to_string();
            let text = fs::read_to_string(&list).map_err(|e| HarmonizeError::io(&list, e))?;
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let file = Path::new(line)
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| HarmonizeError::Manifest {
                        path: list.clone(),
                        reason: format!("bad line {line:?}"),
                    })?;
                entries.push(entry_for(root, file, &subset)?);
            }
        }
        let manifest = Self {
            root: root.to_path_buf(),
            split,
            entries,
        };
        manifest.verify()?;
        Ok(manifest)
    }

    /// Every referenced file must exist.
    pub fn verify(&self) -> Result<()> {
        let missing: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| [&e.composite, &e.mask, &e.target])
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let shown = missing.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
        Err(HarmonizeError::Manifest {
            path: self.root.clone(),
            reason: format!("{} missing files: {shown}", missing.len()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cache_path(root: &Path, split: Split) -> PathBuf {
        root.join(format!("manifest_{}.json", split.as_str()))
    }

    /// Writes the resolved triplets next to the list files.
    pub fn save_cache(&self) -> Result<PathBuf> {
        let path = Self::cache_path(&self.root, self.split);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| HarmonizeError::io(&path, e))?;
        Ok(path)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarmonizeError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.verify()?;
        Ok(m)
    }
}

/// Decoded full-resolution triplet.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub composite: Rgb32,
    pub mask: Gray32,
    pub target: Rgb32,
    pub id: String,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| HarmonizeError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Any decodable image as RGB in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Rgb32> {
    Ok(open(path)?.to_rgb32f())
}

/// Any decodable image as a single-channel mask in [0, 1].
pub fn load_mask(path: &Path) -> Result<Gray32> {
    let m = open(path)?.to_luma8();
    Ok(Gray32::from_fn(m.width(), m.height(), |x, y| Luma([m.get_pixel(x, y)[0] as f32 / 255.0])))
}

/// Quantizes to 8 bits with rounding.
pub fn rgb_to_u8(img: &Rgb32) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn mask_to_u8(img: &Gray32) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        Luma([(img.get_pixel(x, y)[0].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// (3, H, W) tensor in [0, 1] to an RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<Rgb32> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(HarmonizeError::Shape(format!("expected 3 channels, got {c}")));
    }
    let hwc: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.permute((1, 2, 0))?.flatten_all()?.to_vec1()?;
    Rgb32::from_raw(w as u32, h as u32, hwc).ok_or_else(|| HarmonizeError::Shape("image buffer size".into()))
}

pub fn save_image(img: &impl ToyWritable, path: &Path) -> Result<()> {
    img.write(path)
}

/// Runs `net` on one composite of any size: both inputs are resized to the
/// network resolution and the output back to the input size. With `blend`
/// the composite is kept wherever the mask is 0, at the input resolution.
pub fn harmonize_image(net: &Network, composite: &Rgb32, mask: &Gray32, blend: bool) -> Result<Rgb32> {
    let (w, h) = composite.dimensions();
    if mask.dimensions() != (w, h) {
        return Err(HarmonizeError::Shape(format!(
            "mask is {:?} but composite is {:?}",
            mask.dimensions(),
            (w, h)
        )));
    }
    let s = net.config().image_size as u32;
    let dev = Device::Cpu;
    let dt = net.dtype();
    let comp_s = rgb_to_tensor(&imageops::resize(composite, s, s, FilterType::Triangle), &dev)?;
    let mask_s = gray_to_tensor(&imageops::resize(mask, s, s, FilterType::Triangle), &dev)?.clamp(0f32, 1f32)?;
    let out = net.forward(
        &comp_s.unsqueeze(0)?.to_dtype(dt)?,
        &mask_s.unsqueeze(0)?.to_dtype(dt)?,
        Mode::Eval,
    )?;
    let out = imageops::resize(&tensor_to_rgb(&out.squeeze(0)?)?, w, h, FilterType::Triangle);
    if !blend {
        return Ok(out);
    }
    Ok(Rgb32::from_fn(w, h, |x, y| {
        let m = mask.get_pixel(x, y)[0].clamp(0.0, 1.0);
        let (o, c) = (out.get_pixel(x, y), composite.get_pixel(x, y));
        Rgb(std::array::from_fn(|k| if m == 0.0 { c[k] } else { o[k] * m + c[k] * (1.0 - m) }))
    }))
}

/// Composite | mask | output, left to right.
pub fn side_by_side(composite: &Rgb32, mask: &Gray32, output: &Rgb32) -> RgbImage {
    let (w, h) = composite.dimensions();
    let (c, m, o) = (rgb_to_u8(composite), mask_to_u8(mask), rgb_to_u8(output));
    RgbImage::from_fn(3 * w, h, |x, y| match x / w {
        0 => *c.get_pixel(x, y),
        1 => {
            let v = m.get_pixel(x - w, y)[0];
            Rgb([v, v, v])
        }
        _ => *o.get_pixel(x - 2 * w, y),
    })
}

pub fn load_raw(entry: &ManifestEntry) -> Result<RawSample> {
    let composite = load_rgb(&entry.composite)?;
    let target = load_rgb(&entry.target)?;
    let mask = load_mask(&entry.mask)?;
    if composite.dimensions() != target.dimensions() || composite.dimensions() != mask.dimensions() {
        return Err(HarmonizeError::Manifest {
            path: entry.composite.clone(),
            reason: format!(
                "size mismatch: composite {:?}, mask {:?}, target {:?}",
                composite.dimensions(),
                mask.dimensions(),
                target.dimensions()
            ),
        });
    }
    Ok(RawSample {
        composite,
        mask,
        target,
        id: entry.id(),
    })
}

/// Geometric transform applied identically to all three images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub canvas: u32,
    pub crop_x: u32,
    pub crop_y: u32,
    pub flip: bool,
}

impl Augment {
    pub fn canvas_for(image_size: usize) -> u32 {
        (image_size as f64 * RESIZE_RATIO).round() as u32
    }

    /// Random crop and flip in training; centre crop without flip otherwise.
    pub fn draw<R: Rng>(image_size: usize, train: bool, rng: &mut R) -> Self {
        let canvas = Self::canvas_for(image_size);
        let slack = canvas - image_size as u32;
        if train {
            Self {
                canvas,
                crop_x: rng.random_range(0..=slack),
                crop_y: rng.random_range(0..=slack),
                flip: rng.random_bool(FLIP_PROBABILITY),
            }
        } else {
            Self {
                canvas,
                crop_x: slack / 2,
                crop_y: slack / 2,
                flip: false,
            }
        }
    }

    fn apply<P>(&self, img: &ImageBuffer<P, Vec<f32>>, size: u32) -> ImageBuffer<P, Vec<f32>>
    where
        P: image::Pixel<Subpixel = f32> + 'static,
    {
        let resized = imageops::resize(img, self.canvas, self.canvas, FilterType::Triangle);
        let mut out = imageops::crop_imm(&resized, self.crop_x, self.crop_y, size, size).to_image();
        if self.flip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        out
    }
}

pub fn rgb_to_tensor(img: &Rgb32, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let hwc = Tensor::from_vec(img.as_raw().clone(), (h as usize, w as usize, 3), device)?;
    Ok(hwc.permute((2, 0, 1))?.contiguous()?)
}

pub fn gray_to_tensor(img: &Gray32, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    Ok(Tensor::from_vec(img.as_raw().clone(), (1, h as usize, w as usize), device)?)
}

/// Resize to the canvas, crop to `image_size` and (in training) flip; masks
/// stay soft.
pub fn augment_raw(raw: &RawSample, image_size: usize, aug: Augment) -> Result<Sample> {
    let s = image_size as u32;
    let dev = Device::Cpu;
    Ok(Sample {
        composite: rgb_to_tensor(&aug.apply(&raw.composite, s), &dev)?,
        mask: gray_to_tensor(&aug.apply(&raw.mask, s), &dev)?.clamp(0f32, 1f32)?,
        target: rgb_to_tensor(&aug.apply(&raw.target, s), &dev)?,
        id: raw.id.clone(),
    })
}

pub fn load_and_augment<R: Rng>(entry: &ManifestEntry, train: bool, image_size: usize, rng: &mut R) -> Result<Sample> {
    let raw = load_raw(entry)?;
    augment_raw(&raw, image_size, Augment::draw(image_size, train, rng))
}

/// Native-resolution triplet for evaluation; metrics handle the resize.
pub fn load_eval_item(entry: &ManifestEntry) -> Result<EvalItem> {
    let raw = load_raw(entry)?;
    let dev = Device::Cpu;
    Ok(EvalItem {
        composite: rgb_to_tensor(&raw.composite, &dev)?,
        mask: gray_to_tensor(&raw.mask, &dev)?,
        target: rgb_to_tensor(&raw.target, &dev)?,
        id: raw.id,
    })
}

/// Eval items for a whole manifest; load failures are kept per item.
pub fn load_eval_items(manifest: &DatasetManifest) -> Vec<Result<EvalItem>> {
    manifest.entries.iter().map(load_eval_item).collect()
}

/// Stream seed for item `index` in `epoch`, independent of load order.
pub fn item_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng.random()
}

/// Keeps decoded images in memory so repeated epochs only re-augment.
pub struct Dataset {
    pub manifest: DatasetManifest,
    cache: HashMap<usize, RawSample>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest) -> Self {
        Self {
            manifest,
            cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn raw(&mut self, index: usize) -> Result<&RawSample> {
        let entry = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| HarmonizeError::Argument(format!("item {index} out of range")))?;
        Ok(match self.cache.entry(index) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(load_raw(entry)?),
        })
    }

    pub fn sample(&mut self, index: usize, train: bool, image_size: usize, seed: u64, epoch: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, epoch, index as u64));
        let aug = Augment::draw(image_size, train, &mut rng);
        augment_raw(self.raw(index)?, image_size, aug)
    }
}

/// Stacks samples into (N, 3, S, S), (N, 1, S, S), (N, 3, S, S).
pub fn collate(samples: &[Sample]) -> Result<(Tensor, Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(HarmonizeError::Argument("empty batch".into()));
    }
    let stack = |f: &dyn Fn(&Sample) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>(), 0)?)
    };
    Ok((stack(&|s| &s.composite)?, stack(&|s| &s.mask)?, stack(&|s| &s.target)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDataSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Scales the colour perturbation; 0 leaves composites equal to targets.
    pub perturbation: f64,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_test: 16,
            image_size: 64,
            seed: 0,
            perturbation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataSummary {
    pub spec: ToyDataSpec,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    /// Mean per-image PSNR of composite vs target over the test split.
    pub test_composite_psnr: f64,
}

pub const TOY_SUBSET: &str = "Toy";
pub const TOY_SUMMARY: &str = "toy_summary.json";

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Smooth two-colour gradient with a few flat shapes on top.
fn render_scene<R: Rng>(size: u32, rng: &mut R) -> RgbImage {
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let u = (x as f32 / size as f32 - 0.5) * dx + (y as f32 / size as f32 - 0.5) * dy + 0.5;
        let t = u.clamp(0.0, 1.0);
        Rgb(std::array::from_fn(|c| (lerp(c0[c], c1[c], t) * 255.0).round() as u8))
    });
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let col: [u8; 3] = std::array::from_fn(|_| rng.random_range(20..236));
        let cx = rng.random_range(0..size) as f32;
        let cy = rng.random_range(0..size) as f32;
        let r = rng.random_range(size as f32 * 0.08..size as f32 * 0.25);
        let circle = rng.random_bool(0.5);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (ux, uy) = (x as f32 - cx, y as f32 - cy);
            let inside = if circle {
                ux * ux + uy * uy <= r * r
            } else {
                ux.abs() <= r && uy.abs() <= r * 0.7
            };
            if inside {
                *p = Rgb(col);
            }
        }
    }
    img
}

/// Random rectangle or ellipse covering roughly 10-35% of the image.
fn render_mask<R: Rng>(size: u32, rng: &mut R) -> GrayImage {
    let s = size as f32;
    let hw = rng.random_range(0.18..0.32) * s;
    let hh = rng.random_range(0.18..0.32) * s;
    let cx = rng.random_range(hw..s - hw);
    let cy = rng.random_range(hh..s - hh);
    let ellipse = rng.random_bool(0.5);
    GrayImage::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f32 + 0.5 - cx) / hw, (y as f32 + 0.5 - cy) / hh);
        let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
        Luma([if inside { 255 } else { 0 }])
    })
}

/// Per-channel `gain * x + offset` on mask pixels only.
fn perturb<R: Rng>(target: &RgbImage, mask: &GrayImage, scale: f64, rng: &mut R) -> RgbImage {
    let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..=1.4));
    let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.15..=0.15));
    let s = scale as f32;
    let mut out = target.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.get_pixel(x, y)[0] >= 128 {
            for c in 0..3 {
                let v = p[c] as f32 / 255.0;
                let g = 1.0 + s * (gain[c] - 1.0);
                let nv = (g * v + s * offset[c]).clamp(0.0, 1.0);
                p[c] = (nv * 255.0).round() as u8;
            }
        }
    }
    out
}

/// 8-bit images that can be written to disk.
pub trait ToyWritable {
    fn write(&self, path: &Path) -> Result<()>;
}

impl ToyWritable for RgbImage {
    fn write(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|source| HarmonizeError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl ToyWritable for GrayImage {
    fn write(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|source| HarmonizeError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn u8_image(img: &RgbImage) -> Result<Image> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

/// Renders `n_train + n_test` lossless PNG triplets under `out_dir` and
/// writes the list files, manifest caches and a summary.
pub fn generate_toy_dataset(spec: &ToyDataSpec, out_dir: &Path) -> Result<ToyDataSummary> {
    if spec.n_train + spec.n_test == 0 || spec.image_size == 0 {
        return Err(HarmonizeError::Argument("toy dataset needs n >= 1 and a positive size".into()));
    }
    if !(spec.perturbation.is_finite() && spec.perturbation >= 0.0) {
        return Err(HarmonizeError::Argument(format!("bad perturbation scale {}", spec.perturbation)));
    }
    for d in [COMPOSITE_DIR, MASK_DIR, TARGET_DIR] {
        let p = out_dir.join(d);
        fs::create_dir_all(&p).map_err(|e| HarmonizeError::io(&p, e))?;
    }
    let size = spec.image_size as u32;
    let mut lists: HashMap<Split, Vec<String>> = HashMap::new();
    let mut test_psnr = Vec::new();
    for i in 0..spec.n_train + spec.n_test {
        let split = if i < spec.n_train { Split::Train } else { Split::Test };
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(spec.seed, u64::MAX, i as u64));
        let target = render_scene(size, &mut rng);
        let mask = render_mask(size, &mut rng);
        let composite = perturb(&target, &mask, spec.perturbation, &mut rng);
        let name = format!("toy{i:05}");
        let comp_name = format!("{name}_1_1.png");
        save_image(&target, &out_dir.join(TARGET_DIR).join(format!("{name}.png")))?;
        save_image(&mask, &out_dir.join(MASK_DIR).join(format!("{name}_1.png")))?;
        save_image(&composite, &out_dir.join(COMPOSITE_DIR).join(&comp_name))?;
        if split == Split::Test {
            test_psnr.push(psnr_from_mse(mse(&u8_image(&composite)?, &u8_image(&target)?)?));
        }
        lists.entry(split).or_default().push(format!("{COMPOSITE_DIR}/{comp_name}"));
    }
    let mut write_split = |split: Split| -> Result<DatasetManifest> {
        let lines = lists.remove(&split).unwrap_or_default();
        let list = out_dir.join(format!("{TOY_SUBSET}_{}.txt", split.as_str()));
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&list, text).map_err(|e| HarmonizeError::io(&list, e))?;
        let m = if lines.is_empty() {
            DatasetManifest {
                root: out_dir.to_path_buf(),
                split,
                entries: Vec::new(),
            }
        } else {
            DatasetManifest::load(out_dir, split)?
        };
        m.save_cache()?;
        Ok(m)
    };
    let summary = ToyDataSummary {
        spec: *spec,
        train: write_split(Split::Train)?,
        test: write_split(Split::Test)?,
        test_composite_psnr: if test_psnr.is_empty() {
            f64::NAN
        } else {
            test_psnr.iter().sum::<f64>() / test_psnr.len() as f64
        },
    };
    let path = out_dir.join(TOY_SUMMARY);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| HarmonizeError::io(&path, e))?;
    Ok(summary)
}
