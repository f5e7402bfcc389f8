//! Region-wise contrastive objective.
//!
//! Negatives are patches of the harmonized foreground, positives patches of
//! the ground-truth background. Both are cropped from masked, downsampled
//! "sampling maps", embedded by one shared two-layer head and compared
//! against per-region query vectors (the normalized mean embedding).

use candle_core::{DType, Tensor, D};
use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};
use crate::nn::{join_name, l2_normalize_rows, relu, softplus, Linear, ParamStore};
use crate::resample::rescale_mask;

/// Below this norm the mean embedding has no usable direction.
pub const QUERY_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub k: usize,
    pub tau: f64,
    pub patch_size: usize,
    pub downsample_factor: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            k: 256,
            tau: 0.07,
            patch_size: 8,
            downsample_factor: 4,
            embed_dim: 256,
            hidden_dim: 256,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn toy() -> Self {
        Self {
            k: 16,
            patch_size: 4,
            downsample_factor: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(HarmonizeError::Config("K must be at least 1".into()));
        }
        validate_tau(self.tau)?;
        if self.patch_size == 0 || self.downsample_factor == 0 {
            return Err(HarmonizeError::Config(
                "patch_size and downsample_factor must be at least 1".into(),
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(HarmonizeError::Config("embedding dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(HarmonizeError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    HarmonizedForeground,
    GroundTruthBackground,
}

/// Masked, downsampled image. `map`: (3, h, w); `region_mask`: (1, h, w).
#[derive(Debug, Clone)]
pub struct SamplingMap {
    pub map: Tensor,
    pub region_mask: Tensor,
    pub origin: Origin,
}

impl SamplingMap {
    pub fn size(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.map.dims3()?;
        Ok((h, w))
    }
}

/// `image`: (3, H, W), `mask`: (1, H, W) for the region being sampled.
pub fn build_sampling_map(
    image: &Tensor,
    mask: &Tensor,
    factor: usize,
    origin: Origin,
) -> Result<SamplingMap> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || mask.dims() != [1, h, w] {
        return Err(HarmonizeError::Shape(format!(
            "sampling map needs (3,H,W) image and (1,H,W) mask, got {:?} and {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(HarmonizeError::Argument(format!(
            "image {h}x{w} is not divisible by downsample factor {factor}"
        )));
    }
    let masked = image.broadcast_mul(mask)?;
    let map = if factor == 1 {
        masked
    } else {
        masked.unsqueeze(0)?.avg_pool2d(factor)?.squeeze(0)?
    };
    let region_mask = rescale_mask(mask, (h / factor, w / factor))?;
    Ok(SamplingMap {
        map,
        region_mask,
        origin,
    })
}

/// K top-left window anchors drawn uniformly from active pixels
/// (`region_mask >= 0.5`), with replacement only when there are fewer than K
/// of them, then clamped so the window fits inside the map.
pub fn sample_patch_locations<R: Rng>(
    map: &SamplingMap,
    k: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let (h, w) = map.size()?;
    if patch_size > h || patch_size > w {
        return Err(HarmonizeError::Argument(format!(
            "patch size {patch_size} exceeds sampling map {h}x{w}"
        )));
    }
    let values: Vec<f64> = map
        .region_mask
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let active: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.5)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return Err(HarmonizeError::EmptyRegion(format!(
            "{:?} sampling map has no active pixels",
            map.origin
        )));
    }
    let picks: Vec<usize> = if active.len() >= k {
        sample_without_replacement(rng, active.len(), k)
            .into_iter()
            .map(|i| active[i])
            .collect()
    } else {
        (0..k).map(|_| active[rng.random_range(0..active.len())]).collect()
    };
    Ok(picks
        .into_iter()
        .map(|i| ((i / w).min(h - patch_size), (i % w).min(w - patch_size)))
        .collect())
}

/// Gathers the windows into a (K, 3, p, p) tensor, differentiable w.r.t. `map`.
pub fn crop_patches(map: &Tensor, locations: &[(usize, usize)], patch_size: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let p = patch_size;
    let mut idx = Vec::with_capacity(locations.len() * c * p * p);
    for &(r, col) in locations {
        if r + p > h || col + p > w {
            return Err(HarmonizeError::Argument(format!(
                "window at ({r},{col}) of size {p} leaves the {h}x{w} map"
            )));
        }
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    idx.push((ch * h * w + (r + dy) * w + col + dx) as u32);
                }
            }
        }
    }
    let idx = Tensor::from_vec(idx, locations.len() * c * p * p, map.device())?;
    Ok(map
        .flatten_all()?
        .index_select(&idx, 0)?
        .reshape((locations.len(), c, p, p))?)
}

/// Shared two-layer embedding head: flatten -> linear -> ReLU -> linear -> L2.
#[derive(Clone)]
pub struct EmbeddingHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub input_dim: usize,
}

impl EmbeddingHead {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ContrastiveConfig) -> Result<Self> {
        let input_dim = 3 * cfg.patch_size * cfg.patch_size;
        Ok(Self {
            fc1: Linear::new(store, &join_name(prefix, "fc1"), input_dim, cfg.hidden_dim)?,
            fc2: Linear::new(store, &join_name(prefix, "fc2"), cfg.hidden_dim, cfg.embed_dim)?,
            input_dim,
        })
    }

    /// (K, 3, p, p) patches -> (K, embed_dim) unit vectors.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        let k = patches.dim(0)?;
        let flat = patches.reshape((k, ()))?;
        let d = flat.dim(1)?;
        if d != self.input_dim {
            return Err(HarmonizeError::Shape(format!(
                "embedding head expects {} inputs per patch, got {d}",
                self.input_dim
            )));
        }
        let hidden = relu(&self.fc1.forward(&flat)?)?;
        l2_normalize_rows(&self.fc2.forward(&hidden)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
pub struct PatchEmbeddings {
    /// (K, embed_dim)
    pub vectors: Tensor,
    pub role: Role,
    pub locations: Vec<(usize, usize)>,
}

/// Normalized mean of a region's embeddings; `DegenerateQuery` when the mean
/// (nearly) cancels out.
pub fn region_query(embeddings: &Tensor) -> Result<Tensor> {
    let mean = embeddings.mean(0)?;
    let norm = mean.sqr()?.sum_all()?.sqrt()?;
    let n = norm.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !n.is_finite() || n < QUERY_NORM_FLOOR {
        return Err(HarmonizeError::DegenerateQuery(n));
    }
    Ok(mean.broadcast_div(&norm)?)
}

fn ensure_finite(t: &Tensor, component: &str) -> Result<()> {
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(HarmonizeError::numeric(component, *bad));
    }
    Ok(())
}

/// `log(sum(exp(x)))` over a 1-D tensor, shifted by its (constant) maximum.
fn logsumexp(x: &Tensor) -> Result<Tensor> {
    let m = x.max(0)?.detach();
    Ok((x.broadcast_sub(&m)?.exp()?.sum(0)?.log()? + m)?)
}

/// `(1/K) sum_i -log(e^{p_i} / (e^{p_i} + sum_k e^{n_k}))` with
/// `p_i = v_bg.P_i / tau` and `n_k = v_fg.N_k / tau`. The denominator holds
/// exactly one positive.
pub fn contrastive_pair_loss(
    v_bg: &Tensor,
    v_fg: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    validate_tau(tau)?;
    for (t, name) in [
        (v_bg, "v_bg"),
        (v_fg, "v_fg"),
        (positives, "positives"),
        (negatives, "negatives"),
    ] {
        ensure_finite(t, name)?;
    }
    let (k, d) = positives.dims2()?;
    if negatives.dims2()?.1 != d || v_bg.dims() != [d] || v_fg.dims() != [d] {
        return Err(HarmonizeError::Shape(format!(
            "pair loss: P {:?}, N {:?}, v_bg {:?}, v_fg {:?}",
            positives.dims(),
            negatives.dims(),
            v_bg.dims(),
            v_fg.dims()
        )));
    }
    if k == 0 || negatives.dim(0)? == 0 {
        return Err(HarmonizeError::Argument("pair loss needs at least one positive and one negative".into()));
    }
    let pos = (positives.matmul(&v_bg.unsqueeze(1)?)?.squeeze(1)? / tau)?;
    let neg = (negatives.matmul(&v_fg.unsqueeze(1)?)?.squeeze(1)? / tau)?;
    // -log(e^p / (e^p + e^lse)) = softplus(lse - p)
    let lse_neg = logsumexp(&neg)?;
    Ok(softplus(&lse_neg.broadcast_sub(&pos)?)?.mean_all()?)
}

/// Reference InfoNCE: `-log(e^{q.k+/tau} / sum_{i=0..K} e^{q.k_i/tau})` with
/// `k_0 = k+`. `k_negs` may have zero rows.
pub fn moco_infonce(q: &Tensor, k_pos: &Tensor, k_negs: &Tensor, tau: f64) -> Result<Tensor> {
    validate_tau(tau)?;
    for (t, name) in [(q, "q"), (k_pos, "k_pos"), (k_negs, "k_negs")] {
        ensure_finite(t, name)?;
    }
    let d = q.dim(0)?;
    if k_pos.dims() != [d] || k_negs.dim(D::Minus1)? != d {
        return Err(HarmonizeError::Shape(format!(
            "InfoNCE: q {:?}, k+ {:?}, negatives {:?}",
            q.dims(),
            k_pos.dims(),
            k_negs.dims()
        )));
    }
    let l_pos = ((q * k_pos)?.sum_all()? / tau)?;
    if k_negs.dim(0)? == 0 {
        return Ok(l_pos.zeros_like()?);
    }
    let l_neg = (k_negs.matmul(&q.unsqueeze(1)?)?.squeeze(1)? / tau)?;
    // lse over [l_pos, l_neg] minus l_pos = softplus(lse(l_neg) - l_pos)
    softplus(&(logsumexp(&l_neg)? - l_pos)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SampleStatus {
    Used,
    EmptyRegion { origin: Origin },
    DegenerateQuery { norm: f64 },
}

/// What happened to one batch item; enough to audit the sampling contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub index: usize,
    pub status: SampleStatus,
    pub map_size: (usize, usize),
    pub fg_locations: Vec<(usize, usize)>,
    pub bg_locations: Vec<(usize, usize)>,
    /// max |norm - 1| over every embedding computed for this item.
    pub max_norm_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutcome {
    /// Mean pair loss over used items; a zero constant when none were used.
    pub loss: Tensor,
    pub used: usize,
    pub skipped: usize,
    pub all_degenerate: bool,
    pub diagnostics: Vec<SampleDiagnostics>,
}

fn region_empty(map: &SamplingMap) -> Result<bool> {
    let max = map.region_mask.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(max < 0.5)
}

fn norm_deviation(e: &Tensor) -> Result<f64> {
    let norms: Vec<f64> = e
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(1)?
        .sqrt()?
        .to_vec1()?;
    Ok(norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max))
}

/// Batch loss. `harmonized`, `target`: (N, 3, H, W); `masks`: (N, 1, H, W).
/// The ground-truth branch is detached; gradients reach the harmonized image
/// and the head. Items whose regions are empty or whose query degenerates are
/// skipped and reported in the diagnostics.
pub fn harmonization_contrastive_loss<R: Rng>(
    harmonized: &Tensor,
    target: &Tensor,
    masks: &Tensor,
    head: &EmbeddingHead,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<ContrastiveOutcome> {
    cfg.validate()?;
    let (n, _, _, _) = harmonized.dims4()?;
    if n == 0 {
        return Err(HarmonizeError::Argument("contrastive loss on an empty batch".into()));
    }
    if target.dims() != harmonized.dims() || masks.dim(0)? != n {
        return Err(HarmonizeError::Shape(format!(
            "harmonized {:?}, target {:?}, masks {:?}",
            harmonized.dims(),
            target.dims(),
            masks.dims()
        )));
    }
    let target = target.detach();
    let masks = masks.detach();
    let mut terms = Vec::new();
    let mut diagnostics = Vec::with_capacity(n);
    for i in 0..n {
        let mask = masks.get(i)?;
        let s_fg = build_sampling_map(&harmonized.get(i)?, &mask, cfg.downsample_factor, Origin::HarmonizedForeground)?;
        let s_bg = build_sampling_map(
            &target.get(i)?,
            &(1.0 - &mask)?,
            cfg.downsample_factor,
            Origin::GroundTruthBackground,
        )?;
        let mut diag = SampleDiagnostics {
            index: i,
            status: SampleStatus::Used,
            map_size: s_fg.size()?,
            fg_locations: Vec::new(),
            bg_locations: Vec::new(),
            max_norm_deviation: 0.0,
        };
        let mut draw = |map: &SamplingMap| match sample_patch_locations(map, cfg.k, cfg.patch_size, rng) {
            Ok(locs) => Ok(Some(locs)),
            Err(HarmonizeError::EmptyRegion(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let (fg, bg) = match (draw(&s_fg)?, draw(&s_bg)?) {
            (Some(f), Some(b)) => (f, b),
            (None, _) | (_, None) => {
                let origin = if region_empty(&s_fg)? {
                    Origin::HarmonizedForeground
                } else {
                    Origin::GroundTruthBackground
                };
                diag.status = SampleStatus::EmptyRegion { origin };
                diagnostics.push(diag);
                continue;
            }
        };
        let negatives = head.embed(&crop_patches(&s_fg.map, &fg, cfg.patch_size)?)?;
        let positives = head.embed(&crop_patches(&s_bg.map, &bg, cfg.patch_size)?)?;
        diag.max_norm_deviation = norm_deviation(&negatives)?.max(norm_deviation(&positives)?);
        diag.fg_locations = fg;
        diag.bg_locations = bg;
        let queries = region_query(&negatives).and_then(|v_fg| Ok((v_fg, region_query(&positives)?)));
        match queries {
            Ok((v_fg, v_bg)) => {
                terms.push(contrastive_pair_loss(&v_bg, &v_fg, &positives, &negatives, cfg.tau)?);
            }
            Err(HarmonizeError::DegenerateQuery(norm)) => {
                diag.status = SampleStatus::DegenerateQuery { norm };
            }
            Err(e) => return Err(e),
        }
        diagnostics.push(diag);
    }
    let used = terms.len();
    let loss = if used == 0 {
        log::warn!("contrastive loss: every item in the batch was degenerate");
        Tensor::zeros((), harmonized.dtype(), harmonized.device())?
    } else {
        (Tensor::stack(&terms, 0)?.sum_all()? / used as f64)?
    };
    Ok(ContrastiveOutcome {
        loss,
        used,
        skipped: n - used,
        all_degenerate: used == 0,
        diagnostics,
    })
}
