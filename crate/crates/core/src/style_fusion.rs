//! External style fusion.
//!
//! Each decoder stage splits its feature map into foreground and background
//! parts with the rescaled mask. The foreground part is standardized with the
//! background statistics of the *encoder* feature at the same stage, the
//! background part with its own (decoder) background statistics. Both parts
//! then go through a learned, input-conditioned scale/shift `psi` and are
//! stitched back together by addition (their supports are disjoint).
//!
//! Statistics use hard region membership (soft mask >= 0.5); the masked
//! products themselves use the soft mask.

use candle_core::Tensor;

use crate::error::{HarmonizeError, Result};
use crate::nn::{join_name, Linear, ParamStore};

pub const STATS_EPS: f64 = 1e-5;
pub const MEMBERSHIP_THRESHOLD: f64 = 0.5;

/// Which reference statistics normalize the foreground branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Foreground standardized with encoder background statistics.
    External,
    /// Swap point for internal-normalization baselines: the foreground uses
    /// the decoder's own background statistics instead.
    DecoderReference,
    /// Layer is the identity.
    Disabled,
}

/// Per-sample, per-channel region statistics. `mean`/`std` are (N, C, 1, 1).
#[derive(Debug, Clone)]
pub struct RegionStats {
    pub mean: Tensor,
    pub std: Tensor,
    pub eps: f64,
    pub pixel_count: Vec<usize>,
}

/// Hard foreground membership (1 where mask >= 0.5) and its complement.
pub fn membership(mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let fg = mask.ge(MEMBERSHIP_THRESHOLD)?.to_dtype(mask.dtype())?;
    let bg = (1.0 - &fg)?;
    Ok((fg, bg))
}

fn counts(member: &Tensor) -> Result<Vec<usize>> {
    let c: Vec<f64> = member
        .to_dtype(candle_core::DType::F64)?
        .sum((1, 2, 3))?
        .to_vec1()?;
    Ok(c.into_iter().map(|v| v.round() as usize).collect())
}

/// Statistics that tolerate empty regions (denominator floored at 1); callers
/// check `pixel_count` to route degenerate samples.
pub(crate) fn masked_stats(feature: &Tensor, member: &Tensor, eps: f64) -> Result<RegionStats> {
    let pixel_count = counts(member)?;
    let denom = member.sum_keepdim((2, 3))?.clamp(1.0, f64::MAX)?;
    let mean = feature
        .broadcast_mul(member)?
        .sum_keepdim((2, 3))?
        .broadcast_div(&denom)?;
    let centered = feature.broadcast_sub(&mean)?.broadcast_mul(member)?;
    let var = centered.sqr()?.sum_keepdim((2, 3))?.broadcast_div(&denom)?;
    // max(eps, sqrt(var)) written as sqrt(max(eps^2, var)) so the gradient stays finite
    let std = var.clamp(eps * eps, f64::MAX)?.sqrt()?;
    Ok(RegionStats {
        mean,
        std,
        eps,
        pixel_count,
    })
}

/// Per-channel mean and population std of `feature` over pixels where
/// `mask >= 0.5`. Fails with `DegenerateRegion` if any sample's region is empty.
pub fn region_stats(feature: &Tensor, mask: &Tensor, eps: f64) -> Result<RegionStats> {
    let (member, _) = membership(mask)?;
    let stats = masked_stats(feature, &member, eps)?;
    if let Some(i) = stats.pixel_count.iter().position(|&c| c == 0) {
        return Err(HarmonizeError::DegenerateRegion(format!(
            "sample {i} has no pixels with mask >= {MEMBERSHIP_THRESHOLD}"
        )));
    }
    Ok(stats)
}

/// `(x - mean) / std` on member pixels; zero elsewhere.
pub fn normalize_phi(feature: &Tensor, stats: &RegionStats, member: &Tensor) -> Result<Tensor> {
    Ok(feature
        .broadcast_sub(&stats.mean)?
        .broadcast_div(&stats.std)?
        .broadcast_mul(member)?)
}

/// Scale and bias heads `f^s`, `f^b` of one fusion layer. Each is a single
/// linear map from the region-pooled feature to per-channel values, zero at
/// initialization.
#[derive(Clone)]
pub struct FusionLayerParams {
    pub scale_head: Linear,
    pub bias_head: Linear,
    pub stage: usize,
}

impl FusionLayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, stage: usize) -> Result<Self> {
        Ok(Self {
            scale_head: Linear::zeros(store, &join_name(prefix, "scale_head"), channels, channels)?,
            bias_head: Linear::zeros(store, &join_name(prefix, "bias_head"), channels, channels)?,
            stage,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale_head.weight.dims()[0]
    }
}

/// `psi(x) = x * (1 + f^s(x)) + f^b(x)` restricted to `member`; the heads see
/// the average of `x` over member pixels.
pub fn fuse_psi(normalized: &Tensor, member: &Tensor, params: &FusionLayerParams) -> Result<Tensor> {
    let (n, c, _, _) = normalized.dims4()?;
    if c != params.channels() {
        return Err(HarmonizeError::Shape(format!(
            "fusion stage {} expects {} channels, got {c}",
            params.stage,
            params.channels()
        )));
    }
    let denom = member.sum_keepdim((2, 3))?.clamp(1.0, f64::MAX)?;
    let pooled = normalized
        .broadcast_mul(member)?
        .sum_keepdim((2, 3))?
        .broadcast_div(&denom)?
        .reshape((n, c))?;
    let scale = params.scale_head.forward(&pooled)?.reshape((n, c, 1, 1))?;
    let bias = params.bias_head.forward(&pooled)?.reshape((n, c, 1, 1))?;
    let out = normalized
        .broadcast_mul(&(scale + 1.0)?)?
        .broadcast_add(&bias)?;
    Ok(out.broadcast_mul(member)?)
}

fn check_pair(d: &Tensor, e: &Tensor, mask: &Tensor) -> Result<()> {
    let (n, _, h, w) = d.dims4()?;
    if d.dims() != e.dims() {
        return Err(HarmonizeError::Shape(format!(
            "decoder {:?} and encoder {:?} features differ",
            d.dims(),
            e.dims()
        )));
    }
    if mask.dims() != [n, 1, h, w] {
        return Err(HarmonizeError::Shape(format!(
            "mask {:?} does not match feature {:?}",
            mask.dims(),
            d.dims()
        )));
    }
    Ok(())
}

fn gate(flags: &[bool], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = flags.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (flags.len(), 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// Full fusion layer. `decoder`, `encoder`: (N, C, h, w); `mask`: (N, 1, h, w)
/// soft foreground mask already rescaled to (h, w).
///
/// Degenerate samples: an empty foreground passes the decoder feature through
/// on the foreground support; an empty background leaves the whole sample
/// unchanged, since the foreground branch has no reference statistics either.
pub fn style_fusion_layer(
    decoder: &Tensor,
    encoder: &Tensor,
    mask: &Tensor,
    params: &FusionLayerParams,
    mode: FusionMode,
) -> Result<Tensor> {
    check_pair(decoder, encoder, mask)?;
    if mode == FusionMode::Disabled {
        return Ok(decoder.clone());
    }
    let (fg_member, bg_member) = membership(mask)?;
    let bg_soft = (1.0 - mask)?;

    let d_fg = decoder.broadcast_mul(mask)?;
    let d_bg = decoder.broadcast_mul(&bg_soft)?;
    let d_stats = masked_stats(&d_bg, &bg_member, STATS_EPS)?;
    let ref_stats = match mode {
        FusionMode::External => {
            let e_bg = encoder.broadcast_mul(&bg_soft)?;
            masked_stats(&e_bg, &bg_member, STATS_EPS)?
        }
        _ => d_stats.clone(),
    };

    let fg_hat = normalize_phi(&d_fg, &ref_stats, &fg_member)?;
    let bg_hat = normalize_phi(&d_bg, &d_stats, &bg_member)?;
    let fg_out = fuse_psi(&fg_hat, &fg_member, params)?;
    let bg_out = fuse_psi(&bg_hat, &bg_member, params)?;

    let fg_counts = counts(&fg_member)?;
    let bg_valid: Vec<bool> = d_stats.pixel_count.iter().map(|&c| c > 0).collect();
    let fg_valid: Vec<bool> = fg_counts
        .iter()
        .zip(&bg_valid)
        .map(|(&c, &bg)| c > 0 && bg)
        .collect();
    if fg_valid.iter().all(|&v| v) && bg_valid.iter().all(|&v| v) {
        return Ok((fg_out + bg_out)?);
    }
    let passthrough_fg = decoder.broadcast_mul(&fg_member)?;
    let passthrough_bg = decoder.broadcast_mul(&bg_member)?;
    let gf = gate(&fg_valid, decoder)?;
    let gb = gate(&bg_valid, decoder)?;
    let fg = (fg_out.broadcast_mul(&gf)? + passthrough_fg.broadcast_mul(&(1.0 - &gf)?)?)?;
    let bg = (bg_out.broadcast_mul(&gb)? + passthrough_bg.broadcast_mul(&(1.0 - &gb)?)?)?;
    Ok((fg + bg)?)
}

/// Mean of a (N, C, h, w) tensor over member pixels, per sample and channel,
/// as plain numbers. Test and diagnostics helper.
pub fn region_channel_moments(x: &Tensor, member: &Tensor) -> Result<Vec<Vec<(f64, f64)>>> {
    let x = x.to_dtype(candle_core::DType::F64)?;
    let m = member.to_dtype(candle_core::DType::F64)?;
    let (n, c, h, w) = x.dims4()?;
    let xv: Vec<f64> = x.flatten_all()?.to_vec1()?;
    let mv: Vec<f64> = m.flatten_all()?.to_vec1()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let ms = &mv[s * hw..(s + 1) * hw];
        let cnt: f64 = ms.iter().sum();
        let mut per = Vec::with_capacity(c);
        for ch in 0..c {
            let xs = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let mean = xs.iter().zip(ms).map(|(a, b)| a * b).sum::<f64>() / cnt;
            let var = xs
                .iter()
                .zip(ms)
                .map(|(a, b)| b * (a - mean).powi(2))
                .sum::<f64>()
                / cnt;
            per.push((mean, var.sqrt()));
        }
        out.push(per);
    }
    Ok(out)
}
