//! Training objective: whole-image L1, foreground-weighted L1 and the
//! contrastive term, combined with fixed weights.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.5,
            lambda3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HarmonizeError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss components of one step. `weights` are the effective weights
/// (zero for a disabled term), so `total` is always their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub l_pixel: f64,
    pub l_hcl: f64,
    pub total: f64,
    pub skipped_contrastive: usize,
    pub weights: LossWeights,
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(HarmonizeError::Shape(format!(
            "harmonized {:?} and target {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every pixel and channel.
pub fn l1_whole(harmonized: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(harmonized, target)?;
    Ok((harmonized - target)?.abs()?.mean_all()?)
}

/// `sum |H - GT| * mask / max(1, sum(mask) * C)`; `mask` (N, 1, H, W) is a
/// constant weighting.
pub fn l_pixel(harmonized: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same(harmonized, target)?;
    let (n, c, h, w) = harmonized.dims4()?;
    if mask.dims() != [n, 1, h, w] {
        return Err(HarmonizeError::Shape(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            harmonized.dims()
        )));
    }
    let mask = mask.detach();
    let weight = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * c as f64;
    let num = (harmonized - target)?.abs()?.broadcast_mul(&mask)?.sum_all()?;
    Ok((num / weight.max(1.0))?)
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HarmonizeError::numeric(component, v))
    }
}

/// Weighted sum of already-evaluated components.
pub fn combine(l1: f64, l_pixel: f64, l_hcl: f64, weights: LossWeights, skipped: usize) -> Result<LossReport> {
    let l1 = finite("l1", l1)?;
    let l_pixel = finite("l_pixel", l_pixel)?;
    let l_hcl = finite("l_hcl", l_hcl)?;
    let total = finite(
        "total",
        weights.lambda1 * l1 + weights.lambda2 * l_pixel + weights.lambda3 * l_hcl,
    )?;
    Ok(LossReport {
        l1,
        l_pixel,
        l_hcl,
        total,
        skipped_contrastive: skipped,
        weights,
    })
}

/// Which terms take part. A term is active when its flag is set and its
/// weight is positive; inactive terms stay out of the graph entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub use_lpixel: bool,
    pub use_lhcl: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            use_lpixel: true,
            use_lhcl: true,
        }
    }
}

impl LossTerms {
    pub fn effective(&self, w: LossWeights) -> LossWeights {
        LossWeights {
            lambda1: w.lambda1,
            lambda2: if self.use_lpixel { w.lambda2 } else { 0.0 },
            lambda3: if self.use_lhcl { w.lambda3 } else { 0.0 },
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Builds the differentiable total and its report. `contrastive` is the
/// already-computed contrastive term and its skipped-item count, or `None`
/// when it was not evaluated.
pub fn total_loss(
    harmonized: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    weights: LossWeights,
    terms: LossTerms,
    contrastive: Option<(&Tensor, usize)>,
) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let eff = terms.effective(weights);
    let l1 = l1_whole(harmonized, target)?;
    let lp = l_pixel(harmonized, target, mask)?;
    let (l1_v, lp_v) = (scalar(&l1)?, scalar(&lp)?);
    let (hcl_v, skipped) = match contrastive {
        Some((t, s)) => (scalar(t)?, s),
        None => (0.0, 0),
    };
    let hcl_v = if eff.lambda3 > 0.0 { hcl_v } else { 0.0 };
    let report = combine(l1_v, lp_v, hcl_v, eff, skipped).map_err(|e| match e {
        HarmonizeError::Numeric { component, value } => HarmonizeError::Numeric {
            component: format!("{component} (l1={l1_v}, l_pixel={lp_v}, l_hcl={hcl_v})"),
            value,
        },
        other => other,
    })?;
    let mut total = (l1 * eff.lambda1)?;
    if eff.lambda2 > 0.0 {
        total = (total + (lp * eff.lambda2)?)?;
    }
    if let (Some((t, _)), true) = (contrastive, eff.lambda3 > 0.0) {
        total = (total + (t * eff.lambda3)?)?;
    }
    Ok((total, report))
}
