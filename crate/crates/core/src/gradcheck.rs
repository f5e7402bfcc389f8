//! Central finite-difference gradient checks for scalar functions of tensors.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// max |analytic - numeric| / max(max |numeric|, max |analytic|, 1e-12)
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }

    /// Componentwise worst of two checks.
    pub fn merge(self, other: Self) -> Self {
        Self {
            rel_error: self.rel_error.max(other.rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            entries: self.entries + other.entries,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

/// Compares d f / d var from backprop against central differences with step
/// `h`. `f` must be a scalar-valued function that reads `var`. When
/// `max_entries` is set, a seeded subset of coordinates is probed.
pub fn check_var<F>(f: F, var: &Var, h: f64, max_entries: Option<usize>, seed: u64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    if var.dtype() != DType::F64 {
        return Err(HarmonizeError::Argument("gradient checks need float64 tensors".into()));
    }
    let loss = f()?;
    let grads = loss.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; var.elem_count()],
    };
    let base = var.as_tensor().copy()?;
    let flat: Vec<f64> = base.flatten_all()?.to_vec1()?;
    let n = flat.len();
    let idx: Vec<usize> = match max_entries {
        Some(m) if m < n => sample(&mut ChaCha8Rng::seed_from_u64(seed), n, m).into_vec(),
        _ => (0..n).collect(),
    };
    let mut probe = flat.clone();
    let mut eval_at = |i: usize, v: f64| -> Result<f64> {
        probe[i] = v;
        var.set(&Tensor::from_vec(probe.clone(), base.dims(), base.device())?)?;
        let out = scalar(&f()?);
        probe[i] = flat[i];
        out
    };
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let plus = eval_at(i, flat[i] + h)?;
        let minus = eval_at(i, flat[i] - h)?;
        numeric.push((plus - minus) / (2.0 * h));
    }
    var.set(&base)?;
    let mut max_abs: f64 = 0.0;
    let mut scale: f64 = 1e-12;
    for (k, &i) in idx.iter().enumerate() {
        max_abs = max_abs.max((analytic[i] - numeric[k]).abs());
        scale = scale.max(analytic[i].abs()).max(numeric[k].abs());
    }
    Ok(GradCheck {
        rel_error: max_abs / scale,
        max_abs_error: max_abs,
        entries: idx.len(),
    })
}

/// Gradient check of `f` with respect to its input at `x`.
pub fn check_fn<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let var = Var::from_tensor(&x.to_dtype(DType::F64)?)?;
    check_var(|| f(var.as_tensor()), &var, h, None, 0)
}
