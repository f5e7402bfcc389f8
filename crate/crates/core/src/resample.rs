//! Spatial resampling used inside the network and for masks.

use candle_core::{Tensor, D};

use crate::error::{HarmonizeError, Result};

/// Row-interpolation matrix (out x input) for half-pixel-centred bilinear
/// resizing with edge clamping.
pub fn bilinear_matrix(input: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// Bilinear resize of an (N, C, H, W) tensor, differentiable through the
/// two interpolation matmuls.
pub fn bilinear_resize(xs: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    let dev = xs.device();
    let dt = xs.dtype();
    let aw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dt)?;
    let ah = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    // (N,C,H,W) x (W,out_w) -> (N,C,H,out_w)
    let ys = xs.broadcast_matmul(&aw.t()?)?;
    // transpose to put H last, interpolate it, transpose back
    let ys = ys.transpose(D::Minus1, D::Minus2)?.contiguous()?;
    let ys = ys.broadcast_matmul(&ah.t()?)?;
    Ok(ys.transpose(D::Minus1, D::Minus2)?.contiguous()?)
}

pub fn upsample2x(xs: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    bilinear_resize(xs, 2 * h, 2 * w)
}

/// Area (box-average) interpolation of a single plane, `src` row-major h x w.
/// Matches adaptive average pooling: each output cell averages the input
/// cells its footprint touches.
pub fn area_resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let y0 = oy * h / out_h;
        let y1 = ((oy + 1) * h).div_ceil(out_h);
        for ox in 0..out_w {
            let x0 = ox * w / out_w;
            let x1 = ((ox + 1) * w).div_ceil(out_w);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += src[y * w + x];
                }
            }
            out[oy * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Area-interpolates an (N, 1, H, W) or (1, H, W) soft mask to (h, w).
/// Masks are treated as constants, so this runs outside the autodiff graph.
pub fn rescale_mask(mask: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(HarmonizeError::Argument("zero target size for mask rescale".into()));
    }
    let squeeze = mask.rank() == 3;
    let m4 = if squeeze { mask.unsqueeze(0)? } else { mask.clone() };
    let (n, c, h, w) = m4.dims4()?;
    if c != 1 {
        return Err(HarmonizeError::Shape(format!("mask must have 1 channel, got {c}")));
    }
    if th > h || tw > w {
        return Err(HarmonizeError::Argument(format!(
            "mask rescale target {th}x{tw} exceeds source {h}x{w}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(mask.detach());
    }
    let data: Vec<f64> = m4.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(n * th * tw);
    for plane in data.chunks(h * w) {
        out.extend(area_resize_plane(plane, h, w, th, tw));
    }
    let t = Tensor::from_vec(out, (n, 1, th, tw), mask.device())?.to_dtype(mask.dtype())?;
    Ok(if squeeze { t.squeeze(0)? } else { t })
}
