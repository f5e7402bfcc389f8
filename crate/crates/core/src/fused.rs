//! Hand-fused CPU kernels for the hot paths (batch norm with an optional
//! leaky ReLU, a standalone leaky ReLU, softplus, 2x2 max pooling and
//! stride-1 convolution). Each has an analytic backward so the autodiff graph holds
//! one node instead of a dozen.

use candle_core::{
    CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType,
};

use crate::nn::LEAKY_SLOPE;

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op: non-contiguous input".into()))?;
    Ok(&v[a..b])
}

fn leaky<T: WithDType>(v: f64) -> T {
    T::from_f64(if v > 0.0 { v } else { v * LEAKY_SLOPE })
}

struct LeakyRelu;

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "fused-leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous(v, l)?.iter().map(|&x| leaky(x as f64)).collect())
            }
            CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, l)?.iter().map(|&x| leaky(x)).collect()),
            _ => candle_core::bail!("fused-leaky-relu: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // the output has the sign of the input, so it decides the slope
        let slope = res
            .gt(0.0)?
            .to_dtype(res.dtype())?
            .affine(1.0 - LEAKY_SLOPE, LEAKY_SLOPE)?;
        Ok(Some(grad.mul(&slope)?))
    }
}

pub fn leaky_relu(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(LeakyRelu)
}

fn softplus_f64(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without cancellation for large |z|.
struct Softplus;

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "fused-softplus"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous(v, l)?
                    .iter()
                    .map(|&x| softplus_f64(x as f64) as f32)
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, l)?.iter().map(|&x| softplus_f64(x)).collect()),
            _ => candle_core::bail!("fused-softplus: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let z: Vec<f64> = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let sig = Tensor::from_vec(z.into_iter().map(logistic).collect::<Vec<_>>(), arg.shape(), arg.device())?
            .to_dtype(arg.dtype())?;
        Ok(Some(grad.mul(&sig)?))
    }
}

pub fn softplus(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(Softplus)
}

/// Index of the first maximum in each 2x2 window of each (h, w) plane.
fn pool_argmax<T: WithDType>(x: &[T], h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(x.len() / (h * w) * oh * ow);
    for (p, plane) in x.chunks(h * w).enumerate() {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = 2 * i * w + 2 * j;
                for k in [best + 1, best + w, best + w + 1] {
                    if plane[k] > plane[best] {
                        best = k;
                    }
                }
                idx.push(p * h * w + best);
            }
        }
    }
    idx
}

/// 2x2, stride-2 max pooling; the gradient goes to the first maximum of
/// each window.
struct MaxPool2;

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "fused-max-pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(v) => {
                let v = contiguous(v, l)?;
                CpuStorage::F32(pool_argmax(v, h, w).into_iter().map(|i| v[i]).collect())
            }
            CpuStorage::F64(v) => {
                let v = contiguous(v, l)?;
                CpuStorage::F64(pool_argmax(v, h, w).into_iter().map(|i| v[i]).collect())
            }
            _ => candle_core::bail!("fused-max-pool2: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        fn scatter<T: WithDType>(x: &[T], g: &[T], h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::from_f64(0.0); x.len()];
            for (i, gv) in pool_argmax(x, h, w).into_iter().zip(g) {
                out[i] = *gv;
            }
            out
        }
        let flat = arg.flatten_all()?;
        let g = grad.flatten_all()?;
        let out = match arg.dtype() {
            DType::F32 => Tensor::from_vec(scatter(&flat.to_vec1::<f32>()?, &g.to_vec1::<f32>()?, h, w), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(scatter(&flat.to_vec1::<f64>()?, &g.to_vec1::<f64>()?, h, w), arg.shape(), arg.device())?,
            d => candle_core::bail!("fused-max-pool2: unsupported dtype {d:?}"),
        };
        Ok(Some(out))
    }
}

pub fn max_pool2(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(MaxPool2)
}

/// `y = act(gamma * (x - mean) * inv_std + beta)` per channel. `batch_stats`
/// marks mean/inv_std as functions of `x` (training), which adds the
/// statistics terms to the input gradient.
struct BatchNormAct {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    act: bool,
}

impl BatchNormAct {
    fn forward<T: WithDType>(&self, x: &[T], g: &[T], b: &[T], dims: &[usize]) -> Vec<T> {
        let (c, hw) = (dims[1], dims[2] * dims[3]);
        let mut out = Vec::with_capacity(x.len());
        for (i, plane) in x.chunks(hw).enumerate() {
            let ch = i % c;
            let scale = g[ch].to_f64() * self.inv_std[ch];
            let shift = b[ch].to_f64() - self.mean[ch] * scale;
            if self.act {
                out.extend(plane.iter().map(|&v| leaky::<T>(v.to_f64() * scale + shift)));
            } else {
                out.extend(plane.iter().map(|&v| T::from_f64(v.to_f64() * scale + shift)));
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward<T: WithDType>(
        &self,
        x: &[T],
        g: &[T],
        y: &[T],
        dy: &[T],
        dims: &[usize],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let m = (n * hw) as f64;
        let mut dz = Vec::with_capacity(dy.len());
        for (&d, &o) in dy.iter().zip(y) {
            let d = d.to_f64();
            dz.push(if self.act && o.to_f64() <= 0.0 { d * LEAKY_SLOPE } else { d });
        }
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (i, (xp, dp)) in x.chunks(hw).zip(dz.chunks(hw)).enumerate() {
            let ch = i % c;
            let (mu, inv) = (self.mean[ch], self.inv_std[ch]);
            for (&xv, &d) in xp.iter().zip(dp) {
                dbeta[ch] += d;
                dgamma[ch] += d * (xv.to_f64() - mu) * inv;
            }
        }
        let mut dx = Vec::with_capacity(x.len());
        for (i, (xp, dp)) in x.chunks(hw).zip(dz.chunks(hw)).enumerate() {
            let ch = i % c;
            let (mu, inv) = (self.mean[ch], self.inv_std[ch]);
            let k = g[ch].to_f64() * inv;
            if self.batch_stats {
                let (mb, mg) = (dbeta[ch] / m, dgamma[ch] / m);
                dx.extend(
                    xp.iter()
                        .zip(dp)
                        .map(|(&xv, &d)| T::from_f64(k * (d - mb - (xv.to_f64() - mu) * inv * mg))),
                );
            } else {
                dx.extend(dp.iter().map(|&d| T::from_f64(k * d)));
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(dgamma), cast(dbeta))
    }
}

impl CustomOp3 for BatchNormAct {
    fn name(&self) -> &'static str {
        "fused-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(
                self.forward(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, dims),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(
                self.forward(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, dims),
            ),
            _ => candle_core::bail!("fused-batch-norm: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims().to_vec();
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xv = x.flatten_all()?.to_vec1::<$t>()?;
                let gv = gamma.to_vec1::<$t>()?;
                let yv = res.flatten_all()?.to_vec1::<$t>()?;
                let dv = grad.flatten_all()?.to_vec1::<$t>()?;
                let (dx, dg, db) = self.backward(&xv, &gv, &yv, &dv, &dims);
                (
                    Tensor::from_vec(dx, dims.as_slice(), dev)?,
                    Tensor::from_vec(dg, gv.len(), dev)?,
                    Tensor::from_vec(db, gv.len(), dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("fused-batch-norm: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Per-channel mean and biased variance of an (N, C, H, W) tensor.
pub fn channel_moments(xs: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = xs.dims4()?;
    let v = xs.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, plane) in v.chunks(h * w).enumerate() {
        mean[i % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|s| *s /= m);
    for (i, plane) in v.chunks(h * w).enumerate() {
        let mu = mean[i % c];
        sq[i % c] += plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>();
    }
    let var = sq.into_iter().map(|s| s / m).collect();
    Ok((mean, var))
}

/// Fused batch norm (+ optional leaky ReLU). `mean`/`var` are the statistics
/// to normalize with; `batch_stats` says whether they came from `xs` itself.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_act(
    xs: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: Vec<f64>,
    var: &[f64],
    eps: f64,
    batch_stats: bool,
    act: bool,
) -> candle_core::Result<Tensor> {
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let op = BatchNormAct {
        mean,
        inv_std,
        batch_stats,
        act,
    };
    xs.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)
}

/// Unfolds zero-padded planes into (n, ci*k*k, ho*wo) patch columns.
fn im2col<T: WithDType>(x: &[T], xd: [usize; 4], k: usize, p: usize) -> (Vec<T>, usize, usize) {
    let [n, ci, h, w] = xd;
    let (ho, wo) = (h + 2 * p + 1 - k, w + 2 * p + 1 - k);
    if k == 1 && p == 0 {
        return (x.to_vec(), ho, wo);
    }
    let zero = T::zero();
    let mut cols = Vec::with_capacity(n * ci * k * k * ho * wo);
    for src in x.chunks(h * w).take(n * ci) {
        for ky in 0..k {
            for kx in 0..k {
                // output column ox reads input column ox + kx - p
                let left = p.saturating_sub(kx).min(wo);
                let x0 = (kx + left).saturating_sub(p);
                let mid = wo.saturating_sub(left).min(w.saturating_sub(x0));
                let right = wo - left - mid;
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < p || iy - p >= h {
                        cols.extend(std::iter::repeat_n(zero, wo));
                    } else {
                        let row = &src[(iy - p) * w..(iy - p + 1) * w];
                        cols.extend(std::iter::repeat_n(zero, left));
                        cols.extend_from_slice(&row[x0..x0 + mid]);
                        cols.extend(std::iter::repeat_n(zero, right));
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Stride-1 cross-correlation. x: (n, ci, h, w), weight: (co, ci, k, k).
fn conv_fwd<T: WithDType>(
    x: &[T],
    xd: [usize; 4],
    wt: &[T],
    co: usize,
    k: usize,
    p: usize,
) -> candle_core::Result<(Vec<T>, [usize; 4])> {
    let [n, ci, _, _] = xd;
    let dev = candle_core::Device::Cpu;
    let (cols, ho, wo) = im2col(x, xd, k, p);
    let cols = Tensor::from_vec(cols, (n, ci * k * k, ho * wo), &dev)?;
    let w = Tensor::from_slice(wt, (1, co, ci * k * k), &dev)?;
    let out = w.broadcast_matmul(&cols)?.flatten_all()?.to_vec1::<T>()?;
    Ok((out, [n, co, ho, wo]))
}

/// Weight gradient of `conv_fwd`: (co, ci, k, k).
fn conv_grad_w<T: WithDType>(
    x: &[T],
    xd: [usize; 4],
    g: &Tensor,
    co: usize,
    k: usize,
    p: usize,
) -> candle_core::Result<Tensor> {
    let [n, ci, _, _] = xd;
    let (cols, ho, wo) = im2col(x, xd, k, p);
    let cols = Tensor::from_vec(cols, (n, ci * k * k, ho * wo), g.device())?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((ci * k * k, n * ho * wo))?;
    let g = g
        .reshape((n, co, ho * wo))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((co, n * ho * wo))?;
    g.matmul(&cols.t()?)?.reshape((co, ci, k, k))
}

/// (co, ci, k, k) -> (ci, co, k, k) with both spatial axes reversed.
fn flip_transpose<T: WithDType>(wt: &[T], co: usize, ci: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    out[((c * co + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        wt[((o * ci + c) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

/// Stride-1 2-D convolution with zero padding `padding < k` and a
/// per-output-channel bias.
struct Conv2dStride1 {
    padding: usize,
}

fn dims4(s: &Shape) -> candle_core::Result<[usize; 4]> {
    let (a, b, c, d) = s.dims4()?;
    Ok([a, b, c, d])
}

fn conv_bias_fwd<T: WithDType>(
    x: &[T],
    xd: [usize; 4],
    wt: &[T],
    bias: &[T],
    k: usize,
    p: usize,
) -> candle_core::Result<(Vec<T>, [usize; 4])> {
    let co = bias.len();
    let (mut out, od) = conv_fwd(x, xd, wt, co, k, p)?;
    let hw = od[2] * od[3];
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        let b = bias[i % co];
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok((out, od))
}

impl CustomOp3 for Conv2dStride1 {
    fn name(&self) -> &'static str {
        "conv2d-stride1"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xd = dims4(l1.shape())?;
        let [co, ci, k, _] = dims4(l2.shape())?;
        if ci != xd[1] || l3.shape().elem_count() != co {
            candle_core::bail!(
                "conv2d-stride1: input {:?}, kernel {:?}, bias {:?}",
                l1.shape(),
                l2.shape(),
                l3.shape()
            );
        }
        let p = self.padding;
        let (out, od) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                let (x, w, b) = (contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?);
                let (o, d) = conv_bias_fwd(x, xd, w, b, k, p)?;
                (CpuStorage::F32(o), d)
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                let (x, w, b) = (contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?);
                let (o, d) = conv_bias_fwd(x, xd, w, b, k, p)?;
                (CpuStorage::F64(o), d)
            }
            _ => candle_core::bail!("conv2d-stride1: unsupported dtype"),
        };
        Ok((out, Shape::from(od.to_vec())))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xd = dims4(x.shape())?;
        let [co, ci, k, _] = dims4(w.shape())?;
        let gd = dims4(grad.shape())?;
        let dev = x.device();
        let p = self.padding;
        let grad = grad.contiguous()?;
        macro_rules! run {
            ($t:ty) => {{
                let xv = x.flatten_all()?.to_vec1::<$t>()?;
                let wv = w.flatten_all()?.to_vec1::<$t>()?;
                let gv = grad.flatten_all()?.to_vec1::<$t>()?;
                let wf = flip_transpose(&wv, co, ci, k);
                let (gx, gxd) = conv_fwd(&gv, gd, &wf, ci, k, k - 1 - p)?;
                debug_assert_eq!(gxd, xd);
                let gw = conv_grad_w(&xv, xd, &grad, co, k, p)?;
                let mut gb = vec![0f64; co];
                for (i, plane) in gv.chunks(gd[2] * gd[3]).enumerate() {
                    gb[i % co] += plane.iter().map(|&v| v as f64).sum::<f64>();
                }
                let gb: Vec<$t> = gb.into_iter().map(|v| v as $t).collect();
                (
                    Tensor::from_vec(gx, gxd.to_vec(), dev)?,
                    gw,
                    Tensor::from_vec(gb, co, dev)?,
                )
            }};
        }
        let (gx, gw, gb) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("conv2d-stride1: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Stride-1 convolution plus per-channel bias, differentiable in all three.
pub fn conv2d_s1(xs: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        Conv2dStride1 { padding },
    )
}
