//! Parameter storage and the handful of layers the network is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so they can be
//! checkpointed and restored by name. Layers hold cheap clones of the
//! underlying [`Var`]s, which share storage with the store.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarmonizeError, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named trainable parameters plus non-trainable buffers (normalization
/// running statistics), initialized from a seeded stream.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<Var> {
        let map = if trainable {
            &mut self.params
        } else {
            &mut self.buffers
        };
        if map.contains_key(name) {
            return Err(HarmonizeError::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        map.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Uniform(-bound, bound) initialization.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.insert(name, t, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.insert(name, t, false)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| HarmonizeError::Checkpoint(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(HarmonizeError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn leaky_relu(xs: &Tensor) -> Result<Tensor> {
    Ok(crate::fused::leaky_relu(xs)?)
}

/// `log(1 + e^x)`, accurate for large |x|.
pub fn softplus(xs: &Tensor) -> Result<Tensor> {
    Ok(crate::fused::softplus(xs)?)
}

/// 2x2, stride-2 max pooling.
pub fn max_pool2(xs: &Tensor) -> Result<Tensor> {
    Ok(crate::fused::max_pool2(xs)?)
}

pub fn sigmoid(xs: &Tensor) -> Result<Tensor> {
    Ok((xs.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn relu(xs: &Tensor) -> Result<Tensor> {
    Ok(xs.relu()?)
}

/// Stride-1 convolution with `padding` and an optional per-channel bias.
pub fn conv2d_s1(xs: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    let k = weight.dim(2)?;
    if padding >= k {
        return Err(HarmonizeError::Argument(format!("padding {padding} >= kernel {k}")));
    }
    let zeros;
    let bias = match bias {
        Some(b) => b,
        None => {
            zeros = Tensor::zeros(weight.dim(0)?, weight.dtype(), weight.device())?;
            &zeros
        }
    };
    Ok(crate::fused::conv2d_s1(xs, weight, bias, padding)?)
}

fn add_channel_bias(xs: &Tensor, bias: &Var) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(xs.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&join_name(prefix, "weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&join_name(prefix, "bias"), &[c_out], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        if self.stride == 1 {
            return conv2d_s1(xs, &self.weight, self.bias.as_ref().map(|b| b.as_tensor()), self.padding);
        }
        let ys = xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => add_channel_bias(&ys, b),
            None => Ok(ys),
        }
    }
}

/// Transposed convolution; weight layout is (c_in, c_out, k, k).
#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_out * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&join_name(prefix, "weight"), &[c_in, c_out, kernel, kernel], bound)?;
        let bias = store.uniform(&join_name(prefix, "bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        if self.stride == 1 {
            // stride-1 transposed conv == conv with the flipped, transposed kernel
            let k = self.weight.dim(2)?;
            let w = self.weight.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
            return conv2d_s1(xs, &w, Some(self.bias.as_tensor()), k - 1 - self.padding);
        }
        let ys = xs.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        add_channel_bias(&ys, &self.bias)
    }
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Self::with_scale(store, prefix, channels, 1.0)
    }

    /// Batch norm whose affine scale starts at `gamma` (0 zeroes a residual branch).
    pub fn with_scale(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        gamma: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&join_name(prefix, "weight"), &[channels], gamma)?,
            bias: store.constant(&join_name(prefix, "bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&join_name(prefix, "running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&join_name(prefix, "running_var"), &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_impl(xs, mode, false)
    }

    /// Batch norm followed by a leaky ReLU, fused into one kernel.
    pub fn forward_act(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_impl(xs, mode, true)
    }

    fn forward_impl(&self, xs: &Tensor, mode: Mode, act: bool) -> Result<Tensor> {
        let (n, _, h, w) = xs.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = crate::fused::channel_moments(xs)?;
                let count = (n * h * w) as f64;
                let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let blend = |old: &Var, new: Vec<f64>| -> Result<()> {
                    let new = Tensor::from_vec(new, old.dims(), old.device())?.to_dtype(old.dtype())?;
                    let t = ((old.as_tensor() * (1.0 - BN_MOMENTUM))? + (new * BN_MOMENTUM)?)?;
                    old.set(&t)?;
                    Ok(())
                };
                blend(&self.running_mean, mean.clone())?;
                blend(&self.running_var, var.iter().map(|v| v * correction).collect())?;
                (mean, var)
            }
            Mode::Eval => {
                let f = |v: &Var| -> Result<Vec<f64>> {
                    Ok(v.as_tensor().to_dtype(DType::F64)?.to_vec1()?)
                };
                (f(&self.running_mean)?, f(&self.running_var)?)
            }
        };
        Ok(crate::fused::batch_norm_act(
            xs,
            self.weight.as_tensor(),
            self.bias.as_tensor(),
            mean,
            &var,
            BN_EPS,
            mode == Mode::Train,
            act,
        )?)
    }
}

/// Conv + BN + LReLU, the basic unit of the architecture table.
#[derive(Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnAct {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                &join_name(prefix, "conv"),
                c_in,
                c_out,
                kernel,
                stride,
                padding,
                true,
            )?,
            bn: BatchNorm2d::new(store, &join_name(prefix, "bn"), c_out)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward_act(&self.conv.forward(xs)?, mode)
    }
}

#[derive(Clone)]
pub struct Linear {
    /// (out, in)
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&join_name(prefix, "weight"), &[d_out, d_in], bound)?,
            bias: store.uniform(&join_name(prefix, "bias"), &[d_out], bound)?,
        })
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&join_name(prefix, "weight"), &[d_out, d_in], 0.0)?,
            bias: store.constant(&join_name(prefix, "bias"), &[d_out], 0.0)?,
        })
    }

    /// xs: (batch, in) -> (batch, out)
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = xs.matmul(&self.weight.t()?)?;
        Ok(ys.broadcast_add(&self.bias.as_tensor().unsqueeze(0)?)?)
    }
}

/// Row-wise L2 normalization of a (rows, dim) matrix.
pub fn l2_normalize_rows(xs: &Tensor) -> Result<Tensor> {
    let norms = xs.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let norms = norms.clamp(1e-12, f64::MAX)?;
    Ok(xs.broadcast_div(&norms)?)
}


