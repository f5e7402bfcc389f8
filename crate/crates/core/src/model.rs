//! The harmonization network: a ResUNet encoder, a bottleneck interlayer and
//! a mirrored decoder whose stages fuse skip features through an attention
//! gate and external background style statistics.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarmonizeError, Result};
use crate::nn::{
    join_name, max_pool2, relu, sigmoid, BatchNorm2d, Conv2d, ConvBnAct, ConvTranspose2d, Linear,
    Mode, ParamStore,
};
use crate::resample::{rescale_mask, upsample2x};
use crate::style_fusion::{style_fusion_layer, FusionLayerParams, FusionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// RGB + mask.
    pub in_channels: usize,
    pub base_width: usize,
    pub stages: usize,
    pub interlayer_width: usize,
    pub image_size: usize,
    pub blend_background_at_inference: bool,
    pub fusion: FusionMode,
    /// Adds the residual refinement branch inside each skip-attention block.
    pub s2am_refine: bool,
}

impl NetworkConfig {
    pub fn full() -> Self {
        Self {
            in_channels: 4,
            base_width: 32,
            stages: 4,
            interlayer_width: 512,
            image_size: 256,
            blend_background_at_inference: false,
            fusion: FusionMode::External,
            s2am_refine: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            in_channels: 4,
            base_width: 8,
            stages: 4,
            interlayer_width: 128,
            image_size: 64,
            blend_background_at_inference: false,
            fusion: FusionMode::External,
            s2am_refine: false,
        }
    }

    pub fn new(
        in_channels: usize,
        base_width: usize,
        stages: usize,
        interlayer_width: usize,
        image_size: usize,
    ) -> Self {
        Self {
            in_channels,
            base_width,
            stages,
            interlayer_width,
            image_size,
            blend_background_at_inference: false,
            fusion: FusionMode::External,
            s2am_refine: false,
        }
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 4 {
            return Err(HarmonizeError::Config(format!(
                "in_channels must be 4 (RGB + mask), got {}",
                self.in_channels
            )));
        }
        if self.base_width == 0 || self.stages == 0 {
            return Err(HarmonizeError::Config("base_width and stages must be positive".into()));
        }
        let expected = self.base_width << self.stages;
        if self.interlayer_width != expected {
            return Err(HarmonizeError::Config(format!(
                "interlayer_width must be base_width * 2^stages = {expected}, got {}",
                self.interlayer_width
            )));
        }
        let div = 1usize << self.stages;
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return Err(HarmonizeError::Config(format!(
                "image_size {} is not divisible by 2^stages = {div}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// The layer table with each layer's output spatial size.
    pub fn layer_table(&self) -> Vec<LayerRow> {
        use LayerKind::*;
        let mut rows = Vec::new();
        let mut size = self.image_size;
        let mut c_prev = self.in_channels;
        for i in 0..self.stages {
            let c = self.stage_width(i);
            let section = Section::Encoder(i);
            rows.push(LayerRow::new(section, LayerSpec::new(Conv, c_prev, c, 3, 1, 1), size));
            rows.push(LayerRow::new(section, LayerSpec::new(ResUnetBlock, c, c, 3, 1, 1), size));
            size /= 2;
            rows.push(LayerRow::new(section, LayerSpec::new(MaxPool, c, c, 2, 2, 0), size));
            c_prev = c;
        }
        let ci = self.interlayer_width;
        rows.push(LayerRow::new(Section::Interlayer, LayerSpec::new(Conv, c_prev, ci, 3, 1, 1), size));
        rows.push(LayerRow::new(
            Section::Interlayer,
            LayerSpec::new(ResUnetBlock, ci, ci, 3, 1, 1),
            size,
        ));
        c_prev = ci;
        for (j, i) in (0..self.stages).rev().enumerate() {
            let c = self.stage_width(i);
            let section = Section::Decoder(j);
            rows.push(LayerRow::new(section, LayerSpec::new(TransposedConv, c_prev, c, 3, 1, 1), size));
            size *= 2;
            rows.push(LayerRow::new(section, LayerSpec::new(Upsample, c, c, 2, 2, 0), size));
            rows.push(LayerRow::new(section, LayerSpec::new(Conv, c, c, 3, 1, 1), size));
            rows.push(LayerRow::new(section, LayerSpec::new(S2am, 2 * c, c, 1, 1, 0), size));
            rows.push(LayerRow::new(section, LayerSpec::new(StyleFusion, c, c, 0, 0, 0), size));
            rows.push(LayerRow::new(section, LayerSpec::new(ResUnetBlock, c, c, 3, 1, 1), size));
            c_prev = c;
        }
        rows.push(LayerRow::new(Section::Output, LayerSpec::new(OutputConv, c_prev, 3, 3, 1, 1), size));
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ResUnetBlock,
    MaxPool,
    TransposedConv,
    Upsample,
    S2am,
    StyleFusion,
    OutputConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Encoder(usize),
    Interlayer,
    Decoder(usize),
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub section: Section,
    pub spec: LayerSpec,
    pub output_size: usize,
}

impl LayerRow {
    fn new(section: Section, spec: LayerSpec, output_size: usize) -> Self {
        Self {
            section,
            spec,
            output_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Encoder,
    Decoder,
}

/// Per-stage feature maps. Encoder pyramids are stored deepest-first so that
/// index `i` lines up with decoder stage `i`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub layers: Vec<Tensor>,
    pub orientation: Orientation,
}

impl FeaturePyramid {
    /// (channels, height, width) per layer, batch dimension dropped.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|t| {
                let d = t.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }
}

/// One entry of a forward shape trace: a layer label and its output dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub label: String,
    pub dims: Vec<usize>,
}

fn record(trace: &mut Vec<TraceEntry>, label: impl Into<String>, t: &Tensor) {
    trace.push(TraceEntry {
        label: label.into(),
        dims: t.dims().to_vec(),
    });
}

/// Three stacked conv+BN+LReLU layers with an identity shortcut.
#[derive(Clone)]
pub struct ResUnetBlock {
    pub layers: [ConvBnAct; 3],
}

impl ResUnetBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let mk = |store: &mut ParamStore, i: usize| {
            ConvBnAct::new(store, &join_name(prefix, &i.to_string()), channels, channels, 3, 1, 1)
        };
        Ok(Self {
            layers: [mk(store, 0)?, mk(store, 1)?, mk(store, 2)?],
        })
    }

    pub fn channels(&self) -> usize {
        self.layers[0].conv.c_in()
    }

    pub fn forward(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = xs.dim(1)?;
        if c != self.channels() {
            return Err(HarmonizeError::Shape(format!(
                "ResUNet block expects {} channels, got {c}",
                self.channels()
            )));
        }
        let mut h = xs.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok((xs + h)?)
    }
}

/// Skip-attention block at each decoder stage: concatenated skip and decoder
/// features go through a channel-attention gate and a residual refinement
/// branch before a 1x1 projection back to the stage width.
///
/// The optional refinement branch (3x3 conv 2c->4c, BN, LReLU, 3x3 conv
/// 4c->2c, BN) starts at zero because its last BN scale is initialized to 0.
#[derive(Clone)]
pub struct S2am {
    pub gate_fc1: Linear,
    pub gate_fc2: Linear,
    pub refine: Option<Refine>,
    pub proj: Conv2d,
}

#[derive(Clone)]
pub struct Refine {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl Refine {
    fn new(store: &mut ParamStore, prefix: &str, wide: usize) -> Result<Self> {
        let p = |n: &str| join_name(prefix, n);
        Ok(Self {
            conv1: Conv2d::new(store, &p("conv1"), wide, 2 * wide, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(store, &p("bn1"), 2 * wide)?,
            conv2: Conv2d::new(store, &p("conv2"), 2 * wide, wide, 3, 1, 1, false)?,
            bn2: BatchNorm2d::with_scale(store, &p("bn2"), wide, 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let r = self.bn1.forward_act(&self.conv1.forward(x)?, mode)?;
        self.bn2.forward(&self.conv2.forward(&r)?, mode)
    }
}

impl S2am {
    /// `channels` is the stage width c; the block input has 2c channels.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, refine: bool) -> Result<Self> {
        let wide = 2 * channels;
        let hidden = (wide / 8).max(2);
        let p = |n: &str| join_name(prefix, n);
        Ok(Self {
            gate_fc1: Linear::new(store, &p("gate_fc1"), wide, hidden)?,
            gate_fc2: Linear::new(store, &p("gate_fc2"), hidden, wide)?,
            refine: if refine {
                Some(Refine::new(store, &p("refine"), wide)?)
            } else {
                None
            },
            proj: Conv2d::new(store, &p("proj"), wide, channels, 1, 1, 0, true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.c_out()
    }

    pub fn concat(skip: &Tensor, dec: &Tensor) -> Result<Tensor> {
        if skip.dims() != dec.dims() {
            return Err(HarmonizeError::Shape(format!(
                "skip {:?} and decoder {:?} features differ",
                skip.dims(),
                dec.dims()
            )));
        }
        Ok(Tensor::cat(&[skip, dec], 1)?)
    }

    /// Per-channel sigmoid weights (N, 2c, 1, 1) from the pooled input.
    pub fn channel_gate(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c2, _, _) = x.dims4()?;
        let pooled = x.mean((2, 3))?;
        let h = relu(&self.gate_fc1.forward(&pooled)?)?;
        let g = sigmoid(&self.gate_fc2.forward(&h)?)?;
        Ok(g.reshape((n, c2, 1, 1))?)
    }

    /// Applies a given gate to the concatenated input, then refinement and projection.
    pub fn apply(&self, x: &Tensor, gate: &Tensor, mode: Mode) -> Result<Tensor> {
        let gated = x.broadcast_mul(gate)?;
        match &self.refine {
            Some(r) => self.proj.forward(&(r.forward(&gated, mode)? + gated)?),
            None => self.proj.forward(&gated),
        }
    }

    pub fn forward(&self, skip: &Tensor, dec: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        if dec.dim(1)? != c {
            return Err(HarmonizeError::Shape(format!(
                "attention block expects {c}-channel inputs, got {}",
                dec.dim(1)?
            )));
        }
        let x = Self::concat(skip, dec)?;
        let g = self.channel_gate(&x)?;
        self.apply(&x, &g, mode)
    }
}

#[derive(Clone)]
struct EncoderStage {
    conv: ConvBnAct,
    block: ResUnetBlock,
}

impl EncoderStage {
    fn forward(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        self.block.forward(&self.conv.forward(xs, mode)?, mode)
    }
}

#[derive(Clone)]
struct DecoderStage {
    up: ConvTranspose2d,
    conv: ConvBnAct,
    s2am: S2am,
    fusion: FusionLayerParams,
    block: ResUnetBlock,
}

pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    encoder: Vec<EncoderStage>,
    interlayer: EncoderStage,
    decoder: Vec<DecoderStage>,
    output: Conv2d,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let mut encoder = Vec::with_capacity(config.stages);
        let mut c_prev = config.in_channels;
        for i in 0..config.stages {
            let c = config.stage_width(i);
            let p = format!("enc.{i}");
            encoder.push(EncoderStage {
                conv: ConvBnAct::new(&mut store, &format!("{p}.conv"), c_prev, c, 3, 1, 1)?,
                block: ResUnetBlock::new(&mut store, &format!("{p}.block"), c)?,
            });
            c_prev = c;
        }
        let ci = config.interlayer_width;
        let interlayer = EncoderStage {
            conv: ConvBnAct::new(&mut store, "inter.conv", c_prev, ci, 3, 1, 1)?,
            block: ResUnetBlock::new(&mut store, "inter.block", ci)?,
        };
        c_prev = ci;
        let mut decoder = Vec::with_capacity(config.stages);
        for (j, i) in (0..config.stages).rev().enumerate() {
            let c = config.stage_width(i);
            let p = format!("dec.{j}");
            decoder.push(DecoderStage {
                up: ConvTranspose2d::new(&mut store, &format!("{p}.up"), c_prev, c, 3, 1, 1)?,
                conv: ConvBnAct::new(&mut store, &format!("{p}.conv"), c, c, 3, 1, 1)?,
                s2am: S2am::new(&mut store, &format!("{p}.s2am"), c, config.s2am_refine)?,
                fusion: FusionLayerParams::new(&mut store, &format!("{p}.fusion"), c, j)?,
                block: ResUnetBlock::new(&mut store, &format!("{p}.block"), c)?,
            });
            c_prev = c;
        }
        let output = Conv2d::new(&mut store, "out", c_prev, 3, 3, 1, 1, true)?;
        Ok(Self {
            config,
            store,
            encoder,
            interlayer,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn set_fusion_mode(&mut self, mode: FusionMode) {
        self.config.fusion = mode;
    }

    fn check_inputs(&self, composite: &Tensor, mask: &Tensor) -> Result<()> {
        let (n, c, h, w) = composite.dims4()?;
        if c != 3 {
            return Err(HarmonizeError::Shape(format!("composite must have 3 channels, got {c}")));
        }
        if h != w {
            return Err(HarmonizeError::Shape(format!("composite must be square, got {h}x{w}")));
        }
        if mask.dims() != [n, 1, h, w] {
            return Err(HarmonizeError::Shape(format!(
                "mask {:?} does not match composite {:?}",
                mask.dims(),
                composite.dims()
            )));
        }
        let div = 1usize << self.config.stages;
        if h % div != 0 {
            return Err(HarmonizeError::Shape(format!(
                "input size {h} not divisible by 2^stages = {div}"
            )));
        }
        Ok(())
    }

    fn encode_traced(
        &self,
        composite: &Tensor,
        mask: &Tensor,
        mode: Mode,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<(FeaturePyramid, Tensor)> {
        self.check_inputs(composite, mask)?;
        let dt = self.dtype();
        let mut x = Tensor::cat(&[&composite.to_dtype(dt)?, &mask.to_dtype(dt)?], 1)?;
        let mut skips = Vec::with_capacity(self.config.stages);
        for (i, stage) in self.encoder.iter().enumerate() {
            let f = stage.forward(&x, mode)?;
            record(trace, format!("enc{i}"), &f);
            x = max_pool2(&f)?;
            record(trace, format!("enc{i}.pool"), &x);
            skips.push(f);
        }
        let bottleneck = self.interlayer.forward(&x, mode)?;
        record(trace, "inter", &bottleneck);
        skips.reverse();
        Ok((
            FeaturePyramid {
                layers: skips,
                orientation: Orientation::Encoder,
            },
            bottleneck,
        ))
    }

    fn decode_traced(
        &self,
        bottleneck: &Tensor,
        pyramid: &FeaturePyramid,
        mask: &Tensor,
        mode: Mode,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<(Tensor, FeaturePyramid)> {
        if pyramid.layers.len() != self.decoder.len() || pyramid.orientation != Orientation::Encoder {
            return Err(HarmonizeError::Shape(format!(
                "expected an encoder pyramid with {} layers, got {} ({:?})",
                self.decoder.len(),
                pyramid.layers.len(),
                pyramid.orientation
            )));
        }
        let mask = mask.to_dtype(self.dtype())?;
        let mut x = bottleneck.clone();
        let mut dec_layers = Vec::with_capacity(self.decoder.len());
        for (i, (stage, skip)) in self.decoder.iter().zip(&pyramid.layers).enumerate() {
            x = stage.up.forward(&x)?;
            x = upsample2x(&x)?;
            record(trace, format!("dec{i}.up"), &x);
            x = stage.conv.forward(&x, mode)?;
            if x.dims() != skip.dims() {
                return Err(HarmonizeError::Shape(format!(
                    "decoder stage {i} produced {:?} but encoder skip is {:?}",
                    x.dims(),
                    skip.dims()
                )));
            }
            dec_layers.push(x.clone());
            x = stage.s2am.forward(skip, &x, mode)?;
            record(trace, format!("dec{i}.s2am"), &x);
            let (_, _, h, w) = x.dims4()?;
            let m = rescale_mask(&mask, (h, w))?;
            x = style_fusion_layer(&x, skip, &m, &stage.fusion, self.config.fusion)?;
            record(trace, format!("dec{i}.fusion"), &x);
            x = stage.block.forward(&x, mode)?;
            record(trace, format!("dec{i}"), &x);
        }
        let out = sigmoid(&self.output.forward(&x)?)?;
        record(trace, "out", &out);
        Ok((
            out,
            FeaturePyramid {
                layers: dec_layers,
                orientation: Orientation::Decoder,
            },
        ))
    }

    /// Encoder features per stage (pre-pooling, deepest first) and the bottleneck.
    pub fn encode(&self, composite: &Tensor, mask: &Tensor, mode: Mode) -> Result<(FeaturePyramid, Tensor)> {
        self.encode_traced(composite, mask, mode, &mut Vec::new())
    }

    /// Decodes to an image in [0, 1]. In eval mode with blending enabled the
    /// background is copied from `composite`.
    pub fn decode(
        &self,
        bottleneck: &Tensor,
        pyramid: &FeaturePyramid,
        mask: &Tensor,
        composite: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let (out, _) = self.decode_traced(bottleneck, pyramid, mask, mode, &mut Vec::new())?;
        self.finish(out, composite, mask, mode)
    }

    fn finish(&self, out: Tensor, composite: &Tensor, mask: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval && self.config.blend_background_at_inference {
            blend(&out, composite, mask)
        } else {
            Ok(out)
        }
    }

    pub fn forward(&self, composite: &Tensor, mask: &Tensor, mode: Mode) -> Result<Tensor> {
        let (pyr, b) = self.encode(composite, mask, mode)?;
        self.decode(&b, &pyr, mask, composite, mode)
    }

    /// Forward pass that also returns both pyramids and the per-layer output shapes.
    pub fn forward_traced(
        &self,
        composite: &Tensor,
        mask: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, FeaturePyramid, FeaturePyramid, Vec<TraceEntry>)> {
        let mut trace = Vec::new();
        let (enc, b) = self.encode_traced(composite, mask, mode, &mut trace)?;
        let (out, dec) = self.decode_traced(&b, &enc, mask, mode, &mut trace)?;
        let out = self.finish(out, composite, mask, mode)?;
        Ok((out, enc, dec, trace))
    }
}

/// `out * mask + composite * (1 - mask)`.
pub fn blend(out: &Tensor, composite: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let dt = out.dtype();
    let mask = mask.to_dtype(dt)?;
    let comp = composite.to_dtype(dt)?;
    Ok((out.broadcast_mul(&mask)? + comp.broadcast_mul(&(1.0 - &mask)?)?)?)
}
