//! The naive encoder-decoder and the adaptive fusion network.
//!
//! Both are described declaratively by [`LayerSpec`] chains and built into
//! [`Stack`]s. The default configurations reproduce the published layer
//! tables exactly; [`EncoderDecoderConfig::scaled`] shrinks channel widths and
//! the number of residual blocks for desk-scale runs.
//!
//! The fusion network encodes the shadow-masked image `[Ĩ, M]` with `φ` and
//! the shadow image `[I, M]` with `ψ`, predicts per-element weights
//! `[W1, W2] = σ(Conv_weight([F̃, F]))`, combines `F̃ ⊛ W1` and `F ⊛ W2`, and
//! decodes the result of `Conv_fusion`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_shadow_masked, BinaryMask, DataError, ImageTensor};
use crate::nn::{
    concat_channels, sigmoid, Conv2d, ConvCache, ConvTranspose2d, Layer, LayerCache, NnError,
    Parameters, ResnetBlock, Stack,
};
use crate::rng::{stream_rng, Stream};

/// Channel-first `(C, H, W)` activation.
pub type FeatureMap = Array3<f64>;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layer(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("variant `{variant}` does not apply to a {model} model")]
    VariantNotApplicable { variant: Variant, model: &'static str },
}

/// One entry of a layer table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    TransposedConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    /// Two `Conv(c, c, 3, 1, 1), ReLU` stages with an identity skip.
    ResnetBlock { channels: usize },
}

impl LayerSpec {
    pub const fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> Self {
        LayerSpec::Conv { in_channels: i, out_channels: o, kernel: k, stride: s, padding: p }
    }

    pub const fn conv_t(i: usize, o: usize, k: usize, s: usize, p: usize) -> Self {
        LayerSpec::TransposedConv { in_channels: i, out_channels: o, kernel: k, stride: s, padding: p }
    }

    /// Input channel requirement, `None` for channel-agnostic activations.
    pub fn in_channels(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { in_channels, .. } | LayerSpec::TransposedConv { in_channels, .. } => {
                Some(in_channels)
            }
            LayerSpec::ResnetBlock { channels } => Some(channels),
            LayerSpec::Relu | LayerSpec::Sigmoid => None,
        }
    }

    pub fn out_channels(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Conv { out_channels, .. } | LayerSpec::TransposedConv { out_channels, .. } => {
                out_channels
            }
            LayerSpec::ResnetBlock { channels } => channels,
            LayerSpec::Relu | LayerSpec::Sigmoid => input,
        }
    }

    /// `k²·in·out + out` per convolution.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. }
            | LayerSpec::TransposedConv { in_channels, out_channels, kernel, .. } => {
                kernel * kernel * in_channels * out_channels + out_channels
            }
            LayerSpec::ResnetBlock { channels } => 2 * (9 * channels * channels + channels),
            LayerSpec::Relu | LayerSpec::Sigmoid => 0,
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let bad = |what: &str| Err(NetworkError::InvalidConfig(format!("{what} in {self:?}")));
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, .. }
            | LayerSpec::TransposedConv { in_channels, out_channels, kernel, stride, .. } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("zero channels");
                }
                if kernel == 0 || stride == 0 {
                    return bad("kernel and stride must be positive");
                }
                Ok(())
            }
            LayerSpec::ResnetBlock { channels: 0 } => bad("zero channels"),
            _ => Ok(()),
        }
    }

    fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Layer {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                Layer::Conv(Conv2d::kaiming(rng, in_channels, out_channels, kernel, stride, padding))
            }
            LayerSpec::TransposedConv { in_channels, out_channels, kernel, stride, padding } => {
                Layer::ConvTranspose(ConvTranspose2d::kaiming(
                    rng,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                ))
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Sigmoid => Layer::Sigmoid,
            LayerSpec::ResnetBlock { channels } => Layer::Resnet(ResnetBlock {
                conv1: Conv2d::kaiming(rng, channels, channels, 3, 1, 1),
                conv2: Conv2d::kaiming(rng, channels, channels, 3, 1, 1),
            }),
        }
    }

    fn as_conv(&self) -> Option<(usize, usize, usize, usize, usize)> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                Some((in_channels, out_channels, kernel, stride, padding))
            }
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                write!(f, "Conv({in_channels}, {out_channels}, {kernel}, {stride}, {padding})")
            }
            LayerSpec::TransposedConv { in_channels, out_channels, kernel, stride, padding } => {
                write!(f, "ConvTran({in_channels}, {out_channels}, {kernel}, {stride}, {padding})")
            }
            LayerSpec::Relu => write!(f, "ReLU"),
            LayerSpec::Sigmoid => write!(f, "Sigmoid"),
            LayerSpec::ResnetBlock { channels } => write!(f, "ResnetBlock({channels})"),
        }
    }
}

/// Checks that channels chain from `input` and returns the final channel count.
fn validate_chain(specs: &[LayerSpec], input: usize, what: &str) -> Result<usize, NetworkError> {
    let mut ch = input;
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if let Some(need) = spec.in_channels() {
            if need != ch {
                return Err(NetworkError::InvalidConfig(format!(
                    "{what} layer {i} ({spec}) expects {need} channels but receives {ch}"
                )));
            }
        }
        ch = spec.out_channels(ch);
    }
    Ok(ch)
}

pub(crate) fn build_stack<R: Rng + ?Sized>(name: &str, specs: &[LayerSpec], rng: &mut R) -> Stack {
    Stack::new(name, specs.iter().map(|s| s.build(rng)).collect())
}

/// What the naive encoder-decoder receives as input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveInput {
    /// `[I, M]`, 4 channels.
    ImageMask,
    /// `[I, Ĩ, M]`, 7 channels.
    ImageMaskedMask,
}

impl NaiveInput {
    pub fn channels(self) -> usize {
        match self {
            NaiveInput::ImageMask => 4,
            NaiveInput::ImageMaskedMask => 7,
        }
    }
}

/// Encoder, residual bottleneck and decoder of the naive network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDecoderConfig {
    pub input: NaiveInput,
    pub encoder: Vec<LayerSpec>,
    pub bottleneck: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
}

impl Default for EncoderDecoderConfig {
    fn default() -> Self {
        Self::scaled(64, 8)
    }
}

impl EncoderDecoderConfig {
    /// Layer table with widths `base, 2·base, 4·base` and `resnet_blocks` residual blocks.
    /// `scaled(64, 8)` is the full-size network.
    pub fn scaled(base: usize, resnet_blocks: usize) -> Self {
        let (c1, c2, c3) = (base, 2 * base, 4 * base);
        Self {
            input: NaiveInput::ImageMask,
            encoder: encoder_specs(4, base),
            bottleneck: vec![LayerSpec::ResnetBlock { channels: c3 }; resnet_blocks],
            decoder: vec![
                LayerSpec::conv_t(c3, c2, 4, 2, 1),
                LayerSpec::Relu,
                LayerSpec::conv_t(c2, c1, 4, 2, 1),
                LayerSpec::Relu,
                LayerSpec::conv(c1, 3, 7, 1, 3),
                LayerSpec::Relu,
            ],
        }
    }

    pub fn with_input(mut self, input: NaiveInput) -> Self {
        if let Some(LayerSpec::Conv { in_channels, .. }) = self.encoder.first_mut() {
            *in_channels = input.channels();
        }
        self.input = input;
        self
    }

    pub fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(&self.bottleneck).chain(&self.decoder)
    }

    pub fn param_count(&self) -> usize {
        self.all_layers().map(LayerSpec::param_count).sum()
    }

    /// Number of convolution layers, counting two per residual block.
    pub fn conv_layer_count(&self) -> usize {
        self.all_layers()
            .map(|s| match s {
                LayerSpec::Conv { .. } | LayerSpec::TransposedConv { .. } => 1,
                LayerSpec::ResnetBlock { .. } => 2,
                _ => 0,
            })
            .sum()
    }

    /// Validates the channel chain and returns the feature width at the bottleneck.
    pub fn validate(&self) -> Result<usize, NetworkError> {
        let feat = validate_chain(&self.encoder, self.input.channels(), "encoder")?;
        let mid = validate_chain(&self.bottleneck, feat, "bottleneck")?;
        let out = validate_chain(&self.decoder, mid, "decoder")?;
        if out != 3 {
            return Err(NetworkError::InvalidConfig(format!("decoder produces {out} channels, not 3")));
        }
        Ok(feat)
    }
}

fn encoder_specs(input: usize, base: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(input, base, 7, 1, 3),
        LayerSpec::Relu,
        LayerSpec::conv(base, 2 * base, 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(2 * base, 4 * base, 4, 2, 1),
        LayerSpec::Relu,
    ]
}

/// How the two weighted feature maps are combined before `Conv_fusion`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionCombine {
    /// Channel concatenation; `Conv_fusion` maps `2C → C`.
    Concat,
    /// Element-wise sum; `Conv_fusion` maps `C → C`.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionBlockSpec {
    pub weight_conv: LayerSpec,
    pub fusion_conv: LayerSpec,
    pub combine: FusionCombine,
    /// When false the weights are skipped and the features go straight into `Conv_fusion`.
    pub adaptive: bool,
    pub use_sigmoid: bool,
    pub use_w1: bool,
    pub use_w2: bool,
}

impl FusionBlockSpec {
    pub fn new(channels: usize, combine: FusionCombine) -> Self {
        let fusion_in = match combine {
            FusionCombine::Concat => 2 * channels,
            FusionCombine::Sum => channels,
        };
        Self {
            weight_conv: LayerSpec::conv(2 * channels, 2 * channels, 3, 1, 1),
            fusion_conv: LayerSpec::conv(fusion_in, channels, 3, 1, 1),
            combine,
            adaptive: true,
            use_sigmoid: true,
            use_w1: true,
            use_w2: true,
        }
    }

    /// Validates against encoder feature width `channels`.
    pub fn validate(&self, channels: usize) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        let Some((wi, wo, ..)) = self.weight_conv.as_conv() else {
            return bad("weight_conv must be a convolution".into());
        };
        let Some((fi, fo, ..)) = self.fusion_conv.as_conv() else {
            return bad("fusion_conv must be a convolution".into());
        };
        if wi != 2 * channels || wo != 2 * channels {
            return bad(format!(
                "weight_conv must map {} to {} channels (W1/W2 half split), got {wi}->{wo}",
                2 * channels,
                2 * channels
            ));
        }
        let expected_in = match self.combine {
            FusionCombine::Concat => 2 * channels,
            FusionCombine::Sum => channels,
        };
        if fi != expected_in || fo != channels {
            return bad(format!(
                "fusion_conv must map {expected_in} to {channels} channels, got {fi}->{fo}"
            ));
        }
        self.weight_conv.validate()?;
        self.fusion_conv.validate()
    }
}

/// Which encoder output is replaced by zeros at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `ψ`, the encoder of the shadow image.
    Shadow,
    /// `φ`, the encoder of the shadow-masked image.
    Inpaint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNetConfig {
    pub encoder_masked: Vec<LayerSpec>,
    pub encoder_shadow: Vec<LayerSpec>,
    pub fusion: FusionBlockSpec,
    pub bottleneck: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    #[serde(default)]
    pub zero_branch: Option<Branch>,
}

impl Default for FusionNetConfig {
    fn default() -> Self {
        Self::scaled(64, 8)
    }
}

impl FusionNetConfig {
    pub fn scaled(base: usize, resnet_blocks: usize) -> Self {
        let naive = EncoderDecoderConfig::scaled(base, resnet_blocks);
        Self {
            encoder_masked: naive.encoder.clone(),
            encoder_shadow: naive.encoder,
            fusion: FusionBlockSpec::new(4 * base, FusionCombine::Concat),
            bottleneck: naive.bottleneck,
            decoder: naive.decoder,
            zero_branch: None,
        }
    }

    pub fn with_combine(mut self, combine: FusionCombine) -> Self {
        let c = self.fusion.weight_conv.as_conv().map(|c| c.0 / 2).unwrap_or(0);
        let spec = FusionBlockSpec::new(c, combine);
        self.fusion.fusion_conv = spec.fusion_conv;
        self.fusion.combine = combine;
        self
    }

    pub fn validate(&self) -> Result<usize, NetworkError> {
        let fm = validate_chain(&self.encoder_masked, 4, "encoder_masked")?;
        let fs = validate_chain(&self.encoder_shadow, 4, "encoder_shadow")?;
        if fm != fs {
            return Err(NetworkError::InvalidConfig(format!(
                "encoders disagree on feature width: {fm} vs {fs}"
            )));
        }
        self.fusion.validate(fm)?;
        let mid = validate_chain(&self.bottleneck, fm, "bottleneck")?;
        let out = validate_chain(&self.decoder, mid, "decoder")?;
        if out != 3 {
            return Err(NetworkError::InvalidConfig(format!("decoder produces {out} channels, not 3")));
        }
        Ok(fm)
    }

    pub fn param_count(&self) -> usize {
        self.encoder_masked
            .iter()
            .chain(&self.encoder_shadow)
            .chain([&self.fusion.weight_conv, &self.fusion.fusion_conv])
            .chain(&self.bottleneck)
            .chain(&self.decoder)
            .map(LayerSpec::param_count)
            .sum()
    }
}

/// Architecture of a restoration network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Naive(EncoderDecoderConfig),
    Fusion(FusionNetConfig),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<usize, NetworkError> {
        match self {
            GeneratorConfig::Naive(c) => c.validate(),
            GeneratorConfig::Fusion(c) => c.validate(),
        }
    }
}

/// Stacks `[image, mask]` (or more planes) into one feature map.
fn with_mask<'a>(planes: &[ArrayView3<'a, f64>], mask: &'a BinaryMask) -> FeatureMap {
    let m = mask.as_array().view().insert_axis(Axis(0));
    let mut views: Vec<ArrayView3<f64>> = planes.to_vec();
    views.push(m);
    ndarray::concatenate(Axis(0), &views).expect("matching spatial dims")
}

fn check_input(image: &ImageTensor, mask: &BinaryMask) -> Result<(), NetworkError> {
    let (h, w) = image.dims();
    if (h, w) != mask.dims() {
        return Err(DataError::DimensionMismatch(format!("image {:?} vs mask {:?}", (h, w), mask.dims()))
            .into());
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(NetworkError::InvalidConfig(format!(
            "input {h}x{w} must be a nonzero multiple of 4"
        )));
    }
    Ok(())
}

/// Runs an encoder on `[image, mask]`.
pub fn forward_encoder(
    encoder: &Stack,
    image: &ImageTensor,
    mask: &BinaryMask,
) -> Result<FeatureMap, NetworkError> {
    check_input(image, mask)?;
    let x = with_mask(&[image.view()], mask);
    Ok(encoder.forward(x.view())?.0)
}

/// `ReLU` output clamped to at most 1; gradient passes where `0 < z < 1`.
fn clamp_unit(z: &Array3<f64>) -> Array3<f64> {
    z.mapv(|v| v.clamp(0.0, 1.0))
}

fn clamp_unit_backward(z: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut d = dy.clone();
    Zip::from(&mut d).and(z).for_each(|g, &v| {
        if v >= 1.0 {
            *g = 0.0;
        }
    });
    d
}

/// Naive encoder-decoder network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub config: EncoderDecoderConfig,
    pub encoder: Stack,
    /// Residual bottleneck followed by the upsampling decoder.
    pub decoder: Stack,
}

impl Parameters for EncoderDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Builds the naive encoder-decoder with Kaiming-initialized weights.
pub fn build_naive_encoder_decoder<R: Rng + ?Sized>(
    config: &EncoderDecoderConfig,
    rng: &mut R,
) -> Result<EncoderDecoder, NetworkError> {
    config.validate()?;
    let encoder = build_stack("encoder", &config.encoder, rng);
    let decoder_specs: Vec<LayerSpec> =
        config.bottleneck.iter().chain(&config.decoder).copied().collect();
    let decoder = build_stack("decoder", &decoder_specs, rng);
    Ok(EncoderDecoder { config: config.clone(), encoder, decoder })
}

#[derive(Debug, Clone)]
pub struct NaiveTrace {
    enc: Vec<LayerCache>,
    dec: Vec<LayerCache>,
    pre_clamp: Array3<f64>,
}

impl EncoderDecoder {
    fn input(&self, image: &ImageTensor, mask: &BinaryMask) -> Result<FeatureMap, NetworkError> {
        check_input(image, mask)?;
        Ok(match self.config.input {
            NaiveInput::ImageMask => with_mask(&[image.view()], mask),
            NaiveInput::ImageMaskedMask => {
                let masked = make_shadow_masked(image, mask)?;
                with_mask(&[image.view(), masked.view()], mask)
            }
        })
    }

    pub fn forward(
        &self,
        image: &ImageTensor,
        mask: &BinaryMask,
    ) -> Result<(Array3<f64>, NaiveTrace), NetworkError> {
        let x = self.input(image, mask)?;
        let (feat, enc) = self.encoder.forward(x.view())?;
        let (z, dec) = self.decoder.forward(feat.view())?;
        let y = clamp_unit(&z);
        Ok((y, NaiveTrace { enc, dec, pre_clamp: z }))
    }

    pub fn backward(&self, trace: &NaiveTrace, dy: &Array3<f64>) -> EncoderDecoder {
        let mut grad = self.zeros_like();
        let dz = clamp_unit_backward(&trace.pre_clamp, dy);
        let dfeat = self.decoder.backward(&trace.dec, dz.view(), Some(&mut grad.decoder));
        self.encoder.backward(&trace.enc, dfeat.view(), Some(&mut grad.encoder));
        grad
    }
}

/// Adaptive fusion block: `Conv_weight`, sigmoid, element-wise weighting and `Conv_fusion`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock {
    pub spec: FusionBlockSpec,
    pub weight_conv: Conv2d,
    pub fusion_conv: Conv2d,
}

impl Parameters for FusionBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.weight_conv.visit("fusion.weight_conv", f);
        self.fusion_conv.visit("fusion.fusion_conv", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.weight_conv.visit_mut("fusion.weight_conv", f);
        self.fusion_conv.visit_mut("fusion.fusion_conv", f);
    }
}

/// Result of a fusion block pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `F̂`, `C` channels.
    pub fused: FeatureMap,
    /// Weights applied to `F̃` (all ones when the block is not adaptive).
    pub w1: FeatureMap,
    /// Weights applied to `F`.
    pub w2: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    a: Array3<f64>,
    b: Array3<f64>,
    weight: Option<ConvCache>,
    w1: Array3<f64>,
    w2: Array3<f64>,
    fusion: ConvCache,
}

impl FusionBlock {
    pub fn build<R: Rng + ?Sized>(spec: &FusionBlockSpec, rng: &mut R) -> Result<Self, NetworkError> {
        let conv = |s: &LayerSpec, rng: &mut R| {
            let (i, o, k, st, p) = s.as_conv().expect("validated");
            Conv2d::kaiming(rng, i, o, k, st, p)
        };
        let channels = spec.weight_conv.as_conv().map(|c| c.0 / 2).ok_or_else(|| {
            NetworkError::InvalidConfig("weight_conv must be a convolution".into())
        })?;
        spec.validate(channels)?;
        Ok(Self {
            spec: spec.clone(),
            weight_conv: conv(&spec.weight_conv, rng),
            fusion_conv: conv(&spec.fusion_conv, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.fusion_conv.out_channels
    }

    pub fn forward(
        &self,
        f_masked: ArrayView3<f64>,
        f_shadow: ArrayView3<f64>,
    ) -> Result<(FusionOutput, FusionCache), NetworkError> {
        let c = self.channels();
        if f_masked.dim() != f_shadow.dim() || f_masked.dim().0 != c {
            return Err(NnError::Shape(format!(
                "fusion block expects two {c}-channel maps, got {:?} and {:?}",
                f_masked.dim(),
                f_shadow.dim()
            ))
            .into());
        }
        let zeros = || Array3::<f64>::zeros(f_masked.dim());
        // A dropped term removes its feature from the block entirely.
        let a = if self.spec.use_w1 { f_masked.to_owned() } else { zeros() };
        let b = if self.spec.use_w2 { f_shadow.to_owned() } else { zeros() };

        let (w1, w2, weight_cache) = if self.spec.adaptive {
            let (z, cache) = self.weight_conv.forward(concat_channels(a.view(), b.view()).view())?;
            let w = if self.spec.use_sigmoid { z.mapv(sigmoid) } else { z };
            let w1 = w.slice(s![..c, .., ..]).to_owned();
            let w2 = w.slice(s![c.., .., ..]).to_owned();
            (w1, w2, Some(cache))
        } else {
            (Array3::ones(a.dim()), Array3::ones(a.dim()), None)
        };
        let t1 = &a * &w1;
        let t2 = &b * &w2;
        let combined = match self.spec.combine {
            FusionCombine::Concat => concat_channels(t1.view(), t2.view()),
            FusionCombine::Sum => &t1 + &t2,
        };
        let (fused, fusion_cache) = self.fusion_conv.forward(combined.view())?;
        Ok((
            FusionOutput { fused, w1: w1.clone(), w2: w2.clone() },
            FusionCache { a, b, weight: weight_cache, w1, w2, fusion: fusion_cache },
        ))
    }

    /// Returns gradients w.r.t. `(f_masked, f_shadow)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &FusionCache,
        d_fused: ArrayView3<f64>,
        grad: &mut FusionBlock,
    ) -> (Array3<f64>, Array3<f64>) {
        let c = self.channels();
        let d_comb = self.fusion_conv.backward(&cache.fusion, d_fused, Some(&mut grad.fusion_conv));
        let (dt1, dt2) = match self.spec.combine {
            FusionCombine::Concat => (
                d_comb.slice(s![..c, .., ..]).to_owned(),
                d_comb.slice(s![c.., .., ..]).to_owned(),
            ),
            FusionCombine::Sum => (d_comb.clone(), d_comb),
        };
        let mut da = &dt1 * &cache.w1;
        let mut db = &dt2 * &cache.w2;
        if let Some(wcache) = &cache.weight {
            let dw1 = &dt1 * &cache.a;
            let dw2 = &dt2 * &cache.b;
            let mut dz = concat_channels(dw1.view(), dw2.view());
            if self.spec.use_sigmoid {
                let w = concat_channels(cache.w1.view(), cache.w2.view());
                Zip::from(&mut dz).and(&w).for_each(|d, &s| *d *= s * (1.0 - s));
            }
            let dcat = self.weight_conv.backward(wcache, dz.view(), Some(&mut grad.weight_conv));
            da += &dcat.slice(s![..c, .., ..]);
            db += &dcat.slice(s![c.., .., ..]);
        }
        if !self.spec.use_w1 {
            da.fill(0.0);
        }
        if !self.spec.use_w2 {
            db.fill(0.0);
        }
        (da, db)
    }
}

/// Runs the fusion block on two encoder outputs.
pub fn forward_fusion_block(
    block: &FusionBlock,
    f_masked: &FeatureMap,
    f_shadow: &FeatureMap,
) -> Result<FusionOutput, NetworkError> {
    Ok(block.forward(f_masked.view(), f_shadow.view())?.0)
}

/// Two-encoder adaptive fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    pub config: FusionNetConfig,
    /// `φ`, fed with `[Ĩ, M]`.
    pub encoder_masked: Stack,
    /// `ψ`, fed with `[I, M]`.
    pub encoder_shadow: Stack,
    pub fusion: FusionBlock,
    pub decoder: Stack,
}

impl Parameters for FusionNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder_masked.visit(f);
        self.encoder_shadow.visit(f);
        self.fusion.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder_masked.visit_mut(f);
        self.encoder_shadow.visit_mut(f);
        self.fusion.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    enc_masked: Vec<LayerCache>,
    enc_shadow: Vec<LayerCache>,
    fusion: FusionCache,
    dec: Vec<LayerCache>,
    pre_clamp: Array3<f64>,
}

/// Intermediate activations of one fusion-network pass.
#[derive(Debug, Clone)]
pub struct FusionActivations {
    /// `F̃` as it enters the fusion block (after any branch zeroing).
    pub f_masked: FeatureMap,
    /// `F` as it enters the fusion block.
    pub f_shadow: FeatureMap,
    pub fusion: FusionOutput,
}

pub fn build_fusion_network<R: Rng + ?Sized>(
    config: &FusionNetConfig,
    rng: &mut R,
) -> Result<FusionNet, NetworkError> {
    config.validate()?;
    let encoder_masked = build_stack("phi", &config.encoder_masked, rng);
    let encoder_shadow = build_stack("psi", &config.encoder_shadow, rng);
    let fusion = FusionBlock::build(&config.fusion, rng)?;
    let decoder_specs: Vec<LayerSpec> =
        config.bottleneck.iter().chain(&config.decoder).copied().collect();
    let decoder = build_stack("decoder", &decoder_specs, rng);
    Ok(FusionNet { config: config.clone(), encoder_masked, encoder_shadow, fusion, decoder })
}

impl FusionNet {
    pub fn forward(
        &self,
        shadow: &ImageTensor,
        mask: &BinaryMask,
    ) -> Result<(Array3<f64>, FusionActivations, FusionTrace), NetworkError> {
        check_input(shadow, mask)?;
        let masked = make_shadow_masked(shadow, mask)?;
        let x_masked = with_mask(&[masked.view()], mask);
        let x_shadow = with_mask(&[shadow.view()], mask);
        let (mut f_masked, enc_masked) = self.encoder_masked.forward(x_masked.view())?;
        let (mut f_shadow, enc_shadow) = self.encoder_shadow.forward(x_shadow.view())?;
        match self.config.zero_branch {
            Some(Branch::Shadow) => f_shadow.fill(0.0),
            Some(Branch::Inpaint) => f_masked.fill(0.0),
            None => {}
        }
        let (fusion_out, fusion) = self.fusion.forward(f_masked.view(), f_shadow.view())?;
        let (z, dec) = self.decoder.forward(fusion_out.fused.view())?;
        let y = clamp_unit(&z);
        Ok((
            y,
            FusionActivations { f_masked, f_shadow, fusion: fusion_out },
            FusionTrace { enc_masked, enc_shadow, fusion, dec, pre_clamp: z },
        ))
    }

    pub fn backward(&self, trace: &FusionTrace, dy: &Array3<f64>) -> FusionNet {
        let mut grad = self.zeros_like();
        let dz = clamp_unit_backward(&trace.pre_clamp, dy);
        let dfused = self.decoder.backward(&trace.dec, dz.view(), Some(&mut grad.decoder));
        let (mut dm, mut ds) = self.fusion.backward(&trace.fusion, dfused.view(), &mut grad.fusion);
        match self.config.zero_branch {
            Some(Branch::Shadow) => ds.fill(0.0),
            Some(Branch::Inpaint) => dm.fill(0.0),
            None => {}
        }
        self.encoder_masked.backward(&trace.enc_masked, dm.view(), Some(&mut grad.encoder_masked));
        self.encoder_shadow.backward(&trace.enc_shadow, ds.view(), Some(&mut grad.encoder_shadow));
        grad
    }
}

/// Either restoration network behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Naive(EncoderDecoder),
    Fusion(FusionNet),
}

#[derive(Debug, Clone)]
pub enum GeneratorTrace {
    Naive(NaiveTrace),
    Fusion(Box<FusionTrace>),
}

/// Output of [`Generator::forward`].
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// Restored image, `(3, H, W)` in `[0, 1]`.
    pub image: Array3<f64>,
    /// Fusion activations, present for fusion networks.
    pub fusion: Option<FusionActivations>,
    pub trace: GeneratorTrace,
}

impl Parameters for Generator {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Generator::Naive(m) => m.visit(f),
            Generator::Fusion(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Generator::Naive(m) => m.visit_mut(f),
            Generator::Fusion(m) => m.visit_mut(f),
        }
    }
}

impl Generator {
    /// Builds a freshly initialized network; weights come from the `Init` stream of `seed`.
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self, NetworkError> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        Ok(match config {
            GeneratorConfig::Naive(c) => Generator::Naive(build_naive_encoder_decoder(c, &mut rng)?),
            GeneratorConfig::Fusion(c) => Generator::Fusion(build_fusion_network(c, &mut rng)?),
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        match self {
            Generator::Naive(m) => GeneratorConfig::Naive(m.config.clone()),
            Generator::Fusion(m) => GeneratorConfig::Fusion(m.config.clone()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Generator::Naive(_) => "naive",
            Generator::Fusion(_) => "fusion",
        }
    }

    pub fn forward(&self, image: &ImageTensor, mask: &BinaryMask) -> Result<GeneratorOutput, NetworkError> {
        Ok(match self {
            Generator::Naive(m) => {
                let (image, trace) = m.forward(image, mask)?;
                GeneratorOutput { image, fusion: None, trace: GeneratorTrace::Naive(trace) }
            }
            Generator::Fusion(m) => {
                let (image, acts, trace) = m.forward(image, mask)?;
                GeneratorOutput {
                    image,
                    fusion: Some(acts),
                    trace: GeneratorTrace::Fusion(Box::new(trace)),
                }
            }
        })
    }

    /// Restored image for `image` with shadow (or hole) mask `mask`.
    pub fn restore(&self, image: &ImageTensor, mask: &BinaryMask) -> Result<ImageTensor, NetworkError> {
        Ok(ImageTensor::from_clamped(self.forward(image, mask)?.image))
    }

    /// Parameter gradients for upstream gradient `dy` on the restored image.
    pub fn backward(&self, trace: &GeneratorTrace, dy: &Array3<f64>) -> Generator {
        match (self, trace) {
            (Generator::Naive(m), GeneratorTrace::Naive(t)) => Generator::Naive(m.backward(t, dy)),
            (Generator::Fusion(m), GeneratorTrace::Fusion(t)) => Generator::Fusion(m.backward(t, dy)),
            _ => panic!("generator/trace kind mismatch"),
        }
    }

    /// Intermediate shapes for an `h×w` input: encoder outputs, then decoder outputs.
    pub fn trace_shapes(&self, h: usize, w: usize) -> Vec<(String, (usize, usize, usize))> {
        let mut out = Vec::new();
        let mut push = |stack: &Stack, shape: (usize, usize, usize)| -> (usize, usize, usize) {
            let shapes = stack.trace_shapes(shape).unwrap_or_default();
            for (i, s) in shapes.iter().enumerate() {
                out.push((format!("{}.{i}", stack.name), *s));
            }
            shapes.last().copied().unwrap_or(shape)
        };
        match self {
            Generator::Naive(m) => {
                let feat = push(&m.encoder, (m.config.input.channels(), h, w));
                push(&m.decoder, feat);
            }
            Generator::Fusion(m) => {
                let feat = push(&m.encoder_masked, (4, h, w));
                push(&m.encoder_shadow, (4, h, w));
                let fused = (m.fusion.channels(), feat.1, feat.2);
                push(&m.decoder, fused);
            }
        }
        out
    }
}

/// Ablations of the fusion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoFusion,
    NoSigmoid,
    NoW1,
    NoW2,
    ConcatInput,
    ZeroShadowBranch,
    ZeroInpaintBranch,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::NoFusion,
        Variant::NoSigmoid,
        Variant::NoW1,
        Variant::NoW2,
        Variant::ConcatInput,
        Variant::ZeroShadowBranch,
        Variant::ZeroInpaintBranch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoFusion => "no_fusion",
            Variant::NoSigmoid => "no_sigmoid",
            Variant::NoW1 => "no_w1",
            Variant::NoW2 => "no_w2",
            Variant::ConcatInput => "concat_input",
            Variant::ZeroShadowBranch => "zero_shadow_branch",
            Variant::ZeroInpaintBranch => "zero_inpaint_branch",
        }
    }

    /// Inference-time interceptions are evaluated without any retraining.
    pub fn requires_training(self) -> bool {
        !matches!(self, Variant::ZeroShadowBranch | Variant::ZeroInpaintBranch)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| NetworkError::UnknownVariant(s.to_string()))
    }
}

/// Derives an ablation of a fusion network.
///
/// Flag variants and branch zeroing keep the base weights. `concat_input` is a
/// different architecture (a single encoder-decoder on `[I, Ĩ, M]`) and is
/// freshly initialized from `seed`.
pub fn make_ablation_variant(
    model: &Generator,
    variant: Variant,
    seed: u64,
) -> Result<Generator, NetworkError> {
    let Generator::Fusion(base) = model else {
        return Err(NetworkError::VariantNotApplicable { variant, model: "naive" });
    };
    let mut net = base.clone();
    let spec = &mut net.fusion.spec;
    match variant {
        Variant::NoFusion => spec.adaptive = false,
        Variant::NoSigmoid => spec.use_sigmoid = false,
        Variant::NoW1 => spec.use_w1 = false,
        Variant::NoW2 => spec.use_w2 = false,
        Variant::ZeroShadowBranch => net.config.zero_branch = Some(Branch::Shadow),
        Variant::ZeroInpaintBranch => net.config.zero_branch = Some(Branch::Inpaint),
        Variant::ConcatInput => {
            let cfg = EncoderDecoderConfig {
                input: NaiveInput::ImageMask,
                encoder: base.config.encoder_shadow.clone(),
                bottleneck: base.config.bottleneck.clone(),
                decoder: base.config.decoder.clone(),
            }
            .with_input(NaiveInput::ImageMaskedMask);
            return Generator::build(&GeneratorConfig::Naive(cfg), seed);
        }
    }
    net.config.fusion = net.fusion.spec.clone();
    Ok(Generator::Fusion(net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, n: usize) -> ImageTensor {
        ImageTensor::from_fn(n, n, |_, _| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn default_table_counts() {
        let cfg = EncoderDecoderConfig::default();
        assert_eq!(cfg.encoder[0], LayerSpec::conv(4, 64, 7, 1, 3));
        assert_eq!(cfg.validate().unwrap(), 256);
        // 3 encoder convs + 16 residual convs + 3 decoder convs.
        assert_eq!(cfg.conv_layer_count(), 22);
        let fusion = FusionNetConfig::default();
        assert_eq!(fusion.fusion.weight_conv, LayerSpec::conv(512, 512, 3, 1, 1));
        assert_eq!(fusion.fusion.fusion_conv, LayerSpec::conv(512, 256, 3, 1, 1));
    }

    #[test]
    fn inconsistent_chain_rejected() {
        let mut cfg = EncoderDecoderConfig::scaled(4, 1);
        cfg.decoder[0] = LayerSpec::conv_t(15, 8, 4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_naive_encoder_decoder(&cfg, &mut rng),
            Err(NetworkError::InvalidConfig(_))
        ));
        let mut f = FusionNetConfig::scaled(4, 1);
        f.fusion.weight_conv = LayerSpec::conv(32, 30, 3, 1, 1);
        assert!(f.validate().is_err());
    }

    #[test]
    fn output_matches_input_dims_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 16);
        let mask = crate::data::sample_irregular_mask(1, 16, 16, (0.1, 0.3)).unwrap();
        for cfg in [
            GeneratorConfig::Naive(EncoderDecoderConfig::scaled(2, 1)),
            GeneratorConfig::Fusion(FusionNetConfig::scaled(2, 1)),
        ] {
            let g = Generator::build(&cfg, 3).unwrap();
            let out = g.forward(&img, &mask).unwrap();
            assert_eq!(out.image.dim(), (3, 16, 16));
            assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = build_stack("e", &encoder_specs(4, 2), &mut rng);
        let f = forward_encoder(&enc, &ImageTensor::filled(8, 8, [0.0; 3]), &BinaryMask::zeros(8, 8))
            .unwrap();
        assert_eq!(f.dim(), (8, 2, 2));
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(matches!("no_such".parse::<Variant>(), Err(NetworkError::UnknownVariant(_))));
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn sum_combine_uses_single_width_fusion_conv() {
        let cfg = FusionNetConfig::scaled(2, 1).with_combine(FusionCombine::Sum);
        assert_eq!(cfg.fusion.fusion_conv, LayerSpec::conv(8, 8, 3, 1, 1));
        let g = Generator::build(&GeneratorConfig::Fusion(cfg), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = g.forward(&rand_image(&mut rng, 8), &BinaryMask::zeros(8, 8)).unwrap();
        assert_eq!(out.image.dim(), (3, 8, 8));
    }
}
