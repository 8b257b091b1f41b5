//! Minimal inference engine for VGG-19-shaped convolutional networks.
//!
//! Weights come from the little-endian "VGWC" container:
//!
//! ```text
//! "VGWC" | u32 version=1 | u8 input_channels
//!        | input_channels × (f32 mean, f32 std)
//!        | u32 layer_count
//!        | layer_count × ( u16 name_len | name (UTF-8) | u8 kind
//!                         | [kind ∈ {conv, fc}: u32 out, u32 in, u32 kh, u32 kw,
//!                            out·in·kh·kw f32 weights, out f32 biases] )
//! ```
//!
//! A container holds a prefix of the VGG-19 layer sequence up to `fc6`.
//! Channel widths are free as long as consecutive layers agree, which lets
//! tests run the real topology with a handful of channels. Convolutions are
//! cross-correlations (no kernel flip), 3×3, stride 1, zero padding 1.
//! Pixel values are on the `[0, 1]` scale before the container's mean/std
//! standardization.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imgcore::{self, GrayImage, Raster, RgbImage};
use crate::par;

pub const MAGIC: &[u8; 4] = b"VGWC";
pub const VERSION: u32 = 1;
/// Length of an fc6 descriptor.
pub const DESCRIPTOR_LEN: usize = 4096;
/// Network input side for descriptors.
pub const DESCRIPTOR_INPUT: usize = 224;
/// Pyramid inputs are padded to a multiple of the total pooling factor.
pub const PYRAMID_MULTIPLE: usize = 16;
/// Layers captured for matching, coarsest first.
pub const PYRAMID_LAYERS: [&str; 5] = ["relu5_1", "relu4_1", "relu3_1", "relu2_1", "relu1_1"];

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("bad magic: expected \"VGWC\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated block: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("shape mismatch in layer {layer}: {message}")]
    ShapeMismatch { layer: String, message: String },
    #[error("topology mismatch at layer {index}: expected {expected}, found {found}")]
    TopologyMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("invalid container: {0}")]
    Invalid(String),
    #[error("channel mismatch in {layer}: input has {got} channels, layer expects {expected}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("max pooling needs even dimensions, got {width}x{height}")]
    OddDims { width: usize, height: usize },
    #[error("container has no fc6 layer")]
    MissingFc6,
    #[error("container has none of the pyramid layers")]
    NoPyramidLayers,
    #[error("descriptor has zero norm")]
    ZeroDescriptor,
    #[error("descriptor has {0} values, expected {DESCRIPTOR_LEN}")]
    DescriptorLength(usize),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FeatError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerKind {
    Conv = 0,
    Relu = 1,
    MaxPool = 2,
    Fc = 3,
}

impl LayerKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Conv),
            1 => Some(Self::Relu),
            2 => Some(Self::MaxPool),
            3 => Some(Self::Fc),
            _ => None,
        }
    }

    fn has_weights(self) -> bool {
        matches!(self, Self::Conv | Self::Fc)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Conv => "conv",
            Self::Relu => "relu",
            Self::MaxPool => "maxpool",
            Self::Fc => "fc",
        };
        f.write_str(s)
    }
}

/// Weight block shape `(out, in, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl KernelShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Option<KernelShape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn conv(name: &str, shape: KernelShape, weights: Vec<f32>, bias: Vec<f32>) -> Self {
        Self {
            spec: LayerSpec {
                name: name.to_owned(),
                kind: LayerKind::Conv,
                shape: Some(shape),
            },
            weights,
            bias,
        }
    }

    pub fn fc(name: &str, shape: KernelShape, weights: Vec<f32>, bias: Vec<f32>) -> Self {
        Self {
            spec: LayerSpec {
                name: name.to_owned(),
                kind: LayerKind::Fc,
                shape: Some(shape),
            },
            weights,
            bias,
        }
    }

    pub fn plain(name: &str, kind: LayerKind) -> Self {
        Self {
            spec: LayerSpec {
                name: name.to_owned(),
                kind,
                shape: None,
            },
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

/// The VGG-19 layer sequence through `fc6`.
pub fn vgg19_sequence() -> Vec<(String, LayerKind)> {
    const BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];
    let mut seq = Vec::new();
    for (b, &n) in BLOCKS.iter().enumerate() {
        for i in 1..=n {
            seq.push((format!("conv{}_{}", b + 1, i), LayerKind::Conv));
            seq.push((format!("relu{}_{}", b + 1, i), LayerKind::Relu));
        }
        seq.push((format!("pool{}", b + 1), LayerKind::MaxPool));
    }
    seq.push(("fc6".to_owned(), LayerKind::Fc));
    seq
}

/// A validated network: preprocessing constants plus a VGG-19 layer prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightContainer {
    input_channels: usize,
    mean: Vec<f32>,
    std: Vec<f32>,
    layers: Vec<Layer>,
    fingerprint: u64,
}

impl WeightContainer {
    /// Validates the parts and computes the fingerprint of their encoding.
    pub fn new(input_channels: usize, mean: Vec<f32>, std: Vec<f32>, layers: Vec<Layer>) -> Result<Self> {
        let mut c = Self {
            input_channels,
            mean,
            std,
            layers,
            fingerprint: 0,
        };
        c.validate()?;
        c.fingerprint = fingerprint_bytes(&c.to_bytes());
        Ok(c)
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name() == name)
    }

    /// 64-bit FNV-1a hash of the container bytes.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn has_fc6(&self) -> bool {
        self.layers.last().is_some_and(|l| l.spec.kind == LayerKind::Fc)
    }

    fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(FeatError::Invalid(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.mean.len() != self.input_channels || self.std.len() != self.input_channels {
            return Err(FeatError::Invalid("mean/std length differs from input_channels".into()));
        }
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.contains(&0.0) {
            return Err(FeatError::Invalid("mean/std must be finite and std non-zero".into()));
        }
        let reference = vgg19_sequence();
        if self.layers.len() > reference.len() {
            return Err(FeatError::TopologyMismatch {
                index: reference.len(),
                expected: "end of network after fc6".into(),
                found: self.layers[reference.len()].name().into(),
            });
        }
        let mut channels = self.input_channels;
        for (index, (layer, (name, kind))) in self.layers.iter().zip(&reference).enumerate() {
            if layer.spec.name != *name || layer.spec.kind != *kind {
                return Err(FeatError::TopologyMismatch {
                    index,
                    expected: format!("{name} ({kind})"),
                    found: format!("{} ({})", layer.spec.name, layer.spec.kind),
                });
            }
            let mismatch = |message: String| FeatError::ShapeMismatch {
                layer: name.clone(),
                message,
            };
            match (kind.has_weights(), layer.spec.shape) {
                (false, None) => {
                    if !layer.weights.is_empty() || !layer.bias.is_empty() {
                        return Err(mismatch("weights on a parameter-free layer".into()));
                    }
                }
                (false, Some(_)) => return Err(mismatch("shape on a parameter-free layer".into())),
                (true, None) => return Err(mismatch("missing kernel shape".into())),
                (true, Some(shape)) => {
                    let (kh, kw) = if *kind == LayerKind::Conv { (3, 3) } else { (7, 7) };
                    if shape.kernel_h != kh || shape.kernel_w != kw {
                        return Err(mismatch(format!(
                            "kernel {}x{}, expected {kh}x{kw}",
                            shape.kernel_h, shape.kernel_w
                        )));
                    }
                    if shape.in_channels != channels {
                        return Err(mismatch(format!(
                            "in_channels {}, previous layer produces {channels}",
                            shape.in_channels
                        )));
                    }
                    if shape.out_channels == 0 {
                        return Err(mismatch("zero output channels".into()));
                    }
                    if *kind == LayerKind::Fc && shape.out_channels != DESCRIPTOR_LEN {
                        return Err(mismatch(format!(
                            "fc6 has {} outputs, expected {DESCRIPTOR_LEN}",
                            shape.out_channels
                        )));
                    }
                    if layer.weights.len() != shape.weight_len() || layer.bias.len() != shape.out_channels {
                        return Err(mismatch(format!(
                            "weight/bias lengths {}/{} do not match shape {:?}",
                            layer.weights.len(),
                            layer.bias.len(),
                            shape
                        )));
                    }
                    if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                        return Err(mismatch("non-finite parameter".into()));
                    }
                    channels = shape.out_channels;
                }
            }
        }
        Ok(())
    }

    /// Serializes to the VGWC byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.input_channels as u8);
        for (m, s) in self.mean.iter().zip(&self.std) {
            out.extend_from_slice(&m.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let name = layer.spec.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(layer.spec.kind as u8);
            if let Some(s) = layer.spec.shape {
                for d in [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in layer.weights.iter().chain(&layer.bias) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(FeatError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FeatError::UnsupportedVersion(version));
        }
        let input_channels = r.take(1, "input_channels")?[0] as usize;
        if input_channels != 1 && input_channels != 3 {
            return Err(FeatError::Invalid(format!("input_channels must be 1 or 3, got {input_channels}")));
        }
        let mut mean = Vec::with_capacity(input_channels);
        let mut std = Vec::with_capacity(input_channels);
        for _ in 0..input_channels {
            mean.push(r.f32("input mean")?);
            std.push(r.f32("input std")?);
        }
        let layer_count = r.u32("layer_count")? as usize;
        let mut layers = Vec::with_capacity(layer_count.min(64));
        for index in 0..layer_count {
            let name_len = r.u16("layer name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "layer name")?)
                .map_err(|_| FeatError::Invalid(format!("layer {index} name is not UTF-8")))?
                .to_owned();
            let kind_byte = r.take(1, "layer kind")?[0];
            let kind = LayerKind::from_u8(kind_byte)
                .ok_or_else(|| FeatError::Invalid(format!("layer {name}: unknown kind {kind_byte}")))?;
            if kind.has_weights() {
                let mut dims = [0usize; 4];
                for d in &mut dims {
                    *d = r.u32(&format!("{name} dims"))? as usize;
                }
                let shape = KernelShape {
                    out_channels: dims[0],
                    in_channels: dims[1],
                    kernel_h: dims[2],
                    kernel_w: dims[3],
                };
                let weights = r.f32_block(shape.weight_len(), &format!("{name} weights"))?;
                let bias = r.f32_block(shape.out_channels, &format!("{name} biases"))?;
                layers.push(Layer {
                    spec: LayerSpec {
                        name,
                        kind,
                        shape: Some(shape),
                    },
                    weights,
                    bias,
                });
            } else {
                layers.push(Layer::plain(&name, kind));
            }
        }
        if r.pos != bytes.len() {
            return Err(FeatError::TrailingBytes(bytes.len() - r.pos));
        }
        let mut c = Self {
            input_channels,
            mean,
            std,
            layers,
            fingerprint: fingerprint_bytes(bytes),
        };
        c.validate()?;
        c.fingerprint = fingerprint_bytes(bytes);
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| FeatError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Standardizes one input channel value from the `[0, 1]` pixel scale.
    pub fn standardize(&self, channel: usize, v: f64) -> f64 {
        (v - f64::from(self.mean[channel])) / f64::from(self.std[channel])
    }

    pub fn destandardize(&self, channel: usize, v: f64) -> f64 {
        v * f64::from(self.std[channel]) + f64::from(self.mean[channel])
    }
}

/// Reads and validates a VGWC file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FeatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    WeightContainer::from_bytes(&bytes)
}

pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FeatError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32_block(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| FeatError::Truncated(format!("{what}: block size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Activations

/// Channel-major activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FeatError::Invalid(format!(
                "feature map dims {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(FeatError::Invalid(format!(
                "feature map has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::from_raw(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// 3×3, stride 1, zero-pad 1 cross-correlation plus bias.
pub fn conv_forward(input: &FeatureMap, layer: &Layer) -> Result<FeatureMap> {
    let shape = match (layer.spec.kind, layer.spec.shape) {
        (LayerKind::Conv, Some(s)) => s,
        _ => return Err(FeatError::Invalid(format!("{} is not a convolution", layer.name()))),
    };
    if input.channels != shape.in_channels {
        return Err(FeatError::ChannelMismatch {
            layer: layer.name().to_owned(),
            expected: shape.in_channels,
            got: input.channels,
        });
    }
    let (h, w) = (input.height, input.width);
    let plane = h * w;
    let taps = shape.in_channels * 9;
    let mut out = vec![0.0f32; shape.out_channels * plane];
    par::for_each_chunk_mut(&mut out, plane, |o, dst| {
        let kernel = &layer.weights[o * taps..(o + 1) * taps];
        let mut acc = vec![f64::from(layer.bias[o]); plane];
        for i in 0..shape.in_channels {
            let src = input.plane(i);
            for ky in 0..3 {
                for kx in 0..3 {
                    let wgt = f64::from(kernel[i * 9 + ky * 3 + kx]);
                    if wgt == 0.0 {
                        continue;
                    }
                    // Output rows/cols whose tap lands inside the input.
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (w + 1 - kx).min(w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let srow = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        let arow = &mut acc[y * w + x0..y * w + x1];
                        for (a, &s) in arow.iter_mut().zip(srow) {
                            *a += wgt * f64::from(s);
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    Ok(FeatureMap::from_raw(shape.out_channels, h, w, out))
}

pub fn relu_forward(x: &FeatureMap) -> FeatureMap {
    FeatureMap::from_raw(
        x.channels,
        x.height,
        x.width,
        x.data.iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// 2×2, stride 2 max pooling.
pub fn maxpool_forward(x: &FeatureMap) -> Result<FeatureMap> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(FeatError::OddDims {
            width: x.width,
            height: x.height,
        });
    }
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = vec![0.0f32; x.channels * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |c, dst| {
        let src = x.plane(c);
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * x.width + 2 * xx;
                dst[y * ow + xx] = src[i]
                    .max(src[i + 1])
                    .max(src[i + x.width])
                    .max(src[i + x.width + 1]);
            }
        }
    });
    Ok(FeatureMap::from_raw(x.channels, oh, ow, out))
}

/// Fully connected layer over the whole channel-major input tensor.
pub fn fc_forward(x: &FeatureMap, layer: &Layer) -> Result<Vec<f32>> {
    let shape = match (layer.spec.kind, layer.spec.shape) {
        (LayerKind::Fc, Some(s)) => s,
        _ => return Err(FeatError::Invalid(format!("{} is not fully connected", layer.name()))),
    };
    if x.channels != shape.in_channels || x.height != shape.kernel_h || x.width != shape.kernel_w {
        return Err(FeatError::ShapeMismatch {
            layer: layer.name().to_owned(),
            message: format!(
                "input {}x{}x{} vs kernel {}x{}x{}",
                x.channels, x.height, x.width, shape.in_channels, shape.kernel_h, shape.kernel_w
            ),
        });
    }
    let n = x.data.len();
    Ok(par::map_range(shape.out_channels, |o| {
        let row = &layer.weights[o * n..(o + 1) * n];
        let s: f64 = row
            .iter()
            .zip(&x.data)
            .map(|(&w, &v)| f64::from(w) * f64::from(v))
            .sum();
        (s + f64::from(layer.bias[o])) as f32
    }))
}

fn apply_layer(x: &FeatureMap, layer: &Layer) -> Result<FeatureMap> {
    match layer.spec.kind {
        LayerKind::Conv => conv_forward(x, layer),
        LayerKind::Relu => Ok(relu_forward(x)),
        LayerKind::MaxPool => maxpool_forward(x),
        LayerKind::Fc => Err(FeatError::Invalid("fc layer inside the convolutional stack".into())),
    }
}

// ---------------------------------------------------------------------------
// Network inputs

/// Image handed to the network.
#[derive(Clone, Copy, Debug)]
pub enum NetInput<'a> {
    Gray(&'a GrayImage),
    Rgb(&'a RgbImage),
}

impl<'a> From<&'a GrayImage> for NetInput<'a> {
    fn from(g: &'a GrayImage) -> Self {
        NetInput::Gray(g)
    }
}

impl<'a> From<&'a RgbImage> for NetInput<'a> {
    fn from(i: &'a RgbImage) -> Self {
        NetInput::Rgb(i)
    }
}

/// Per-channel `[0, 1]` planes matching the container's input channels.
/// Gray inputs are replicated for RGB networks; color inputs are reduced to
/// L/100 for gray networks.
fn input_planes(input: NetInput<'_>, channels: usize) -> Vec<GrayImage> {
    match (input, channels) {
        (NetInput::Gray(g), n) => vec![g.clone(); n],
        (NetInput::Rgb(rgb), 1) => vec![imgcore::luminance(&imgcore::srgb_to_lab(rgb))],
        (NetInput::Rgb(rgb), _) => (0..3)
            .map(|c| {
                GrayImage::from_raw(
                    rgb.width(),
                    rgb.height(),
                    rgb.data().iter().skip(c).step_by(3).map(|&v| f64::from(v) / 255.0).collect(),
                )
            })
            .collect(),
    }
}

fn standardized_input(planes: &[GrayImage], w: &WeightContainer) -> FeatureMap {
    let (width, height) = planes[0].dims();
    let mut data = Vec::with_capacity(planes.len() * width * height);
    for (c, p) in planes.iter().enumerate() {
        data.extend(p.data().iter().map(|&v| w.standardize(c, v) as f32));
    }
    FeatureMap::from_raw(planes.len(), height, width, data)
}

/// Multi-level features, coarsest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<(String, FeatureMap)>,
    /// Image size before padding.
    pub original_dims: (usize, usize),
    /// Image size fed to the network.
    pub padded_dims: (usize, usize),
}

impl FeaturePyramid {
    pub fn level(&self, name: &str) -> Option<&FeatureMap> {
        self.levels.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.levels.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Runs the convolutional stack once and captures `relu1_1` … `relu5_1`.
///
/// The image is edge-padded to a multiple of 16 first so every pooling
/// stage sees even dimensions.
pub fn extract_pyramid(img: &GrayImage, w: &WeightContainer) -> Result<FeaturePyramid> {
    let (padded, original_dims) = img.pad_replicate(PYRAMID_MULTIPLE);
    let planes = input_planes(NetInput::Gray(&padded), w.input_channels);
    let mut x = standardized_input(&planes, w);
    let last_needed = w
        .layers
        .iter()
        .rposition(|l| PYRAMID_LAYERS.contains(&l.name()))
        .ok_or(FeatError::NoPyramidLayers)?;
    let mut levels = Vec::new();
    for layer in &w.layers[..=last_needed] {
        x = apply_layer(&x, layer)?;
        if PYRAMID_LAYERS.contains(&layer.name()) {
            levels.push((layer.name().to_owned(), x.clone()));
        }
    }
    levels.reverse();
    Ok(FeaturePyramid {
        levels,
        original_dims,
        padded_dims: padded.dims(),
    })
}

/// Unit-norm fc6 activation vector, tagged with the network fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
    fingerprint: u64,
}

impl Descriptor {
    /// L2-normalizes `values`.
    pub fn from_raw(values: &[f32], fingerprint: u64) -> Result<Self> {
        if values.len() != DESCRIPTOR_LEN {
            return Err(FeatError::DescriptorLength(values.len()));
        }
        let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(FeatError::ZeroDescriptor);
        }
        Ok(Self {
            values: values.iter().map(|&v| (f64::from(v) / norm) as f32).collect(),
            fingerprint,
        })
    }

    /// Wraps already-normalized values without rescaling (used when reading
    /// an index back from disk).
    pub(crate) fn from_normalized(values: Vec<f32>, fingerprint: u64) -> Self {
        Self { values, fingerprint }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }
}

/// Resizes to 224×224, runs the full stack and fc6, then normalizes.
pub fn extract_descriptor<'a>(img: impl Into<NetInput<'a>>, w: &WeightContainer) -> Result<Descriptor> {
    let fc6 = w.layers.last().filter(|l| l.spec.kind == LayerKind::Fc).ok_or(FeatError::MissingFc6)?;
    let planes: Vec<GrayImage> = input_planes(img.into(), w.input_channels)
        .iter()
        .map(|p| p.resize_bilinear(DESCRIPTOR_INPUT, DESCRIPTOR_INPUT))
        .collect();
    let mut x = standardized_input(&planes, w);
    for layer in &w.layers[..w.layers.len() - 1] {
        x = apply_layer(&x, layer)?;
    }
    let raw = fc_forward(&x, fc6)?;
    Descriptor::from_raw(&raw, w.fingerprint)
}

// ---------------------------------------------------------------------------
// Synthetic networks

/// Parameters for a randomly initialized VGG-19-shaped network.
#[derive(Clone, Debug)]
pub struct RandomNetSpec {
    pub input_channels: usize,
    /// Conv widths of the five blocks.
    pub widths: [usize; 5],
    /// Stop after `relu5_1` when false; otherwise continue through `fc6`.
    pub include_fc6: bool,
    pub seed: u64,
}

impl Default for RandomNetSpec {
    fn default() -> Self {
        Self {
            input_channels: 1,
            widths: [8, 8, 8, 8, 8],
            include_fc6: true,
            seed: 0,
        }
    }
}

/// Builds a network with uniform He-scaled weights and small random biases.
pub fn random_network(spec: &RandomNetSpec) -> WeightContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    let mut channels = spec.input_channels;
    for (name, kind) in vgg19_sequence() {
        let block = name
            .trim_start_matches(|c: char| c.is_ascii_alphabetic())
            .chars()
            .next()
            .and_then(|c| c.to_digit(10))
            .unwrap_or(6) as usize;
        match kind {
            LayerKind::Conv => {
                let out = spec.widths[block - 1];
                let shape = KernelShape {
                    out_channels: out,
                    in_channels: channels,
                    kernel_h: 3,
                    kernel_w: 3,
                };
                let bound = (6.0 / (channels * 9) as f64).sqrt();
                let weights = (0..shape.weight_len())
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect();
                let bias = (0..out).map(|_| rng.random_range(-0.1..0.1)).collect();
                layers.push(Layer::conv(&name, shape, weights, bias));
                channels = out;
            }
            LayerKind::Fc => {
                if !spec.include_fc6 {
                    break;
                }
                let shape = KernelShape {
                    out_channels: DESCRIPTOR_LEN,
                    in_channels: channels,
                    kernel_h: 7,
                    kernel_w: 7,
                };
                let bound = (6.0 / (channels * 49) as f64).sqrt();
                let weights = (0..shape.weight_len())
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect();
                let bias = (0..DESCRIPTOR_LEN).map(|_| rng.random_range(-0.01..0.01)).collect();
                layers.push(Layer::fc(&name, shape, weights, bias));
            }
            _ => {
                layers.push(Layer::plain(&name, kind));
                if !spec.include_fc6 && name == "relu5_1" {
                    break;
                }
            }
        }
    }
    let mean = vec![0.45; spec.input_channels];
    let std = vec![0.25; spec.input_channels];
    WeightContainer::new(spec.input_channels, mean, std, layers).expect("generated network is valid")
}
