//! Image containers, sRGB/CIE Lab conversion, power-law mapping, resampling
//! and PNG I/O.
//!
//! Pixel arithmetic is `f64` throughout; 8-bit quantization only happens in
//! [`RgbImage`] and at the PNG boundary. Lab conversions use the D65 white
//! point of the IEC 61966-2-1 primaries with the 2° observer.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer has {actual} values, expected {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite pixel value at index {index}")]
    NonFinite { index: usize },
    #[error("L channel value {value} outside [0, 100] at index {index}")]
    LightnessRange { index: usize, value: f64 },
    #[error("planes disagree in size: {0}")]
    PlaneMismatch(String),
    #[error("gamma parameters must be positive (gamma={gamma}, alpha={alpha})")]
    InvalidGamma { gamma: f64, alpha: f64 },
    #[error("negative value {value} at index {index}: power-law mapping needs non-negative input")]
    NegativeInput { index: usize, value: f64 },
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("unsupported bit depth {depth} in {}", path.display())]
    UnsupportedBitDepth { path: PathBuf, depth: u8 },
    #[error("unsupported color type {color} in {}", path.display())]
    UnsupportedColorType { path: PathBuf, color: String },
    #[error("corrupt PNG stream in {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ImageError>;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(ImageError::InvalidDimensions { width, height });
    }
    Ok(())
}

fn check_plane(width: usize, height: usize, data: &[f64]) -> Result<()> {
    check_dims(width, height)?;
    if data.len() != width * height {
        return Err(ImageError::DataLength {
            expected: width * height,
            actual: data.len(),
        });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(ImageError::NonFinite { index });
    }
    Ok(())
}

/// 8-bit sRGB image, interleaved `r g b` per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != 3 * width * height {
            return Err(ImageError::DataLength {
                expected: 3 * width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let data = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Real-valued single plane, row-major. Luminance planes use the nominal
/// range `[0, 1]`; the filters also use this type for signed chroma planes.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_plane(width, height, &data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Builds a plane without re-validating; callers guarantee the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Elementwise map, keeping dimensions.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            out.extend(row.iter().rev());
        }
        Self::from_raw(self.width, self.height, out)
    }
}

/// CIE Lab image stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    l: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, l: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_plane(width, height, &l)?;
        check_plane(width, height, &a)?;
        check_plane(width, height, &b)?;
        if let Some(index) = l.iter().position(|v| !(0.0..=100.0).contains(v)) {
            return Err(ImageError::LightnessRange {
                index,
                value: l[index],
            });
        }
        Ok(Self {
            width,
            height,
            l,
            a,
            b,
        })
    }

    /// Assembles an image from three planes of equal size.
    pub fn from_planes(l: GrayImage, a: GrayImage, b: GrayImage) -> Result<Self> {
        if l.dims() != a.dims() || l.dims() != b.dims() {
            return Err(ImageError::PlaneMismatch(format!(
                "L {:?}, a {:?}, b {:?}",
                l.dims(),
                a.dims(),
                b.dims()
            )));
        }
        Self::new(l.width, l.height, l.data, a.data, b.data)
    }

    /// Achromatic Lab image from an sRGB-encoded gray plane in `[0, 1]`.
    /// Chroma is exactly zero.
    pub fn from_gray_srgb(gray: &GrayImage) -> Self {
        let l = gray
            .data
            .iter()
            .map(|&v| lightness_from_relative_y(srgb_to_linear(v.clamp(0.0, 1.0))))
            .collect();
        let n = gray.data.len();
        Self {
            width: gray.width,
            height: gray.height,
            l,
            a: vec![0.0; n],
            b: vec![0.0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn l(&self) -> &[f64] {
        &self.l
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Channel `0` (L), `1` (a) or `2` (b) as a standalone plane.
    pub fn channel(&self, index: usize) -> GrayImage {
        let data = match index {
            0 => self.l.clone(),
            1 => self.a.clone(),
            2 => self.b.clone(),
            _ => panic!("Lab channel index {index} out of range"),
        };
        GrayImage::from_raw(self.width, self.height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = y * self.width + x;
        [self.l[i], self.a[i], self.b[i]]
    }

    pub fn flip_horizontal(&self) -> Self {
        let flip = |p: &[f64]| GrayImage::from_raw(self.width, self.height, p.to_vec())
            .flip_horizontal()
            .into_data();
        Self {
            width: self.width,
            height: self.height,
            l: flip(&self.l),
            a: flip(&self.a),
            b: flip(&self.b),
        }
    }
}

/// Power-law parameters for `v ↦ alpha · v^gamma`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GammaParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl GammaParams {
    pub const fn new(gamma: f64, alpha: f64) -> Self {
        Self { gamma, alpha }
    }

    /// Encoding half of the default pairing.
    pub const ENCODE: Self = Self::new(0.5, 1.0);
    /// Decoding half of the default pairing.
    pub const DECODE: Self = Self::new(2.0, 1.0);

    fn validate(&self) -> Result<()> {
        if self.gamma > 0.0 && self.alpha > 0.0 && self.gamma.is_finite() && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(ImageError::InvalidGamma {
                gamma: self.gamma,
                alpha: self.alpha,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Color conversion

/// Linear sRGB → XYZ (IEC 61966-2-1, D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Reference white: the XYZ of linear (1, 1, 1), so sRGB white lands on
/// L = 100, a = b = 0 exactly.
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    [
        RGB_TO_XYZ[0].iter().sum(),
        RGB_TO_XYZ[1].iter().sum(),
        RGB_TO_XYZ[2].iter().sum(),
    ]
});

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * c(1, 1, 2, 2) - m[0][1] * c(1, 0, 2, 2) + m[0][2] * c(1, 0, 2, 1);
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

pub(crate) fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub(crate) fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

fn lightness_from_relative_y(y: f64) -> f64 {
    if y > LAB_EPSILON {
        116.0 * y.cbrt() - 16.0
    } else {
        LAB_KAPPA * y
    }
}

/// One pixel, sRGB components in `[0, 1]` → `[L, a, b]`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let white = *WHITE;
    let mut xyz = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / white[i];
    }
    let fx = lab_f(xyz[0]);
    let fy = lab_f(xyz[1]);
    let fz = lab_f(xyz[2]);
    [
        lightness_from_relative_y(xyz[1]),
        500.0 * (fx - fy),
        200.0 * (fy - fz),
    ]
}

/// One pixel `[L, a, b]` → sRGB components, unclamped.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let [l, a, b] = lab;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let y = if l > LAB_KAPPA * LAB_EPSILON {
        fy * fy * fy
    } else {
        l / LAB_KAPPA
    };
    let white = *WHITE;
    let xyz = [lab_f_inv(fx) * white[0], y * white[1], lab_f_inv(fz) * white[2]];
    let m = &*XYZ_TO_RGB;
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = linear_to_srgb(row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2]);
    }
    out
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn srgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.width * img.height;
    let px = par::map_range(n, |i| {
        let d = &img.data[3 * i..3 * i + 3];
        srgb_pixel_to_lab([d[0], d[1], d[2]].map(|c| f64::from(c) / 255.0))
    });
    let mut l = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for p in px {
        // Clamp guards the last ulp at white.
        l.push(p[0].clamp(0.0, 100.0));
        a.push(p[1]);
        b.push(p[2]);
    }
    LabImage {
        width: img.width,
        height: img.height,
        l,
        a,
        b,
    }
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut colors are clamped per channel.
pub fn lab_to_srgb(img: &LabImage) -> RgbImage {
    let n = img.width * img.height;
    let px = par::map_range(n, |i| {
        lab_pixel_to_srgb([img.l[i], img.a[i], img.b[i]]).map(quantize)
    });
    let mut data = Vec::with_capacity(3 * n);
    for p in px {
        data.extend_from_slice(&p);
    }
    RgbImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// L plane rescaled to `[0, 1]`.
pub fn luminance(img: &LabImage) -> GrayImage {
    GrayImage::from_raw(
        img.width,
        img.height,
        img.l.iter().map(|v| (v / 100.0).clamp(0.0, 1.0)).collect(),
    )
}

/// Elementwise `v ↦ alpha · v^gamma`, clamped to `[0, 1]`.
///
/// Negative inputs are rejected: the power law has no meaning on signed
/// chroma planes.
pub fn gamma_map(plane: &GrayImage, params: GammaParams) -> Result<GrayImage> {
    gamma_map_values(&plane.data, params).map(|d| GrayImage::from_raw(plane.width, plane.height, d))
}

pub fn gamma_map_values(values: &[f64], params: GammaParams) -> Result<Vec<f64>> {
    params.validate()?;
    if let Some(index) = values.iter().position(|&v| v < 0.0) {
        return Err(ImageError::NegativeInput {
            index,
            value: values[index],
        });
    }
    let identity = params.gamma == 1.0 && params.alpha == 1.0;
    Ok(values
        .iter()
        .map(|&v| {
            if identity {
                v.min(1.0)
            } else {
                (params.alpha * v.powf(params.gamma)).clamp(0.0, 1.0)
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Resampling and padding

/// Source coordinate for output sample `i` with corners aligned.
fn source_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

fn taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_out, n_in);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn resize_plane(data: &[f64], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<f64> {
    if (w, h) == (new_w, new_h) {
        return data.to_vec();
    }
    let xt = taps(new_w, w);
    let yt = taps(new_h, h);
    // Horizontal pass.
    let mut tmp = vec![0.0; new_w * h];
    par::for_each_chunk_mut(&mut tmp, new_w, |y, row| {
        let src = &data[y * w..(y + 1) * w];
        for (o, &(i0, i1, t)) in row.iter_mut().zip(&xt) {
            *o = lerp(src[i0], src[i1], t);
        }
    });
    let mut out = vec![0.0; new_w * new_h];
    par::for_each_chunk_mut(&mut out, new_w, |y, row| {
        let (i0, i1, t) = yt[y];
        let r0 = &tmp[i0 * new_w..(i0 + 1) * new_w];
        let r1 = &tmp[i1 * new_w..(i1 + 1) * new_w];
        for x in 0..new_w {
            row[x] = lerp(r0[x], r1[x], t);
        }
    });
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn pad_plane<T: Copy>(data: &[T], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let row = &data[y.min(h - 1) * w..y.min(h - 1) * w + w];
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], new_w - w));
    }
    out
}

fn crop_plane<T: Copy>(data: &[T], w: usize, new_w: usize, new_h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        out.extend_from_slice(&data[y * w..y * w + new_w]);
    }
    out
}

fn next_multiple(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Geometry operations shared by every image kind.
pub trait Raster: Sized {
    fn dims(&self) -> (usize, usize);

    /// Separable bilinear resampling with corner-aligned, edge-clamped taps.
    fn resize_bilinear(&self, width: usize, height: usize) -> Self;

    /// Replicates the right and bottom edges up to the next multiple of
    /// `multiple`; returns the padded image and the original size.
    fn pad_replicate(&self, multiple: usize) -> (Self, (usize, usize));

    /// Keeps the top-left `width × height` region.
    fn crop(&self, width: usize, height: usize) -> Self;
}

impl Raster for GrayImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "resize target must be non-empty");
        let data = resize_plane(&self.data, self.width, self.height, width, height);
        Self::from_raw(width, height, data)
    }

    fn pad_replicate(&self, multiple: usize) -> (Self, (usize, usize)) {
        assert!(multiple >= 1, "padding multiple must be at least 1");
        let (w, h) = (next_multiple(self.width, multiple), next_multiple(self.height, multiple));
        let data = pad_plane(&self.data, self.width, self.height, w, h);
        (Self::from_raw(w, h, data), (self.width, self.height))
    }

    fn crop(&self, width: usize, height: usize) -> Self {
        assert!(width <= self.width && height <= self.height);
        Self::from_raw(width, height, crop_plane(&self.data, self.width, width, height))
    }
}

impl Raster for LabImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "resize target must be non-empty");
        let r = |p: &[f64]| resize_plane(p, self.width, self.height, width, height);
        Self {
            width,
            height,
            l: r(&self.l),
            a: r(&self.a),
            b: r(&self.b),
        }
    }

    fn pad_replicate(&self, multiple: usize) -> (Self, (usize, usize)) {
        assert!(multiple >= 1, "padding multiple must be at least 1");
        let (w, h) = (next_multiple(self.width, multiple), next_multiple(self.height, multiple));
        let p = |d: &[f64]| pad_plane(d, self.width, self.height, w, h);
        (
            Self {
                width: w,
                height: h,
                l: p(&self.l),
                a: p(&self.a),
                b: p(&self.b),
            },
            (self.width, self.height),
        )
    }

    fn crop(&self, width: usize, height: usize) -> Self {
        assert!(width <= self.width && height <= self.height);
        let c = |d: &[f64]| crop_plane(d, self.width, width, height);
        Self {
            width,
            height,
            l: c(&self.l),
            a: c(&self.a),
            b: c(&self.b),
        }
    }
}

impl Raster for RgbImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "resize target must be non-empty");
        let channels: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let plane: Vec<f64> = self.data.iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect();
                resize_plane(&plane, self.width, self.height, width, height)
            })
            .collect();
        let mut data = Vec::with_capacity(3 * width * height);
        for i in 0..width * height {
            for ch in &channels {
                data.push(ch[i].round().clamp(0.0, 255.0) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    fn pad_replicate(&self, multiple: usize) -> (Self, (usize, usize)) {
        assert!(multiple >= 1, "padding multiple must be at least 1");
        let (w, h) = (next_multiple(self.width, multiple), next_multiple(self.height, multiple));
        let pixels: Vec<[u8; 3]> = self.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let padded = pad_plane(&pixels, self.width, self.height, w, h);
        (
            Self {
                width: w,
                height: h,
                data: padded.into_iter().flatten().collect(),
            },
            (self.width, self.height),
        )
    }

    fn crop(&self, width: usize, height: usize) -> Self {
        assert!(width <= self.width && height <= self.height);
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            let start = 3 * y * self.width;
            data.extend_from_slice(&self.data[start..start + 3 * width]);
        }
        Self {
            width,
            height,
            data,
        }
    }
}

pub fn resize_bilinear<I: Raster>(img: &I, width: usize, height: usize) -> I {
    img.resize_bilinear(width, height)
}

pub fn pad_replicate<I: Raster>(img: &I, multiple: usize) -> (I, (usize, usize)) {
    img.pad_replicate(multiple)
}

// ---------------------------------------------------------------------------
// PNG I/O

/// An image as decoded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Rgb(RgbImage),
    Gray(GrayImage),
}

impl Image {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Image::Rgb(i) => i.dims(),
            Image::Gray(i) => i.dims(),
        }
    }

    /// Lab view of the image; gray inputs are treated as sRGB-encoded gray.
    pub fn to_lab(&self) -> LabImage {
        match self {
            Image::Rgb(i) => srgb_to_lab(i),
            Image::Gray(g) => LabImage::from_gray_srgb(g),
        }
    }
}

impl From<RgbImage> for Image {
    fn from(i: RgbImage) -> Self {
        Image::Rgb(i)
    }
}

impl From<GrayImage> for Image {
    fn from(i: GrayImage) -> Self {
        Image::Gray(i)
    }
}

/// Reads an 8-bit grayscale or 8-bit truecolor PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ImageError::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            ImageError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    let corrupt = |e: png::DecodingError| match e {
        png::DecodingError::IoError(source) => ImageError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ImageError::Corrupt {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let (color, depth, width, height) = {
        let info = reader.info();
        (info.color_type, info.bit_depth, info.width as usize, info.height as usize)
    };
    if depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: depth as u8,
        });
    }
    if !matches!(color, png::ColorType::Grayscale | png::ColorType::Rgb) {
        return Err(ImageError::UnsupportedColorType {
            path: path.to_path_buf(),
            color: format!("{color:?}"),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Corrupt {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(corrupt)?;
    buf.truncate(frame.buffer_size());
    match color {
        png::ColorType::Grayscale => {
            let data = buf.iter().map(|&v| f64::from(v) / 255.0).collect();
            Ok(Image::Gray(GrayImage::new(width, height, data)?))
        }
        _ => Ok(Image::Rgb(RgbImage::new(width, height, buf)?)),
    }
}

/// Writes an 8-bit PNG. Gray planes are quantized from `[0, 1]`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source: std::io::Error| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let enc_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => io(source),
        other => ImageError::Corrupt {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let (width, height) = img.dims();
    let file = File::create(path).map_err(io)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = match img {
        Image::Rgb(i) => {
            encoder.set_color(png::ColorType::Rgb);
            i.data.clone()
        }
        Image::Gray(g) => {
            encoder.set_color(png::ColorType::Grayscale);
            g.data.iter().map(|&v| quantize(v)).collect()
        }
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    save_image(&Image::Rgb(img.clone()), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook sRGB → Lab with the tabulated D65 white, written
    /// independently of the module code.
    fn reference_lab(rgb: [u8; 3]) -> [f64; 3] {
        let lin = |c: u8| {
            let v = c as f64 / 255.0;
            if v <= 0.04045 {
                v / 12.92
            } else {
                ((v + 0.055) / 1.055f64).powf(2.4)
            }
        };
        let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        let f = |t: f64| {
            if t > (6.0f64 / 29.0).powi(3) {
                t.powf(1.0 / 3.0)
            } else {
                t / (3.0 * (6.0f64 / 29.0).powi(2)) + 4.0 / 29.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    fn one(rgb: [u8; 3]) -> [f64; 3] {
        srgb_to_lab(&RgbImage::filled(1, 1, rgb).unwrap()).pixel(0, 0)
    }

    #[test]
    fn white_and_black() {
        let w = one([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-3 && w[2].abs() < 1e-3, "{w:?}");
        assert_eq!(one([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_red_matches_reference_formulas() {
        let oracle = reference_lab([255, 0, 0]);
        for (o, e) in oracle.iter().zip([53.24, 80.09, 67.20]) {
            assert!((o - e).abs() < 0.05, "{oracle:?}");
        }
        let got = one([255, 0, 0]);
        for c in 0..3 {
            assert!((got[c] - oracle[c]).abs() < 0.05, "{got:?} vs {oracle:?}");
        }
    }

    #[test]
    fn lab_to_srgb_white_and_clamp() {
        let white = LabImage::new(1, 1, vec![100.0], vec![0.0], vec![0.0]).unwrap();
        assert_eq!(lab_to_srgb(&white).pixel(0, 0), [255, 255, 255]);
        // L above 100 is not a valid LabImage; exercise the clamp through the pixel path.
        let over = lab_pixel_to_srgb([200.0, 0.0, 0.0]).map(quantize);
        assert_eq!(over, [255, 255, 255]);
    }

    #[test]
    fn round_trip_grid() {
        let steps: Vec<u8> = (0..17).map(|i| (i * 255 / 16) as u8).collect();
        let mut data = Vec::new();
        for &r in &steps {
            for &g in &steps {
                for &b in &steps {
                    data.extend_from_slice(&[r, g, b]);
                }
            }
        }
        let img = RgbImage::new(17 * 17, 17, data).unwrap();
        let back = lab_to_srgb(&srgb_to_lab(&img));
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(worst <= 1, "max channel error {worst}");
    }

    #[test]
    fn luminance_rescales() {
        let lab = LabImage::new(3, 1, vec![100.0, 0.0, 53.24], vec![0.0; 3], vec![0.0; 3]).unwrap();
        let lum = luminance(&lab);
        assert_eq!(lum.data()[0], 1.0);
        assert_eq!(lum.data()[1], 0.0);
        assert!((lum.data()[2] - 0.5324).abs() < 1e-12);
    }

    #[test]
    fn gamma_cases() {
        let p = GrayImage::new(3, 1, vec![0.25, 0.0, 1.0]).unwrap();
        assert_eq!(gamma_map(&p, GammaParams::new(1.0, 1.0)).unwrap(), p);
        let enc = gamma_map(&p, GammaParams::ENCODE).unwrap();
        assert_eq!(enc.data()[0], 0.5);
        let dec = gamma_map(&enc, GammaParams::DECODE).unwrap();
        for (a, b) in dec.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let neg = GrayImage::new(2, 1, vec![0.1, -0.2]).unwrap();
        assert!(matches!(
            gamma_map(&neg, GammaParams::ENCODE),
            Err(ImageError::NegativeInput { index: 1, .. })
        ));
        assert!(gamma_map(&p, GammaParams::new(0.0, 1.0)).is_err());
    }

    #[test]
    fn resize_cases() {
        let p = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(p.resize_bilinear(3, 1).data(), &[0.0, 0.5, 1.0]);
        let c = GrayImage::constant(5, 7, 0.3).unwrap();
        assert!(c.resize_bilinear(11, 2).data().iter().all(|&v| v == 0.3));
        let r = GrayImage::from_fn(6, 4, |x, y| (x * 7 + y * 3) as f64 * 0.01).unwrap();
        assert_eq!(r.resize_bilinear(6, 4), r);
    }

    #[test]
    fn padding_cases() {
        let img = GrayImage::from_fn(33, 30, |x, y| (x + 100 * y) as f64).unwrap();
        let (p, orig) = img.pad_replicate(16);
        assert_eq!(p.dims(), (48, 32));
        assert_eq!(orig, (33, 30));
        assert_eq!(p.get(40, 5), img.get(32, 5));
        assert_eq!(p.get(3, 31), img.get(3, 29));
        assert_eq!(p.get(47, 31), img.get(32, 29));
        assert_eq!(p.crop(33, 30), img);
        let sq = GrayImage::constant(32, 32, 0.5).unwrap();
        assert_eq!(sq.pad_replicate(16).0, sq);
        let rgb = RgbImage::from_fn(3, 2, |x, y| [x as u8, y as u8, 9]).unwrap();
        let (prgb, _) = rgb.pad_replicate(4);
        assert_eq!(prgb.pixel(3, 3), [2, 1, 9]);
    }

    #[test]
    fn png_errors_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(ImageError::MissingFile { .. })));

        let rgb = RgbImage::from_fn(5, 4, |x, y| [(x * 50) as u8, (y * 60) as u8, 7]).unwrap();
        let p = dir.path().join("rgb.png");
        save_rgb(&rgb, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), Image::Rgb(rgb));

        let gray = GrayImage::from_fn(4, 3, |x, y| ((x * 3 + y * 40) as f64) / 255.0).unwrap();
        let gp = dir.path().join("gray.png");
        save_image(&Image::Gray(gray.clone()), &gp).unwrap();
        assert_eq!(load_image(&gp).unwrap(), Image::Gray(gray));

        let deep = dir.path().join("deep.png");
        {
            let f = File::create(&deep).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 8]).unwrap();
        }
        assert!(matches!(
            load_image(&deep),
            Err(ImageError::UnsupportedBitDepth { depth: 16, .. })
        ));

        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(ImageError::Corrupt { .. })));
    }

    proptest! {
        #[test]
        fn luminance_in_unit_range(l in 0.0f64..=100.0, a in -128.0f64..127.0, b in -128.0f64..127.0) {
            let img = LabImage::new(1, 1, vec![l], vec![a], vec![b]).unwrap();
            let v = luminance(&img).data()[0];
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn gamma_is_monotone(x in 0.0f64..1.0, y in 0.0f64..1.0, g in 0.1f64..4.0, a in 0.1f64..3.0) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            let out = gamma_map_values(&[lo, hi], GammaParams::new(g, a)).unwrap();
            prop_assert!(out[0] <= out[1]);
        }

        #[test]
        fn resize_never_overshoots(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            w in 1usize..20,
            h in 1usize..20,
        ) {
            let img = GrayImage::new(4, 3, vals).unwrap();
            let (lo, hi) = img.min_max();
            let out = img.resize_bilinear(w, h);
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
