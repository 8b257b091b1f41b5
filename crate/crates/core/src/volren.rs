//! RGBA volumes from colorized slice stacks, CPU ray casting and orthogonal
//! sections.
//!
//! Voxel `(i, j, k)` has its center at voxel-space point `(i, j, k)`; the
//! volume occupies `[-0.5, n - 0.5]` on each axis. World coordinates are voxel
//! coordinates times the spacing. Ray marching, `step` and opacity
//! correction are all measured in voxel-space lengths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::{self, GrayImage, LabImage, RgbImage};
use crate::par;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("empty slice stack")]
    EmptyStack,
    #[error("slice {index} is {found:?}, expected {expected:?}")]
    DimMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid render parameters: {0}")]
    InvalidParams(String),
    #[error("{axis:?} index {index} out of range 0..{len}")]
    IndexOutOfRange { axis: Axis, index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

pub type Rgba = [f32; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    nx: usize,
    ny: usize,
    nz: usize,
    spacing: [f64; 3],
    /// Index `(k·ny + j)·nx + i`.
    voxels: Vec<Rgba>,
}

impl Volume {
    pub fn new(nx: usize, ny: usize, nz: usize, spacing: [f64; 3], voxels: Vec<Rgba>) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::InvalidVolume(format!("counts {nx}×{ny}×{nz}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidVolume(format!("spacing {spacing:?}")));
        }
        if voxels.len() != nx * ny * nz {
            return Err(VolumeError::InvalidVolume(format!("{} voxels for {nx}×{ny}×{nz}", voxels.len())));
        }
        if let Some(i) = voxels.iter().position(|v| v.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(VolumeError::InvalidVolume(format!("voxel {i} outside [0, 1]: {:?}", voxels[i])));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            spacing,
            voxels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[Rgba] {
        &self.voxels
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> Rgba {
        self.voxels[(k * self.ny + j) * self.nx + i]
    }

    /// Replaces every alpha with `plane(i, j)` of slice `k`, e.g. the
    /// original gray luminance instead of the colorized lightness.
    pub fn with_alpha(mut self, planes: &[GrayImage]) -> Result<Self> {
        if planes.len() != self.nz {
            return Err(VolumeError::InvalidVolume(format!("{} alpha planes for {} slices", planes.len(), self.nz)));
        }
        for (k, p) in planes.iter().enumerate() {
            if p.dims() != (self.nx, self.ny) {
                return Err(VolumeError::DimMismatch {
                    index: k,
                    expected: (self.nx, self.ny),
                    found: p.dims(),
                });
            }
            let base = k * self.nx * self.ny;
            for (v, &a) in self.voxels[base..base + self.nx * self.ny].iter_mut().zip(p.data()) {
                if !(0.0..=1.0).contains(&a) {
                    return Err(VolumeError::InvalidVolume(format!("alpha {a} outside [0, 1]")));
                }
                v[3] = a as f32;
            }
        }
        Ok(self)
    }
}

/// A slice that can be stacked into a volume.
pub trait VolumeSlice: Sync {
    fn slice_dims(&self) -> (usize, usize);
    /// Row-major RGBA with color in `[0, 1]` and alpha = L/100.
    fn rgba(&self) -> Vec<Rgba>;
}

impl VolumeSlice for LabImage {
    fn slice_dims(&self) -> (usize, usize) {
        self.dims()
    }

    fn rgba(&self) -> Vec<Rgba> {
        let rgb = imgcore::lab_to_srgb(self);
        rgb.data()
            .chunks_exact(3)
            .zip(self.l())
            .map(|(c, &l)| [f32::from(c[0]) / 255.0, f32::from(c[1]) / 255.0, f32::from(c[2]) / 255.0, (l / 100.0) as f32])
            .collect()
    }
}

impl VolumeSlice for RgbImage {
    fn slice_dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn rgba(&self) -> Vec<Rgba> {
        let lab = imgcore::srgb_to_lab(self);
        self.data()
            .chunks_exact(3)
            .zip(lab.l())
            .map(|(c, &l)| {
                [
                    f32::from(c[0]) / 255.0,
                    f32::from(c[1]) / 255.0,
                    f32::from(c[2]) / 255.0,
                    (l / 100.0).clamp(0.0, 1.0) as f32,
                ]
            })
            .collect()
    }
}

/// Stacks slices along z in the given order.
pub fn assemble_volume<S: VolumeSlice>(stack: &[S], spacing: [f64; 3]) -> Result<Volume> {
    let first = stack.first().ok_or(VolumeError::EmptyStack)?;
    let (nx, ny) = first.slice_dims();
    for (index, s) in stack.iter().enumerate() {
        if s.slice_dims() != (nx, ny) {
            return Err(VolumeError::DimMismatch {
                index,
                expected: (nx, ny),
                found: s.slice_dims(),
            });
        }
    }
    let voxels = par::map_slice(stack, |s| s.rgba()).concat();
    Volume::new(nx, ny, stack.len(), spacing, voxels)
}

/// Trilinear interpolation in voxel space; transparent black outside the
/// volume's extent.
pub fn trilinear_sample(v: &Volume, p: [f64; 3]) -> Rgba {
    let n = [v.nx, v.ny, v.nz];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = n[a] as f64 - 0.5;
        if !(p[a] >= -0.5 && p[a] <= max) {
            return [0.0; 4];
        }
        let c = p[a].clamp(0.0, (n[a] - 1) as f64);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(n[a] - 1);
        frac[a] = c - f;
    }
    let mut out = [0.0f64; 4];
    for corner in 0..8 {
        let pick = |a: usize| corner >> a & 1 == 1;
        let weight: f64 = (0..3).map(|a| if pick(a) { frac[a] } else { 1.0 - frac[a] }).product();
        if weight == 0.0 {
            continue;
        }
        let idx = |a: usize| if pick(a) { hi[a] } else { lo[a] };
        let vox = v.voxel(idx(0), idx(1), idx(2));
        for (o, c) in out.iter_mut().zip(vox) {
            *o += weight * f64::from(c);
        }
    }
    out.map(|c| c as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Projection {
    /// Visible width in world units.
    Orthographic { width: f64 },
    /// Vertical field of view in degrees.
    Perspective { fov_y: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub projection: Projection,
    pub width: usize,
    pub height: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    a.map(|c| c / n)
}

impl Camera {
    /// Orthographic camera looking down `+z` at the volume center, framing the
    /// whole transverse extent.
    pub fn fit_transverse(v: &Volume, width: usize, height: usize) -> Self {
        let s = v.spacing;
        let center = [
            (v.nx as f64 - 1.0) * 0.5 * s[0],
            (v.ny as f64 - 1.0) * 0.5 * s[1],
            (v.nz as f64 - 1.0) * 0.5 * s[2],
        ];
        let extent_x = v.nx as f64 * s[0];
        let extent_y = v.ny as f64 * s[1];
        let aspect = width as f64 / height as f64;
        Self {
            eye: [center[0], center[1], center[2] - v.nz as f64 * s[2]],
            look_at: center,
            up: [0.0, -1.0, 0.0],
            projection: Projection::Orthographic {
                width: extent_x.max(extent_y * aspect),
            },
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fwd = sub(self.look_at, self.eye);
        if dot3(fwd, fwd) == 0.0 {
            return Err(VolumeError::InvalidCamera("eye equals look_at".into()));
        }
        let side = cross(fwd, self.up);
        if dot3(side, side) <= 1e-12 * dot3(fwd, fwd) * dot3(self.up, self.up) {
            return Err(VolumeError::InvalidCamera("up is parallel to the view direction".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(VolumeError::InvalidCamera("empty image".into()));
        }
        match self.projection {
            Projection::Orthographic { width } if !(width > 0.0) => Err(VolumeError::InvalidCamera("non-positive width".into())),
            Projection::Perspective { fov_y } if !(fov_y > 0.0 && fov_y < 180.0) => {
                Err(VolumeError::InvalidCamera("field of view outside (0, 180)".into()))
            }
            _ => Ok(()),
        }
    }

    /// World-space ray (origin, unit direction) through the center of pixel
    /// `(px, py)`; row 0 is the top.
    pub fn ray(&self, px: usize, py: usize) -> ([f64; 3], [f64; 3]) {
        let fwd = normalize(sub(self.look_at, self.eye));
        let right = normalize(cross(fwd, self.up));
        let up = cross(right, fwd);
        let u = (px as f64 + 0.5) / self.width as f64 - 0.5;
        let v = 0.5 - (py as f64 + 0.5) / self.height as f64;
        let aspect = self.height as f64 / self.width as f64;
        match self.projection {
            Projection::Orthographic { width } => {
                let origin = add_scaled(add_scaled(self.eye, right, u * width), up, v * width * aspect);
                (origin, fwd)
            }
            Projection::Perspective { fov_y } => {
                let half_h = (fov_y.to_radians() * 0.5).tan();
                let half_w = half_h / aspect;
                let dir = add_scaled(add_scaled(fwd, right, 2.0 * u * half_w), up, 2.0 * v * half_h);
                (self.eye, normalize(dir))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// Sampling distance in voxel units.
    pub step: f64,
    pub opacity_scale: f64,
    pub background: [f64; 3],
    pub early_termination_threshold: f64,
    /// Use `1 − (1 − α)^step` instead of `α` per sample.
    pub opacity_correction: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            step: 0.5,
            opacity_scale: 1.0,
            background: [0.0; 3],
            early_termination_threshold: 0.99,
            opacity_correction: true,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(VolumeError::InvalidParams(format!("step {}", self.step)));
        }
        if !(self.opacity_scale >= 0.0 && self.opacity_scale.is_finite()) {
            return Err(VolumeError::InvalidParams(format!("opacity_scale {}", self.opacity_scale)));
        }
        let t = self.early_termination_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(VolumeError::InvalidParams(format!("early_termination_threshold {t}")));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(VolumeError::InvalidParams(format!("background {:?}", self.background)));
        }
        Ok(())
    }
}

/// Accumulated color (background included) and opacity of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayResult {
    pub color: [f64; 3],
    pub alpha: f64,
}

/// Slab intersection of a voxel-space ray with the volume box.
fn intersect_box(v: &Volume, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let n = [v.nx, v.ny, v.nz];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let (lo, hi) = (-0.5, n[a] as f64 - 0.5);
        if d[a] == 0.0 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    let t0 = t0.max(0.0);
    (t0 < t1).then_some((t0, t1))
}

/// Front-to-back compositing along a world-space ray. Samples sit at
/// `t0 + (k + ½)·step` from the box entry.
pub fn cast_ray(v: &Volume, origin: [f64; 3], dir: [f64; 3], params: &RenderParams) -> RayResult {
    let o = [origin[0] / v.spacing[0], origin[1] / v.spacing[1], origin[2] / v.spacing[2]];
    let d = normalize([dir[0] / v.spacing[0], dir[1] / v.spacing[1], dir[2] / v.spacing[2]]);
    let mut c = [0.0f64; 3];
    let mut a = 0.0f64;
    if let Some((t0, t1)) = intersect_box(v, o, d) {
        let mut k = 0u64;
        loop {
            let t = t0 + (k as f64 + 0.5) * params.step;
            if t > t1 || a >= params.early_termination_threshold {
                break;
            }
            let s = trilinear_sample(v, add_scaled(o, d, t));
            let alpha = (f64::from(s[3]) * params.opacity_scale).min(1.0);
            let alpha = if params.opacity_correction {
                1.0 - (1.0 - alpha).powf(params.step)
            } else {
                alpha
            };
            let w = (1.0 - a) * alpha;
            for ch in 0..3 {
                c[ch] += w * f64::from(s[ch]);
            }
            a += w;
            k += 1;
        }
    }
    for ch in 0..3 {
        c[ch] += (1.0 - a) * params.background[ch];
    }
    RayResult { color: c, alpha: a }
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn raycast(v: &Volume, cam: &Camera, params: &RenderParams) -> Result<RgbImage> {
    cam.validate()?;
    params.validate()?;
    let mut data = vec![0u8; cam.width * cam.height * 3];
    par::for_each_chunk_mut(&mut data, cam.width * 3, |py, row| {
        for px in 0..cam.width {
            let (o, d) = cam.ray(px, py);
            let r = cast_ray(v, o, d, params);
            for ch in 0..3 {
                row[px * 3 + ch] = quantize(r.color[ch]);
            }
        }
    });
    Ok(RgbImage::new(cam.width, cam.height, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Constant z; `nx × ny` image.
    Transverse,
    /// Constant y; `nx × nz` image.
    Coronal,
    /// Constant x; `ny × nz` image.
    Sagittal,
}

pub fn extract_section(v: &Volume, axis: Axis, index: usize) -> Result<RgbImage> {
    let (len, w, h) = match axis {
        Axis::Transverse => (v.nz, v.nx, v.ny),
        Axis::Coronal => (v.ny, v.nx, v.nz),
        Axis::Sagittal => (v.nx, v.ny, v.nz),
    };
    if index >= len {
        return Err(VolumeError::IndexOutOfRange { axis, index, len });
    }
    let img = RgbImage::from_fn(w, h, |x, y| {
        let vox = match axis {
            Axis::Transverse => v.voxel(x, y, index),
            Axis::Coronal => v.voxel(x, index, y),
            Axis::Sagittal => v.voxel(index, x, y),
        };
        [0, 1, 2].map(|c| quantize(f64::from(vox[c])))
    })?;
    Ok(img)
}

impl From<imgcore::ImageError> for VolumeError {
    fn from(e: imgcore::ImageError) -> Self {
        VolumeError::InvalidVolume(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RED: Rgba = [1.0, 0.0, 0.0, 0.5];
    const BLUE: Rgba = [0.0, 0.0, 1.0, 0.5];

    fn along_z() -> ([f64; 3], [f64; 3]) {
        ([0.0, 0.0, -10.0], [0.0, 0.0, 1.0])
    }

    #[test]
    fn two_slab_closed_form() {
        let v = Volume::new(1, 1, 2, [1.0; 3], vec![RED, BLUE]).unwrap();
        let p = RenderParams {
            step: 1.0,
            opacity_correction: false,
            ..Default::default()
        };
        let (o, d) = along_z();
        let r = cast_ray(&v, o, d, &p);
        assert_eq!(r.color, [0.5, 0.0, 0.25]);
        assert_eq!(r.alpha, 0.75);
    }

    /// Slabs of `n` voxels whose corrected per-voxel opacities compose to 0.5.
    fn thick_slabs(n: usize) -> Volume {
        let a = (1.0 - 0.5f64.powf(1.0 / n as f64)) as f32;
        let voxels = (0..2 * n)
            .map(|k| if k < n { [1.0, 0.0, 0.0, a] } else { [0.0, 0.0, 1.0, a] })
            .collect();
        Volume::new(1, 1, 2 * n, [1.0; 3], voxels).unwrap()
    }

    #[test]
    fn step_halving_is_consistent() {
        let v = thick_slabs(16);
        let (o, d) = along_z();
        let full = cast_ray(&v, o, d, &RenderParams { step: 1.0, ..Default::default() });
        let half = cast_ray(&v, o, d, &RenderParams { step: 0.5, ..Default::default() });
        assert!((full.alpha - 0.75).abs() < 1e-4);
        for (a, b) in full.color.iter().zip(half.color) {
            if *a > 0.0 {
                assert!(((a - b) / a).abs() < 0.01, "{a} vs {b}");
            }
        }
        assert!(((full.alpha - half.alpha) / full.alpha).abs() < 0.01);
    }

    #[test]
    fn transparent_and_opaque_cases() {
        let bg = [0.2, 0.4, 0.6];
        let empty = Volume::new(3, 3, 3, [1.0; 3], vec![[0.7, 0.1, 0.3, 0.0]; 27]).unwrap();
        let p = RenderParams {
            background: bg,
            ..Default::default()
        };
        let (o, d) = ([1.0, 1.0, -5.0], [0.0, 0.0, 1.0]);
        assert_eq!(cast_ray(&empty, o, d, &p).color, bg);
        let solid = Volume::new(3, 3, 3, [1.0; 3], vec![[1.0, 0.0, 0.0, 1.0]; 27]).unwrap();
        let r = cast_ray(&solid, o, d, &p);
        assert_eq!(r.color, [1.0, 0.0, 0.0]);
        assert_eq!(r.alpha, 1.0);
        let zero = RenderParams {
            opacity_scale: 0.0,
            ..p
        };
        assert_eq!(cast_ray(&solid, o, d, &zero).color, bg);
        let miss = cast_ray(&solid, [10.0, 10.0, -5.0], d, &p);
        assert_eq!(miss.color, bg);
    }

    #[test]
    fn trilinear_cases() {
        let v = Volume::new(2, 1, 1, [1.0; 3], vec![[0.0, 0.2, 0.4, 0.0], [1.0, 0.2, 0.0, 1.0]]).unwrap();
        assert_eq!(trilinear_sample(&v, [0.0, 0.0, 0.0]), v.voxel(0, 0, 0));
        assert_eq!(trilinear_sample(&v, [1.0, 0.0, 0.0]), v.voxel(1, 0, 0));
        let mid = trilinear_sample(&v, [0.5, 0.0, 0.0]);
        assert!((mid[3] - 0.5).abs() < 1e-7 && (mid[2] - 0.2).abs() < 1e-7);
        assert_eq!(trilinear_sample(&v, [1.6, 0.0, 0.0]), [0.0; 4]);
        assert_eq!(trilinear_sample(&v, [0.0, -0.6, 0.0]), [0.0; 4]);
        let c = Volume::new(3, 2, 4, [1.0; 3], vec![[0.25, 0.5, 0.75, 0.3]; 24]).unwrap();
        for p in [[0.3, 0.7, 2.9], [-0.4, 1.4, 0.1], [1.99, 0.0, 3.5]] {
            assert_eq!(trilinear_sample(&c, p), [0.25, 0.5, 0.75, 0.3]);
        }
    }

    #[test]
    fn assembly_rules() {
        let black = RgbImage::filled(4, 3, [0, 0, 0]).unwrap();
        let white = RgbImage::filled(4, 3, [255, 255, 255]).unwrap();
        let v = assemble_volume(&[black.clone(), white, black.clone()], [1.0, 1.0, 2.0]).unwrap();
        assert_eq!(v.dims(), (4, 3, 3));
        assert!(v.voxels()[..12].iter().all(|p| p[3] == 0.0));
        assert!(v.voxels()[12..24].iter().all(|p| (p[3] - 1.0).abs() < 1e-6));
        assert!(matches!(assemble_volume::<RgbImage>(&[], [1.0; 3]), Err(VolumeError::EmptyStack)));
        let odd = RgbImage::filled(4, 4, [0, 0, 0]).unwrap();
        assert!(matches!(
            assemble_volume(&[black, odd], [1.0; 3]),
            Err(VolumeError::DimMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn sections_recover_slices() {
        let slices: Vec<LabImage> = (0..5)
            .map(|k| {
                let rgb = RgbImage::from_fn(6, 4, |x, y| [(x * 40) as u8, (y * 60) as u8, (k * 50) as u8]).unwrap();
                imgcore::srgb_to_lab(&rgb)
            })
            .collect();
        let v = assemble_volume(&slices, [1.0; 3]).unwrap();
        for (k, s) in slices.iter().enumerate() {
            let sec = extract_section(&v, Axis::Transverse, k).unwrap();
            let want = imgcore::lab_to_srgb(s);
            assert!(sec.data().iter().zip(want.data()).all(|(a, b)| a.abs_diff(*b) <= 1));
        }
        let sag = extract_section(&v, Axis::Sagittal, 2).unwrap();
        assert_eq!((sag.width(), sag.height()), (4, 5));
        let cor = extract_section(&v, Axis::Coronal, 3).unwrap();
        assert_eq!((cor.width(), cor.height()), (6, 5));
        assert_eq!(cor.pixel(2, 4)[2], 200);
        assert!(matches!(
            extract_section(&v, Axis::Transverse, 5),
            Err(VolumeError::IndexOutOfRange { len: 5, .. })
        ));
    }

    #[test]
    fn alpha_override() {
        let v = Volume::new(2, 1, 2, [1.0; 3], vec![[0.5; 4]; 4]).unwrap();
        let planes = vec![GrayImage::constant(2, 1, 0.1).unwrap(), GrayImage::constant(2, 1, 0.9).unwrap()];
        let v = v.with_alpha(&planes).unwrap();
        assert_eq!(v.voxel(1, 0, 1)[3], 0.9f32);
        assert!(v.clone().with_alpha(&planes[..1]).is_err());
    }

    #[test]
    fn camera_validation_and_rays() {
        let mut cam = Camera {
            eye: [0.0; 3],
            look_at: [0.0, 0.0, 1.0],
            up: [0.0, 1.0, 0.0],
            projection: Projection::Orthographic { width: 2.0 },
            width: 2,
            height: 2,
        };
        assert!(cam.validate().is_ok());
        let (o, d) = cam.ray(0, 0);
        assert_eq!(d, [0.0, 0.0, 1.0]);
        assert!((o[1] - 0.5).abs() < 1e-12);
        cam.up = [0.0, 0.0, 2.0];
        assert!(cam.validate().is_err());
        cam.up = [0.0, 1.0, 0.0];
        cam.look_at = cam.eye;
        assert!(cam.validate().is_err());
        let persp = Camera {
            look_at: [0.0, 0.0, 1.0],
            projection: Projection::Perspective { fov_y: 90.0 },
            ..cam
        };
        let (_, d) = persp.ray(1, 1);
        assert!((dot3(d, d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic_and_centered() {
        let slices: Vec<RgbImage> = (0..4).map(|k| RgbImage::filled(8, 8, [200, (k * 60) as u8, 40]).unwrap()).collect();
        let v = assemble_volume(&slices, [1.0, 1.0, 2.0]).unwrap();
        let cam = Camera::fit_transverse(&v, 16, 16);
        let p = RenderParams::default();
        let a = raycast(&v, &cam, &p).unwrap();
        assert_eq!(a, raycast(&v, &cam, &p).unwrap());
        assert!(a.pixel(8, 8)[0] > 100);
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        proptest::collection::vec(proptest::array::uniform4(0.0f32..=1.0), 27)
            .prop_map(|vox| Volume::new(3, 3, 3, [1.0; 3], vox).unwrap())
    }

    proptest! {
        #[test]
        fn composite_stays_bounded(v in arb_volume(), step in 0.1f64..2.0, corr in any::<bool>(), x in -0.4f64..2.4) {
            let p = RenderParams { step, opacity_correction: corr, early_termination_threshold: 1.0, ..Default::default() };
            let r = cast_ray(&v, [x, 1.0, -3.0], [0.0, 0.0, 1.0], &p);
            prop_assert!(r.alpha >= 0.0 && r.alpha <= 1.0 + 1e-9);
            prop_assert!(r.color.iter().all(|c| *c >= 0.0 && *c <= 1.0 + 1e-9));
        }

        #[test]
        fn opacity_grows_with_depth(v in arb_volume()) {
            // Truncating the volume after slice k gives the prefix of the march.
            let p = RenderParams { step: 1.0, early_termination_threshold: 1.0, ..Default::default() };
            let mut prev = 0.0;
            for nz in 1..=3 {
                let sub = Volume::new(3, 3, nz, [1.0; 3], v.voxels()[..9 * nz].to_vec()).unwrap();
                let a = cast_ray(&sub, [1.0, 1.0, -3.0], [0.0, 0.0, 1.0], &p).alpha;
                prop_assert!(a + 1e-12 >= prev);
                prev = a;
            }
        }
    }
}
