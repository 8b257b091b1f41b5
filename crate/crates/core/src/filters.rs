//! Guided edge-preserving filters and reference-color combination.
//!
//! All four filters take a source plane and a luminance guide in `[0, 1]`.
//! FGS, the guided filter and the domain transform interpret their range
//! parameters on a 0–255 guide scale and rescale the guide internally; WLS
//! uses raw `[0, 1]` guide gradients.
//!
//! [`colorize`] implements
//! `T'' = F(T', T_L) − F(T, T_L) + T` channelwise on Lab images, where `F` is
//! the selected filter, `T` the achromatic target and `T'` the warped
//! reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::{self, GammaParams, GrayImage, ImageError, LabImage};
use crate::par;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("dimension mismatch: source {src:?}, guide {guide:?}")]
    DimMismatch {
        src: (usize, usize),
        guide: (usize, usize),
    },
    #[error("target image is not achromatic (max |a|,|b| = {0})")]
    NotGray(f64),
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("invalid filter parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = std::result::Result<T, FilterError>;

const GUIDE_SCALE: f64 = 255.0;

/// Fast global smoother parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgsParams {
    pub lambda: f64,
    /// Range sigma on the 0–255 guide scale.
    pub sigma_r: f64,
    pub iterations: usize,
}

impl Default for FgsParams {
    fn default() -> Self {
        Self {
            lambda: 32.0,
            sigma_r: 200.0,
            iterations: 3,
        }
    }
}

/// Weighted least squares parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WlsParams {
    pub lambda: f64,
    pub alpha: f64,
    pub epsilon: f64,
    /// Relative residual `‖r‖₂ / ‖f‖₂` at which CG stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for WlsParams {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            alpha: 1.8,
            epsilon: 1e-4,
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

/// Guided filter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedParams {
    pub radius: usize,
    /// Regularization on the 0–255² guide scale.
    pub epsilon: f64,
}

impl Default for GuidedParams {
    fn default() -> Self {
        Self {
            radius: 16,
            epsilon: 2.0,
        }
    }
}

/// Domain transform (recursive filtering) parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtParams {
    pub sigma_s: f64,
    /// Range sigma on the 0–255 guide scale.
    pub sigma_r: f64,
    pub iterations: usize,
}

impl Default for DtParams {
    fn default() -> Self {
        Self {
            sigma_s: 8.0,
            sigma_r: 200.0,
            iterations: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterChoice {
    Fgs(FgsParams),
    Wls(WlsParams),
    Gf(GuidedParams),
    Dt(DtParams),
}

impl Default for FilterChoice {
    fn default() -> Self {
        FilterChoice::Fgs(FgsParams::default())
    }
}

impl FilterChoice {
    /// Default parameters for a filter name (`fgs`, `wls`, `gf`, `dt`).
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fgs" => Some(Self::Fgs(FgsParams::default())),
            "wls" => Some(Self::Wls(WlsParams::default())),
            "gf" => Some(Self::Gf(GuidedParams::default())),
            "dt" => Some(Self::Dt(DtParams::default())),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fgs(_) => "fgs",
            Self::Wls(_) => "wls",
            Self::Gf(_) => "gf",
            Self::Dt(_) => "dt",
        }
    }

    pub fn apply(&self, src: &GrayImage, guide: &GrayImage) -> Result<GrayImage> {
        match self {
            Self::Fgs(p) => fgs(src, guide, p),
            Self::Wls(p) => wls(src, guide, p),
            Self::Gf(p) => guided_filter(src, guide, p),
            Self::Dt(p) => domain_transform(src, guide, p),
        }
    }
}

fn check_dims(src: &GrayImage, guide: &GrayImage) -> Result<()> {
    if src.dims() != guide.dims() {
        return Err(FilterError::DimMismatch {
            src: src.dims(),
            guide: guide.dims(),
        });
    }
    Ok(())
}

fn transpose(data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = data[y * w + x];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fast global smoother

/// Thomas algorithm for a tridiagonal system. `lower[0]` and
/// `upper[n - 1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let (l, prev_c, prev_d) = if i == 0 { (0.0, 0.0, 0.0) } else { (lower[i], c[i - 1], d[i - 1]) };
        let m = diag[i] - l * prev_c;
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - l * prev_d) / m;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Solves `min Σ (u − f)² + λ Σ w (u_x − u_{x+1})²` along one row with
/// `w = exp(−|g_x − g_{x+1}| / σ_r)`; the guide row is on the 0–255 scale.
pub fn smooth_row(src: &[f64], guide255: &[f64], lambda: f64, sigma_r: f64) -> Vec<f64> {
    let n = src.len();
    let weights: Vec<f64> = guide255
        .windows(2)
        .map(|g| lambda * (-(g[0] - g[1]).abs() / sigma_r).exp())
        .collect();
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut diag = vec![1.0; n];
    for (k, &w) in weights.iter().enumerate() {
        upper[k] = -w;
        lower[k + 1] = -w;
        diag[k] += w;
        diag[k + 1] += w;
    }
    solve_tridiagonal(&lower, &diag, &upper, src)
}

fn smooth_rows(data: &[f64], guide255: &[f64], w: usize, lambda: f64, sigma_r: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        let r = smooth_row(&data[y * w..(y + 1) * w], &guide255[y * w..(y + 1) * w], lambda, sigma_r);
        row.copy_from_slice(&r);
    });
    out
}

/// One horizontal 1D global smoothing pass over every row.
pub fn fgs_horizontal_pass(src: &GrayImage, guide: &GrayImage, lambda: f64, sigma_r: f64) -> Result<GrayImage> {
    check_dims(src, guide)?;
    let g: Vec<f64> = guide.data().iter().map(|v| v * GUIDE_SCALE).collect();
    let out = smooth_rows(src.data(), &g, src.width(), lambda, sigma_r);
    Ok(GrayImage::from_raw(src.width(), src.height(), out))
}

/// Pass-`t` smoothing weight, `t` counted from 1.
pub fn fgs_lambda_schedule(lambda: f64, iterations: usize, t: usize) -> f64 {
    let big_t = iterations as i32;
    1.5 * lambda * 4f64.powi(big_t - t as i32) / (4f64.powi(big_t) - 1.0)
}

pub fn fgs(src: &GrayImage, guide: &GrayImage, p: &FgsParams) -> Result<GrayImage> {
    check_dims(src, guide)?;
    if p.lambda < 0.0 || p.sigma_r <= 0.0 || p.iterations == 0 {
        return Err(FilterError::InvalidParams(format!("{p:?}")));
    }
    let (w, h) = src.dims();
    let g: Vec<f64> = guide.data().iter().map(|v| v * GUIDE_SCALE).collect();
    let gt = transpose(&g, w, h);
    let mut u = src.data().to_vec();
    for t in 1..=p.iterations {
        let lt = fgs_lambda_schedule(p.lambda, p.iterations, t);
        u = smooth_rows(&u, &g, w, lt, p.sigma_r);
        let ut = smooth_rows(&transpose(&u, w, h), &gt, h, lt, p.sigma_r);
        u = transpose(&ut, h, w);
    }
    Ok(GrayImage::from_raw(w, h, u))
}

// ---------------------------------------------------------------------------
// Weighted least squares

/// Edge weights of the guide's 4-neighbor graph: `horizontal[y·w + x]`
/// couples `(x, y)` with `(x+1, y)`, `vertical[y·w + x]` couples `(x, y)`
/// with `(x, y+1)`. Both already include λ.
struct WlsSystem {
    w: usize,
    h: usize,
    horizontal: Vec<f64>,
    vertical: Vec<f64>,
    diag: Vec<f64>,
}

impl WlsSystem {
    fn new(guide: &GrayImage, p: &WlsParams) -> Self {
        let (w, h) = guide.dims();
        let g = guide.data();
        let weight = |a: f64, b: f64| p.lambda / ((a - b).abs().powf(p.alpha) + p.epsilon);
        let mut horizontal = vec![0.0; w * h];
        let mut vertical = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    horizontal[i] = weight(g[i], g[i + 1]);
                }
                if y + 1 < h {
                    vertical[i] = weight(g[i], g[i + w]);
                }
            }
        }
        let mut diag = vec![1.0; w * h];
        for i in 0..w * h {
            diag[i] += horizontal[i] + vertical[i];
            if i % w > 0 {
                diag[i] += horizontal[i - 1];
            }
            if i >= w {
                diag[i] += vertical[i - w];
            }
        }
        Self {
            w,
            h,
            horizontal,
            vertical,
            diag,
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let w = self.w;
        par::for_each_chunk_mut(out, w, |y, row| {
            for (x, o) in row.iter_mut().enumerate() {
                let i = y * w + x;
                let mut v = self.diag[i] * u[i];
                if x + 1 < w {
                    v -= self.horizontal[i] * u[i + 1];
                }
                if x > 0 {
                    v -= self.horizontal[i - 1] * u[i - 1];
                }
                if y + 1 < self.h {
                    v -= self.vertical[i] * u[i + w];
                }
                if y > 0 {
                    v -= self.vertical[i - w] * u[i - w];
                }
                *o = v;
            }
        });
    }

    /// Dense matrix, for tests.
    #[cfg(test)]
    fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.w * self.h;
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let mut col = vec![0.0; n];
                self.apply(&e, &mut col);
                col
            })
            .collect()
    }
}

/// Jacobi-preconditioned conjugate gradient on the WLS system.
fn wls_solve(sys: &WlsSystem, f: &[f64], p: &WlsParams) -> Result<Vec<f64>> {
    let n = f.len();
    let f_norm = par::dot(f, f).sqrt();
    if f_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = f.to_vec();
    let mut ax = vec![0.0; n];
    sys.apply(&x, &mut ax);
    let mut r: Vec<f64> = f.iter().zip(&ax).map(|(a, b)| a - b).collect();
    let mut z: Vec<f64> = r.iter().zip(&sys.diag).map(|(r, d)| r / d).collect();
    let mut dir = z.clone();
    let mut rz = par::dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut residual = par::dot(&r, &r).sqrt() / f_norm;
    for _ in 0..p.max_iterations {
        if residual <= p.tolerance {
            return Ok(x);
        }
        sys.apply(&dir, &mut q);
        let step = rz / par::dot(&dir, &q);
        for i in 0..n {
            x[i] += step * dir[i];
            r[i] -= step * q[i];
            z[i] = r[i] / sys.diag[i];
        }
        let rz_next = par::dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            dir[i] = z[i] + beta * dir[i];
        }
        residual = par::dot(&r, &r).sqrt() / f_norm;
    }
    if residual <= p.tolerance {
        return Ok(x);
    }
    Err(FilterError::NonConvergence {
        iterations: p.max_iterations,
        residual,
    })
}

/// Solves `(I + λ A_g) u = f` where `A_g` is the 4-neighbor Laplacian with
/// weights `1 / (|Δg|^α + ε)`.
pub fn wls(src: &GrayImage, guide: &GrayImage, p: &WlsParams) -> Result<GrayImage> {
    check_dims(src, guide)?;
    if p.lambda < 0.0 || p.alpha <= 0.0 || p.epsilon <= 0.0 || p.tolerance <= 0.0 {
        return Err(FilterError::InvalidParams(format!("{p:?}")));
    }
    if p.lambda == 0.0 {
        return Ok(src.clone());
    }
    let sys = WlsSystem::new(guide, p);
    let u = wls_solve(&sys, src.data(), p)?;
    Ok(GrayImage::from_raw(src.width(), src.height(), u))
}

// ---------------------------------------------------------------------------
// Guided filter

/// Mean over the `(2r+1)²` window clipped to the image.
fn box_mean(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    // Integral image with a zero border row/column.
    let iw = w + 1;
    let mut integral = vec![0.0; iw * (h + 1)];
    for y in 0..h {
        let mut row_sum = 0.0;
        for x in 0..w {
            row_sum += data[y * w + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row_sum;
        }
    }
    let mut out = vec![0.0; w * h];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for (x, o) in row.iter_mut().enumerate() {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let s = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0] + integral[y0 * iw + x0];
            *o = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    });
    out
}

/// Local linear model `q = ā·I + b̄` fitted per window.
pub fn guided_filter(src: &GrayImage, guide: &GrayImage, p: &GuidedParams) -> Result<GrayImage> {
    check_dims(src, guide)?;
    if p.radius == 0 || p.epsilon <= 0.0 {
        return Err(FilterError::InvalidParams(format!("{p:?}")));
    }
    let (w, h) = src.dims();
    let r = p.radius;
    let g: Vec<f64> = guide.data().iter().map(|v| v * GUIDE_SCALE).collect();
    let s = src.data();
    let mean_g = box_mean(&g, w, h, r);
    let mean_s = box_mean(s, w, h, r);
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let gs: Vec<f64> = g.iter().zip(s).map(|(a, b)| a * b).collect();
    let mean_gg = box_mean(&gg, w, h, r);
    let mean_gs = box_mean(&gs, w, h, r);
    let mut a = vec![0.0; w * h];
    let mut b = vec![0.0; w * h];
    for i in 0..w * h {
        let var = mean_gg[i] - mean_g[i] * mean_g[i];
        let cov = mean_gs[i] - mean_g[i] * mean_s[i];
        a[i] = cov / (var + p.epsilon);
        b[i] = mean_s[i] - a[i] * mean_g[i];
    }
    let mean_a = box_mean(&a, w, h, r);
    let mean_b = box_mean(&b, w, h, r);
    let out = (0..w * h).map(|i| mean_a[i] * g[i] + mean_b[i]).collect();
    Ok(GrayImage::from_raw(w, h, out))
}

// ---------------------------------------------------------------------------
// Domain transform

/// Causal then anti-causal recursive filter along each row. `dist[x]` is the
/// domain distance between `x − 1` and `x` (entry 0 unused).
fn recursive_rows(data: &mut [f64], dist: &[f64], w: usize, feedback: f64) {
    par::for_each_chunk_mut(data, w, |y, row| {
        let d = &dist[y * w..(y + 1) * w];
        for x in 1..w {
            let a = feedback.powf(d[x]);
            row[x] += a * (row[x - 1] - row[x]);
        }
        for x in (0..w.saturating_sub(1)).rev() {
            let a = feedback.powf(d[x + 1]);
            row[x] += a * (row[x + 1] - row[x]);
        }
    });
}

fn domain_distances(g: &[f64], w: usize, h: usize, ratio: f64) -> Vec<f64> {
    let mut d = vec![1.0; w * h];
    for y in 0..h {
        for x in 1..w {
            d[y * w + x] = 1.0 + ratio * (g[y * w + x] - g[y * w + x - 1]).abs();
        }
    }
    d
}

/// Recursive-filtering domain transform with alternating horizontal and
/// vertical passes.
pub fn domain_transform(src: &GrayImage, guide: &GrayImage, p: &DtParams) -> Result<GrayImage> {
    check_dims(src, guide)?;
    if p.sigma_s <= 0.0 || p.sigma_r <= 0.0 || p.iterations == 0 {
        return Err(FilterError::InvalidParams(format!("{p:?}")));
    }
    let (w, h) = src.dims();
    let g: Vec<f64> = guide.data().iter().map(|v| v * GUIDE_SCALE).collect();
    let ratio = p.sigma_s / p.sigma_r;
    let dh = domain_distances(&g, w, h, ratio);
    let dv = domain_distances(&transpose(&g, w, h), h, w, ratio);
    let n = p.iterations as i32;
    let mut u = src.data().to_vec();
    for i in 1..=n {
        let sigma_h = p.sigma_s * 3f64.sqrt() * 2f64.powi(n - i) / (4f64.powi(n) - 1.0).sqrt();
        let feedback = (-(2f64.sqrt()) / sigma_h).exp();
        recursive_rows(&mut u, &dh, w, feedback);
        let mut ut = transpose(&u, w, h);
        recursive_rows(&mut ut, &dv, h, feedback);
        u = transpose(&ut, h, w);
    }
    Ok(GrayImage::from_raw(w, h, u))
}

// ---------------------------------------------------------------------------
// Colorization

const GRAY_TOLERANCE: f64 = 1e-9;

fn check_gray(t: &LabImage) -> Result<()> {
    let max_chroma = t.a().iter().chain(t.b()).fold(0.0f64, |m, v| m.max(v.abs()));
    if max_chroma > GRAY_TOLERANCE {
        return Err(FilterError::NotGray(max_chroma));
    }
    Ok(())
}

/// Channelwise `F(T', T_L) − F(T, T_L) + T`, L clamped to `[0, 100]`.
pub fn colorize(t_lab: &LabImage, tp_lab: &LabImage, filter: &FilterChoice) -> Result<LabImage> {
    if t_lab.dims() != tp_lab.dims() {
        return Err(FilterError::DimMismatch {
            src: tp_lab.dims(),
            guide: t_lab.dims(),
        });
    }
    check_gray(t_lab)?;
    let guide = imgcore::luminance(t_lab);
    let filtered = par::map_range(6, |k| {
        let (img, c) = if k < 3 { (tp_lab, k) } else { (t_lab, k - 3) };
        filter.apply(&img.channel(c), &guide)
    });
    let filtered = filtered.into_iter().collect::<Result<Vec<_>>>()?;
    let combine = |c: usize| -> Vec<f64> {
        let t = t_lab.channel(c);
        filtered[c]
            .data()
            .iter()
            .zip(filtered[c + 3].data())
            .zip(t.data())
            .map(|((fp, ft), t)| fp - ft + t)
            .collect()
    };
    let l = combine(0).into_iter().map(|v| v.clamp(0.0, 100.0)).collect();
    let (w, h) = t_lab.dims();
    Ok(LabImage::new(w, h, l, combine(1), combine(2))?)
}

fn map_lightness(img: &LabImage, params: GammaParams) -> Result<LabImage> {
    let scaled: Vec<f64> = img.l().iter().map(|v| v / 100.0).collect();
    let mapped = imgcore::gamma_map_values(&scaled, params)?;
    let (w, h) = img.dims();
    Ok(LabImage::new(
        w,
        h,
        mapped.into_iter().map(|v| v * 100.0).collect(),
        img.a().to_vec(),
        img.b().to_vec(),
    )?)
}

/// [`colorize`] between a γ = 1/2 encoding of both lightness channels and a
/// γ = 2 decoding of the result. Chroma is not gamma-mapped.
pub fn colorize_with_gamma(t_lab: &LabImage, tp_lab: &LabImage, filter: &FilterChoice) -> Result<LabImage> {
    let t = map_lightness(t_lab, GammaParams::ENCODE)?;
    let tp = map_lightness(tp_lab, GammaParams::ENCODE)?;
    map_lightness(&colorize(&t, &tp, filter)?, GammaParams::DECODE)
}
