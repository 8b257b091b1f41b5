//! PatchMatch in deep-feature space and patch-voting reconstruction.
//!
//! An [`NNField`] maps every pixel `p` of a source grid to `p + offset(p)` in
//! a target grid. The field used for color transfer has the target image
//! `T` as source grid and the reference `R` as target grid, so warping `R`
//! onto `T` is a gather with no holes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featnet::{FeatureMap, FeaturePyramid};
use crate::imgcore::LabImage;
use crate::par;

#[derive(Debug, Error)]
pub enum AnalogyError {
    #[error("pyramid layer lists differ: {0:?} vs {1:?}")]
    LayerMismatch(Vec<String>, Vec<String>),
    #[error("pyramid lacks layer {0}")]
    MissingLayer(String),
    #[error("feature maps disagree: {0}")]
    FeatureMismatch(String),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, AnalogyError>;

/// Matching schedule for one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub layer: String,
    pub patch_radius: usize,
    pub iterations: usize,
}

/// Coarse-to-fine PatchMatch configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogyParams {
    /// Levels from coarsest to finest.
    pub levels: Vec<LevelSchedule>,
    pub seed: u64,
}

impl Default for AnalogyParams {
    fn default() -> Self {
        let level = |layer: &str, patch_radius| LevelSchedule {
            layer: layer.to_owned(),
            patch_radius,
            iterations: 5,
        };
        Self {
            levels: vec![
                level("relu5_1", 1),
                level("relu4_1", 1),
                level("relu3_1", 1),
                level("relu2_1", 2),
                level("relu1_1", 2),
            ],
            seed: 0,
        }
    }
}

impl AnalogyParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(AnalogyError::InvalidParams("no levels".into()));
        }
        for l in &self.levels {
            if l.iterations == 0 || l.patch_radius == 0 {
                return Err(AnalogyError::InvalidParams(format!(
                    "{}: iterations and patch_radius must be at least 1",
                    l.layer
                )));
            }
        }
        Ok(())
    }

    /// Radius of the finest level; used for patch voting.
    pub fn finest_radius(&self) -> usize {
        self.levels.last().map_or(1, |l| l.patch_radius)
    }
}

/// Nearest-neighbor field between a source grid and a target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NNField {
    src_dims: (usize, usize),
    tgt_dims: (usize, usize),
    offsets: Vec<(i32, i32)>,
    /// Patch distances; `INFINITY` marks "not evaluated at this level".
    distances: Vec<f64>,
    patch_radius: usize,
    seed: u64,
}

impl NNField {
    /// Field from explicit offsets; distances start unevaluated.
    pub fn from_offsets(
        src_dims: (usize, usize),
        tgt_dims: (usize, usize),
        offsets: Vec<(i32, i32)>,
        patch_radius: usize,
    ) -> Result<Self> {
        if offsets.len() != src_dims.0 * src_dims.1 {
            return Err(AnalogyError::ResolutionMismatch(format!(
                "{} offsets for a {}x{} grid",
                offsets.len(),
                src_dims.0,
                src_dims.1
            )));
        }
        let f = Self {
            src_dims,
            tgt_dims,
            distances: vec![f64::INFINITY; offsets.len()],
            offsets,
            patch_radius,
            seed: 0,
        };
        if let Some(i) = (0..f.offsets.len()).find(|&i| !f.in_target(f.target_of(i))) {
            return Err(AnalogyError::ResolutionMismatch(format!(
                "offset at index {i} leaves the target grid"
            )));
        }
        Ok(f)
    }

    pub fn identity(dims: (usize, usize), patch_radius: usize) -> Self {
        Self {
            src_dims: dims,
            tgt_dims: dims,
            offsets: vec![(0, 0); dims.0 * dims.1],
            distances: vec![f64::INFINITY; dims.0 * dims.1],
            patch_radius,
            seed: 0,
        }
    }

    pub fn src_dims(&self) -> (usize, usize) {
        self.src_dims
    }

    pub fn tgt_dims(&self) -> (usize, usize) {
        self.tgt_dims
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn offset(&self, x: usize, y: usize) -> (i32, i32) {
        self.offsets[y * self.src_dims.0 + x]
    }

    /// Target pixel of source pixel index `i`.
    pub fn target_of(&self, i: usize) -> (i64, i64) {
        let (x, y) = (i % self.src_dims.0, i / self.src_dims.0);
        let (dx, dy) = self.offsets[i];
        (x as i64 + i64::from(dx), y as i64 + i64::from(dy))
    }

    fn in_target(&self, (x, y): (i64, i64)) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.tgt_dims.0 && (y as usize) < self.tgt_dims.1
    }

    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    /// Recomputes every stored distance against `a` (source) and `b` (target).
    pub fn evaluate(&mut self, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
        self.check_maps(a, b)?;
        let (pa, pb) = (PixelMajor::from(a), PixelMajor::from(b));
        let w = self.src_dims.0;
        let r = self.patch_radius;
        let offsets = &self.offsets;
        self.distances = par::map_range(offsets.len(), |i| {
            let (x, y) = (i % w, i / w);
            let (dx, dy) = offsets[i];
            let q = ((x as i64 + i64::from(dx)) as usize, (y as i64 + i64::from(dy)) as usize);
            patch_distance_pm(&pa, &pb, (x, y), q, r)
        });
        Ok(())
    }

    fn check_maps(&self, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
        if (a.width(), a.height()) != self.src_dims || (b.width(), b.height()) != self.tgt_dims {
            return Err(AnalogyError::FeatureMismatch(format!(
                "field {:?}->{:?}, maps {}x{} and {}x{}",
                self.src_dims,
                self.tgt_dims,
                a.width(),
                a.height(),
                b.width(),
                b.height()
            )));
        }
        if a.channels() != b.channels() {
            return Err(AnalogyError::FeatureMismatch(format!(
                "{} vs {} channels",
                a.channels(),
                b.channels()
            )));
        }
        Ok(())
    }

    /// Restricts the source grid to its top-left `src_dims` and clamps
    /// targets into the top-left `tgt_dims` of the target grid. Used to drop
    /// the padding added before feature extraction.
    pub fn crop(&self, src_dims: (usize, usize), tgt_dims: (usize, usize)) -> Self {
        assert!(src_dims.0 <= self.src_dims.0 && src_dims.1 <= self.src_dims.1);
        assert!(tgt_dims.0 <= self.tgt_dims.0 && tgt_dims.1 <= self.tgt_dims.1);
        let mut offsets = Vec::with_capacity(src_dims.0 * src_dims.1);
        let mut distances = Vec::with_capacity(src_dims.0 * src_dims.1);
        for y in 0..src_dims.1 {
            for x in 0..src_dims.0 {
                let i = y * self.src_dims.0 + x;
                let (tx, ty) = self.target_of(i);
                let cx = tx.clamp(0, tgt_dims.0 as i64 - 1);
                let cy = ty.clamp(0, tgt_dims.1 as i64 - 1);
                offsets.push(((cx - x as i64) as i32, (cy - y as i64) as i32));
                distances.push(if (cx, cy) == (tx, ty) {
                    self.distances[i]
                } else {
                    f64::INFINITY
                });
            }
        }
        Self {
            src_dims,
            tgt_dims,
            offsets,
            distances,
            patch_radius: self.patch_radius,
            seed: self.seed,
        }
    }

    /// Text dump: a header line, then one `dx dy distance` row per pixel.
    pub fn write_dump(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "nnf src {} {} tgt {} {} radius {} seed {}",
            self.src_dims.0, self.src_dims.1, self.tgt_dims.0, self.tgt_dims.1, self.patch_radius, self.seed
        )?;
        for ((dx, dy), d) in self.offsets.iter().zip(&self.distances) {
            writeln!(out, "{dx} {dy} {d}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Features and distances

/// Divides each pixel's channel vector by its Euclidean norm. Zero vectors
/// stay zero.
pub fn normalize_features(f: &FeatureMap) -> FeatureMap {
    let n = f.width() * f.height();
    let c = f.channels();
    let norms: Vec<f64> = par::map_range(n, |i| {
        (0..c)
            .map(|ch| f64::from(f.data()[ch * n + i]).powi(2))
            .sum::<f64>()
            .sqrt()
    });
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let norm = norms[k % n];
            if norm > 0.0 {
                (f64::from(v) / norm) as f32
            } else {
                0.0
            }
        })
        .collect();
    FeatureMap::new(c, f.height(), f.width(), data).expect("normalization keeps values finite")
}

/// Pixel-major copy of a feature map for cache-friendly patch comparisons.
struct PixelMajor {
    w: usize,
    h: usize,
    c: usize,
    data: Vec<f32>,
}

impl From<&FeatureMap> for PixelMajor {
    fn from(f: &FeatureMap) -> Self {
        let (w, h, c) = (f.width(), f.height(), f.channels());
        let n = w * h;
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for (i, &v) in f.plane(ch).iter().enumerate() {
                data[i * c + ch] = v;
            }
        }
        Self { w, h, c, data }
    }
}

impl PixelMajor {
    fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }
}

fn clamp_coord(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

fn patch_distance_pm(a: &PixelMajor, b: &PixelMajor, p: (usize, usize), q: (usize, usize), radius: usize) -> f64 {
    let r = radius as i64;
    let mut sum = 0.0;
    for dy in -r..=r {
        let ay = clamp_coord(p.1 as i64 + dy, a.h);
        let by = clamp_coord(q.1 as i64 + dy, b.h);
        for dx in -r..=r {
            let ax = clamp_coord(p.0 as i64 + dx, a.w);
            let bx = clamp_coord(q.0 as i64 + dx, b.w);
            for (&u, &v) in a.pixel(ax, ay).iter().zip(b.pixel(bx, by)) {
                let d = f64::from(u) - f64::from(v);
                sum += d * d;
            }
        }
    }
    let side = (2 * radius + 1) as f64;
    sum / (side * side)
}

/// Mean squared feature distance between the patch around `p` in `a` and
/// the patch around `q` in `b`, with edge-clamped sampling.
pub fn patch_distance(a: &FeatureMap, b: &FeatureMap, p: (usize, usize), q: (usize, usize), radius: usize) -> f64 {
    let r = radius as i64;
    let mut sum = 0.0;
    for dy in -r..=r {
        let ay = clamp_coord(p.1 as i64 + dy, a.height());
        let by = clamp_coord(q.1 as i64 + dy, b.height());
        for dx in -r..=r {
            let ax = clamp_coord(p.0 as i64 + dx, a.width());
            let bx = clamp_coord(q.0 as i64 + dx, b.width());
            for c in 0..a.channels() {
                let d = f64::from(a.get(c, ay, ax)) - f64::from(b.get(c, by, bx));
                sum += d * d;
            }
        }
    }
    let side = (2 * radius + 1) as f64;
    sum / (side * side)
}

// ---------------------------------------------------------------------------
// PatchMatch

/// Uniformly random in-bounds targets from a seeded generator.
pub fn nnf_init_random(src_dims: (usize, usize), tgt_dims: (usize, usize), patch_radius: usize, seed: u64) -> NNField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = src_dims.0 * src_dims.1;
    let mut offsets = Vec::with_capacity(n);
    for y in 0..src_dims.1 {
        for x in 0..src_dims.0 {
            let tx = rng.random_range(0..tgt_dims.0) as i64;
            let ty = rng.random_range(0..tgt_dims.1) as i64;
            offsets.push(((tx - x as i64) as i32, (ty - y as i64) as i32));
        }
    }
    NNField {
        src_dims,
        tgt_dims,
        offsets,
        distances: vec![f64::INFINITY; n],
        patch_radius,
        seed,
    }
}

/// Runs `iterations` PatchMatch passes over `nnf`.
///
/// Odd passes scan from the top-left and try the left and upper neighbors'
/// offsets, even passes scan backwards and try the right and lower
/// neighbors. Each pixel then samples one random target at radii `R, R/2,
/// …, 1` around its current best, `R` being the larger target side. A
/// candidate replaces the incumbent only when strictly closer.
pub fn nnf_iterate(nnf: &NNField, a: &FeatureMap, b: &FeatureMap, iterations: usize) -> Result<NNField> {
    let mut field = nnf.clone();
    field.evaluate(a, b)?;
    let (pa, pb) = (PixelMajor::from(a), PixelMajor::from(b));
    let (w, h) = field.src_dims;
    let (tw, th) = field.tgt_dims;
    let r = field.patch_radius;
    let max_radius = tw.max(th) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(field.seed);

    for pass in 0..iterations {
        let forward = pass % 2 == 0;
        for k in 0..w * h {
            let i = if forward { k } else { w * h - 1 - k };
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let (mut best_off, mut best_d) = (field.offsets[i], field.distances[i]);

            let try_target = |tx: i64, ty: i64, best_off: &mut (i32, i32), best_d: &mut f64| {
                if tx < 0 || ty < 0 || tx >= tw as i64 || ty >= th as i64 {
                    return;
                }
                let cand = ((tx - x) as i32, (ty - y) as i32);
                if cand == *best_off {
                    return;
                }
                let d = patch_distance_pm(&pa, &pb, (x as usize, y as usize), (tx as usize, ty as usize), r);
                if d < *best_d {
                    *best_d = d;
                    *best_off = cand;
                }
            };

            // Propagation.
            let step: i64 = if forward { -1 } else { 1 };
            let (nx, ny) = (x + step, y + step);
            if nx >= 0 && nx < w as i64 {
                let (dx, dy) = field.offsets[(y * w as i64 + nx) as usize];
                try_target(x + i64::from(dx), y + i64::from(dy), &mut best_off, &mut best_d);
            }
            if ny >= 0 && ny < h as i64 {
                let (dx, dy) = field.offsets[(ny * w as i64 + x) as usize];
                try_target(x + i64::from(dx), y + i64::from(dy), &mut best_off, &mut best_d);
            }

            // Random search around the current best.
            let mut radius = max_radius;
            while radius >= 1 {
                let (bx, by) = (x + i64::from(best_off.0), y + i64::from(best_off.1));
                let x_lo = (bx - radius).max(0);
                let x_hi = (bx + radius).min(tw as i64 - 1);
                let y_lo = (by - radius).max(0);
                let y_hi = (by + radius).min(th as i64 - 1);
                let tx = rng.random_range(x_lo..=x_hi);
                let ty = rng.random_range(y_lo..=y_hi);
                try_target(tx, ty, &mut best_off, &mut best_d);
                radius /= 2;
            }

            field.offsets[i] = best_off;
            field.distances[i] = best_d;
        }
    }
    Ok(field)
}

/// Nearest-neighbor upsampling of the offsets onto a finer grid, scaling
/// offsets by the grid ratio (2 between pooling levels). Targets are clamped
/// into the new target grid; distances are left for the next evaluation.
pub fn nnf_upsample(nnf: &NNField, new_src_dims: (usize, usize), new_tgt_dims: (usize, usize)) -> NNField {
    let (ow, oh) = nnf.src_dims;
    let (nw, nh) = new_src_dims;
    let fx = (nw / ow).max(1) as i64;
    let fy = (nh / oh).max(1) as i64;
    let mut offsets = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let sx = (x * ow / nw).min(ow - 1);
            let sy = (y * oh / nh).min(oh - 1);
            let (dx, dy) = nnf.offsets[sy * ow + sx];
            let tx = (x as i64 + fx * i64::from(dx)).clamp(0, new_tgt_dims.0 as i64 - 1);
            let ty = (y as i64 + fy * i64::from(dy)).clamp(0, new_tgt_dims.1 as i64 - 1);
            offsets.push(((tx - x as i64) as i32, (ty - y as i64) as i32));
        }
    }
    NNField {
        src_dims: new_src_dims,
        tgt_dims: new_tgt_dims,
        distances: vec![f64::INFINITY; nw * nh],
        offsets,
        patch_radius: nnf.patch_radius,
        seed: nnf.seed,
    }
}

fn mix_seed(seed: u64, direction: u64, level: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(direction.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(level.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn match_direction(src: &FeaturePyramid, tgt: &FeaturePyramid, params: &AnalogyParams, direction: u64) -> Result<NNField> {
    let mut field: Option<NNField> = None;
    for (k, level) in params.levels.iter().enumerate() {
        let a = src
            .level(&level.layer)
            .ok_or_else(|| AnalogyError::MissingLayer(level.layer.clone()))?;
        let b = tgt
            .level(&level.layer)
            .ok_or_else(|| AnalogyError::MissingLayer(level.layer.clone()))?;
        let (a, b) = (normalize_features(a), normalize_features(b));
        let seed = mix_seed(params.seed, direction, k as u64);
        let src_dims = (a.width(), a.height());
        let tgt_dims = (b.width(), b.height());
        let mut f = match field.take() {
            None => nnf_init_random(src_dims, tgt_dims, level.patch_radius, seed),
            Some(prev) => nnf_upsample(&prev, src_dims, tgt_dims),
        };
        f.patch_radius = level.patch_radius;
        f.seed = seed;
        field = Some(nnf_iterate(&f, &a, &b, level.iterations)?);
    }
    Ok(field.expect("at least one level"))
}

/// Coarse-to-fine matching in both directions.
///
/// Returns `(phi_t_to_r, phi_r_to_t)` at the finest level's resolution.
/// `phi_r_to_t` has `T`'s grid as source and targets in `R` (each target
/// pixel finds its best reference patch); `phi_t_to_r` is the symmetric
/// field with `R` as source.
pub fn match_bidirectional(
    pyr_t: &FeaturePyramid,
    pyr_r: &FeaturePyramid,
    params: &AnalogyParams,
) -> Result<(NNField, NNField)> {
    params.validate()?;
    if pyr_t.layer_names() != pyr_r.layer_names() {
        return Err(AnalogyError::LayerMismatch(
            pyr_t.layer_names().iter().map(|s| s.to_string()).collect(),
            pyr_r.layer_names().iter().map(|s| s.to_string()).collect(),
        ));
    }
    let (r_to_t, t_to_r) = par::join(
        || match_direction(pyr_t, pyr_r, params, 0),
        || match_direction(pyr_r, pyr_t, params, 1),
    );
    Ok((t_to_r?, r_to_t?))
}

/// Warps `r_lab` through `phi` by patch voting: every output pixel averages
/// the reference samples proposed by all patches that cover it.
pub fn reconstruct(r_lab: &LabImage, phi: &NNField, patch_radius: usize) -> Result<LabImage> {
    if r_lab.dims() != phi.tgt_dims {
        return Err(AnalogyError::ResolutionMismatch(format!(
            "reference is {:?}, field targets {:?}",
            r_lab.dims(),
            phi.tgt_dims
        )));
    }
    let (w, h) = phi.src_dims;
    let (rw, rh) = phi.tgt_dims;
    let r = patch_radius as i64;
    let px = par::map_range(w * h, |i| {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for qy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
            for qx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                let (dx, dy) = phi.offsets[(qy * w as i64 + qx) as usize];
                let sx = clamp_coord(x + i64::from(dx), rw);
                let sy = clamp_coord(y + i64::from(dy), rh);
                let v = r_lab.pixel(sx, sy);
                for c in 0..3 {
                    acc[c] += v[c];
                }
                count += 1;
            }
        }
        acc.map(|s| s / count as f64)
    });
    let mut planes = [Vec::with_capacity(w * h), Vec::with_capacity(w * h), Vec::with_capacity(w * h)];
    for p in px {
        for c in 0..3 {
            planes[c].push(p[c]);
        }
    }
    let [l, a, b] = planes;
    let l = l.into_iter().map(|v| v.clamp(0.0, 100.0)).collect();
    LabImage::new(w, h, l, a, b).map_err(|e| AnalogyError::ResolutionMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(c: usize, w: usize, h: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(c, h, w, (0..c * w * h).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Shifted copy: `out(x, y) = src(x - sx, y - sy)`, fresh noise where the
    /// source is out of range.
    fn shifted(src: &FeatureMap, sx: usize, sy: usize, seed: u64) -> FeatureMap {
        let noise = random_map(src.channels(), src.width(), src.height(), seed);
        let (w, h) = (src.width(), src.height());
        let mut data = Vec::with_capacity(src.data().len());
        for c in 0..src.channels() {
            for y in 0..h {
                for x in 0..w {
                    data.push(if x >= sx && y >= sy {
                        src.get(c, y - sy, x - sx)
                    } else {
                        noise.get(c, y, x)
                    });
                }
            }
        }
        FeatureMap::new(src.channels(), h, w, data).unwrap()
    }

    /// Exhaustive minimum patch distance for every source pixel.
    fn brute_force(a: &FeatureMap, b: &FeatureMap, r: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..a.height() {
            for x in 0..a.width() {
                let mut best = f64::INFINITY;
                for qy in 0..b.height() {
                    for qx in 0..b.width() {
                        best = best.min(patch_distance(a, b, (x, y), (qx, qy), r));
                    }
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn normalize_cases() {
        let f = FeatureMap::new(2, 1, 3, vec![3.0, 0.6, 0.0, 4.0, 0.8, 0.0]).unwrap();
        let n = normalize_features(&f);
        assert!((n.get(0, 0, 0) - 0.6).abs() < 1e-6 && (n.get(1, 0, 0) - 0.8).abs() < 1e-6);
        assert!((n.get(0, 0, 1) - 0.6).abs() < 1e-6 && (n.get(1, 0, 1) - 0.8).abs() < 1e-6);
        assert_eq!((n.get(0, 0, 2), n.get(1, 0, 2)), (0.0, 0.0));
    }

    #[test]
    fn patch_distance_cases() {
        let a = normalize_features(&random_map(8, 16, 16, 1));
        let b = normalize_features(&random_map(8, 16, 16, 2));
        assert_eq!(patch_distance(&a, &a, (5, 7), (5, 7), 2), 0.0);
        let d1 = patch_distance(&a, &b, (4, 5), (9, 10), 1);
        let d2 = patch_distance(&b, &a, (9, 10), (4, 5), 1);
        assert!((d1 - d2).abs() < 1e-12);

        // Direct summation over the 3×3 window.
        let (p, q) = ((6usize, 3usize), (11usize, 12usize));
        let mut sum = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                for c in 0..8 {
                    let u = a.get(c, (p.1 as i64 + dy) as usize, (p.0 as i64 + dx) as usize) as f64;
                    let v = b.get(c, (q.1 as i64 + dy) as usize, (q.0 as i64 + dx) as usize) as f64;
                    sum += (u - v).powi(2);
                }
            }
        }
        assert!((patch_distance(&a, &b, p, q, 1) - sum / 9.0).abs() < 1e-10);

        let pa = PixelMajor::from(&a);
        let pb = PixelMajor::from(&b);
        assert_eq!(patch_distance_pm(&pa, &pb, (0, 15), (15, 0), 2), patch_distance(&a, &b, (0, 15), (15, 0), 2));
    }

    #[test]
    fn init_is_seeded_and_in_bounds() {
        let f1 = nnf_init_random((20, 13), (7, 31), 1, 42);
        let f2 = nnf_init_random((20, 13), (7, 31), 1, 42);
        assert_eq!(f1, f2);
        assert_ne!(f1.offsets(), nnf_init_random((20, 13), (7, 31), 1, 43).offsets());
        for seed in 0..1000 {
            let f = nnf_init_random((5, 4), (3, 6), 1, seed);
            assert!((0..20).all(|i| f.in_target(f.target_of(i))));
        }
        assert_eq!(nnf_init_random((1, 1), (1, 1), 1, 9).offsets(), &[(0, 0)]);
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let a = normalize_features(&random_map(4, 12, 10, 3));
        let id = NNField::identity((12, 10), 1);
        let out = nnf_iterate(&id, &a, &a, 3).unwrap();
        assert_eq!(out.offsets(), id.offsets());
        assert!(out.distances().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn recovers_translation_single_level() {
        let a = normalize_features(&random_map(8, 32, 32, 5));
        let b = shifted(&a, 5, 3, 6);
        let f = nnf_init_random((32, 32), (32, 32), 1, 7);
        let out = nnf_iterate(&f, &a, &b, 5).unwrap();
        let (mut hits, mut total) = (0, 0);
        for y in 1..(32 - 3 - 1) {
            for x in 1..(32 - 5 - 1) {
                total += 1;
                hits += usize::from(out.offset(x, y) == (5, 3));
            }
        }
        assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn distances_are_monotone_and_consistent() {
        let a = normalize_features(&random_map(8, 20, 20, 11));
        let b = normalize_features(&random_map(8, 20, 20, 12));
        let mut f = nnf_init_random((20, 20), (20, 20), 1, 3);
        f.evaluate(&a, &b).unwrap();
        let mut prev = f.distances().to_vec();
        for _ in 0..4 {
            f = nnf_iterate(&f, &a, &b, 1).unwrap();
            for (d, p) in f.distances().iter().zip(&prev) {
                assert!(d <= p);
            }
            prev = f.distances().to_vec();
        }
        let mut re = f.clone();
        re.evaluate(&a, &b).unwrap();
        for (x, y) in re.distances().iter().zip(f.distances()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_to_exhaustive_oracle_shrinks() {
        let a = normalize_features(&random_map(8, 32, 32, 21));
        let b = normalize_features(&random_map(8, 32, 32, 22));
        let f = nnf_init_random((32, 32), (32, 32), 1, 23);
        let oracle = brute_force(&a, &b, 1);
        let oracle_mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        let mut prev = f64::INFINITY;
        for iterations in [1, 5, 20] {
            let out = nnf_iterate(&f, &a, &b, iterations).unwrap();
            for (d, o) in out.distances().iter().zip(&oracle) {
                assert!(d >= o);
            }
            let ratio = out.mean_distance() / oracle_mean;
            assert!(ratio < prev, "{iterations}: {ratio}");
            prev = ratio;
        }
        assert!(prev < 1.15, "{prev}");
    }

    #[test]
    fn upsample_cases() {
        let id = NNField::identity((4, 3), 1);
        let up = nnf_upsample(&id, (8, 6), (8, 6));
        assert_eq!(up.offsets(), NNField::identity((8, 6), 1).offsets());

        let c = NNField::from_offsets((6, 6), (10, 10), vec![(2, 1); 36], 1).unwrap();
        let up = nnf_upsample(&c, (12, 12), (20, 20));
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(up.offset(x, y), (4, 2));
            }
        }
        let edge = NNField::from_offsets((4, 4), (4, 4), (0..16).map(|i| (3 - (i % 4) as i32, 0)).collect(), 1).unwrap();
        let up = nnf_upsample(&edge, (8, 8), (8, 8));
        assert!((0..64).all(|i| up.in_target(up.target_of(i))));
    }

    #[test]
    fn reconstruct_cases() {
        let r = LabImage::new(
            4,
            4,
            (0..16).map(|v| v as f64 * 5.0).collect(),
            (0..16).map(|v| v as f64 - 8.0).collect(),
            (0..16).map(|v| 2.0 * v as f64).collect(),
        )
        .unwrap();
        let id = NNField::identity((4, 4), 2);
        assert_eq!(reconstruct(&r, &id, 2).unwrap(), r);

        let mut offsets = vec![(0, 0); 16];
        offsets[0] = (1, 0);
        offsets[1] = (-1, 0);
        let swap = NNField::from_offsets((4, 4), (4, 4), offsets, 0).unwrap();
        let out = reconstruct(&r, &swap, 0).unwrap();
        assert_eq!(out.pixel(0, 0), r.pixel(1, 0));
        assert_eq!(out.pixel(1, 0), r.pixel(0, 0));
        assert_eq!(out.pixel(2, 3), r.pixel(2, 3));

        let flat = LabImage::new(4, 4, vec![40.0; 16], vec![7.0; 16], vec![-3.0; 16]).unwrap();
        let rnd = nnf_init_random((6, 5), (4, 4), 1, 8);
        let out = reconstruct(&flat, &rnd, 1).unwrap();
        assert!(out.l().iter().all(|&v| (v - 40.0).abs() < 1e-12));
        assert!(out.a().iter().all(|&v| (v - 7.0).abs() < 1e-12));

        assert!(reconstruct(&flat, &NNField::identity((3, 3), 1), 1).is_err());
    }

    #[test]
    fn dump_format() {
        let f = NNField::identity((2, 1), 1);
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "nnf src 2 1 tgt 2 1 radius 1 seed 0");
        assert_eq!(lines[1], "0 0 inf");
        assert_eq!(lines.len(), 3);
    }
}
