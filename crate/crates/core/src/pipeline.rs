//! Declarative configuration and the end-to-end commands behind the CLI.
//!
//! Slice stacks are ordered by filename, compared bytewise. Numbered slices
//! must be zero-padded (`slice_007.png`) or volume assembly will interleave
//! them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analogy::{self, AnalogyError, AnalogyParams, LevelSchedule};
use crate::featnet::{self, FeatError, WeightContainer};
use crate::filters::{self, FilterChoice, FilterError};
use crate::imgcore::{self, GrayImage, Image, ImageError, LabImage, RgbImage};
use crate::par;
use crate::retrieval::{self, Match, RetrievalError, DEFAULT_K};
use crate::volren::{self, Axis, Camera, RenderParams, VolumeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config or parameters. Exit code 1.
    Config,
    /// Missing, unreadable or inconsistent inputs. Exit code 2.
    Data,
    /// A numeric routine failed to produce a finite result. Exit code 3.
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub kind: ErrorKind,
    pub stage: String,
    pub message: String,
}

impl PipelineError {
    pub fn new(kind: ErrorKind, stage: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            kind,
            stage: stage.into(),
            message: message.to_string(),
        }
    }

    fn config(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Config, stage, message)
    }

    fn data(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Data, stage, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait Classify: fmt::Display {
    fn kind(&self) -> ErrorKind;
}

impl Classify for ImageError {
    fn kind(&self) -> ErrorKind {
        match self {
            ImageError::NonFinite { .. } => ErrorKind::Numeric,
            ImageError::InvalidGamma { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for FeatError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for AnalogyError {
    fn kind(&self) -> ErrorKind {
        match self {
            AnalogyError::InvalidParams(_) | AnalogyError::MissingLayer(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for FilterError {
    fn kind(&self) -> ErrorKind {
        match self {
            FilterError::NonConvergence { .. } => ErrorKind::Numeric,
            FilterError::InvalidParams(_) => ErrorKind::Config,
            FilterError::Image(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for RetrievalError {
    fn kind(&self) -> ErrorKind {
        match self {
            RetrievalError::InvalidK => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for VolumeError {
    fn kind(&self) -> ErrorKind {
        match self {
            VolumeError::InvalidCamera(_) | VolumeError::InvalidParams(_) | VolumeError::IndexOutOfRange { .. } => {
                ErrorKind::Config
            }
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for serde_json::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

trait Stage<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T, E: Classify> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| PipelineError::new(e.kind(), stage, &e))
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackSource {
    /// Colorized slices written by `colorize-stack`.
    #[default]
    Colorized,
    /// The raw gray target stack.
    Gray,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaSource {
    /// Lightness of the rendered stack.
    #[default]
    Colorized,
    /// Luminance of the original gray targets.
    Gray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub axis: Axis,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub source: StackSource,
    pub alpha: AlphaSource,
    /// Physical voxel size (x, y, z).
    pub spacing: [f64; 3],
    pub params: RenderParams,
    /// Empty: one orthographic view down the slice axis.
    pub cameras: Vec<Camera>,
    pub default_view: [usize; 2],
    /// `None`: the middle section along each axis.
    pub sections: Option<Vec<Section>>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            source: StackSource::Colorized,
            alpha: AlphaSource::Colorized,
            spacing: [1.0; 3],
            params: RenderParams::default(),
            cameras: Vec::new(),
            default_view: [256, 256],
            sections: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub weights: Option<PathBuf>,
    /// Directory of color reference images.
    pub references: Option<PathBuf>,
    /// Directory of gray target slices.
    pub targets: Option<PathBuf>,
    /// Descriptor index; defaults to `<out_dir>/index.vpix`.
    pub index: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub filter: FilterChoice,
    pub gamma: bool,
    pub analogy_levels: Vec<LevelSchedule>,
    pub k: usize,
    /// Use this reference for every slice instead of retrieval.
    pub fixed_reference: Option<PathBuf>,
    /// Also write the warped reference `T'` next to each output.
    pub dump_warped: bool,
    pub render: RenderConfig,
    /// Required; no default so that every run is reproducible.
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: None,
            references: None,
            targets: None,
            index: None,
            out_dir: PathBuf::from("out"),
            filter: FilterChoice::default(),
            gamma: true,
            analogy_levels: AnalogyParams::default().levels,
            k: DEFAULT_K,
            fixed_reference: None,
            dump_warped: false,
            render: RenderConfig::default(),
            seed: None,
        }
    }
}

/// Command-line overrides; `None` leaves the config value untouched.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub weights: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub filter: Option<String>,
    pub no_gamma: bool,
    pub reference: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::config("config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        macro_rules! set {
            ($field:ident, $value:expr) => {
                if let Some(v) = $value.clone() {
                    self.$field = v.into();
                }
            };
        }
        set!(weights, o.weights.clone().map(Some::<PathBuf>));
        set!(references, o.references.clone().map(Some::<PathBuf>));
        set!(targets, o.targets.clone().map(Some::<PathBuf>));
        set!(index, o.index.clone().map(Some::<PathBuf>));
        set!(out_dir, o.out_dir);
        set!(seed, o.seed.map(Some));
        set!(k, o.k);
        set!(fixed_reference, o.reference.clone().map(Some::<PathBuf>));
        if let Some(name) = &o.filter {
            self.filter = FilterChoice::from_name(name)
                .ok_or_else(|| PipelineError::config("config", format!("unknown filter {name:?} (fgs, wls, gf, dt)")))?;
        }
        if o.no_gamma {
            self.gamma = false;
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| PipelineError::config("config", "seed is required (set \"seed\" or pass --seed)"))
    }

    pub fn analogy(&self) -> Result<AnalogyParams> {
        let p = AnalogyParams {
            levels: self.analogy_levels.clone(),
            seed: self.seed()?,
        };
        p.validate().stage("config")?;
        Ok(p)
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.out_dir.join("index.vpix"))
    }

    pub fn colorized_dir(&self) -> PathBuf {
        self.out_dir.join("colorized")
    }

    fn require(&self, value: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let p = value
            .clone()
            .ok_or_else(|| PipelineError::config("config", format!("{name} is not set")))?;
        require_exists(&p, name)?;
        Ok(p)
    }

    fn weights_path(&self) -> Result<PathBuf> {
        self.require(&self.weights, "weights")
    }
}

fn require_exists(p: &Path, name: &str) -> Result<()> {
    if !p.exists() {
        return Err(PipelineError::data("inputs", format!("{name} {} does not exist", p.display())));
    }
    Ok(())
}

fn load_weights(path: &Path) -> Result<WeightContainer> {
    featnet::load_weights(path).stage("load weights")
}

/// PNG files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .stage("list images")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if out.is_empty() {
        return Err(PipelineError::data("list images", format!("no PNG images in {}", dir.display())));
    }
    Ok(out)
}

fn write_report<T: Serialize>(cfg: &PipelineConfig, name: &str, report: &T) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).stage("write report")?;
    let path = cfg.out_dir.join(name);
    let mut text = serde_json::to_string_pretty(report).stage("write report")?;
    text.push('\n');
    fs::write(&path, text).stage("write report")?;
    Ok(path)
}

fn file_name(p: &Path) -> PathBuf {
    PathBuf::from(p.file_name().unwrap_or_default())
}

// ---------------------------------------------------------------------------
// Single-image colorization

/// Output of [`colorize_pair`].
pub struct Colorized {
    pub result: LabImage,
    /// The reference warped onto the target grid (`T'`).
    pub warped: LabImage,
}

/// Gray view of an image with chroma exactly zero.
pub fn gray_lab(img: &Image) -> LabImage {
    match img {
        Image::Gray(g) => LabImage::from_gray_srgb(g),
        Image::Rgb(_) => {
            let lab = img.to_lab();
            let n = lab.l().len();
            let (w, h) = lab.dims();
            LabImage::new(w, h, lab.l().to_vec(), vec![0.0; n], vec![0.0; n]).expect("lightness already valid")
        }
    }
}

/// Matches `target` against `reference` in feature space, warps the
/// reference colors and combines them with the target through the filter.
pub fn colorize_pair(target: &Image, reference: &Image, w: &WeightContainer, cfg: &PipelineConfig) -> Result<Colorized> {
    let params = cfg.analogy()?;
    let t_lab = gray_lab(target);
    let r_lab = reference.to_lab();
    let (pyr_t, pyr_r) = par::join(
        || featnet::extract_pyramid(&imgcore::luminance(&t_lab), w),
        || featnet::extract_pyramid(&imgcore::luminance(&r_lab), w),
    );
    let (pyr_t, pyr_r) = (pyr_t.stage("features")?, pyr_r.stage("features")?);
    let (_, phi) = analogy::match_bidirectional(&pyr_t, &pyr_r, &params).stage("matching")?;
    let phi = phi.crop(t_lab.dims(), r_lab.dims());
    let warped = analogy::reconstruct(&r_lab, &phi, params.finest_radius()).stage("reconstruct")?;
    let result = if cfg.gamma {
        filters::colorize_with_gamma(&t_lab, &warped, &cfg.filter)
    } else {
        filters::colorize(&t_lab, &warped, &cfg.filter)
    }
    .stage("filter")?;
    Ok(Colorized { result, warped })
}

fn save_lab(img: &LabImage, path: &Path) -> Result<()> {
    imgcore::save_rgb(&imgcore::lab_to_srgb(img), path).stage("save")
}

fn warped_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}_warped.png"))
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Clone, Debug, Serialize)]
pub struct IndexReport {
    pub index: PathBuf,
    pub fingerprint: String,
    pub entries: Vec<PathBuf>,
}

pub fn cmd_build_index(cfg: &PipelineConfig) -> Result<IndexReport> {
    let weights = cfg.weights_path()?;
    let refs = cfg.require(&cfg.references, "references")?;
    let paths = list_images(&refs)?;
    let w = load_weights(&weights)?;
    let index = retrieval::build_index(&paths, &w).stage("build index")?;
    for (i, e) in index.entries().iter().enumerate() {
        eprintln!("[{}/{}] {}", i + 1, index.len(), e.path.display());
    }
    let out = cfg.index_path();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).stage("save index")?;
    }
    index.save(&out).stage("save index")?;
    let report = IndexReport {
        index: out,
        fingerprint: format!("{:016x}", index.fingerprint()),
        entries: paths,
    };
    write_report(cfg, "build_index.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RecommendReport {
    pub target: PathBuf,
    pub k: usize,
    pub matches: Vec<Match>,
}

pub fn cmd_recommend(cfg: &PipelineConfig, target: &Path) -> Result<RecommendReport> {
    let weights = cfg.weights_path()?;
    let index_path = cfg.index_path();
    require_exists(&index_path, "index")?;
    require_exists(target, "target")?;
    if cfg.k == 0 {
        return Err(PipelineError::config("config", "k must be at least 1"));
    }
    let w = load_weights(&weights)?;
    let index = retrieval::load_index(&index_path).stage("load index")?;
    let img = imgcore::load_image(target).stage("load target")?;
    let d = retrieval::image_descriptor(&img, &w).stage("descriptor")?;
    let matches = index.query(&d, cfg.k).stage("query")?;
    let report = RecommendReport {
        target: target.to_path_buf(),
        k: cfg.k,
        matches,
    };
    write_report(cfg, "recommend.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct ColorizeReport {
    pub target: PathBuf,
    pub reference: PathBuf,
    pub output: PathBuf,
    pub filter: FilterChoice,
    pub gamma: bool,
    pub seed: u64,
}

/// Colorizes one target with an explicit reference (`--reference`) and
/// writes `<out_dir>/<target file name>`.
pub fn cmd_colorize(cfg: &PipelineConfig, target: &Path) -> Result<ColorizeReport> {
    let seed = cfg.seed()?;
    cfg.analogy()?;
    let weights = cfg.weights_path()?;
    let reference = cfg.require(&cfg.fixed_reference, "reference")?;
    require_exists(target, "target")?;
    let w = load_weights(&weights)?;
    let t = imgcore::load_image(target).stage("load target")?;
    let r = imgcore::load_image(&reference).stage("load reference")?;
    let c = colorize_pair(&t, &r, &w, cfg)?;
    fs::create_dir_all(&cfg.out_dir).stage("save")?;
    let output = cfg.out_dir.join(file_name(target));
    save_lab(&c.result, &output)?;
    if cfg.dump_warped {
        save_lab(&c.warped, &warped_path(&output))?;
    }
    let report = ColorizeReport {
        target: target.to_path_buf(),
        reference,
        output,
        filter: cfg.filter,
        gamma: cfg.gamma,
        seed,
    };
    write_report(cfg, "colorize.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SliceReport {
    pub slice: PathBuf,
    pub reference: Option<PathBuf>,
    /// Retrieval score; absent for a fixed reference.
    pub score: Option<f64>,
    pub output: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StackReport {
    pub seed: u64,
    pub filter: FilterChoice,
    pub gamma: bool,
    pub slices: Vec<SliceReport>,
}

/// Colorizes every target slice. Failed slices are reported and the rest
/// are still written; any failure makes the command fail afterwards.
pub fn cmd_colorize_stack(cfg: &PipelineConfig) -> Result<StackReport> {
    let seed = cfg.seed()?;
    cfg.analogy()?;
    let weights = cfg.weights_path()?;
    let targets = cfg.require(&cfg.targets, "targets")?;
    let slices = list_images(&targets)?;
    let fixed = match &cfg.fixed_reference {
        Some(r) => {
            require_exists(r, "reference")?;
            Some(r.clone())
        }
        None => {
            require_exists(&cfg.index_path(), "index")?;
            None
        }
    };
    let w = load_weights(&weights)?;
    let index = match fixed {
        Some(_) => None,
        None => Some(retrieval::load_index(cfg.index_path()).stage("load index")?),
    };
    let out_dir = cfg.colorized_dir();
    fs::create_dir_all(&out_dir).stage("save")?;

    let run = |slice: &PathBuf| -> std::result::Result<(PathBuf, Option<f64>, PathBuf), (Option<PathBuf>, PipelineError)> {
        let t = imgcore::load_image(slice).stage("load target").map_err(|e| (None, e))?;
        let (reference, score) = match (&fixed, &index) {
            (Some(r), _) => (r.clone(), None),
            (None, Some(index)) => {
                let d = retrieval::image_descriptor(&t, &w).stage("descriptor").map_err(|e| (None, e))?;
                let best = index.query(&d, cfg.k).stage("query").map_err(|e| (None, e))?.remove(0);
                (best.path, Some(best.score))
            }
            (None, None) => unreachable!("index loaded when no fixed reference"),
        };
        let fail = |e| (Some(reference.clone()), e);
        let r = imgcore::load_image(&reference).stage("load reference").map_err(fail)?;
        let c = colorize_pair(&t, &r, &w, cfg).map_err(fail)?;
        let output = out_dir.join(file_name(slice));
        save_lab(&c.result, &output).map_err(fail)?;
        if cfg.dump_warped {
            save_lab(&c.warped, &warped_path(&output)).map_err(fail)?;
        }
        Ok((reference, score, output))
    };
    let results = par::map_slice(&slices, run);

    let mut failures = Vec::new();
    let reports: Vec<SliceReport> = slices
        .iter()
        .zip(results)
        .map(|(slice, r)| match r {
            Ok((reference, score, output)) => {
                eprintln!("{} <- {}", slice.display(), reference.display());
                SliceReport {
                    slice: slice.clone(),
                    reference: Some(reference),
                    score,
                    output: Some(output),
                    error: None,
                }
            }
            Err((reference, e)) => {
                eprintln!("{}: {e}", slice.display());
                failures.push(e.kind);
                SliceReport {
                    slice: slice.clone(),
                    reference,
                    score: None,
                    output: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let report = StackReport {
        seed,
        filter: cfg.filter,
        gamma: cfg.gamma,
        slices: reports,
    };
    write_report(cfg, "colorize_stack.json", &report)?;
    if !failures.is_empty() {
        let kind = if failures.contains(&ErrorKind::Numeric) {
            ErrorKind::Numeric
        } else {
            ErrorKind::Data
        };
        return Err(PipelineError::new(
            kind,
            "colorize-stack",
            format!("{} of {} slices failed", failures.len(), slices.len()),
        ));
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RenderReport {
    pub stack: Vec<PathBuf>,
    pub dims: [usize; 3],
    pub views: Vec<PathBuf>,
    pub sections: Vec<PathBuf>,
}

fn to_rgb(img: Image) -> RgbImage {
    match img {
        Image::Rgb(i) => i,
        Image::Gray(g) => {
            let q: Vec<u8> = g.data().iter().map(|v| imgcore::quantize(*v)).collect();
            RgbImage::from_fn(g.width(), g.height(), |x, y| [q[y * g.width() + x]; 3]).expect("dims from a valid image")
        }
    }
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::Transverse => "transverse",
        Axis::Coronal => "coronal",
        Axis::Sagittal => "sagittal",
    }
}

/// Assembles the colorized (or gray) stack, renders each camera and writes
/// the requested orthogonal sections under `<out_dir>/render`.
pub fn cmd_render(cfg: &PipelineConfig) -> Result<RenderReport> {
    let rc = &cfg.render;
    rc.params.validate().stage("config")?;
    let stack_dir = match rc.source {
        StackSource::Colorized => cfg.colorized_dir(),
        StackSource::Gray => cfg.require(&cfg.targets, "targets")?,
    };
    require_exists(&stack_dir, "stack")?;
    let stack = list_images(&stack_dir)?;
    let gray_paths = match rc.alpha {
        AlphaSource::Colorized => None,
        AlphaSource::Gray => {
            let dir = cfg.require(&cfg.targets, "targets")?;
            Some(list_images(&dir)?)
        }
    };
    let slices = par::map_slice(&stack, |p| imgcore::load_image(p).map(to_rgb))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()
        .stage("load stack")?;
    let mut volume = volren::assemble_volume(&slices, rc.spacing).stage("assemble")?;
    if let Some(paths) = gray_paths {
        let planes = par::map_slice(&paths, |p| imgcore::load_image(p).map(|i| imgcore::luminance(&gray_lab(&i))))
            .into_iter()
            .collect::<std::result::Result<Vec<GrayImage>, _>>()
            .stage("load alpha")?;
        volume = volume.with_alpha(&planes).stage("assemble")?;
    }
    let (nx, ny, nz) = volume.dims();
    let cameras = if rc.cameras.is_empty() {
        vec![Camera::fit_transverse(&volume, rc.default_view[0], rc.default_view[1])]
    } else {
        rc.cameras.clone()
    };
    let sections = rc.sections.clone().unwrap_or_else(|| {
        vec![
            Section {
                axis: Axis::Transverse,
                index: nz / 2,
            },
            Section {
                axis: Axis::Coronal,
                index: ny / 2,
            },
            Section {
                axis: Axis::Sagittal,
                index: nx / 2,
            },
        ]
    });
    let out = cfg.out_dir.join("render");
    fs::create_dir_all(&out).stage("save")?;
    let views = par::map_slice(&cameras, |cam| volren::raycast(&volume, cam, &rc.params))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()
        .stage("render")?;
    let mut view_paths = Vec::new();
    for (i, img) in views.iter().enumerate() {
        let p = out.join(format!("view_{i:02}.png"));
        imgcore::save_rgb(img, &p).stage("save")?;
        view_paths.push(p);
    }
    let mut section_paths = Vec::new();
    for s in &sections {
        let img = volren::extract_section(&volume, s.axis, s.index).stage("section")?;
        let p = out.join(format!("{}_{:04}.png", axis_name(s.axis), s.index));
        imgcore::save_rgb(&img, &p).stage("save")?;
        section_paths.push(p);
    }
    let report = RenderReport {
        stack,
        dims: [nx, ny, nz],
        views: view_paths,
        sections: section_paths,
    };
    write_report(cfg, "render.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let d = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&d.to_json()).unwrap(), d);
        assert_eq!(d.k, 3);
        assert!(d.gamma);
        assert_eq!(d.filter, FilterChoice::Fgs(filters::FgsParams::default()));
    }

    #[test]
    fn seed_is_mandatory() {
        let mut c = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(c.seed().unwrap_err().kind, ErrorKind::Config);
        c.apply(&Overrides {
            seed: Some(9),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.seed().unwrap(), 9);
        assert_eq!(c.analogy().unwrap().seed, 9);
    }

    #[test]
    fn overrides_and_unknown_fields() {
        let mut c = PipelineConfig::from_json(r#"{"seed": 1, "filter": {"kind": "wls", "lambda": 0.5}}"#).unwrap();
        assert!(matches!(c.filter, filters::FilterChoice::Wls(p) if p.lambda == 0.5));
        c.apply(&Overrides {
            filter: Some("dt".into()),
            no_gamma: true,
            k: Some(5),
            out_dir: Some("x".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.filter.name(), "dt");
        assert!(!c.gamma);
        assert_eq!((c.k, c.index_path()), (5, PathBuf::from("x/index.vpix")));
        let bad = Overrides {
            filter: Some("median".into()),
            ..Default::default()
        };
        assert_eq!(c.apply(&bad).unwrap_err().kind, ErrorKind::Config);
        assert_eq!(PipelineConfig::from_json(r#"{"sed": 1}"#).unwrap_err().kind, ErrorKind::Config);
    }

    #[test]
    fn images_listed_by_file_name() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["s_010.png", "s_002.png", "notes.txt", "s_001.PNG"] {
            fs::write(dir.path().join(n), b"").unwrap();
        }
        let names: Vec<_> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["s_001.PNG", "s_002.png", "s_010.png"]);
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(list_images(empty.path()).unwrap_err().kind, ErrorKind::Data);
    }

    #[test]
    fn gray_lab_drops_chroma() {
        let rgb = RgbImage::filled(3, 2, [200, 30, 60]).unwrap();
        let g = gray_lab(&Image::Rgb(rgb.clone()));
        assert!(g.a().iter().chain(g.b()).all(|v| *v == 0.0));
        assert_eq!(g.l(), imgcore::srgb_to_lab(&rgb).l());
    }

    #[test]
    fn missing_inputs_fail_before_compute() {
        let c = PipelineConfig {
            seed: Some(1),
            weights: Some("/nonexistent/w.vgwc".into()),
            ..Default::default()
        };
        assert_eq!(cmd_build_index(&c).unwrap_err().kind, ErrorKind::Data);
        let unset = PipelineConfig {
            seed: Some(1),
            ..Default::default()
        };
        assert_eq!(cmd_colorize_stack(&unset).unwrap_err().kind, ErrorKind::Config);
    }
}
