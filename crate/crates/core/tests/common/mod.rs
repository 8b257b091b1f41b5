//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcolor::featnet::{random_network, RandomNetSpec};
use refcolor::imgcore::{self, GrayImage, Image, RgbImage};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_refcolor")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn refcolor")
}

/// Sum of a few random plane waves, scaled into `[0.1, 0.9]`.
pub fn smooth_texture(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| {
            [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..6.3),
                rng.random_range(0.5..1.0),
            ]
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w[3]).sum();
    GrayImage::from_fn(w, h, |x, y| {
        let s: f64 = waves
            .iter()
            .map(|[fx, fy, ph, amp]| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum();
        0.5 + 0.4 * s / total
    })
    .unwrap()
}

/// Elliptic "cross-section" whose shape varies with `k`, on a dark
/// background, with texture inside.
fn section_value(x: usize, y: usize, n: usize, k: usize, tex: &GrayImage) -> f64 {
    let c = (n as f64 - 1.0) / 2.0;
    let rx = 0.42 * n as f64 - k as f64 * 0.6;
    let ry = 0.36 * n as f64 + k as f64 * 0.4;
    let d = ((x as f64 - c) / rx).powi(2) + ((y as f64 - c) / ry).powi(2);
    if d > 1.0 {
        0.05
    } else if d > 0.7 {
        0.85
    } else {
        0.25 + 0.5 * tex.get(x, y)
    }
}

pub fn gray_slice(n: usize, k: usize) -> GrayImage {
    let tex = smooth_texture(n, n, 1000 + k as u64);
    GrayImage::from_fn(n, n, |x, y| (section_value(x, y, n, k, &tex) * 255.0).round() / 255.0).unwrap()
}

pub fn color_reference(n: usize, k: usize) -> RgbImage {
    let tex = smooth_texture(n, n, 2000 + k as u64);
    let tint = [[220.0, 120.0, 100.0], [200.0, 150.0, 90.0], [180.0, 110.0, 130.0], [230.0, 170.0, 140.0]][k % 4];
    RgbImage::from_fn(n, n, |x, y| {
        let v = section_value(x, y, n, 2 * k, &tex);
        tint.map(|t: f64| (t * v).round().clamp(0.0, 255.0) as u8)
    })
    .unwrap()
}

pub struct Fixture {
    pub weights: PathBuf,
    pub references: PathBuf,
    pub targets: PathBuf,
}

/// Tiny random network, `slices` gray targets and `refs` color references.
pub fn write_fixture(dir: &Path, n: usize, slices: usize, refs: usize) -> Fixture {
    let weights = dir.join("tiny.vgwc");
    random_network(&RandomNetSpec {
        seed: 7,
        ..Default::default()
    })
    .save(&weights)
    .unwrap();
    let targets = dir.join("targets");
    let references = dir.join("references");
    std::fs::create_dir_all(&targets).unwrap();
    std::fs::create_dir_all(&references).unwrap();
    for k in 0..slices {
        imgcore::save_image(&Image::Gray(gray_slice(n, k)), targets.join(format!("slice_{k:03}.png"))).unwrap();
    }
    for k in 0..refs {
        imgcore::save_rgb(&color_reference(n, k), references.join(format!("ref_{k:02}.png"))).unwrap();
    }
    Fixture {
        weights,
        references,
        targets,
    }
}

pub const RED: [u8; 3] = [230, 40, 40];
pub const BLUE: [u8; 3] = [40, 80, 250];

/// Color checkerboard and the gray image with the same per-pixel lightness.
pub fn checkerboard_pair(n: usize, cell: usize) -> (GrayImage, RgbImage) {
    let color = RgbImage::from_fn(n, n, |x, y| if (x / cell + y / cell) % 2 == 0 { RED } else { BLUE }).unwrap();
    let lab = imgcore::srgb_to_lab(&color);
    let gray = GrayImage::from_fn(n, n, |x, y| {
        let l = lab.l()[y * n + x];
        let v = imgcore::lab_pixel_to_srgb([l, 0.0, 0.0])[0];
        (v * 255.0).round() / 255.0
    })
    .unwrap();
    (gray, color)
}
