//! Reference recommendation by cosine similarity of fc6 descriptors.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::featnet::{self, Descriptor, FeatError, WeightContainer, DESCRIPTOR_LEN};
use crate::imgcore::{self, Image};
use crate::par;

pub const MAGIC: &[u8; 4] = b"VPIX";
pub const VERSION: u32 = 1;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty reference corpus")]
    EmptyCorpus,
    #[error("duplicate path in corpus: {0}")]
    DuplicatePath(PathBuf),
    #[error("failed to embed {} reference(s): {}", .0.len(), format_failures(.0))]
    Load(Vec<(PathBuf, String)>),
    #[error("zero vector has no cosine similarity")]
    ZeroVector,
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("fingerprint mismatch: index {index:016x}, query {query:016x}")]
    FingerprintMismatch { index: u64, query: u64 },
    #[error("bad magic: not a descriptor index")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated index: {0}")]
    Truncated(String),
    #[error("trailing bytes after index")]
    TrailingBytes,
    #[error("path not storable in index: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Feature(#[from] FeatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_failures(f: &[(PathBuf, String)]) -> String {
    f.iter()
        .map(|(p, e)| format!("{}: {e}", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// `a·b / (‖a‖‖b‖)`, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RetrievalError::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Descriptor of an image's luminance. Targets and references are embedded
/// the same way regardless of their color type.
pub fn image_descriptor(img: &Image, w: &WeightContainer) -> std::result::Result<Descriptor, FeatError> {
    let l = imgcore::luminance(&img.to_lab());
    featnet::extract_descriptor(&l, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub descriptor: Descriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Match {
    pub path: PathBuf,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    fingerprint: u64,
    entries: Vec<IndexEntry>,
}

impl DescriptorIndex {
    /// Rejects duplicate paths and descriptors from other networks.
    pub fn new(fingerprint: u64, entries: Vec<IndexEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_path()) {
                return Err(RetrievalError::DuplicatePath(e.path.clone()));
            }
            if e.descriptor.fingerprint() != fingerprint {
                return Err(RetrievalError::FingerprintMismatch {
                    index: fingerprint,
                    query: e.descriptor.fingerprint(),
                });
            }
        }
        Ok(Self { fingerprint, entries })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top `min(k, len)` entries by descending score; ties keep index order.
    pub fn query(&self, target: &Descriptor, k: usize) -> Result<Vec<Match>> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if target.fingerprint() != self.fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: self.fingerprint,
                query: target.fingerprint(),
            });
        }
        let scores = par::map_slice(&self.entries, |e| cosine_similarity(e.descriptor.values(), target.values()));
        let mut ranked = scores
            .into_iter()
            .zip(&self.entries)
            .map(|(s, e)| {
                s.map(|score| Match {
                    path: e.path.clone(),
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.entries.len() * (4 * DESCRIPTOR_LEN + 64));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| RetrievalError::InvalidPath("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let p = e
                .path
                .to_str()
                .ok_or_else(|| RetrievalError::InvalidPath(e.path.display().to_string()))?;
            let len = u16::try_from(p.len()).map_err(|_| RetrievalError::InvalidPath(p.to_string()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(p.as_bytes());
            for v in e.descriptor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(RetrievalError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(RetrievalError::UnsupportedVersion(version));
        }
        let fingerprint = u64::from_le_bytes(r.take(8, "fingerprint")?.try_into().expect("8 bytes"));
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::new();
        for i in 0..count {
            let len = u16::from_le_bytes(r.take(2, "path length")?.try_into().expect("2 bytes")) as usize;
            let path = std::str::from_utf8(r.take(len, "path")?)
                .map_err(|_| RetrievalError::InvalidPath(format!("entry {i} is not UTF-8")))?;
            let values = r
                .take(4 * DESCRIPTOR_LEN, "descriptor")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(IndexEntry {
                path: PathBuf::from(path),
                descriptor: Descriptor::from_normalized(values, fingerprint),
            });
        }
        if r.pos != bytes.len() {
            return Err(RetrievalError::TrailingBytes);
        }
        Self::new(fingerprint, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(RetrievalError::Truncated(format!("{what} at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn load_index(path: impl AsRef<Path>) -> Result<DescriptorIndex> {
    DescriptorIndex::from_bytes(&fs::read(path)?)
}

/// Embeds every reference in input order. Load and feature failures are
/// collected and reported together.
pub fn build_index(paths: &[PathBuf], w: &WeightContainer) -> Result<DescriptorIndex> {
    if paths.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = paths.iter().find(|p| !seen.insert(p.as_path())) {
        return Err(RetrievalError::DuplicatePath(dup.clone()));
    }
    let results = par::map_slice(paths, |p| -> std::result::Result<Descriptor, String> {
        let img = imgcore::load_image(p).map_err(|e| e.to_string())?;
        image_descriptor(&img, w).map_err(|e| e.to_string())
    });
    let mut entries = Vec::with_capacity(paths.len());
    let mut failures = Vec::new();
    for (p, r) in paths.iter().zip(results) {
        match r {
            Ok(descriptor) => entries.push(IndexEntry {
                path: p.clone(),
                descriptor,
            }),
            Err(e) => failures.push((p.clone(), e)),
        }
    }
    if !failures.is_empty() {
        return Err(RetrievalError::Load(failures));
    }
    DescriptorIndex::new(w.fingerprint(), entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featnet::{random_network, RandomNetSpec};
    use crate::imgcore::RgbImage;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(seed: u64, fp: u64) -> Descriptor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..DESCRIPTOR_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        Descriptor::from_raw(&v, fp).unwrap()
    }

    fn index_of(n: u64, fp: u64) -> DescriptorIndex {
        let entries = (0..n)
            .map(|i| IndexEntry {
                path: PathBuf::from(format!("ref_{i:03}.png")),
                descriptor: unit(i, fp),
            })
            .collect();
        DescriptorIndex::new(fp, entries).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[2.0, -1.0], &[2.0, -1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(RetrievalError::ZeroVector)));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(RetrievalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn query_ranks_self_first_and_truncates() {
        let idx = index_of(10, 7);
        let hits = idx.query(&idx.entries()[4].descriptor, DEFAULT_K).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].path, PathBuf::from("ref_004.png"));
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(idx.query(&unit(99, 7), 50).unwrap().len(), 10);
        assert!(matches!(idx.query(&unit(99, 7), 0), Err(RetrievalError::InvalidK)));
        assert!(matches!(idx.query(&unit(99, 8), 1), Err(RetrievalError::FingerprintMismatch { .. })));
    }

    #[test]
    fn ties_keep_index_order() {
        let d = unit(1, 3);
        let entries = (0..4)
            .map(|i| IndexEntry {
                path: PathBuf::from(format!("{i}")),
                descriptor: d.clone(),
            })
            .collect();
        let idx = DescriptorIndex::new(3, entries).unwrap();
        let hits = idx.query(&d, 4).unwrap();
        let order: Vec<_> = hits.iter().map(|m| m.path.to_str().unwrap().to_string()).collect();
        assert_eq!(order, ["0", "1", "2", "3"]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let e = IndexEntry {
            path: "a.png".into(),
            descriptor: unit(0, 1),
        };
        assert!(matches!(DescriptorIndex::new(1, vec![e.clone(), e]), Err(RetrievalError::DuplicatePath(_))));
        let w = random_network(&RandomNetSpec::default());
        assert!(matches!(build_index(&[], &w), Err(RetrievalError::EmptyCorpus)));
        let p = PathBuf::from("x.png");
        assert!(matches!(build_index(&[p.clone(), p], &w), Err(RetrievalError::DuplicatePath(_))));
    }

    #[test]
    fn disk_round_trip_and_corruption() {
        let idx = index_of(5, 0xdead_beef);
        let bytes = idx.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20 + 5 * (2 + 11 + 4 * DESCRIPTOR_LEN));
        assert_eq!(DescriptorIndex::from_bytes(&bytes).unwrap(), idx);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DescriptorIndex::from_bytes(&bad), Err(RetrievalError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(DescriptorIndex::from_bytes(&v2), Err(RetrievalError::UnsupportedVersion(2))));
        assert!(matches!(DescriptorIndex::from_bytes(&bytes[..bytes.len() - 1]), Err(RetrievalError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(DescriptorIndex::from_bytes(&extra), Err(RetrievalError::TrailingBytes)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.vpix");
        idx.save(&path).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
    }

    #[test]
    fn build_index_embeds_and_reports_failures() {
        let dir = tempfile::tempdir().unwrap();
        let w = random_network(&RandomNetSpec::default());
        let mut paths = Vec::new();
        for i in 0..3u8 {
            let img = RgbImage::from_fn(20, 16, |x, y| [x as u8 * 10, y as u8 * (i + 3), 40 * i]).unwrap();
            let p = dir.path().join(format!("r{i}.png"));
            imgcore::save_rgb(&img, &p).unwrap();
            paths.push(p);
        }
        let idx = build_index(&paths, &w).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.fingerprint(), w.fingerprint());
        for (e, p) in idx.entries().iter().zip(&paths) {
            assert_eq!(&e.path, p);
            assert!((e.descriptor.norm() - 1.0).abs() < 1e-6);
        }
        let missing = dir.path().join("missing.png");
        match build_index(&[paths[0].clone(), missing.clone()], &w) {
            Err(RetrievalError::Load(f)) => {
                assert_eq!(f.len(), 1);
                assert_eq!(f[0].0, missing);
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn cosine_bounded_and_symmetric(
            a in proptest::collection::vec(-10.0f32..10.0, 8),
            b in proptest::collection::vec(-10.0f32..10.0, 8),
        ) {
            prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
            let s = cosine_similarity(&a, &b).unwrap();
            prop_assert!(s.abs() <= 1.0 + 1e-9);
            prop_assert_eq!(s, cosine_similarity(&b, &a).unwrap());
        }

        #[test]
        fn ranking_is_scale_invariant(scale in 0.01f32..100.0, which in 0usize..6) {
            let idx = index_of(6, 2);
            let target = unit(42, 2);
            let before: Vec<_> = idx.query(&target, 6).unwrap().into_iter().map(|m| m.path).collect();
            let mut entries = idx.entries().to_vec();
            let scaled: Vec<f32> = entries[which].descriptor.values().iter().map(|v| v * scale).collect();
            entries[which].descriptor = Descriptor::from_raw(&scaled, 2).unwrap();
            let after: Vec<_> = DescriptorIndex::new(2, entries).unwrap()
                .query(&target, 6).unwrap().into_iter().map(|m| m.path).collect();
            prop_assert_eq!(before, after);
        }
    }
}
