//! Dataset preparation: seeded random crops of a directory of PGM/PPM images, split
//! into training and validation sets and described by a JSON manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PlanarImage;
use crate::pnm::{read_image, write_image};
use crate::real::Real;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Crop file, relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    /// Source file name and crop offset, for traceability.
    pub source: String,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub crop: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifestConfig {
    pub crop: usize,
    pub seed: u64,
    /// Number of sources assigned to the training split; `None` takes 80%.
    pub train_count: Option<usize>,
}

impl ManifestConfig {
    pub fn new(crop: usize, seed: u64) -> Self {
        Self {
            crop,
            seed,
            train_count: None,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut train = HashSet::new();
        let mut val = HashSet::new();
        for e in &self.entries {
            match e.split {
                Split::Train => train.insert(e.path.as_str()),
                Split::Val => val.insert(e.path.as_str()),
            };
        }
        if let Some(p) = train.intersection(&val).next() {
            return Err(Error::BadArgument(format!("{p} appears in both splits")));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn paths(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.path.as_str())
    }
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Source images of `dir`, sorted by file name.
pub fn list_sources(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && is_pnm(p));
    paths.sort();
    Ok(paths)
}

/// Crops every source in `src_dir` once, assigns splits, and writes the crops and
/// `manifest.json` to `out_dir`.
pub fn make_dataset(
    src_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    cfg: &ManifestConfig,
) -> Result<DatasetManifest> {
    if cfg.crop == 0 {
        return Err(Error::BadArgument("crop size must be positive".into()));
    }
    let sources = list_sources(&src_dir)?;
    if sources.is_empty() {
        return Err(Error::BadArgument(format!(
            "no PGM/PPM images in {}",
            src_dir.as_ref().display()
        )));
    }
    let train_count = cfg
        .train_count
        .unwrap_or_else(|| (sources.len() * 4).div_ceil(5));
    if train_count > sources.len() {
        return Err(Error::BadArgument(format!(
            "train count {train_count} exceeds {} sources",
            sources.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::Val; sources.len()];
    for &i in &order[..train_count] {
        split[i] = Split::Train;
    }

    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let img: PlanarImage<f32> = read_image(src)?;
        if img.height < cfg.crop || img.width < cfg.crop {
            return Err(Error::ImageTooSmall {
                width: img.width,
                height: img.height,
                crop: cfg.crop,
            });
        }
        let top = rng.random_range(0..=img.height - cfg.crop);
        let left = rng.random_range(0..=img.width - cfg.crop);
        let crop = img.crop(top, left, cfg.crop, cfg.crop)?;
        let ext = if img.planes == 1 { "pgm" } else { "ppm" };
        let name = format!("{i:05}.{ext}");
        write_image(out_dir.join(&name), &crop)?;
        entries.push(ManifestEntry {
            path: name,
            split: split[i],
            source: src
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            top,
            left,
        });
    }
    let manifest = DatasetManifest {
        crop: cfg.crop,
        seed: cfg.seed,
        entries,
    };
    manifest.validate()?;
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Reads the images of one split, resolving paths against the manifest's directory.
pub fn load_split<T: Real>(manifest_path: impl AsRef<Path>, split: Split) -> Result<Vec<PlanarImage<T>>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.paths(split).map(|p| read_image(base.join(p))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{scene, SceneConfig};

    fn write_sources(dir: &Path, n: usize, h: usize, w: usize) {
        for i in 0..n {
            let img: PlanarImage<f32> = scene(&SceneConfig::new(h, w, 1), i as u64);
            write_image(dir.join(format!("src{i:03}.pgm")), &img).unwrap();
        }
    }

    #[test]
    fn identity_crop() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_sources(src.path(), 1, 12, 12);
        let m = make_dataset(src.path(), out.path(), &ManifestConfig::new(12, 0)).unwrap();
        assert_eq!((m.entries[0].top, m.entries[0].left), (0, 0));
        let a = fs::read(src.path().join("src000.pgm")).unwrap();
        let b = fs::read(out.path().join(&m.entries[0].path)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_and_split() {
        let src = tempfile::tempdir().unwrap();
        write_sources(src.path(), 10, 20, 24);
        let (o1, o2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = ManifestConfig {
            crop: 16,
            seed: 5,
            train_count: Some(7),
        };
        let m1 = make_dataset(src.path(), o1.path(), &cfg).unwrap();
        let m2 = make_dataset(src.path(), o2.path(), &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!((m1.count(Split::Train), m1.count(Split::Val)), (7, 3));
        for e in &m1.entries {
            assert_eq!(fs::read(o1.path().join(&e.path)).unwrap(), fs::read(o2.path().join(&e.path)).unwrap());
        }
        let loaded = load_manifest(o1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m1);
        let val: Vec<PlanarImage<f32>> = load_split(o1.path().join(MANIFEST_FILE), Split::Val).unwrap();
        assert_eq!(val.len(), 3);
        assert!(val.iter().all(|v| v.height == 16 && v.width == 16));
    }

    #[test]
    fn too_small() {
        let src = tempfile::tempdir().unwrap();
        write_sources(src.path(), 1, 10, 30);
        let out = tempfile::tempdir().unwrap();
        let err = make_dataset(src.path(), out.path(), &ManifestConfig::new(16, 0)).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { .. }));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let e = |split| ManifestEntry {
            path: "a.pgm".into(),
            split,
            source: "a.pgm".into(),
            top: 0,
            left: 0,
        };
        let m = DatasetManifest {
            crop: 1,
            seed: 0,
            entries: vec![e(Split::Train), e(Split::Val)],
        };
        assert!(m.validate().is_err());
    }
}
