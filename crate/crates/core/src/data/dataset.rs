//! On-disk dataset layout:
//!
//! ```text
//! root/attenuation/<id>.png|.f32
//! root/darkfield/<id>.png|.f32
//! root/meta/<id>.json            optional SampleMeta
//! root/truth_sigma/<id>.png      phantoms only, identity mapping
//! root/lung_mask/<id>.png        phantoms only, identity mapping
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{read_image, read_png, write_png16, IntensityMapping, SampleMeta};
use super::{assign_splits, PairedSample, Split};
use crate::error::{Error, Result};
use crate::image::{resample_area, Image2D};

pub const DATASET_DIRS: [&str; 5] = ["attenuation", "darkfield", "meta", "truth_sigma", "lung_mask"];

const IMAGE_EXTS: [&str; 2] = ["png", "f32"];

/// Image files of a directory keyed by file stem.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !IMAGE_EXTS.contains(&ext) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::ingestion(path, format!("duplicate id also stored as {}", prev.display())));
            }
        }
    }
    Ok(out)
}

fn read_meta(root: &Path, id: &str) -> Result<Option<SampleMeta>> {
    let path = root.join("meta").join(format!("{id}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Load all pairs under `root`, sorted by id, with splits assigned by a
/// seeded shuffle.
pub fn load_dataset(root: &Path, seed: u64) -> Result<Vec<PairedSample>> {
    let att = list_images(&root.join("attenuation"))?;
    let df = list_images(&root.join("darkfield"))?;
    let orphans: Vec<String> = att
        .keys()
        .filter(|k| !df.contains_key(*k))
        .chain(df.keys().filter(|k| !att.contains_key(*k)))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        return Err(Error::OrphanIds(orphans));
    }
    if att.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sigma_files = list_images(&root.join("truth_sigma"))?;
    let mask_files = list_images(&root.join("lung_mask"))?;
    let splits = assign_splits(att.len(), seed);
    let mut out = Vec::with_capacity(att.len());
    for ((id, att_path), split) in att.iter().zip(splits) {
        let meta = read_meta(root, id)?;
        let m = meta.clone().unwrap_or_default();
        let a = read_image(att_path, meta.as_ref(), m.attenuation)?;
        let d = read_image(&df[id], meta.as_ref(), m.darkfield)?;
        if a.shape() != d.shape() {
            return Err(Error::ingestion(
                &df[id],
                format!("shape {:?} differs from attenuation {:?}", d.shape(), a.shape()),
            ));
        }
        let aux = |files: &BTreeMap<String, PathBuf>| -> Result<Option<Image2D>> {
            files
                .get(id)
                .map(|p| {
                    let img = read_image(p, meta.as_ref(), IntensityMapping::default())?;
                    if img.shape() != a.shape() {
                        return Err(Error::ingestion(p, "shape differs from attenuation"));
                    }
                    Ok(img)
                })
                .transpose()
        };
        out.push(PairedSample {
            id: id.clone(),
            attenuation: a.clone(),
            darkfield: Some(d),
            split,
            truth_noise_sigma: aux(&sigma_files)?,
            lung_mask: aux(&mask_files)?,
        });
    }
    Ok(out)
}

/// Write samples in the dataset layout. Images are encoded over `[0, 1]`.
pub fn write_dataset(root: &Path, samples: &[PairedSample]) -> Result<()> {
    for s in samples {
        let name = format!("{}.png", s.id);
        write_png16(&root.join("attenuation").join(&name), &s.attenuation, 0.0, 1.0)?;
        if let Some(d) = &s.darkfield {
            write_png16(&root.join("darkfield").join(&name), d, 0.0, 1.0)?;
        }
        if let Some(sig) = &s.truth_noise_sigma {
            write_png16(&root.join("truth_sigma").join(&name), sig, 0.0, 1.0)?;
        }
        if let Some(m) = &s.lung_mask {
            write_png16(&root.join("lung_mask").join(&name), m, 0.0, 1.0)?;
        }
    }
    Ok(())
}

/// Result of loading an out-of-distribution folder.
#[derive(Debug, Clone, PartialEq)]
pub struct OodLoad {
    pub samples: Vec<PairedSample>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Load every PNG in `dir` (sorted by name) as an attenuation-only sample,
/// resampled to `target = (height, width)` by area averaging when given.
/// PNG values are normalised by the full integer range of their bit depth.
pub fn load_ood(dir: &Path, target: Option<(usize, usize)>) -> Result<OodLoad> {
    if matches!(target, Some((0, _)) | Some((_, 0))) {
        return Err(Error::invalid("OOD target shape must be non-empty"));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("png"));
    paths.sort();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let loaded = read_png(&path).and_then(|img| match target {
            Some((h, w)) => resample_area(&img, h, w),
            None => Ok(img),
        });
        match loaded {
            Ok(img) => samples.push(PairedSample {
                id: path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
                attenuation: img.clamp01(),
                darkfield: None,
                split: Split::Ood,
                truth_noise_sigma: None,
                lung_mask: None,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    Ok(OodLoad { samples, skipped })
}
