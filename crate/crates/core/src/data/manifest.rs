use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: Option<String>,
    pub patient: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub num_classes: u8,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// An image loaded from disk together with its mask when one exists.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: Option<LabelMask>,
    pub patient: String,
    pub name: String,
}

impl DatasetManifest {
    /// Checks entry-level invariants and sorts entries by (patient, image).
    pub fn validate(&mut self, check_files: bool) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Manifest("num_classes must be at least 1".into()));
        }
        if self.classes.len() != usize::from(self.num_classes) {
            return Err(Error::Manifest(format!(
                "{} class names given for {} classes",
                self.classes.len(),
                self.num_classes
            )));
        }
        for e in &self.entries {
            if e.patient.trim().is_empty() {
                return Err(Error::Manifest(format!("entry '{}' has an empty patient id", e.image)));
            }
            if e.mask.is_none() && e.split != Split::Unlabeled {
                return Err(Error::Manifest(format!(
                    "{:?} entry '{}' (patient {}) has no mask",
                    e.split, e.image, e.patient
                )));
            }
            if check_files {
                let img = self.root.join(&e.image);
                if !img.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry '{}' references missing image {}",
                        e.image,
                        img.display()
                    )));
                }
                if let Some(m) = &e.mask {
                    let p = self.root.join(m);
                    if !p.is_file() {
                        return Err(Error::Manifest(format!(
                            "entry '{}' references missing mask {}",
                            e.image,
                            p.display()
                        )));
                    }
                }
            }
        }
        let mut patients_by_split: Vec<(String, Split)> = self
            .entries
            .iter()
            .map(|e| (e.patient.clone(), e.split))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        patients_by_split.dedup();
        for w in patients_by_split.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Manifest(format!(
                    "patient {} straddles splits {:?} and {:?}",
                    w[0].0, w[0].1, w[1].1
                )));
            }
        }
        self.entries
            .sort_by(|a, b| (&a.patient, &a.image).cmp(&(&b.patient, &b.image)));
        Ok(())
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct patient ids, sorted.
    pub fn patients(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.patient.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn patients_in(&self, split: Split) -> Vec<String> {
        self.entries_in(split)
            .map(|e| e.patient.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Sample> {
        let image = GrayImage::load_png(&self.root.join(&entry.image))?;
        let mask = match &entry.mask {
            Some(m) => {
                let mask = LabelMask::load_png(&self.root.join(m), self.num_classes)?;
                if !mask.same_shape_as(&image) {
                    return Err(Error::Manifest(format!(
                        "entry '{}': mask and image shapes differ",
                        entry.image
                    )));
                }
                Some(mask)
            }
            None => None,
        };
        Ok(Sample {
            image,
            mask,
            patient: entry.patient.clone(),
            name: entry.image.clone(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries_in(split).map(|e| self.load_entry(e)).collect()
    }
}

/// Reads `manifest.json` (or `<dir>/manifest.json`) and validates it.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&file, e))?;
    manifest.root = file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate(true)?;
    Ok(manifest)
}

/// Patient-level labeled/unlabeled split of the non-test patients.
///
/// `ceil(ratio * n)` patients become labeled, the rest unlabeled. Test
/// patients are left alone.
pub fn split_labeled(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label ratio {ratio} must lie in (0, 1]"
        )));
    }
    let mut train: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| e.patient.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_labeled = (ratio * train.len() as f64 - 1e-9).ceil() as usize;
    if n_labeled == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} over {} training patients leaves no labeled patient",
            train.len()
        )));
    }
    let mut r = rng::substream(seed, "split_labeled", 0);
    train.shuffle(&mut r);
    let labeled: BTreeSet<&String> = train[..n_labeled].iter().collect();

    let mut out = manifest.clone();
    for e in &mut out.entries {
        if e.split == Split::Test {
            continue;
        }
        e.split = if labeled.contains(&e.patient) {
            Split::Labeled
        } else {
            Split::Unlabeled
        };
    }
    out.validate(false)?;
    Ok(out)
}
