//! Folder datasets: `root/images/<stem>.(png|ppm)` with optional
//! `root/labels/<stem>.(png|pgm|ppm)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{default_palette, read_image, read_labels, write_image, write_labels};
use crate::error::{Error, Result};
use crate::numerics::{Grid, LabelMap};

const IMAGE_EXT: [&str; 2] = ["png", "ppm"];
const LABEL_EXT: [&str; 3] = ["png", "pgm", "ppm"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: String,
    pub num_classes: usize,
    pub ignore_index: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

/// A manifest plus the files that failed validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub manifest: DatasetManifest,
    pub rejected: Vec<Rejection>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.entries.iter().filter(|e| e.label.is_some()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Reads every entry. Labels are checked against the class count again
    /// since the files may have changed since the manifest was built.
    pub fn read_all(&self) -> Result<Vec<(Grid, Option<LabelMap>)>> {
        self.entries
            .iter()
            .map(|e| {
                let img = read_image(&e.image)?;
                let lbl = match &e.label {
                    Some(p) => {
                        let y = read_labels(p)?;
                        check_label(&img, &y, self.num_classes, self.ignore_index)
                            .map_err(|reason| Error::Dataset(format!("{}: {reason}", p.display())))?;
                        Some(y)
                    }
                    None => None,
                };
                Ok((img, lbl))
            })
            .collect()
    }
}

fn check_label(img: &Grid, y: &LabelMap, k: usize, ignore: u8) -> std::result::Result<(), String> {
    if (img.height, img.width) != (y.height, y.width) {
        return Err(format!(
            "label is {}x{} but image is {}x{}",
            y.height, y.width, img.height, img.width
        ));
    }
    if let Some(&v) = y.data.iter().find(|&&v| v != ignore && v as usize >= k) {
        return Err(format!("label value {v} outside 0..{k} and not the ignore index {ignore}"));
    }
    Ok(())
}

fn stem_and_ext(p: &Path) -> Option<(String, String)> {
    let stem = p.file_stem()?.to_str()?.to_string();
    let ext = p.extension()?.to_str()?.to_ascii_lowercase();
    Some((stem, ext))
}

fn find_label(dir: &Path, stem: &str) -> Option<PathBuf> {
    LABEL_EXT.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Writes `items` under `root/images` and `root/labels` as `00000.png`,
/// `00001.png`, ... and returns the matching manifest.
pub fn write_folder(
    root: &Path,
    items: &[(&Grid, Option<&LabelMap>)],
    split: &str,
    num_classes: usize,
    ignore_index: u8,
) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    for d in [&images_dir, &labels_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let palette = default_palette();
    let mut entries = Vec::with_capacity(items.len());
    for (i, (img, lbl)) in items.iter().enumerate() {
        let stem = format!("{i:05}");
        let image = images_dir.join(format!("{stem}.png"));
        write_image(&image, img)?;
        let label = match lbl {
            Some(y) => {
                let p = labels_dir.join(format!("{stem}.png"));
                write_labels(&p, y, &palette)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry { stem, image, label });
    }
    Ok(DatasetManifest {
        entries,
        split: split.to_string(),
        num_classes,
        ignore_index,
    })
}

/// Scans `root`, validating each image/label pair. Bad pairs are reported
/// and skipped; entries are sorted by stem.
pub fn load_folder(root: &Path, num_classes: usize, ignore_index: u8, split: &str) -> Result<LoadReport> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let listing = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        if let Some((stem, ext)) = stem_and_ext(&path) {
            if IMAGE_EXT.contains(&ext.as_str()) && path.is_file() {
                files.push((stem, path));
            }
        }
    }
    files.sort();
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for (stem, image) in files {
        if entries.last().is_some_and(|e: &ManifestEntry| e.stem == stem) {
            rejected.push(Rejection {
                path: image,
                reason: format!("duplicate stem {stem}"),
            });
            continue;
        }
        let img = match read_image(&image) {
            Ok(g) => g,
            Err(e) => {
                rejected.push(Rejection {
                    path: image,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let label = find_label(&labels_dir, &stem);
        if let Some(lp) = &label {
            let verdict = read_labels(lp)
                .map_err(|e| e.to_string())
                .and_then(|y| check_label(&img, &y, num_classes, ignore_index));
            if let Err(reason) = verdict {
                rejected.push(Rejection { path: lp.clone(), reason });
                continue;
            }
        }
        entries.push(ManifestEntry { stem, image, label });
    }
    for r in &rejected {
        log::warn!("rejected {}: {}", r.path.display(), r.reason);
    }
    Ok(LoadReport {
        manifest: DatasetManifest {
            entries,
            split: split.to_string(),
            num_classes,
            ignore_index,
        },
        rejected,
    })
}
