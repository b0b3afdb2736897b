//! On-disk dataset layout: `root/<split>/images/<id>.png` plus
//! `root/<split>/masks/<label>/<id>.png`, with a JSON manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One image and the mask files of the classes it contains. Paths are
/// relative to the split directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub masks: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub class_vocab: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Image::new(h as usize, w as usize, data)
}

/// Reads a mask PNG. Only the values 0 and 255 are accepted.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for &v in luma.as_raw() {
        match v {
            0 => data.push(0),
            u16::MAX => data.push(1),
            _ => {
                return Err(Error::NonBinaryMask {
                    path: path.to_path_buf(),
                    value: v as f32 / u16::MAX as f32,
                })
            }
        }
    }
    BinaryMask::from_values(h as usize, w as usize, data)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    ensure_parent(path)?;
    let buf = image::RgbImage::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().map(|&v| to_u8(v)).collect(),
    )
    .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    ensure_parent(path)?;
    let buf = image::GrayImage::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data
            .iter()
            .map(|&v| if v != 0 { 255 } else { 0 })
            .collect(),
    )
    .ok_or_else(|| Error::Shape("mask buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes images, masks and the manifest for one split.
pub fn write_dataset(
    root: &Path,
    split: Split,
    vocab: &[String],
    items: &[AnnotatedImage],
) -> Result<DatasetManifest> {
    let dir = root.join(split.as_str());
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let image = PathBuf::from("images").join(format!("{}.png", item.id));
        write_image(&dir.join(&image), &item.image)?;
        let mut masks = BTreeMap::new();
        for (label, mask) in &item.masks {
            if !vocab.contains(label) {
                return Err(Error::UnknownLabel(label.clone()));
            }
            let rel = PathBuf::from("masks")
                .join(label)
                .join(format!("{}.png", item.id));
            write_mask(&dir.join(&rel), mask)?;
            masks.insert(label.clone(), rel);
        }
        entries.push(ManifestEntry {
            id: item.id.clone(),
            image,
            masks,
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        class_vocab: vocab.to_vec(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn scan_split(root: &Path, split: Split, vocab: &[String]) -> Result<Vec<ManifestEntry>> {
    let dir = root.join(split.as_str());
    let images = dir.join("images");
    let listing = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let masks_dir = dir.join("masks");
    if masks_dir.is_dir() {
        for entry in fs::read_dir(&masks_dir).map_err(|e| Error::io(&masks_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&masks_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !vocab.contains(&name) {
                return Err(Error::UnknownLabel(name));
            }
        }
    }
    Ok(ids
        .into_iter()
        .map(|id| {
            let masks = vocab
                .iter()
                .filter_map(|label| {
                    let rel = PathBuf::from("masks").join(label).join(format!("{id}.png"));
                    dir.join(&rel).is_file().then(|| (label.clone(), rel))
                })
                .collect();
            ManifestEntry {
                image: PathBuf::from("images").join(format!("{id}.png")),
                id,
                masks,
            }
        })
        .collect())
}

/// Opens a split. Uses `manifest.json` when present, otherwise scans the
/// directory (a missing mask file then means the class is absent). Every
/// listed file must exist and every mask must be binary.
pub fn load_dataset(root: &Path, split: Split, vocab: &[String]) -> Result<DatasetManifest> {
    let dir = root.join(split.as_str());
    let manifest_path = dir.join(MANIFEST_FILE);
    let entries = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let stored: DatasetManifest = serde_json::from_str(&text)?;
        stored.entries
    } else {
        scan_split(root, split, vocab)?
    };
    for entry in &entries {
        let image = dir.join(&entry.image);
        if !image.is_file() {
            return Err(Error::MissingFile(image));
        }
        for (label, rel) in &entry.masks {
            if !vocab.contains(label) {
                return Err(Error::UnknownLabel(label.clone()));
            }
            read_mask(&dir.join(rel))?;
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        class_vocab: vocab.to_vec(),
        entries,
    })
}

/// Reads every image and mask listed in `manifest`.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<AnnotatedImage>> {
    let dir = manifest.split_dir();
    manifest
        .entries
        .iter()
        .map(|entry| {
            let image = read_image(&dir.join(&entry.image))?;
            let mut masks = BTreeMap::new();
            for (label, rel) in &entry.masks {
                let mask = read_mask(&dir.join(rel))?;
                if mask.height != image.height || mask.width != image.width {
                    return Err(Error::Shape(format!(
                        "mask {} does not match its image",
                        dir.join(rel).display()
                    )));
                }
                masks.insert(label.clone(), mask);
            }
            Ok(AnnotatedImage {
                id: entry.id.clone(),
                image,
                masks,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_round_trips_through_strings() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BinaryMask::zeros(3, 5);
        m.set(1, 4, true);
        let p = dir.path().join("m.png");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn grey_mask_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::GrayImage::from_raw(2, 1, vec![0, 128])
            .unwrap()
            .save(&p)
            .unwrap();
        assert!(matches!(read_mask(&p), Err(Error::NonBinaryMask { .. })));
    }
}
