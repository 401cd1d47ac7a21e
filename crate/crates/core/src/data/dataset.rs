//! On-disk layout:
//!
//! ```text
//! <root>/images/<id>.png
//! <root>/masks/<id>_artery.png
//! <root>/masks/<id>_vein.png
//! <root>/masks/<id>_crossing.png    (optional)
//! <root>/masks/<id>_uncertain.png   (optional)
//! <root>/masks/<id>_topo.json       (synthetic samples only)
//! ```
//!
//! Masks are 8-bit grayscale, nonzero is foreground.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FundusSample, RgbImage};
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str, kind: &str) -> PathBuf {
    root.join("masks").join(format!("{id}_{kind}.png"))
}

pub fn topo_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}_topo.json"))
}

/// Shuffles sorted ids with a seeded stream; val and test each get
/// `floor(n/10)`, train the remainder.
pub fn split_ids(mut ids: Vec<String>, seed: u64) -> DatasetSplit {
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_hold = ids.len() / 10;
    let test = ids.split_off(ids.len() - n_hold);
    let val = ids.split_off(ids.len() - n_hold);
    DatasetSplit {
        train: ids,
        val,
        test,
        seed,
    }
}

/// Lists the sample ids under `root/images`, checking that each has its
/// artery and vein masks.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            ids.push(stem.to_string());
        }
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found under {}",
            dir.display()
        )));
    }
    ids.sort();
    for id in &ids {
        for kind in ["artery", "vein"] {
            if !mask_path(root, id, kind).is_file() {
                return Err(Error::Ingestion {
                    id: id.clone(),
                    reason: format!("missing {kind} mask"),
                });
            }
        }
    }
    Ok(ids)
}

pub fn load_dataset(root: &Path, seed: u64) -> Result<DatasetSplit> {
    Ok(split_ids(list_ids(root)?, seed))
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Mask::from_nonzero(h as usize, w as usize, img.as_raw())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    read_mask(path)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dims();
    image::save_buffer(
        path,
        &mask.to_u8_255(),
        w as u32,
        h as u32,
        image::ColorType::L8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_sample(root: &Path, id: &str) -> Result<FundusSample> {
    let ipath = image_path(root, id);
    let img = image::open(&ipath)
        .map_err(|source| Error::Image {
            path: ipath.clone(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    let image = RgbImage::from_rgb8(h, w, img.as_raw())?;
    let mut planes = Vec::new();
    for (kind, required) in [
        ("artery", true),
        ("vein", true),
        ("crossing", false),
        ("uncertain", false),
    ] {
        let p = mask_path(root, id, kind);
        if p.is_file() {
            planes.push(read_mask(&p)?);
        } else if required {
            return Err(Error::Ingestion {
                id: id.to_string(),
                reason: format!("missing {kind} mask"),
            });
        } else {
            planes.push(Mask::empty(h, w));
        }
    }
    let uncertain = planes.pop().unwrap();
    let crossing = planes.pop().unwrap();
    let vein = planes.pop().unwrap();
    let artery = planes.pop().unwrap();
    FundusSample {
        id: id.to_string(),
        image,
        artery,
        vein,
        crossing,
        uncertain,
    }
    .validated()
}

/// Writes a sample in the dataset layout; empty optional masks are skipped.
pub fn write_sample(root: &Path, sample: &FundusSample) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (h, w) = sample.dims();
    let ipath = image_path(root, &sample.id);
    image::save_buffer(
        &ipath,
        &sample.image.to_rgb8(),
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: ipath.clone(),
        source,
    })?;
    write_mask_png(&mask_path(root, &sample.id, "artery"), &sample.artery)?;
    write_mask_png(&mask_path(root, &sample.id, "vein"), &sample.vein)?;
    if sample.crossing.any() {
        write_mask_png(&mask_path(root, &sample.id, "crossing"), &sample.crossing)?;
    }
    if sample.uncertain.any() {
        write_mask_png(&mask_path(root, &sample.id, "uncertain"), &sample.uncertain)?;
    }
    Ok(())
}
