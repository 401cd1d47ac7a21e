//! Fundus samples: ingestion, splitting, preprocessing, augmentation and a
//! synthetic vessel-tree generator with exact ground-truth topology.

pub mod augment;
pub mod dataset;
pub mod fragment;
pub mod preprocess;
pub mod synth;

pub use augment::{augment, AugmentationConfig, Transform};
pub use dataset::{load_dataset, load_sample, split_ids, write_sample, DatasetSplit};
pub use fragment::{fragment_mask, fragment_mask_detailed, Fragmented};
pub use preprocess::{preprocess, resize_image_bilinear, resize_mask_nearest, MIN_SIZE};
pub use synth::{generate_synthetic_tree, ClassTopology, SyntheticTreeSpec, TreeTopology};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::VesselMasks;
use crate::tensor::Tensor;

/// Interleaved RGB image with channel values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb image {height}×{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[(r * self.width + c) * 3 + ch] = v;
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        Self::new(height, width, raw.iter().map(|&v| v as f64 / 255.0).collect())
    }

    /// Planar `3×H×W` copy.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                out[ch * hw + p] = self.data[p * 3 + ch];
            }
        }
        out
    }
}

/// One fundus image with multi-label vessel annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub image: RgbImage,
    pub artery: Mask,
    pub vein: Mask,
    /// Artery/vein crossings; these pixels are also set in both vessel masks.
    pub crossing: Mask,
    /// Pixels excluded from losses and metrics.
    pub uncertain: Mask,
}

impl FundusSample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Checks that every plane agrees on size and masks are binary, and folds
    /// crossing pixels into both vessel channels.
    pub fn validated(mut self) -> Result<Self> {
        let dims = self.image.dims();
        for (name, m) in [
            ("artery", &self.artery),
            ("vein", &self.vein),
            ("crossing", &self.crossing),
            ("uncertain", &self.uncertain),
        ] {
            if m.dims() != dims {
                return Err(Error::Ingestion {
                    id: self.id.clone(),
                    reason: format!("{name} mask is {:?}, image is {:?}", m.dims(), dims),
                });
            }
            if !m.is_binary() {
                return Err(Error::Ingestion {
                    id: self.id.clone(),
                    reason: format!("{name} mask is not binary"),
                });
            }
        }
        if self.crossing.any() {
            self.artery = self.artery.or(&self.crossing)?;
            self.vein = self.vein.or(&self.crossing)?;
        }
        Ok(self)
    }

    pub fn vessel_masks(&self) -> VesselMasks {
        VesselMasks {
            artery: self.artery.clone(),
            vein: self.vein.clone(),
        }
    }
}

/// Network inputs for a batch: images `N×3×H×W`, targets `N×2×H×W`
/// (artery, vein) and a validity weight `N×1×H×W` (0 on uncertain pixels).
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub valid: Tensor,
}

pub fn make_batch(samples: &[&FundusSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = first.dims();
    let hw = h * w;
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * hw);
    let mut targets = Vec::with_capacity(n * 2 * hw);
    let mut valid = Vec::with_capacity(n * hw);
    for s in samples {
        if s.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes sizes {:?} and {:?}",
                s.dims(),
                (h, w)
            )));
        }
        images.extend(s.image.to_planar());
        targets.extend(s.artery.to_f64());
        targets.extend(s.vein.to_f64());
        valid.extend(s.uncertain.data().iter().map(|&u| 1.0 - u as f64));
    }
    Ok(Batch {
        images: Tensor::new(&[n, 3, h, w], images)?,
        targets: Tensor::new(&[n, 2, h, w], targets)?,
        valid: Tensor::new(&[n, 1, h, w], valid)?,
    })
}
