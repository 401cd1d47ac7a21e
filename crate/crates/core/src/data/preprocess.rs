use super::{FundusSample, RgbImage};
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Smallest accepted output side.
pub const MIN_SIZE: usize = 32;

/// Nearest-neighbour resize: output pixel `(r,c)` reads source
/// `(floor(r·h/oh), floor(c·w/ow))`.
pub fn resize_mask_nearest(m: &Mask, oh: usize, ow: usize) -> Mask {
    let (h, w) = m.dims();
    if (h, w) == (oh, ow) {
        return m.clone();
    }
    Mask::from_fn(oh, ow, |r, c| m.get(r * h / oh, c * w / ow))
}

fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Half-pixel-centred bilinear resize.
pub fn resize_image_bilinear(img: &RgbImage, oh: usize, ow: usize) -> RgbImage {
    let (h, w) = img.dims();
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let rows = bilinear_taps(oh, h);
    let cols = bilinear_taps(ow, w);
    let mut out = RgbImage::filled(oh, ow, [0.0; 3]);
    for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
            for ch in 0..3 {
                let top = img.get(r0, c0, ch) * (1.0 - fc) + img.get(r0, c1, ch) * fc;
                let bot = img.get(r1, c0, ch) * (1.0 - fc) + img.get(r1, c1, ch) * fc;
                out.set(r, c, ch, top * (1.0 - fr) + bot * fr);
            }
        }
    }
    out
}

/// Resizes to `size×size` and scales intensities into `[0,1]`.
///
/// Values above 1 are taken as 8-bit counts and divided by 255; everything is
/// then clamped, so an image already in range passes through untouched.
pub fn preprocess(sample: &FundusSample, size: usize) -> Result<FundusSample> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "preprocess size must be at least {MIN_SIZE}, got {size}"
        )));
    }
    let mut image = resize_image_bilinear(&sample.image, size, size);
    let eight_bit = image.data().iter().any(|&v| v > 1.0);
    for v in image.data_mut() {
        if eight_bit {
            *v /= 255.0;
        }
        *v = v.clamp(0.0, 1.0);
    }
    let rs = |m: &Mask| resize_mask_nearest(m, size, size);
    Ok(FundusSample {
        id: sample.id.clone(),
        image,
        artery: rs(&sample.artery),
        vein: rs(&sample.vein),
        crossing: rs(&sample.crossing),
        uncertain: rs(&sample.uncertain),
    })
}
