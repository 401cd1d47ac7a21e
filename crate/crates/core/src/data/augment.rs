//! Online augmentation. Geometric transforms share one parameter draw across
//! the image and every mask (nearest-neighbour for masks); photometric ones
//! touch only the image.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FundusSample, RgbImage};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub enabled: bool,
    pub probability: f64,
}

impl Transform {
    pub const fn on(probability: f64) -> Self {
        Self {
            enabled: true,
            probability,
        }
    }

    pub const OFF: Transform = Transform {
        enabled: false,
        probability: 0.0,
    };

    fn fires(&self, rng: &mut impl Rng) -> bool {
        // always draw so the stream length does not depend on the config
        let u: f64 = rng.random();
        self.enabled && u < self.probability.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub rotation: Transform,
    /// Rotation angle is uniform in `±rotation_degrees`.
    pub rotation_degrees: f64,
    pub vertical_flip: Transform,
    pub horizontal_flip: Transform,
    pub translation: Transform,
    /// Maximum shift per axis as a fraction of the side length.
    pub translation_fraction: f64,
    pub contrast: Transform,
    pub contrast_gamma: [f64; 2],
    pub intensity_shift: Transform,
    pub intensity_offset: f64,
    pub gaussian_noise: Transform,
    pub noise_sigma: f64,
    pub gaussian_blur: Transform,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation: Transform::on(0.5),
            rotation_degrees: 30.0,
            vertical_flip: Transform::on(0.5),
            horizontal_flip: Transform::on(0.5),
            translation: Transform::on(0.3),
            translation_fraction: 0.05,
            contrast: Transform::on(0.3),
            contrast_gamma: [0.8, 1.2],
            intensity_shift: Transform::on(0.3),
            intensity_offset: 0.1,
            gaussian_noise: Transform::on(0.2),
            noise_sigma: 0.01,
            gaussian_blur: Transform::on(0.2),
            blur_sigma: [0.5, 1.0],
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        let mut c = Self::default();
        for t in c.transforms_mut() {
            *t = Transform::OFF;
        }
        c
    }

    fn transforms_mut(&mut self) -> [&mut Transform; 8] {
        [
            &mut self.rotation,
            &mut self.vertical_flip,
            &mut self.horizontal_flip,
            &mut self.translation,
            &mut self.contrast,
            &mut self.intensity_shift,
            &mut self.gaussian_noise,
            &mut self.gaussian_blur,
        ]
    }

    /// Clamps probabilities into `[0,1]`, magnitudes to be non-negative and
    /// orders the range endpoints.
    pub fn sanitized(&self) -> Self {
        let mut c = self.clone();
        for t in c.transforms_mut() {
            t.probability = if t.probability.is_finite() {
                t.probability.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        let nonneg = |v: f64| if v.is_finite() { v.max(0.0) } else { 0.0 };
        c.rotation_degrees = nonneg(c.rotation_degrees).min(180.0);
        c.translation_fraction = nonneg(c.translation_fraction).min(0.5);
        c.intensity_offset = nonneg(c.intensity_offset);
        c.noise_sigma = nonneg(c.noise_sigma);
        let order = |r: [f64; 2], lo: f64| {
            let (a, b) = (nonneg(r[0]).max(lo), nonneg(r[1]).max(lo));
            [a.min(b), a.max(b)]
        };
        c.contrast_gamma = order(c.contrast_gamma, 1e-3);
        c.blur_sigma = order(c.blur_sigma, 0.0);
        c
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Inverse affine map from output pixel centre to source coordinates.
#[derive(Clone, Copy)]
struct Affine {
    cos: f64,
    sin: f64,
    shift_r: f64,
    shift_c: f64,
    cr: f64,
    cc: f64,
}

impl Affine {
    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let (dr, dc) = (r as f64 - self.cr - self.shift_r, c as f64 - self.cc - self.shift_c);
        (
            self.cr + self.cos * dr - self.sin * dc,
            self.cc + self.sin * dr + self.cos * dc,
        )
    }
}

fn warp_mask(m: &Mask, a: &Affine) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |r, c| {
        let (sr, sc) = a.source(r, c);
        m.get_i(sr.round() as isize, sc.round() as isize)
    })
}

fn warp_image(img: &RgbImage, a: &Affine) -> RgbImage {
    let (h, w) = img.dims();
    let mut out = RgbImage::filled(h, w, [0.0; 3]);
    let at = |r: isize, c: isize, ch: usize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            img.get(r as usize, c as usize, ch)
        }
    };
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = a.source(r, c);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            for ch in 0..3 {
                let v = at(r0, c0, ch) * (1.0 - fr) * (1.0 - fc)
                    + at(r0, c0 + 1, ch) * (1.0 - fr) * fc
                    + at(r0 + 1, c0, ch) * fr * (1.0 - fc)
                    + at(r0 + 1, c0 + 1, ch) * fr * fc;
                out.set(r, c, ch, v);
            }
        }
    }
    out
}

fn flip_mask(m: &Mask, vertical: bool) -> Mask {
    let (h, w) = m.dims();
    Mask::from_fn(h, w, |r, c| {
        if vertical {
            m.get(h - 1 - r, c)
        } else {
            m.get(r, w - 1 - c)
        }
    })
}

fn flip_image(img: &RgbImage, vertical: bool) -> RgbImage {
    let (h, w) = img.dims();
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = if vertical { (h - 1 - r, c) } else { (r, w - 1 - c) };
            for ch in 0..3 {
                out.set(r, c, ch, img.get(sr, sc, ch));
            }
        }
    }
    out
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = img.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = img.clone();
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img.get(r, clampi(c as isize + k as isize - radius, w), ch))
                    .sum();
                tmp.set(r, c, ch, v);
            }
        }
    }
    let mut out = tmp.clone();
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp.get(clampi(r as isize + k as isize - radius, h), c, ch))
                    .sum();
                out.set(r, c, ch, v);
            }
        }
    }
    out
}

fn apply_masks(s: &mut FundusSample, f: impl Fn(&Mask) -> Mask) {
    s.artery = f(&s.artery);
    s.vein = f(&s.vein);
    s.crossing = f(&s.crossing);
    s.uncertain = f(&s.uncertain);
}

/// Applies the configured random transforms in a fixed order: rotation,
/// vertical flip, horizontal flip, translation, contrast, intensity shift,
/// noise, blur. The result is clamped to `[0,1]`.
pub fn augment(sample: &FundusSample, config: &AugmentationConfig, rng: &mut impl Rng) -> FundusSample {
    let cfg = config.sanitized();
    let mut s = sample.clone();
    let (h, w) = s.dims();
    let centre = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let identity = Affine {
        cos: 1.0,
        sin: 0.0,
        shift_r: 0.0,
        shift_c: 0.0,
        cr: centre.0,
        cc: centre.1,
    };
    let mut touched = false;

    if cfg.rotation.fires(rng) {
        let theta = uniform(rng, -cfg.rotation_degrees, cfg.rotation_degrees).to_radians();
        let a = Affine {
            cos: theta.cos(),
            sin: theta.sin(),
            ..identity
        };
        s.image = warp_image(&s.image, &a);
        apply_masks(&mut s, |m| warp_mask(m, &a));
        touched = true;
    }
    for (t, vertical) in [(cfg.vertical_flip, true), (cfg.horizontal_flip, false)] {
        if t.fires(rng) {
            s.image = flip_image(&s.image, vertical);
            apply_masks(&mut s, |m| flip_mask(m, vertical));
        }
    }
    if cfg.translation.fires(rng) {
        let f = cfg.translation_fraction;
        let a = Affine {
            shift_r: uniform(rng, -f, f) * h as f64,
            shift_c: uniform(rng, -f, f) * w as f64,
            ..identity
        };
        s.image = warp_image(&s.image, &a);
        apply_masks(&mut s, |m| warp_mask(m, &a));
        touched = true;
    }
    if cfg.contrast.fires(rng) {
        let gamma = uniform(rng, cfg.contrast_gamma[0], cfg.contrast_gamma[1]);
        let data = s.image.data_mut();
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            for v in data.iter_mut() {
                *v = ((*v - lo) / range).powf(gamma) * range + lo;
            }
        }
        touched = true;
    }
    if cfg.intensity_shift.fires(rng) {
        let o = uniform(rng, -cfg.intensity_offset, cfg.intensity_offset);
        s.image.data_mut().iter_mut().for_each(|v| *v += o);
        touched = true;
    }
    if cfg.gaussian_noise.fires(rng) && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for v in s.image.data_mut() {
            *v += normal.sample(rng);
        }
        touched = true;
    }
    if cfg.gaussian_blur.fires(rng) {
        let sigma = uniform(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
        s.image = gaussian_blur(&s.image, sigma);
        touched = true;
    }
    if touched {
        s.image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> FundusSample {
        let (h, w) = (33, 40);
        let data = (0..h * w * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        FundusSample {
            id: "a".into(),
            image: RgbImage::new(h, w, data).unwrap(),
            artery: Mask::from_fn(h, w, |r, c| r.abs_diff(16) <= 2 && c > 4),
            vein: Mask::from_fn(h, w, |r, c| c.abs_diff(20) <= 1 && r > 3),
            crossing: Mask::empty(h, w),
            uncertain: Mask::from_fn(h, w, |r, c| r < 3 && c < 3),
        }
    }

    #[test]
    fn defaults_match_published_table() {
        let c = AugmentationConfig::default();
        assert_eq!((c.rotation.probability, c.rotation_degrees), (0.5, 30.0));
        assert_eq!(c.vertical_flip.probability, 0.5);
        assert_eq!(c.horizontal_flip.probability, 0.5);
        assert_eq!((c.translation.probability, c.translation_fraction), (0.3, 0.05));
        assert_eq!((c.contrast.probability, c.contrast_gamma), (0.3, [0.8, 1.2]));
        assert_eq!((c.intensity_shift.probability, c.intensity_offset), (0.3, 0.1));
        assert_eq!((c.gaussian_noise.probability, c.noise_sigma), (0.2, 0.01));
        assert_eq!((c.gaussian_blur.probability, c.blur_sigma), (0.2, [0.5, 1.0]));
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut c = AugmentationConfig::default();
        for t in c.transforms_mut() {
            t.probability = 0.0;
        }
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, &c, &mut rng), s);
        assert_eq!(augment(&s, &AugmentationConfig::none(), &mut rng), s);
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample();
        let c = AugmentationConfig::default();
        for seed in 0..5 {
            let a = augment(&s, &c, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = augment(&s, &c, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn thirty_degree_rotation_keeps_masks_binary() {
        let mut c = AugmentationConfig::none();
        c.rotation = Transform::on(1.0);
        c.rotation_degrees = 30.0;
        let s = sample();
        let out = augment(&s, &c, &mut ChaCha8Rng::seed_from_u64(9));
        assert_ne!(out.artery, s.artery);
        for m in [&out.artery, &out.vein, &out.uncertain] {
            assert!(m.data().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn geometric_params_are_shared() {
        // a mask identical to the image's red channel threshold must stay aligned
        let (h, w) = (32, 32);
        let m = Mask::from_fn(h, w, |r, c| (8..20).contains(&r) && (5..12).contains(&c));
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for (r, c) in m.pixels() {
            img.set(r, c, 0, 1.0);
        }
        let s = FundusSample {
            id: "g".into(),
            image: img,
            artery: m.clone(),
            vein: m.clone(),
            crossing: Mask::empty(h, w),
            uncertain: Mask::empty(h, w),
        };
        let mut c = AugmentationConfig::none();
        c.vertical_flip = Transform::on(1.0);
        c.horizontal_flip = Transform::on(1.0);
        let out = augment(&s, &c, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.artery, out.vein);
        for r in 0..h {
            for c in 0..w {
                assert_eq!(out.image.get(r, c, 0) > 0.5, out.artery.get(r, c));
            }
        }
    }

    #[test]
    fn photometric_leaves_masks_alone() {
        let mut c = AugmentationConfig::none();
        c.contrast = Transform::on(1.0);
        c.gaussian_noise = Transform::on(1.0);
        c.gaussian_blur = Transform::on(1.0);
        c.intensity_shift = Transform::on(1.0);
        let s = sample();
        let out = augment(&s, &c, &mut ChaCha8Rng::seed_from_u64(4));
        assert_ne!(out.image, s.image);
        assert_eq!((&out.artery, &out.vein, &out.uncertain), (&s.artery, &s.vein, &s.uncertain));
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sanitize_clamps_degenerate_values() {
        let mut c = AugmentationConfig::default();
        c.rotation.probability = 3.0;
        c.blur_sigma = [1.0, 0.5];
        c.noise_sigma = -1.0;
        let s = c.sanitized();
        assert_eq!(s.rotation.probability, 1.0);
        assert_eq!(s.blur_sigma, [0.5, 1.0]);
        assert_eq!(s.noise_sigma, 0.0);
    }
}
