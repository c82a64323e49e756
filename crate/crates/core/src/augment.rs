//! Stochastic image augmentations for the two views.
//!
//! Every sample draws from its own generator seeded by
//! `(seed, epoch, sample index, view index)`, so a batch augments to the same
//! result whatever the thread count or batch composition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Probability that the color jitter fires at all.
pub const COLOR_P: f64 = 0.8;
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

/// A single `C x H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width || channels * height * width == 0 {
            return Err(Error::ShapeMismatch {
                op: "image",
                left: vec![channels, height, width],
                right: vec![data.len()],
            });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Scale and aspect ranges of [`random_resized_crop`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub min_area: f64,
    pub aspect: (f64, f64),
}

impl CropParams {
    pub fn new(min_area: f64) -> Self {
        Self { min_area, aspect: (3.0 / 4.0, 4.0 / 3.0) }
    }
}

/// Samples a crop covering `U(min_area, 1)` of the image with aspect ratio
/// `U(aspect)` and resizes it bilinearly. After ten infeasible draws the
/// largest centered crop within the aspect range is used instead.
pub fn random_resized_crop(img: &Image, crop: CropParams, out_h: usize, out_w: usize, rng: &mut impl Rng) -> Result<Image> {
    if !(crop.min_area > 0.0 && crop.min_area <= 1.0) {
        return Err(Error::invalid(format!("crop min area must lie in (0, 1], got {}", crop.min_area)));
    }
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(crop.min_area..=1.0);
        let ratio = rng.gen_range(crop.aspect.0..=crop.aspect.1);
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= img.width && ch <= img.height {
            let y0 = rng.gen_range(0..=img.height - ch);
            let x0 = rng.gen_range(0..=img.width - cw);
            return Ok(resize_region(img, y0, x0, ch, cw, out_h, out_w));
        }
    }
    let in_ratio = w / h;
    let (ch, cw) = if in_ratio < crop.aspect.0 {
        ((w / crop.aspect.0).round() as usize, img.width)
    } else if in_ratio > crop.aspect.1 {
        (img.height, (h * crop.aspect.1).round() as usize)
    } else {
        (img.height, img.width)
    };
    let (ch, cw) = (ch.clamp(1, img.height), cw.clamp(1, img.width));
    Ok(resize_region(img, (img.height - ch) / 2, (img.width - cw) / 2, ch, cw, out_h, out_w))
}

/// Bilinear resize of the `rh x rw` region at `(y0, x0)`, half-pixel centers.
fn resize_region(img: &Image, y0: usize, x0: usize, rh: usize, rw: usize, out_h: usize, out_w: usize) -> Image {
    let sy = rh as f64 / out_h as f64;
    let sx = rw as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| taps(o, sy, rh)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| taps(o, sx, rw)).collect();
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        for &(ya, yb, fy) in &ys {
            for &(xa, xb, fx) in &xs {
                let p = |y: usize, x: usize| img.at(c, y0 + y, x0 + x);
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image { channels: img.channels, height: out_h, width: out_w, data }
}

/// Mirrors the width axis with probability `p`.
pub fn horizontal_flip(img: &mut Image, p: f64, rng: &mut impl Rng) {
    if rng.gen::<f64>() < p {
        let w = img.width;
        for row in img.data.chunks_mut(w) {
            row.reverse();
        }
    }
}

fn clamp01(data: &mut [f32]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma_plane(img: &Image) -> Vec<f32> {
    let n = img.plane();
    (0..n)
        .map(|i| LUMA[0] * img.data[i] + LUMA[1] * img.data[n + i] + LUMA[2] * img.data[2 * n + i])
        .collect()
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue jitter in random order, fired
/// with probability [`COLOR_P`]. Factors are drawn from
/// `[1 - 0.8 s, 1 + 0.8 s]`, the hue shift from `[-0.2 s, 0.2 s]` turns.
/// Images without exactly three channels only get brightness and contrast.
pub fn color_distortion(img: &mut Image, strength: f64, rng: &mut impl Rng) {
    if rng.gen::<f64>() >= COLOR_P {
        return;
    }
    let spread = 0.8 * strength;
    let factor = |rng: &mut dyn rand::RngCore| -> f32 {
        if spread == 0.0 {
            1.0
        } else {
            rng.gen_range((1.0 - spread).max(0.0)..=1.0 + spread) as f32
        }
    };
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    let hue = if strength == 0.0 { 0.0 } else { rng.gen_range(-0.2 * strength..=0.2 * strength) as f32 };
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let rgb = img.channels == 3;
    for op in order {
        match op {
            0 if brightness != 1.0 => {
                img.data.iter_mut().for_each(|v| *v *= brightness);
                clamp01(&mut img.data);
            }
            1 if contrast != 1.0 => {
                let mean = if rgb {
                    luma_plane(img).iter().map(|&v| v as f64).sum::<f64>() / img.plane() as f64
                } else {
                    img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64
                } as f32;
                img.data.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
                clamp01(&mut img.data);
            }
            2 if rgb && saturation != 1.0 => {
                let gray = luma_plane(img);
                let n = img.plane();
                for c in 0..3 {
                    for (v, g) in img.data[c * n..(c + 1) * n].iter_mut().zip(&gray) {
                        *v = (*v - g) * saturation + g;
                    }
                }
                clamp01(&mut img.data);
            }
            3 if rgb && hue != 0.0 => {
                let n = img.plane();
                for i in 0..n {
                    let (h, s, v) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
                    let (r, g, b) = hsv_to_rgb(h + hue, s, v);
                    img.data[i] = r;
                    img.data[n + i] = g;
                    img.data[2 * n + i] = b;
                }
                clamp01(&mut img.data);
            }
            _ => {}
        }
    }
}

/// Replaces every channel by the luma with probability `p`.
pub fn grayscale(img: &mut Image, p: f64, rng: &mut impl Rng) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid(format!("grayscale needs 3 channels, got {}", img.channels)));
    }
    if rng.gen::<f64>() < p {
        let gray = luma_plane(img);
        let n = img.plane();
        for c in 0..3 {
            img.data[c * n..(c + 1) * n].copy_from_slice(&gray);
        }
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of radius `ceil(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (2.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Mirror index without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding and `sigma ~ U(sigma_range)`,
/// applied with probability `p`.
pub fn gaussian_blur(img: &mut Image, p: f64, sigma_range: (f64, f64), rng: &mut impl Rng) -> Result<()> {
    if !(sigma_range.0 > 0.0 && sigma_range.0 <= sigma_range.1) {
        return Err(Error::invalid(format!("invalid blur sigma range {sigma_range:?}")));
    }
    if rng.gen::<f64>() >= p {
        return Ok(());
    }
    let sigma = rng.gen_range(sigma_range.0..=sigma_range.1);
    blur_with(img, &gaussian_kernel(sigma));
    Ok(())
}

fn blur_with(img: &mut Image, kernel: &[f32]) {
    let r = (kernel.len() / 2) as i64;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0f32; h * w];
    for plane in img.data.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[y * w + reflect(x as i64 + k as i64 - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[reflect(y as i64 + k as i64 - r, h) * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

/// One view's augmentation recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Random resized crop; off means the image passes through at full size.
    pub crop: bool,
    pub crop_min_area: f64,
    pub flip_p: f64,
    /// Color jitter strength; 0 disables the op entirely.
    pub color_strength: f64,
    pub gray_p: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::strong()
    }
}

impl AugmentationPolicy {
    /// crop -> flip -> color -> grayscale -> blur.
    pub fn strong() -> Self {
        Self {
            crop: true,
            crop_min_area: 0.2,
            flip_p: 0.5,
            color_strength: 0.5,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }

    /// crop -> flip.
    pub fn weak() -> Self {
        Self { color_strength: 0.0, gray_p: 0.0, blur_p: 0.0, ..Self::strong() }
    }

    pub fn identity() -> Self {
        Self { crop: false, flip_p: 0.0, ..Self::weak() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_p", self.flip_p), ("gray_p", self.gray_p), ("blur_p", self.blur_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation {name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.crop_min_area > 0.0 && self.crop_min_area <= 1.0) {
            return Err(Error::Config(format!("crop_min_area must lie in (0, 1], got {}", self.crop_min_area)));
        }
        if !(self.color_strength >= 0.0) {
            return Err(Error::Config("color_strength must be nonnegative".into()));
        }
        if !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config("blur sigma range must be positive and ordered".into()));
        }
        Ok(())
    }

    /// Augments one image with the given generator.
    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Result<Image> {
        let mut out = if self.crop {
            random_resized_crop(img, CropParams::new(self.crop_min_area), img.height, img.width, rng)?
        } else {
            img.clone()
        };
        if self.flip_p > 0.0 {
            horizontal_flip(&mut out, self.flip_p, rng);
        }
        if self.color_strength > 0.0 {
            color_distortion(&mut out, self.color_strength, rng);
        }
        if self.gray_p > 0.0 {
            grayscale(&mut out, self.gray_p, rng)?;
        }
        if self.blur_p > 0.0 {
            gaussian_blur(&mut out, self.blur_p, (self.blur_sigma_min, self.blur_sigma_max), rng)?;
        }
        Ok(out)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample generator seed.
pub fn derive_seed(seed: u64, epoch: u64, index: u64, view: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ epoch) ^ index) ^ view)
}

/// Augments the images at `indices` of an `N x C x H x W` tensor, returning a
/// `len(indices) x C x H x W` batch.
pub fn apply_policy(
    policy: &AugmentationPolicy,
    images: &Tensor<f32>,
    indices: &[usize],
    seed: u64,
    epoch: u64,
    view: u64,
) -> Result<Tensor<f32>> {
    let (n, c, h, w) = images.dims4("apply_policy")?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("sample index {bad} out of range for {n} images")));
    }
    if indices.is_empty() {
        return Err(Error::invalid("apply_policy needs at least one sample"));
    }
    let per = c * h * w;
    let outs = par::map_range(indices.len(), |k| {
        let i = indices[k];
        let img = Image { channels: c, height: h, width: w, data: images.data()[i * per..(i + 1) * per].to_vec() };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, i as u64, view));
        policy.apply(&img, &mut rng)
    });
    let mut data = Vec::with_capacity(indices.len() * per);
    for o in outs {
        data.extend_from_slice(&o?.data);
    }
    Tensor::from_vec(vec![indices.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn crop_examples() {
        let img = noise(3, 12, 12, 1);
        let exact = CropParams { min_area: 1.0, aspect: (1.0, 1.0) };
        assert_eq!(random_resized_crop(&img, exact, 12, 12, &mut rng(0)).unwrap(), img);

        let flat = Image::constant(3, 10, 14, 0.37);
        let out = random_resized_crop(&flat, CropParams::new(0.2), 8, 8, &mut rng(3)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));

        for seed in 0..50 {
            let out = random_resized_crop(&img, CropParams::new(0.2), 7, 9, &mut rng(seed)).unwrap();
            assert_eq!((out.channels, out.height, out.width), (3, 7, 9));
        }
        assert!(random_resized_crop(&img, CropParams::new(0.0), 8, 8, &mut rng(0)).is_err());
    }

    #[test]
    fn crop_falls_back_to_center_when_infeasible() {
        // A 1 x 40 strip admits no crop with aspect in [3/4, 4/3] at these areas.
        let img = noise(1, 1, 40, 2);
        let out = random_resized_crop(&img, CropParams::new(0.9), 4, 4, &mut rng(0)).unwrap();
        assert_eq!(out.data.len(), 16);
    }

    #[test]
    fn flip_examples() {
        let mut img = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        horizontal_flip(&mut img, 1.0, &mut rng(0));
        assert_eq!(img.data, vec![2.0, 1.0, 4.0, 3.0]);
        horizontal_flip(&mut img, 1.0, &mut rng(1));
        assert_eq!(img.data, vec![1.0, 2.0, 3.0, 4.0]);
        horizontal_flip(&mut img, 0.0, &mut rng(2));
        assert_eq!(img.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn color_examples() {
        let img = noise(3, 6, 6, 4);
        for seed in 0..20 {
            let mut out = img.clone();
            color_distortion(&mut out, 0.0, &mut rng(seed));
            assert_eq!(out, img);
            let mut a = img.clone();
            color_distortion(&mut a, 0.5, &mut rng(seed));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let mut b = img.clone();
            color_distortion(&mut b, 0.5, &mut rng(seed));
            assert_eq!(a, b);
        }
        let changed = (0..20).filter(|&s| {
            let mut o = img.clone();
            color_distortion(&mut o, 0.5, &mut rng(s));
            o != img
        });
        assert!(changed.count() >= 10);
    }

    #[test]
    fn hsv_roundtrip() {
        let mut r = rng(5);
        for _ in 0..1000 {
            let (a, b, c) = (r.gen::<f32>(), r.gen::<f32>(), r.gen::<f32>());
            let (h, s, v) = rgb_to_hsv(a, b, c);
            let (x, y, z) = hsv_to_rgb(h, s, v);
            assert!((a - x).abs() < 1e-5 && (b - y).abs() < 1e-5 && (c - z).abs() < 1e-5);
        }
    }

    #[test]
    fn grayscale_examples() {
        let mut red = Image::new(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        grayscale(&mut red, 1.0, &mut rng(0)).unwrap();
        for v in &red.data {
            assert_abs_diff_eq!(*v, 0.299, epsilon = 1e-7);
        }
        let mut gray = Image::new(3, 1, 2, vec![0.4, 0.7, 0.4, 0.7, 0.4, 0.7]).unwrap();
        let before = gray.clone();
        grayscale(&mut gray, 1.0, &mut rng(0)).unwrap();
        for (a, b) in gray.data.iter().zip(&before.data) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
        let img = noise(3, 4, 4, 6);
        let mut out = img.clone();
        grayscale(&mut out, 0.0, &mut rng(0)).unwrap();
        assert_eq!(out, img);
        assert!(grayscale(&mut noise(1, 2, 2, 0), 1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn blur_examples() {
        let mut flat = Image::constant(3, 9, 9, 0.6);
        gaussian_blur(&mut flat, 1.0, (0.1, 2.0), &mut rng(0)).unwrap();
        assert!(flat.data.iter().all(|&v| (v - 0.6).abs() < 1e-6));

        for sigma in [0.1, 0.7, 1.3, 2.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (2.0f64 * sigma).ceil() as usize + 1);
            assert_abs_diff_eq!(k.iter().sum::<f32>(), 1.0, epsilon = 1e-6);
            // Content away from the borders keeps its total mass.
            let mut img = Image::constant(1, 20, 20, 0.0);
            for y in 7..13 {
                for x in 6..12 {
                    img.data[y * 20 + x] = ((x * 7 + y * 3) % 10) as f32 / 10.0;
                }
            }
            let before: f32 = img.data.iter().sum();
            blur_with(&mut img, &k);
            assert_abs_diff_eq!(img.data.iter().sum::<f32>(), before, epsilon = 1e-4);
        }

        let img = noise(3, 8, 8, 7);
        let mut out = img.clone();
        gaussian_blur(&mut out, 1.0, (0.1, 0.1), &mut rng(0)).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 1e-2);
        }
        assert!(gaussian_blur(&mut out, 1.0, (0.0, 1.0), &mut rng(0)).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(12, 3), 0);
        assert_eq!(reflect(-3, 1), 0);
    }

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_vec(vec![n, 3, 8, 8], (0..n * 192).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn weak_policy_only_moves_pixels() {
        // A constant image stays constant under crop and flip, whatever the draw.
        let flat = Tensor::full(vec![4, 3, 8, 8], 0.42f32);
        let out = apply_policy(&AugmentationPolicy::weak(), &flat, &[0, 1, 2, 3], 1, 0, 1).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-6));
        let strong = apply_policy(&AugmentationPolicy::strong(), &flat, &[0, 1, 2, 3], 1, 0, 1).unwrap();
        assert!(strong.data().iter().any(|&v| (v - 0.42).abs() > 1e-3));
        let ident = apply_policy(&AugmentationPolicy::identity(), &flat, &[2], 1, 0, 1).unwrap();
        assert_eq!(ident.data(), &flat.data()[2 * 192..3 * 192]);
    }

    #[test]
    fn policy_is_a_pure_function_of_the_seed_rule() {
        let imgs = batch(6, 8);
        let p = AugmentationPolicy::strong();
        let a = apply_policy(&p, &imgs, &[0, 3, 5], 9, 2, 0).unwrap();
        assert_eq!(a, apply_policy(&p, &imgs, &[0, 3, 5], 9, 2, 0).unwrap());
        // Batch composition does not matter.
        let b = apply_policy(&p, &imgs, &[5], 9, 2, 0).unwrap();
        assert_eq!(&a.data()[2 * 192..], b.data());
        assert_ne!(a, apply_policy(&p, &imgs, &[0, 3, 5], 9, 3, 0).unwrap());
        assert!(apply_policy(&p, &imgs, &[6], 9, 2, 0).is_err());
    }

    #[test]
    fn views_draw_independently() {
        let imgs = batch(1, 10);
        let p = AugmentationPolicy::strong();
        let mut collisions = 0;
        for epoch in 0..1000 {
            let a = apply_policy(&p, &imgs, &[0], 4, epoch, 0).unwrap();
            let b = apply_policy(&p, &imgs, &[0], 4, epoch, 1).unwrap();
            collisions += (a == b) as usize;
        }
        assert_eq!(collisions, 0);
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(4, 0, i, 0)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::strong().validate().is_ok());
        assert!(AugmentationPolicy { flip_p: 1.5, ..AugmentationPolicy::weak() }.validate().is_err());
        assert!(AugmentationPolicy { crop_min_area: 0.0, ..AugmentationPolicy::weak() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn strong_views_stay_in_range(seed in 0u64..10_000, h in 4usize..12, w in 4usize..12) {
            let img = noise(3, h, w, seed);
            let out = AugmentationPolicy::strong().apply(&img, &mut rng(seed + 1)).unwrap();
            prop_assert_eq!((out.height, out.width), (h, w));
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        }
    }
}
