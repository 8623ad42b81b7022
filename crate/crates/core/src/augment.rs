//! Training views for context/target pairs.
//!
//! Geometry first (RoI-preserving crop, flip, resize), then photometric
//! jitter on the resized view, then the RoI is re-zeroed and the view is
//! normalized.

use image::RgbImage;
use ndarray::{s, Array3, ArrayViewMut3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging;
use crate::pairs::{BoundingBox, ContextObjectPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    /// Probability that colour jitter is applied at all.
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub flip_prob: f64,
    pub blur_prob: f64,
    /// Blur sigma range in output-view pixels.
    pub blur_sigma: [f32; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Crop window area as a fraction of the image.
    pub crop_scale: [f64; 2],
    pub crop_attempts: usize,
    pub context_size: usize,
    pub target_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            crop_scale: [0.5, 1.0],
            crop_attempts: 10,
            context_size: 224,
            target_size: 96,
        }
    }
}

impl AugmentConfig {
    /// No randomness and unit normalization: views are plain resizes.
    pub fn identity() -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
            blur_prob: 0.0,
            mean: [0.0; 3],
            std: [1.0; 3],
            crop_scale: [1.0, 1.0],
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("augment.{name} must lie in [0, 1]"));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            v.push("augment.crop_scale must satisfy 0 < lo <= hi <= 1".into());
        }
        if self.context_size == 0 || self.target_size == 0 {
            v.push("augment: context_size and target_size must be positive".into());
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            v.push("augment.std entries must be positive".into());
        }
        if self.blur_sigma[0] < 0.0 || self.blur_sigma[0] > self.blur_sigma[1] {
            v.push("augment.blur_sigma must be an ordered non-negative range".into());
        }
        for (name, x) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&x) {
                v.push(format!("augment.{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            v.push("augment.hue must lie in [0, 0.5]".into());
        }
        v
    }
}

/// Samples a crop window containing `roi` whose area fraction lies in the
/// configured range; falls back to the whole image after the configured number
/// of attempts.
pub fn sample_crop_window<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    roi: &BoundingBox,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> BoundingBox {
    let area = width as f64 * height as f64;
    let (la, lb) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..cfg.crop_attempts {
        let target = rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]) * area;
        let aspect = rng.random_range(la..=lb).exp();
        let w = (target * aspect).sqrt().round() as u32;
        let h = (target / aspect).sqrt().round() as u32;
        if w < roi.w || h < roi.h || w > width || h > height {
            continue;
        }
        let x_lo = roi.right().saturating_sub(w);
        let x_hi = roi.x.min(width - w);
        let y_lo = roi.bottom().saturating_sub(h);
        let y_hi = roi.y.min(height - h);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        return BoundingBox::new(rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi), w, h);
    }
    BoundingBox::new(0, 0, width, height)
}

fn crop_float(img: &RgbImage, window: &BoundingBox, flip: bool) -> Array3<f32> {
    let raw = img.as_raw();
    let stride = img.width() as usize * 3;
    let (x0, y0, w, h) = (window.x as usize, window.y as usize, window.w as usize, window.h as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in y0..y0 + h {
        let row = &raw[y * stride + x0 * 3..y * stride + (x0 + w) * 3];
        if flip {
            for px in row.chunks_exact(3).rev() {
                data.extend(px.iter().map(|&v| v as f32 / 255.0));
            }
        } else {
            data.extend(row.iter().map(|&v| v as f32 / 255.0));
        }
    }
    Array3::from_shape_vec((h, w, 3), data).expect("crop buffer")
}

fn flip_roi(roi: BoundingBox, width: u32) -> BoundingBox {
    BoundingBox::new(width - roi.right(), roi.y, roi.w, roi.h)
}

/// RoI-preserving crop (plus optional horizontal flip). Returns the cropped
/// image and the RoI in crop coordinates.
pub fn context_aware_crop<R: Rng + ?Sized>(
    context_image: &RgbImage,
    roi: &BoundingBox,
    flip: bool,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (RgbImage, BoundingBox) {
    let window = sample_crop_window(context_image.width(), context_image.height(), roi, rng, cfg);
    let mut crop = image::imageops::crop_imm(context_image, window.x, window.y, window.w, window.h).to_image();
    let mut local = BoundingBox::new(roi.x - window.x, roi.y - window.y, roi.w, roi.h);
    if flip {
        image::imageops::flip_horizontal_in_place(&mut crop);
        local = flip_roi(local, window.w);
    }
    (crop, local)
}

fn luminance(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
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
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Colour jitter, grayscale and blur on a `[0, 1]` image, without
/// normalization.
pub fn photometric_raw<R: Rng + ?Sized>(img: &mut Array3<f32>, rng: &mut R, cfg: &AugmentConfig) {
    if rng.random_bool(cfg.jitter_prob) {
        let factor = |s: f32, rng: &mut R| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let b = factor(cfg.brightness, rng);
        let c = factor(cfg.contrast, rng);
        let s = factor(cfg.saturation, rng);
        let h = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 };
        let data = img.as_slice_mut().expect("contiguous view");
        if b != 1.0 {
            data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        }
        if c != 1.0 {
            let mean = data.chunks(3).map(luminance).sum::<f32>() / (data.len() / 3) as f32;
            data.iter_mut().for_each(|v| *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0));
        }
        if s != 1.0 {
            for p in data.chunks_mut(3) {
                let g = luminance(p);
                p.iter_mut().for_each(|v| *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0));
            }
        }
        if h != 0.0 {
            for p in data.chunks_mut(3) {
                let (hh, ss, vv) = rgb_to_hsv(p[0], p[1], p[2]);
                let (r, g, b) = hsv_to_rgb(hh + h, ss, vv);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
    }
    if rng.random_bool(cfg.grayscale_prob) {
        for p in img.as_slice_mut().expect("contiguous view").chunks_mut(3) {
            let g = luminance(p);
            p.fill(g);
        }
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        *img = imaging::gaussian_blur(img.view(), sigma);
    }
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(mut img: ArrayViewMut3<f32>, cfg: &AugmentConfig) {
    for c in 0..3 {
        let (m, s) = (cfg.mean[c], cfg.std[c]);
        img.slice_mut(s![.., .., c]).mapv_inplace(|v| (v - m) / s);
    }
}

/// Photometric transforms followed by normalization.
pub fn photometric<R: Rng + ?Sized>(img: &RgbImage, rng: &mut R, cfg: &AugmentConfig) -> Array3<f32> {
    let mut x = imaging::to_float(img);
    photometric_raw(&mut x, rng, cfg);
    normalize(x.view_mut(), cfg);
    x
}

/// Pixels of a `size`-side view whose centres fall inside `roi`, given the
/// view was resized from a `crop_w` by `crop_h` image.
fn zero_mapped_roi(view: &mut Array3<f32>, roi: &BoundingBox, crop_w: u32, crop_h: u32) {
    let (h, w, _) = view.dim();
    let sx = crop_w as f64 / w as f64;
    let sy = crop_h as f64 / h as f64;
    for y in 0..h {
        let cy = (y as f64 + 0.5) * sy;
        if cy < roi.y as f64 || cy >= roi.bottom() as f64 {
            continue;
        }
        for x in 0..w {
            let cx = (x as f64 + 0.5) * sx;
            if cx >= roi.x as f64 && cx < roi.right() as f64 {
                view.slice_mut(s![y, x, ..]).fill(0.0);
            }
        }
    }
}

/// Where the RoI landed in a context view, in view pixel coordinates
/// (fractional).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    pub window: BoundingBox,
    pub flipped: bool,
    pub roi_in_view: [f64; 4],
}

/// `(target_view, context_view)`, both normalized `(h, w, 3)` arrays.
pub fn augment_pair<R: Rng + ?Sized>(
    pair: &ContextObjectPair,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Array3<f32>, Array3<f32>) {
    let (t, c, _) = augment_pair_with_geometry(pair, rng, cfg);
    (t, c)
}

pub fn augment_pair_with_geometry<R: Rng + ?Sized>(
    pair: &ContextObjectPair,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Array3<f32>, Array3<f32>, ViewGeometry) {
    augment_views(&pair.context_image, &pair.roi, Some(&pair.target_image), rng, cfg)
}

/// Builds both views straight from a source image and RoI. The context view
/// is cut from `image` with the RoI zeroed, so callers need not materialize a
/// full [`ContextObjectPair`]. When `target` is `None` the target crop is read
/// from `image` itself.
pub fn augment_views<R: Rng + ?Sized>(
    image: &RgbImage,
    roi: &BoundingBox,
    target: Option<&RgbImage>,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Array3<f32>, Array3<f32>, ViewGeometry) {
    let flip = rng.random_bool(cfg.flip_prob);
    let (iw, ih) = image.dimensions();
    let window = sample_crop_window(iw, ih, roi, rng, cfg);
    let mut local = BoundingBox::new(roi.x - window.x, roi.y - window.y, roi.w, roi.h);
    if flip {
        local = flip_roi(local, window.w);
    }

    let mut crop = crop_float(image, &window, flip);
    // Zero the RoI before resampling so that nothing of the hidden object
    // leaks through the interpolation.
    crop.slice_mut(s![
        local.y as usize..local.bottom() as usize,
        local.x as usize..local.right() as usize,
        ..
    ])
    .fill(0.0);
    let mut context = imaging::resize(crop.view(), cfg.context_size, cfg.context_size, true);
    photometric_raw(&mut context, rng, cfg);
    zero_mapped_roi(&mut context, &local, window.w, window.h);
    normalize(context.view_mut(), cfg);

    let mut target = match target {
        Some(t) => crop_float(t, &BoundingBox::new(0, 0, t.width(), t.height()), flip),
        None => crop_float(image, roi, flip),
    };
    target = imaging::resize(target.view(), cfg.target_size, cfg.target_size, true);
    photometric_raw(&mut target, rng, cfg);
    normalize(target.view_mut(), cfg);

    let sx = cfg.context_size as f64 / window.w as f64;
    let sy = cfg.context_size as f64 / window.h as f64;
    let geometry = ViewGeometry {
        window,
        flipped: flip,
        roi_in_view: [local.x as f64 * sx, local.y as f64 * sy, local.w as f64 * sx, local.h as f64 * sy],
    };
    (target, context, geometry)
}

/// Context view for evaluation: the whole image with `flap` zeroed, resized and
/// normalized, no randomness.
pub fn eval_context_view(image: &RgbImage, flap: Option<&BoundingBox>, cfg: &AugmentConfig) -> Array3<f32> {
    let mut x = imaging::to_float(image);
    if let Some(b) = flap {
        x.slice_mut(s![b.y as usize..b.bottom() as usize, b.x as usize..b.right() as usize, ..])
            .fill(0.0);
    }
    let mut v = imaging::resize(x.view(), cfg.context_size, cfg.context_size, true);
    if let Some(b) = flap {
        zero_mapped_roi(&mut v, b, image.width(), image.height());
    }
    normalize(v.view_mut(), cfg);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(64, 48, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn full_roi_forces_full_window() {
        let roi = BoundingBox::new(0, 0, 64, 48);
        let w = sample_crop_window(64, 48, &roi, &mut ChaCha8Rng::seed_from_u64(0), &AugmentConfig::default());
        assert_eq!(w, roi);
    }

    #[test]
    fn unit_scale_gives_identity_window() {
        let cfg = AugmentConfig {
            crop_scale: [1.0, 1.0],
            ..Default::default()
        };
        let img = noisy_image(1);
        let roi = BoundingBox::new(5, 6, 7, 8);
        let (crop, local) = context_aware_crop(&img, &roi, false, &mut ChaCha8Rng::seed_from_u64(2), &cfg);
        assert_eq!(crop, img);
        assert_eq!(local, roi);
    }

    #[test]
    fn identity_photometric_is_exact() {
        let img = noisy_image(3);
        let out = photometric(&img, &mut ChaCha8Rng::seed_from_u64(0), &AugmentConfig::identity());
        assert_eq!(out, imaging::to_float(&img));
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let cfg = AugmentConfig {
            grayscale_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let out = photometric(&noisy_image(4), &mut ChaCha8Rng::seed_from_u64(0), &cfg);
        for p in out.as_slice().unwrap().chunks(3) {
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }
}
