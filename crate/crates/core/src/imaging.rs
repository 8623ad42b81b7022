//! Pixel-level helpers shared by the pipelines: float conversion, resampling,
//! Gaussian kernels and heatmap rendering.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// `u8` RGB image to `(h, w, 3)` floats in `[0, 1]`.
pub fn to_float(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer")
}

/// `(h, w, 3)` floats in `[0, 1]` back to `u8` (clamped, rounded).
pub fn to_u8(img: ArrayView3<f32>) -> RgbImage {
    let (h, w, _) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Separable resampling weights for one axis using a triangle (bilinear)
/// filter. When downscaling the filter support widens with the scale factor
/// (anti-aliasing); when upscaling this is ordinary bilinear interpolation with
/// half-pixel centers.
fn axis_weights(input: usize, output: usize, antialias: bool) -> Vec<(usize, Vec<f32>)> {
    let scale = input as f64 / output as f64;
    let support = if antialias && scale > 1.0 { scale } else { 1.0 };
    (0..output)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(input);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|i| {
                    let d = ((i as f64 + 0.5) - center).abs() / support;
                    (1.0 - d).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                for w in &mut weights {
                    *w /= total;
                }
            } else {
                // Degenerate window: nearest neighbour.
                let nearest = (center.floor() as usize).min(input - 1);
                return (nearest, vec![1.0]);
            }
            (lo, weights.into_iter().map(|w| w as f32).collect())
        })
        .collect()
}

/// Resizes an `(h, w, c)` float image with a triangle filter.
pub fn resize(img: ArrayView3<f32>, out_h: usize, out_w: usize, antialias: bool) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let wx = axis_weights(w, out_w, antialias);
    let wy = axis_weights(h, out_h, antialias);
    let src = img.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    let row_len = w * c;
    // Vertical pass first: whole rows are combined, which vectorizes well and
    // shrinks the image before the strided horizontal pass.
    let mut tmp = vec![0f32; out_h * row_len];
    for (oy, (start, weights)) in wy.iter().enumerate() {
        let drow = &mut tmp[oy * row_len..(oy + 1) * row_len];
        for (k, &wgt) in weights.iter().enumerate() {
            let row = &src[(start + k) * row_len..(start + k + 1) * row_len];
            for (d, s) in drow.iter_mut().zip(row) {
                *d += wgt * s;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    let dst = out.as_slice_mut().expect("contiguous");
    for y in 0..out_h {
        let row = &tmp[y * row_len..(y + 1) * row_len];
        for (ox, (start, weights)) in wx.iter().enumerate() {
            let window = &row[start * c..(start + weights.len()) * c];
            let d = &mut dst[(y * out_w + ox) * c..(y * out_w + ox + 1) * c];
            for (px, &wgt) in window.chunks_exact(c).zip(weights) {
                for (acc, v) in d.iter_mut().zip(px) {
                    *acc += wgt * v;
                }
            }
        }
    }
    out
}

/// Bilinear upsampling of a single-channel grid with half-pixel centers and
/// no corner alignment (source coordinates clamped at the low border).
pub fn upsample_bilinear(grid: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = if i0 < inp - 1 { i0 + 1 } else { i0 };
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, ly) = ys[oy];
        let (x0, x1, lx) = xs[ox];
        let top = (1.0 - lx) * grid[[y0, x0]] + lx * grid[[y0, x1]];
        let bottom = (1.0 - lx) * grid[[y1, x0]] + lx * grid[[y1, x1]];
        (1.0 - ly) * top + ly * bottom
    })
}

/// Min-max normalization to `[0, 1]`; a constant grid maps to all zeros.
pub fn min_max_normalize(grid: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if grid.is_empty() || !(hi > lo) {
        return Array2::zeros(grid.raw_dim());
    }
    grid.mapv(|v| (v - lo) / (hi - lo))
}

/// Normalized 2-D Gaussian kernel of odd side `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    assert!(size % 2 == 1, "kernel side must be odd");
    let r = (size / 2) as f64;
    let mut k = Array2::from_shape_fn((size, size), |(y, x)| {
        let dy = y as f64 - r;
        let dx = x as f64 - r;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k /= s;
    k
}

/// Same-size 2-D correlation with zero padding.
pub fn convolve_zero_padded(grid: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = grid.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ky in 0..kh {
            let sy = y as isize + ky as isize - ry;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for kx in 0..kw {
                let sx = x as isize + kx as isize - rx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                acc += grid[[sy as usize, sx as usize]] * kernel[[ky, kx]];
            }
        }
        acc
    })
}

/// Separable Gaussian blur of an `(h, w, c)` image with clamped borders.
pub fn gaussian_blur(img: ArrayView3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return img.to_owned();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = taps.iter().sum();
    let taps: Vec<f32> = taps.iter().map(|t| t / total).collect();
    let (h, w, c) = img.dim();
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += t * img[[y, sx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += t * tmp[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Renders a `[0, 1]` grid with a blue-to-red heat palette.
pub fn heatmap_png(grid: ArrayView2<f64>) -> RgbImage {
    let (h, w) = grid.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = grid[[y as usize, x as usize]].clamp(0.0, 1.0);
        Rgb(heat_color(v))
    })
}

fn heat_color(v: f64) -> [u8; 3] {
    // Piecewise-linear approximation of a jet-like palette.
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Nearest-neighbour blow-up of a small matrix into a viewable image.
pub fn matrix_png(values: ArrayView2<f64>, cell: u32) -> RgbImage {
    let (rows, cols) = values.dim();
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    RgbImage::from_fn(cols as u32 * cell, rows as u32 * cell, |x, y| {
        let v = values[[(y / cell) as usize, (x / cell) as usize]];
        if !v.is_finite() {
            return Rgb([128, 128, 128]);
        }
        let t = if max > 0.0 { v / max } else { 0.0 };
        Rgb(heat_color(t))
    })
}
