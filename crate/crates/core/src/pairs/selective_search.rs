//! Simplified selective search: graph-based over-segmentation followed by
//! greedy hierarchical grouping on colour, size and fill similarity (texture is
//! optional).

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::BoundingBox;
use crate::imaging;

const COLOR_BINS: usize = 25;
const TEXTURE_ORIENTATIONS: usize = 8;
const TEXTURE_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectiveSearchConfig {
    /// Images are downscaled so the longer side is at most this before
    /// segmenting; boxes are mapped back to full resolution.
    pub max_side: Option<u32>,
    /// Segmentation scale parameters; one grouping pass runs per value.
    pub scales: Vec<f64>,
    pub sigma: f64,
    pub min_size: usize,
    pub use_texture: bool,
}

impl Default for SelectiveSearchConfig {
    fn default() -> Self {
        Self {
            max_side: Some(256),
            scales: vec![500.0],
            sigma: 0.8,
            min_size: 20,
            use_texture: false,
        }
    }
}

impl SelectiveSearchConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.scales.is_empty() || self.scales.iter().any(|k| !(*k > 0.0)) {
            v.push("pairs.selective_search: scales must be non-empty and positive".into());
        }
        if self.sigma < 0.0 {
            v.push("pairs.selective_search: sigma must be >= 0".into());
        }
        if self.max_side == Some(0) {
            v.push("pairs.selective_search: max_side must be positive".into());
        }
        v
    }
}

/// Bounding boxes of every region produced by hierarchical grouping, across all
/// configured scales, de-duplicated in order of first appearance.
pub fn selective_search(image: &RgbImage, cfg: &SelectiveSearchConfig) -> Vec<BoundingBox> {
    let (w, h) = image.dimensions();
    let full = imaging::to_float(image);
    let work = match cfg.max_side {
        Some(m) if w.max(h) > m => {
            let s = m as f64 / w.max(h) as f64;
            let nw = ((w as f64 * s).round() as usize).max(1);
            let nh = ((h as f64 * s).round() as usize).max(1);
            imaging::resize(full.view(), nh, nw, true)
        }
        _ => full,
    };
    let work = work.mapv(|v| v * 255.0);
    let (wh, ww, _) = work.dim();
    let sx = w as f64 / ww as f64;
    let sy = h as f64 / wh as f64;
    let smooth = imaging::gaussian_blur(work.view(), cfg.sigma as f32);
    let texture = cfg.use_texture.then(|| texture_features(&work));

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &k in &cfg.scales {
        let labels = felzenszwalb(&smooth, k, cfg.min_size);
        for (x0, y0, x1, y1) in hierarchical_grouping(&work, texture.as_ref(), &labels) {
            // Map the inclusive work-resolution box back to source pixels.
            let bx0 = ((x0 as f64 * sx).floor() as u32).min(w - 1);
            let by0 = ((y0 as f64 * sy).floor() as u32).min(h - 1);
            let bx1 = (((x1 + 1) as f64 * sx).ceil() as u32).clamp(bx0 + 1, w);
            let by1 = (((y1 + 1) as f64 * sy).ceil() as u32).clamp(by0 + 1, h);
            let b = BoundingBox::from_corners(bx0, by0, bx1, by1);
            if seen.insert(b) {
                out.push(b);
            }
        }
    }
    out
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (a, b) = if self.size[a] < self.size[b] { (b, a) } else { (a, b) };
        self.parent[b] = a;
        self.size[a] += self.size[b];
        a
    }
}

/// Graph-based segmentation on an 8-connected pixel grid. Returns a dense
/// label per pixel (row-major), labels numbered from 0.
fn felzenszwalb(img: &Array3<f32>, k: f64, min_size: usize) -> Vec<usize> {
    let (h, w, c) = img.dim();
    let idx = |y: usize, x: usize| y * w + x;
    let dist = |a: (usize, usize), b: (usize, usize)| -> f32 {
        (0..c)
            .map(|ch| {
                let d = img[[a.0, a.1, ch]] - img[[b.0, b.1, ch]];
                d * d
            })
            .sum::<f32>()
            .sqrt()
    };
    let mut edges: Vec<(f32, u32, u32)> = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                edges.push((dist((y, x), (y, x + 1)), idx(y, x) as u32, idx(y, x + 1) as u32));
            }
            if y + 1 < h {
                edges.push((dist((y, x), (y + 1, x)), idx(y, x) as u32, idx(y + 1, x) as u32));
                if x + 1 < w {
                    edges.push((dist((y, x), (y + 1, x + 1)), idx(y, x) as u32, idx(y + 1, x + 1) as u32));
                }
                if x > 0 {
                    edges.push((dist((y, x), (y + 1, x - 1)), idx(y, x) as u32, idx(y + 1, x - 1) as u32));
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut ds = DisjointSet::new(h * w);
    let mut threshold = vec![k as f32; h * w];
    for &(wgt, a, b) in &edges {
        let ra = ds.find(a as usize);
        let rb = ds.find(b as usize);
        if ra != rb && wgt <= threshold[ra] && wgt <= threshold[rb] {
            let r = ds.union(ra, rb);
            threshold[r] = wgt + (k / ds.size[r] as f64) as f32;
        }
    }
    for &(_, a, b) in &edges {
        let ra = ds.find(a as usize);
        let rb = ds.find(b as usize);
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            ds.union(ra, rb);
        }
    }
    let mut remap = vec![usize::MAX; h * w];
    let mut next = 0;
    (0..h * w)
        .map(|p| {
            let r = ds.find(p);
            if remap[r] == usize::MAX {
                remap[r] = next;
                next += 1;
            }
            remap[r]
        })
        .collect()
}

/// Per-pixel texture descriptor: quantized gradient orientation and magnitude
/// per channel, as `(orientation, magnitude bin)` index pairs.
fn texture_features(img: &Array3<f32>) -> Vec<[(u8, u8); 3]> {
    let (h, w, _) = img.dim();
    let blurred = imaging::gaussian_blur(img.view(), 1.0);
    let mut out = vec![[(0u8, 0u8); 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| blurred[[yy, xx, ch]];
                let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
                let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
                let angle = gy.atan2(gx) + std::f32::consts::PI;
                let o = ((angle / (2.0 * std::f32::consts::PI) * TEXTURE_ORIENTATIONS as f32) as usize)
                    .min(TEXTURE_ORIENTATIONS - 1);
                let mag = (gx * gx + gy * gy).sqrt();
                let m = ((mag / 64.0 * TEXTURE_BINS as f32) as usize).min(TEXTURE_BINS - 1);
                out[y * w + x][ch] = (o as u8, m as u8);
            }
        }
    }
    out
}

struct Region {
    size: f64,
    bbox: (usize, usize, usize, usize),
    color: Vec<f64>,
    texture: Vec<f64>,
    neighbours: BTreeSet<usize>,
    alive: bool,
}

#[derive(PartialEq)]
struct Candidate {
    sim: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on similarity; ties resolved towards lower indices.
        self.sim
            .total_cmp(&other.sim)
            .then(other.a.cmp(&self.a))
            .then(other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn l1_normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Greedy grouping of segments. Returns inclusive boxes `(x0, y0, x1, y1)`
/// of the initial segments followed by every merged region.
fn hierarchical_grouping(
    img: &Array3<f32>,
    texture: Option<&Vec<[(u8, u8); 3]>>,
    labels: &[usize],
) -> Vec<(usize, usize, usize, usize)> {
    let (h, w, _) = img.dim();
    let n = labels.iter().max().map_or(0, |m| m + 1);
    let tex_len = if texture.is_some() { 3 * TEXTURE_ORIENTATIONS * TEXTURE_BINS } else { 0 };
    let mut regions: Vec<Region> = (0..n)
        .map(|_| Region {
            size: 0.0,
            bbox: (usize::MAX, usize::MAX, 0, 0),
            color: vec![0.0; 3 * COLOR_BINS],
            texture: vec![0.0; tex_len],
            neighbours: BTreeSet::new(),
            alive: true,
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let r = &mut regions[l];
            r.size += 1.0;
            r.bbox = (r.bbox.0.min(x), r.bbox.1.min(y), r.bbox.2.max(x), r.bbox.3.max(y));
            for ch in 0..3 {
                let v = img[[y, x, ch]].clamp(0.0, 255.0);
                let bin = ((v / 256.0 * COLOR_BINS as f32) as usize).min(COLOR_BINS - 1);
                r.color[ch * COLOR_BINS + bin] += 1.0;
            }
            if let Some(t) = texture {
                for (ch, (o, m)) in t[y * w + x].iter().enumerate() {
                    let i = (ch * TEXTURE_ORIENTATIONS + *o as usize) * TEXTURE_BINS + *m as usize;
                    r.texture[i] += 1.0;
                }
            }
            if x + 1 < w {
                let o = labels[y * w + x + 1];
                if o != l {
                    regions[l].neighbours.insert(o);
                    regions[o].neighbours.insert(l);
                }
            }
            if y + 1 < h {
                let o = labels[(y + 1) * w + x];
                if o != l {
                    regions[l].neighbours.insert(o);
                    regions[o].neighbours.insert(l);
                }
            }
        }
    }
    for r in &mut regions {
        l1_normalize(&mut r.color);
        l1_normalize(&mut r.texture);
    }

    let image_size = (h * w) as f64;
    let similarity = |a: &Region, b: &Region| -> f64 {
        let color = histogram_intersection(&a.color, &b.color);
        let tex = if tex_len > 0 { histogram_intersection(&a.texture, &b.texture) } else { 0.0 };
        let size = 1.0 - (a.size + b.size) / image_size;
        let bw = (a.bbox.2.max(b.bbox.2) - a.bbox.0.min(b.bbox.0) + 1) as f64;
        let bh = (a.bbox.3.max(b.bbox.3) - a.bbox.1.min(b.bbox.1) + 1) as f64;
        let fill = 1.0 - (bw * bh - a.size - b.size) / image_size;
        color + tex + size + fill
    };

    let mut heap = BinaryHeap::new();
    for a in 0..n {
        for &b in &regions[a].neighbours {
            if a < b {
                heap.push(Candidate { sim: similarity(&regions[a], &regions[b]), a, b });
            }
        }
    }
    let mut boxes: Vec<_> = regions.iter().map(|r| r.bbox).collect();
    while let Some(Candidate { a, b, .. }) = heap.pop() {
        if !regions[a].alive || !regions[b].alive {
            continue;
        }
        let (ra, rb) = (&regions[a], &regions[b]);
        let size = ra.size + rb.size;
        let mix = |u: &[f64], v: &[f64]| -> Vec<f64> {
            u.iter().zip(v).map(|(x, y)| (x * ra.size + y * rb.size) / size).collect()
        };
        let bbox = (
            ra.bbox.0.min(rb.bbox.0),
            ra.bbox.1.min(rb.bbox.1),
            ra.bbox.2.max(rb.bbox.2),
            ra.bbox.3.max(rb.bbox.3),
        );
        let mut neighbours: BTreeSet<usize> = ra.neighbours.union(&rb.neighbours).copied().collect();
        neighbours.remove(&a);
        neighbours.remove(&b);
        let merged = Region {
            size,
            bbox,
            color: mix(&ra.color, &rb.color),
            texture: mix(&ra.texture, &rb.texture),
            neighbours,
            alive: true,
        };
        regions[a].alive = false;
        regions[b].alive = false;
        let t = regions.len();
        let nbrs: Vec<usize> = merged.neighbours.iter().copied().collect();
        regions.push(merged);
        for &o in &nbrs {
            regions[o].neighbours.remove(&a);
            regions[o].neighbours.remove(&b);
            regions[o].neighbours.insert(t);
            heap.push(Candidate { sim: similarity(&regions[o], &regions[t]), a: o, b: t });
        }
        boxes.push(bbox);
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::iou;
    use image::Rgb;

    #[test]
    fn solid_image_gives_single_full_region() {
        let img = RgbImage::from_pixel(224, 224, Rgb([90, 120, 200]));
        let boxes = selective_search(&img, &SelectiveSearchConfig::default());
        assert_eq!(boxes, vec![BoundingBox::new(0, 0, 224, 224)]);
    }

    #[test]
    fn finds_a_planted_square() {
        let mut img = RgbImage::from_pixel(224, 224, Rgb([20, 20, 20]));
        let square = BoundingBox::new(90, 60, 30, 30);
        for y in square.y..square.bottom() {
            for x in square.x..square.right() {
                img.put_pixel(x, y, Rgb([240, 240, 30]));
            }
        }
        let boxes = selective_search(&img, &SelectiveSearchConfig::default());
        assert!(boxes.iter().any(|b| iou(b, &square) >= 0.5), "{boxes:?}");
    }

    #[test]
    fn downscaled_boxes_map_back_to_source_coordinates() {
        let mut img = RgbImage::from_pixel(512, 384, Rgb([250, 250, 250]));
        let square = BoundingBox::new(200, 100, 64, 64);
        for y in square.y..square.bottom() {
            for x in square.x..square.right() {
                img.put_pixel(x, y, Rgb([0, 0, 200]));
            }
        }
        let boxes = selective_search(&img, &SelectiveSearchConfig::default());
        assert!(boxes.iter().all(|b| b.fits(512, 384)));
        assert!(boxes.iter().any(|b| iou(b, &square) >= 0.8), "{boxes:?}");
    }
}
