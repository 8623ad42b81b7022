//! Region-of-interest discovery and context/target pair construction.

mod coco;
mod selective_search;

pub use coco::{Annotation, AnnotationFile, Category, ImageEntry, PairRecord};
pub use selective_search::{selective_search, SelectiveSearchConfig};

use std::fmt;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box; serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Box spanning the half-open pixel ranges `[x0, x1) × [y0, y1)`.
    pub fn from_corners(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0 && self.h > 0 && self.right() <= width && self.bottom() <= height
    }

    pub fn intersection_area(&self, other: &Self) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    /// Smallest box containing both.
    pub fn union_box(&self, other: &Self) -> Self {
        Self::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.right().max(other.right()),
            self.bottom().max(other.bottom()),
        )
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x, self.y, self.w, self.h)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, String> {
        if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(format!("invalid box {v:?}"));
        }
        // Fractional annotation boxes snap outward to whole pixels.
        let x0 = v[0].floor();
        let y0 = v[1].floor();
        let x1 = (v[0] + v[2]).ceil();
        let y1 = (v[1] + v[3]).ceil();
        if x1 <= x0 || y1 <= y0 {
            return Err(format!("empty box {v:?}"));
        }
        Ok(Self::from_corners(x0 as u32, y0 as u32, x1 as u32, y1 as u32))
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalSource {
    /// Selective search.
    SS,
    /// Ground-truth annotation boxes.
    GT,
    /// Random boxes.
    RG,
}

impl std::str::FromStr for ProposalSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "SS" => Ok(Self::SS),
            "GT" => Ok(Self::GT),
            "RG" => Ok(Self::RG),
            other => Err(format!("unknown proposal source {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub max_area_ratio: f64,
    pub min_area_ratio: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub merge_iou: f64,
    pub source: ProposalSource,
    /// Number of random boxes per image; `None` matches the selective-search
    /// count on the same image.
    pub random_count: Option<usize>,
    pub selective_search: SelectiveSearchConfig,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            max_area_ratio: 0.1,
            min_area_ratio: 0.001,
            aspect_min: 0.2,
            aspect_max: 5.0,
            merge_iou: 0.3,
            source: ProposalSource::SS,
            random_count: None,
            selective_search: SelectiveSearchConfig::default(),
        }
    }
}

impl ProposalConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0 < self.min_area_ratio
            && self.min_area_ratio < self.max_area_ratio
            && self.max_area_ratio <= 1.0)
        {
            v.push("pairs: need 0 < min_area_ratio < max_area_ratio <= 1".to_string());
        }
        if !(0.0 < self.aspect_min && self.aspect_min < self.aspect_max) {
            v.push("pairs: need 0 < aspect_min < aspect_max".to_string());
        }
        if !(0.0..=1.0).contains(&self.merge_iou) {
            v.push("pairs: merge_iou must lie in [0, 1]".to_string());
        }
        v.extend(self.selective_search.violations());
        v
    }

    pub fn accepts(&self, b: &BoundingBox, image_w: u32, image_h: u32) -> bool {
        let ratio = b.area() as f64 / (image_w as f64 * image_h as f64);
        let aspect = b.w as f64 / b.h as f64;
        (self.min_area_ratio..=self.max_area_ratio).contains(&ratio)
            && (self.aspect_min..=self.aspect_max).contains(&aspect)
    }
}

/// Raw proposals for one image. Selective search and random boxes still need
/// [`filter_regions`] and [`merge_regions`]; see [`discover_rois`].
pub fn propose_regions<R: Rng + ?Sized>(
    image: &RgbImage,
    image_id: u64,
    cfg: &ProposalConfig,
    rng: &mut R,
    annotation: Option<&[BoundingBox]>,
) -> Result<Vec<BoundingBox>> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Empty("image"));
    }
    match cfg.source {
        ProposalSource::SS => Ok(selective_search(image, &cfg.selective_search)),
        ProposalSource::GT => annotation
            .map(<[BoundingBox]>::to_vec)
            .ok_or(Error::MissingAnnotation(image_id)),
        ProposalSource::RG => {
            let n = match cfg.random_count {
                Some(n) => n,
                None => {
                    let ss = ProposalConfig {
                        source: ProposalSource::SS,
                        ..cfg.clone()
                    };
                    discover_rois(image, image_id, &ss, rng, None)?.len()
                }
            };
            Ok(random_boxes(w, h, n, cfg, rng))
        }
    }
}

/// The full per-image RoI pipeline. Selective-search proposals are filtered
/// and merged; ground-truth boxes are used as annotated; random boxes are drawn
/// inside the filter bounds already.
pub fn discover_rois<R: Rng + ?Sized>(
    image: &RgbImage,
    image_id: u64,
    cfg: &ProposalConfig,
    rng: &mut R,
    annotation: Option<&[BoundingBox]>,
) -> Result<Vec<BoundingBox>> {
    let raw = propose_regions(image, image_id, cfg, rng, annotation)?;
    Ok(match cfg.source {
        ProposalSource::SS => {
            let kept = filter_regions(&raw, image.width(), image.height(), cfg);
            merge_regions(&kept, cfg.merge_iou)
        }
        ProposalSource::GT | ProposalSource::RG => raw,
    })
}

/// `n` boxes with area ratio and aspect drawn uniformly (aspect on a log
/// scale) inside the configured bounds, positioned uniformly.
pub fn random_boxes<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    n: usize,
    cfg: &ProposalConfig,
    rng: &mut R,
) -> Vec<BoundingBox> {
    let image_area = width as f64 * height as f64;
    let (la, lb) = (cfg.aspect_min.ln(), cfg.aspect_max.ln());
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 1000 * n.max(1) {
        attempts += 1;
        let area = rng.random_range(cfg.min_area_ratio..=cfg.max_area_ratio) * image_area;
        let aspect = rng.random_range(la..=lb).exp();
        let bw = (area * aspect).sqrt().round() as u32;
        let bh = (area / aspect).sqrt().round() as u32;
        if bw == 0 || bh == 0 || bw > width || bh > height {
            continue;
        }
        let b = BoundingBox::new(
            rng.random_range(0..=width - bw),
            rng.random_range(0..=height - bh),
            bw,
            bh,
        );
        if cfg.accepts(&b, width, height) {
            out.push(b);
        }
    }
    out
}

/// Keeps boxes inside the area-ratio and aspect bands, preserving order.
pub fn filter_regions(
    boxes: &[BoundingBox],
    image_w: u32,
    image_h: u32,
    cfg: &ProposalConfig,
) -> Vec<BoundingBox> {
    boxes
        .iter()
        .filter(|b| cfg.accepts(b, image_w, image_h))
        .copied()
        .collect()
}

/// Replaces overlapping pairs by their union until no pair exceeds
/// `merge_iou`. The pair merged first is the one with the highest iou, then
/// the smaller combined area, then the lexicographically smaller boxes.
pub fn merge_regions(boxes: &[BoundingBox], merge_iou: f64) -> Vec<BoundingBox> {
    let mut cur = boxes.to_vec();
    loop {
        let mut best: Option<(f64, u64, (BoundingBox, BoundingBox), usize, usize)> = None;
        for i in 0..cur.len() {
            for j in i + 1..cur.len() {
                let v = iou(&cur[i], &cur[j]);
                if v <= merge_iou {
                    continue;
                }
                let area = cur[i].area() + cur[j].area();
                let key = (cur[i].min(cur[j]), cur[i].max(cur[j]));
                let better = match &best {
                    None => true,
                    Some((bv, ba, bk, _, _)) => {
                        v > *bv || (v == *bv && (area < *ba || (area == *ba && key < *bk)))
                    }
                };
                if better {
                    best = Some((v, area, key, i, j));
                }
            }
        }
        let Some((_, _, _, i, j)) = best else {
            return cur;
        };
        let merged = cur[i].union_box(&cur[j]);
        cur.remove(j);
        cur[i] = merged;
    }
}

/// A target crop and its context image with the RoI zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextObjectPair {
    pub target_image: RgbImage,
    pub context_image: RgbImage,
    pub roi: BoundingBox,
    pub source_image_id: u64,
}

pub fn make_pair(image: &RgbImage, roi: BoundingBox, image_id: u64) -> Result<ContextObjectPair> {
    let (w, h) = image.dimensions();
    if !roi.fits(w, h) {
        return Err(Error::InvalidRoi {
            roi,
            width: w,
            height: h,
        });
    }
    let target = image::imageops::crop_imm(image, roi.x, roi.y, roi.w, roi.h).to_image();
    let mut context = image.clone();
    black_out(&mut context, &roi);
    Ok(ContextObjectPair {
        target_image: target,
        context_image: context,
        roi,
        source_image_id: image_id,
    })
}

/// Sets every pixel inside `roi` to zero.
pub fn black_out(image: &mut RgbImage, roi: &BoundingBox) {
    for y in roi.y..roi.bottom().min(image.height()) {
        for x in roi.x..roi.right().min(image.width()) {
            image.put_pixel(x, y, image::Rgb([0, 0, 0]));
        }
    }
}
