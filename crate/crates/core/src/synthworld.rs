//! Procedural scenes with controlled object/context co-occurrence.
//!
//! A scene has one context class, rendered as a background texture over the
//! whole canvas, and a handful of glyph objects whose classes are drawn from
//! the context's row of `P`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pairs::{Annotation, AnnotationFile, BoundingBox, Category, ImageEntry, ProposalConfig};
use crate::rng::stream;

const SHAPES: [&str; 4] = ["disc", "square", "triangle", "cross"];
const HUES: [(&str, [u8; 3]); 2] = [("red", [220, 40, 40]), ("navy", [30, 30, 120])];
const CONTEXTS: [(&str, [f32; 3], [f32; 3]); 4] = [
    ("meadow", [104.0, 156.0, 88.0], [150.0, 190.0, 112.0]),
    ("dunes", [196.0, 172.0, 112.0], [226.0, 206.0, 156.0]),
    ("sky", [116.0, 158.0, 204.0], [160.0, 196.0, 230.0]),
    ("stone", [132.0, 132.0, 132.0], [178.0, 178.0, 178.0]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectCount {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Range of glyph box sides in pixels.
    pub glyph_min: u32,
    pub glyph_max: u32,
    /// Free pixels kept around every glyph.
    pub margin: u32,
    /// Amplitude of uniform per-pixel background noise (0-255 scale).
    pub noise: f32,
    /// Period of the background pattern in pixels.
    pub period: f32,
    /// Amplitude of a per-scene, per-channel shift of the context palette.
    pub palette_jitter: f32,
    /// Scale of the pattern's swing between the two palette colours.
    pub contrast: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            glyph_min: 20,
            glyph_max: 44,
            margin: 3,
            noise: 6.0,
            period: 28.0,
            palette_jitter: 0.0,
            contrast: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoocConfig {
    pub context_classes: Vec<String>,
    pub object_classes: Vec<String>,
    /// `p[context][object]`, rows summing to one.
    pub p: Vec<Vec<f64>>,
    pub context_prior: Vec<f64>,
    pub objects_per_scene: ObjectCount,
    pub canvas: u32,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for CoocConfig {
    /// Four contexts, each owning two of the eight objects with equal odds.
    fn default() -> Self {
        let p = (0..4)
            .map(|c| (0..8).map(|o| if o / 2 == c { 0.5 } else { 0.0 }).collect())
            .collect();
        Self::with_p(p)
    }
}

impl CoocConfig {
    fn with_p(p: Vec<Vec<f64>>) -> Self {
        Self {
            context_classes: CONTEXTS.iter().map(|c| c.0.to_string()).collect(),
            object_classes: HUES
                .iter()
                .flat_map(|(hue, _)| SHAPES.iter().map(move |s| format!("{hue}-{s}")))
                .collect(),
            p,
            context_prior: vec![0.25; 4],
            objects_per_scene: ObjectCount { min: 3, max: 6 },
            canvas: 224,
            seed: 0,
            render: RenderConfig::default(),
        }
    }

    /// Context `c` always holds object `2c`.
    pub fn deterministic() -> Self {
        let p = (0..4)
            .map(|c| (0..8).map(|o| if o == 2 * c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::with_p(p)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let nc = self.context_classes.len();
        let no = self.object_classes.len();
        if nc == 0 || nc > CONTEXTS.len() {
            v.push(format!("synthworld: between 1 and {} context classes supported", CONTEXTS.len()));
        }
        if no == 0 || no > SHAPES.len() * HUES.len() {
            v.push(format!("synthworld: between 1 and {} object classes supported", SHAPES.len() * HUES.len()));
        }
        if self.p.len() != nc || self.p.iter().any(|r| r.len() != no) {
            v.push(format!("synthworld: p must be {nc}x{no}"));
        } else {
            for (i, row) in self.p.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|x| *x < 0.0) || (s - 1.0).abs() > 1e-9 {
                    v.push(format!("synthworld: p row {i} must be non-negative and sum to 1"));
                }
            }
        }
        let s: f64 = self.context_prior.iter().sum();
        if self.context_prior.len() != nc || self.context_prior.iter().any(|x| *x < 0.0) || (s - 1.0).abs() > 1e-9 {
            v.push("synthworld: context_prior must be a distribution over contexts".into());
        }
        let n = &self.objects_per_scene;
        if n.min < 1 || n.min > n.max {
            v.push("synthworld: need 1 <= objects_per_scene.min <= max".into());
        }
        let r = &self.render;
        if r.glyph_min < 4 || r.glyph_min > r.glyph_max || r.glyph_max >= self.canvas {
            v.push("synthworld: need 4 <= glyph_min <= glyph_max < canvas".into());
        }
        if !(r.period > 0.0) || r.noise < 0.0 || r.palette_jitter < 0.0 || r.contrast < 0.0 {
            v.push("synthworld: render period must be positive; noise, palette_jitter and contrast non-negative".into());
        }
        v
    }
}

/// Best lift-the-flap accuracy achievable from the context class alone.
pub fn bayes_optimal_accuracy(cfg: &CoocConfig) -> f64 {
    cfg.context_prior
        .iter()
        .zip(&cfg.p)
        .map(|(prior, row)| prior * row.iter().copied().fold(0.0, f64::max))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub bbox: BoundingBox,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image: RgbImage,
    pub context_label: usize,
    pub objects: Vec<PlacedObject>,
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: last index with positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Paints the context texture over `area`.
pub fn paint_background<R: Rng + ?Sized>(
    img: &mut RgbImage,
    context: usize,
    area: BoundingBox,
    render: &RenderConfig,
    rng: &mut R,
) {
    let (_, mut lo, hi) = CONTEXTS[context % CONTEXTS.len()];
    let mut swing = [0.0f32; 3];
    for c in 0..3 {
        swing[c] = render.contrast * (hi[c] - lo[c]);
        if render.palette_jitter > 0.0 {
            lo[c] += rng.random_range(-render.palette_jitter..=render.palette_jitter);
        }
    }
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let k = std::f32::consts::TAU / render.period;
    for y in area.y..area.bottom() {
        for x in area.x..area.right() {
            let (fx, fy) = (x as f32, y as f32);
            let wave = match context % CONTEXTS.len() {
                0 => (k * fy + phase).sin(),
                1 => (k * (fx + fy) * std::f32::consts::FRAC_1_SQRT_2 + phase).sin(),
                2 => (k * fx + phase).sin(),
                _ => (k * fx + phase).sin() * (k * fy + phase).sin(),
            };
            let t = 0.5 + 0.5 * wave;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let n = if render.noise > 0.0 {
                    rng.random_range(-render.noise..=render.noise)
                } else {
                    0.0
                };
                px[c] = (lo[c] + t * swing[c] + n).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
}

fn inside_shape(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        1 => true,
        2 => (u - 0.5).abs() <= 0.5 * v,
        _ => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

/// Draws glyph `label` opaquely into `bbox`. Only shape pixels are written,
/// and their colour depends on the object class alone.
pub fn render_glyph(img: &mut RgbImage, bbox: &BoundingBox, label: usize) {
    let shape = label % SHAPES.len();
    let color = HUES[(label / SHAPES.len()) % HUES.len()].1;
    for y in bbox.y..bbox.bottom() {
        for x in bbox.x..bbox.right() {
            let u = (x - bbox.x) as f32 + 0.5;
            let v = (y - bbox.y) as f32 + 0.5;
            if inside_shape(shape, u / bbox.w as f32, v / bbox.h as f32) {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn sample_box<R: Rng + ?Sized>(cfg: &CoocConfig, area: &BoundingBox, rng: &mut R) -> Option<BoundingBox> {
    let r = &cfg.render;
    let side = rng.random_range(r.glyph_min..=r.glyph_max) as f64;
    let aspect: f64 = rng.random_range(0.8f64.ln()..=1.25f64.ln()).exp();
    let w = ((side * aspect.sqrt()).round() as u32).max(1);
    let h = ((side / aspect.sqrt()).round() as u32).max(1);
    if w > area.w || h > area.h {
        return None;
    }
    Some(BoundingBox::new(
        area.x + rng.random_range(0..=area.w - w),
        area.y + rng.random_range(0..=area.h - h),
        w,
        h,
    ))
}

fn separated(a: &BoundingBox, b: &BoundingBox, margin: u32) -> bool {
    a.right() + margin <= b.x
        || b.right() + margin <= a.x
        || a.bottom() + margin <= b.y
        || b.bottom() + margin <= a.y
}

/// Places `labels.len()` glyph boxes inside `area`, avoiding `occupied`.
/// Returns `None` when a box cannot be placed within 200 attempts.
pub fn place_objects<R: Rng + ?Sized>(
    cfg: &CoocConfig,
    labels: &[usize],
    area: &BoundingBox,
    occupied: &[BoundingBox],
    rng: &mut R,
) -> Option<Vec<PlacedObject>> {
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(labels.len());
    for &label in labels {
        let mut found = None;
        for _ in 0..200 {
            let Some(b) = sample_box(cfg, area, rng) else { continue };
            let clear = placed
                .iter()
                .map(|p| &p.bbox)
                .chain(occupied)
                .all(|o| separated(&b, o, cfg.render.margin));
            if clear {
                found = Some(b);
                break;
            }
        }
        placed.push(PlacedObject { bbox: found?, label });
    }
    Some(placed)
}

/// Samples the context, object labels and glyph boxes of a scene without
/// rendering it.
pub fn sample_layout<R: Rng + ?Sized>(cfg: &CoocConfig, rng: &mut R) -> Result<(usize, Vec<PlacedObject>)> {
    let context = sample_index(&cfg.context_prior, rng);
    let n = rng.random_range(cfg.objects_per_scene.min..=cfg.objects_per_scene.max);
    let labels: Vec<usize> = (0..n).map(|_| sample_index(&cfg.p[context], rng)).collect();
    let canvas = BoundingBox::new(0, 0, cfg.canvas, cfg.canvas);
    let mut count = n;
    loop {
        if let Some(objs) = place_objects(cfg, &labels[..count], &canvas, &[], rng) {
            return Ok((context, objs));
        }
        if count <= cfg.objects_per_scene.min {
            return Err(Error::Placement(count));
        }
        count -= 1;
    }
}

pub fn generate_scene<R: Rng + ?Sized>(cfg: &CoocConfig, rng: &mut R) -> Result<SceneRecord> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations));
    }
    let (context, objects) = sample_layout(cfg, rng)?;
    let mut image = RgbImage::new(cfg.canvas, cfg.canvas);
    paint_background(&mut image, context, BoundingBox::new(0, 0, cfg.canvas, cfg.canvas), &cfg.render, rng);
    for o in &objects {
        render_glyph(&mut image, &o.bbox, o.label);
    }
    let record = SceneRecord {
        image,
        context_label: context,
        objects,
    };
    debug_assert!(scene_invariants_hold(&record));
    Ok(record)
}

/// Object-free canvas with `inner`'s background over `region` and `outer`'s
/// everywhere else.
pub fn two_context_scene<R: Rng + ?Sized>(
    cfg: &CoocConfig,
    inner: usize,
    outer: usize,
    region: BoundingBox,
    rng: &mut R,
) -> Result<RgbImage> {
    let n = cfg.context_classes.len();
    if inner >= n || outer >= n {
        return Err(Error::UnknownClass(inner.max(outer).to_string()));
    }
    if region.right() > cfg.canvas || region.bottom() > cfg.canvas || region.area() == 0 {
        return Err(Error::Shape(format!("region {region:?} outside a {} canvas", cfg.canvas)));
    }
    let mut image = RgbImage::new(cfg.canvas, cfg.canvas);
    paint_background(&mut image, outer, BoundingBox::new(0, 0, cfg.canvas, cfg.canvas), &cfg.render, rng);
    paint_background(&mut image, inner, region, &cfg.render, rng);
    Ok(image)
}

/// Pairwise disjoint boxes that all pass the default proposal filter.
pub fn scene_invariants_hold(scene: &SceneRecord) -> bool {
    let filter = ProposalConfig::default();
    let (w, h) = scene.image.dimensions();
    let boxes: Vec<_> = scene.objects.iter().map(|o| o.bbox).collect();
    boxes.iter().all(|b| b.fits(w, h) && filter.accepts(b, w, h))
        && boxes
            .iter()
            .enumerate()
            .all(|(i, a)| boxes[i + 1..].iter().all(|b| a.intersection_area(b) == 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub annotations: PathBuf,
    pub images: PathBuf,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: CoocConfig,
    pub bayes_optimal_accuracy: f64,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
    }
}

/// Whether object `o` has non-zero probability in some context that occurs.
pub fn occurs(cfg: &CoocConfig, o: usize) -> bool {
    cfg.p.iter().zip(&cfg.context_prior).any(|(row, &prior)| prior > 0.0 && row[o] > 0.0)
}

/// Renders scenes `ids` into an annotation file plus in-memory images.
pub fn render_split(cfg: &CoocConfig, split_tag: u64, ids: std::ops::Range<u64>) -> Result<(AnnotationFile, Vec<RgbImage>)> {
    let mut ann = AnnotationFile {
        categories: cfg
            .object_classes
            .iter()
            .enumerate()
            .filter(|(i, _)| occurs(cfg, *i))
            .map(|(i, name)| Category {
                id: i as u64,
                name: name.clone(),
            })
            .collect(),
        ..Default::default()
    };
    let mut images = Vec::with_capacity(ids.end.saturating_sub(ids.start) as usize);
    for (index, id) in ids.enumerate() {
        let mut rng = stream(cfg.seed, &[split_tag, index as u64]);
        let scene = generate_scene(cfg, &mut rng)?;
        ann.images.push(ImageEntry {
            id,
            file_name: format!("{id:06}.png"),
            width: cfg.canvas,
            height: cfg.canvas,
            context: Some(scene.context_label),
        });
        for o in &scene.objects {
            ann.annotations.push(Annotation {
                image_id: id,
                bbox: o.bbox,
                category_id: o.label as u64,
            });
        }
        images.push(scene.image);
    }
    Ok((ann, images))
}

/// Writes `train/` and `test/` splits (PNG images plus annotation JSON) and a
/// `manifest.json`. Train and test use disjoint random streams and ids.
pub fn generate_dataset(
    cfg: &CoocConfig,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Empty("dataset split"));
    }
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() && !overwrite {
        return Err(Error::OutputExists(manifest_path));
    }
    let write_split = |name: &str, tag: u64, ids: std::ops::Range<u64>| -> Result<SplitManifest> {
        let dir = out_dir.join(name);
        let image_dir = dir.join("images");
        fs::create_dir_all(&image_dir)?;
        let (ann, images) = render_split(cfg, tag, ids)?;
        for (entry, img) in ann.images.iter().zip(&images) {
            img.save(image_dir.join(&entry.file_name))?;
        }
        let bytes = serde_json::to_vec_pretty(&ann)?;
        fs::write(dir.join("annotations.json"), &bytes)?;
        Ok(SplitManifest {
            annotations: PathBuf::from(name).join("annotations.json"),
            images: PathBuf::from(name).join("images"),
            count: ann.images.len(),
            sha256: hex_digest(&bytes),
        })
    };
    let train = write_split("train", 0, 1..n_train as u64 + 1)?;
    let test = write_split("test", 1, n_train as u64 + 1..(n_train + n_test) as u64 + 1)?;
    let manifest = DatasetManifest {
        config: cfg.clone(),
        bayes_optimal_accuracy: bayes_optimal_accuracy(cfg),
        train,
        test,
    };
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bayes_examples() {
        assert_eq!(bayes_optimal_accuracy(&CoocConfig::deterministic()), 1.0);
        let mut cfg = CoocConfig::default();
        cfg.p = vec![vec![0.125; 8]; 4];
        assert!((bayes_optimal_accuracy(&cfg) - 0.125).abs() < 1e-12);
        cfg.context_classes.truncate(2);
        cfg.object_classes.truncate(2);
        cfg.p = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        cfg.context_prior = vec![0.5, 0.5];
        assert!((bayes_optimal_accuracy(&cfg) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn scenes_are_seeded() {
        let cfg = CoocConfig::default();
        let a = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.objects, b.objects);
    }

    #[test]
    fn deterministic_p_gives_one_label_per_scene() {
        let cfg = CoocConfig::deterministic();
        for seed in 0..20 {
            let s = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(s.objects.iter().all(|o| o.label == 2 * s.context_label));
            assert!(scene_invariants_hold(&s));
        }
    }

    #[test]
    fn glyphs_do_not_depend_on_context() {
        let b = BoundingBox::new(10, 10, 30, 26);
        let cfg = CoocConfig::default();
        let mut crops = Vec::new();
        for ctx in 0..4 {
            let mut img = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
            paint_background(&mut img, ctx, BoundingBox::new(0, 0, 64, 64), &cfg.render, &mut ChaCha8Rng::seed_from_u64(1));
            let mut neutral = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
            render_glyph(&mut img, &b, 5);
            render_glyph(&mut neutral, &b, 5);
            // Glyph pixels are the ones differing from the neutral fill.
            let mask: Vec<bool> = neutral.pixels().map(|p| p.0 != [128, 128, 128]).collect();
            let glyph: Vec<[u8; 3]> = img
                .pixels()
                .zip(&mask)
                .filter(|(_, m)| **m)
                .map(|(p, _)| p.0)
                .collect();
            crops.push(glyph);
        }
        assert!(crops.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn empirical_cooccurrence_matches_p() {
        let cfg = CoocConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![vec![0usize; 8]; 4];
        for _ in 0..10_000 {
            let (ctx, objects) = sample_layout(&cfg, &mut rng).unwrap();
            for o in objects {
                counts[ctx][o.label] += 1;
            }
        }
        for (row, p) in counts.iter().zip(&cfg.p) {
            let n: usize = row.iter().sum();
            let tv: f64 = row.iter().zip(p).map(|(c, q)| (*c as f64 / n as f64 - q).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.02, "tv {tv}");
        }
    }
}
