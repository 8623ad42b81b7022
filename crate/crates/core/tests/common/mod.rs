#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use image::RgbImage;
use seco_core::blob;
use seco_core::evaluation::{priming_map, OcclusionScorer, DEFAULT_GRIDS, MAP_SIDE};
use seco_core::humanmaps::{clicks_to_map, read_logs, HumanMapConfig};
use seco_core::model::{ModelConfig, SecoModel};
use seco_core::nn::{FeatureMap, Module};
use seco_core::objective::{total_loss, total_loss_with_grad, LossWeights};
use seco_core::pairs::{discover_rois, filter_regions, iou, merge_regions, BoundingBox, ProposalConfig};
use seco_core::synthworld::{generate_scene, CoocConfig};

/// Central-difference step for the smooth head and objective.
pub const STEP: f64 = 1e-4;
/// Smaller step for the full model, whose ReLUs have kinks.
pub const FULL_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)` over whole tensors. Tensors whose gradient is
/// numerically zero (e.g. the key bias, which shifts every logit of a row
/// equally) are compared absolutely.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.random_range(-1.7..1.7))
}

pub fn random_views(n: usize, side: usize, seed: u64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_nhwc(Array4::from_shape_simple_fn((n, side, side, 3), || rng.random_range(-1.7..1.7)))
}

/// The gradient-check model: `D = 8`, `H = 6`, `K = 5`.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        tiny_widths: vec![4, 8],
        hidden: 6,
        slots: 5,
        ..Default::default()
    }
}

/// Gradient check of the objective with respect to both embeddings.
pub fn objective_errors(seed: u64, w: &LossWeights) -> (f64, f64) {
    let s_c = random_matrix(4, 6, 0.6, seed);
    let s_t = random_matrix(4, 6, 0.6, seed + 1000);
    let (_, g_c, g_t) = total_loss_with_grad(&s_c, &s_t, w).unwrap();
    let numeric = |which: usize| -> Vec<f64> {
        let base = if which == 0 { &s_c } else { &s_t };
        let mut out = Vec::new();
        for idx in 0..base.len() {
            let at = |delta: f64| {
                let mut m = base.clone();
                *m.iter_mut().nth(idx).unwrap() += delta;
                let (c, t) = if which == 0 { (&m, &s_t) } else { (&s_c, &m) };
                total_loss(c, t, w).unwrap().total
            };
            out.push((at(STEP) - at(-STEP)) / (2.0 * STEP));
        }
        out
    };
    (
        rel_error(&g_c.iter().copied().collect::<Vec<_>>(), &numeric(0)),
        rel_error(&g_t.iter().copied().collect::<Vec<_>>(), &numeric(1)),
    )
}

fn head_loss(m: &SecoModel<f64>, h_c: &Array2<f64>, h_t: &Array2<f64>, w: &LossWeights) -> f64 {
    let r = m.retrieve(h_c);
    total_loss(&r.s_c, &m.project_target(h_t), w).unwrap().total
}

fn perturb(m: &mut SecoModel<f64>, tensor: usize, idx: usize, delta: f64) {
    let mut params = m.params_mut("");
    *params[tensor].value.iter_mut().nth(idx).unwrap() += delta;
}

fn analytic_grads(m: &mut SecoModel<f64>) -> Vec<(String, ArrayD<f64>)> {
    m.params_mut("").into_iter().map(|p| (p.name, p.grad.to_owned())).collect()
}

/// Relative errors of the head gradients (projections, memory) and of the
/// two embedding gradients, keyed by name.
pub fn head_errors(seed: u64, w: &LossWeights) -> Vec<(String, f64)> {
    let mut m = SecoModel::<f64>::new(&small_config(), seed).unwrap();
    let h_c = random_matrix(4, 8, 1.0, seed + 1);
    let h_t = random_matrix(4, 8, 1.0, seed + 2);

    m.zero_grad();
    let r = m.retrieve(&h_c);
    let s_t = m.project_target(&h_t);
    let (_, g_c, g_t) = total_loss_with_grad(&r.s_c, &s_t, w).unwrap();
    let dh_t = m.phi_t.backward(&h_t, &g_t);
    let dh_c = m.retrieve_backward(&h_c, &r, &g_c);
    let grads = analytic_grads(&mut m);

    let mut out = Vec::new();
    for (t, (name, g)) in grads.iter().enumerate() {
        if name.contains("encoder") {
            continue;
        }
        let mut numeric = Vec::with_capacity(g.len());
        for idx in 0..g.len() {
            perturb(&mut m, t, idx, STEP);
            let up = head_loss(&m, &h_c, &h_t, w);
            perturb(&mut m, t, idx, -2.0 * STEP);
            let down = head_loss(&m, &h_c, &h_t, w);
            perturb(&mut m, t, idx, STEP);
            numeric.push((up - down) / (2.0 * STEP));
        }
        out.push((name.clone(), rel_error(&g.iter().copied().collect::<Vec<_>>(), &numeric)));
    }
    for (name, h, dh) in [("h_c", &h_c, &dh_c), ("h_t", &h_t, &dh_t)] {
        let mut numeric = Vec::with_capacity(h.len());
        for idx in 0..h.len() {
            let at = |delta: f64| {
                let mut x = h.clone();
                *x.iter_mut().nth(idx).unwrap() += delta;
                if name == "h_c" {
                    head_loss(&m, &x, &h_t, w)
                } else {
                    head_loss(&m, &h_c, &x, w)
                }
            };
            numeric.push((at(STEP) - at(-STEP)) / (2.0 * STEP));
        }
        out.push((name.to_string(), rel_error(&dh.iter().copied().collect::<Vec<_>>(), &numeric)));
    }
    out
}

fn full_loss(m: &mut SecoModel<f64>, t: &FeatureMap<f64>, c: &FeatureMap<f64>, w: &LossWeights) -> f64 {
    let tr = m.forward_train(t, c);
    total_loss(&tr.retrieval.s_c, &tr.s_t, w).unwrap().total
}

/// Relative error per parameter tensor of the whole model, on up to
/// `per_tensor` entries of each tensor.
pub fn full_model_errors(cfg: &ModelConfig, seed: u64, w: &LossWeights, per_tensor: usize) -> Vec<(String, f64)> {
    let mut m = SecoModel::<f64>::new(cfg, seed).unwrap();
    let t = random_views(4, 8, seed + 1);
    let c = random_views(4, 8, seed + 2);
    m.zero_grad();
    let tr = m.forward_train(&t, &c);
    let (_, g_c, g_t) = total_loss_with_grad(&tr.retrieval.s_c, &tr.s_t, w).unwrap();
    m.backward(tr, &g_t, &g_c);
    let grads = analytic_grads(&mut m);

    let mut out = Vec::new();
    for (ti, (name, g)) in grads.iter().enumerate() {
        let stride = (g.len() / per_tensor).max(1);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for idx in (0..g.len()).step_by(stride) {
            perturb(&mut m, ti, idx, FULL_STEP);
            let up = full_loss(&mut m, &t, &c, w);
            perturb(&mut m, ti, idx, -2.0 * FULL_STEP);
            let down = full_loss(&mut m, &t, &c, w);
            perturb(&mut m, ti, idx, FULL_STEP);
            a.push(*g.iter().nth(idx).unwrap());
            n.push((up - down) / (2.0 * FULL_STEP));
        }
        out.push((name.clone(), rel_error(&a, &n)));
    }
    out
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Pixels of the 30-click map whose `f32` bits differ from the golden file.
pub fn golden_mismatches() -> usize {
    let logs = read_logs(&fixture("clicks_30.jsonl")).unwrap();
    let map = clicks_to_map(&logs, &HumanMapConfig::default()).unwrap();
    let (shape, expected) = blob::read(&fixture("human_map_30.bin")).unwrap();
    assert_eq!(shape, vec![224, 224]);
    map.iter().zip(&expected).filter(|(a, e)| (**a as f32).to_bits() != e.to_bits()).count()
}

/// Worst deviation of an attention row sum from one, and the smallest entry,
/// for a random model and input drawn from `seed`.
pub fn attention_row_extremes(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        tiny_widths: vec![4, rng.random_range(2..12)],
        hidden: rng.random_range(1..10),
        slots: rng.random_range(1..12),
        ..Default::default()
    };
    let d = cfg.embed_dim();
    let mut m = SecoModel::<f64>::new(&cfg, seed).unwrap();
    // Stretch the logits so saturated rows get exercised too.
    m.phi_c.weight.mapv_inplace(|w| w * 10.0);
    let h = random_matrix(rng.random_range(1..6), d, rng.random_range(0.1..20.0), seed ^ 0x5eed);
    let attn = m.retrieve(&h).attn.unwrap();
    let worst_sum = attn.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let min = attn.iter().copied().fold(f64::INFINITY, f64::min);
    (worst_sum, min)
}

/// Largest gap between retrieval on a hand-built `K = 2, H = 2` model and
/// values worked out on paper: query `(1, 2)`, keys `(2, 0)` and `(0, -1)`,
/// logits `(sqrt 2, -sqrt 2)`.
pub fn attention_oracle_error() -> f64 {
    let cfg = ModelConfig {
        tiny_widths: vec![2],
        hidden: 2,
        slots: 2,
        projection_bias: false,
        ..Default::default()
    };
    let mut m = SecoModel::<f64>::new(&cfg, 0).unwrap();
    m.phi_c.weight = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    m.phi_k.weight = ndarray::array![[2.0, 0.0], [0.0, -1.0]];
    m.memory = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let r = m.retrieve(&ndarray::array![[1.0, 2.0]]);
    let expected = [0.9441927807928303, 0.05580721920716969];
    let attn = r.attn.unwrap();
    (0..2)
        .flat_map(|k| [(attn[[0, k]] - expected[k]).abs(), (r.s_c[[0, k]] - expected[k]).abs()])
        .fold(0.0, f64::max)
}

/// Up to 40 boxes inside a `side x side` image.
pub fn random_box_set(seed: u64, side: u32) -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rng.random_range(0..40))
        .map(|_| {
            let w = rng.random_range(1..=side);
            let h = rng.random_range(1..=side);
            BoundingBox::new(rng.random_range(0..=side - w), rng.random_range(0..=side - h), w, h)
        })
        .collect()
}

/// Filtering twice changes nothing and merged boxes overlap by at most the
/// merge threshold.
pub fn box_invariants_hold(boxes: &[BoundingBox], side: u32) -> bool {
    let cfg = ProposalConfig::default();
    let once = filter_regions(boxes, side, side, &cfg);
    let merged = merge_regions(&once, cfg.merge_iou);
    let idempotent = filter_regions(&once, side, side, &cfg) == once;
    let separated = merged
        .iter()
        .enumerate()
        .all(|(i, a)| merged[i + 1..].iter().all(|b| iou(a, b) <= cfg.merge_iou));
    idempotent && separated
}

/// Scores 1 for flaps touching `region`, 0 otherwise.
pub struct RegionStub(pub BoundingBox);

impl OcclusionScorer for RegionStub {
    fn probabilities(&self, _: &RgbImage, flaps: &[BoundingBox], _: usize) -> seco_core::Result<Vec<f64>> {
        Ok(flaps.iter().map(|f| if f.intersection_area(&self.0) > 0 { 1.0 } else { 0.0 }).collect())
    }
}

/// Share of the top-decile mass of the stub's priming map that falls inside
/// `region` grown by one coarsest patch on every side.
pub fn stub_top_decile_share(region: BoundingBox) -> f64 {
    let image = RgbImage::new(MAP_SIDE as u32, MAP_SIDE as u32);
    let map = priming_map(&RegionStub(region), &image, 0, &DEFAULT_GRIDS).unwrap();
    let pad = *DEFAULT_GRIDS.iter().max().unwrap() as u32;
    let side = MAP_SIDE as u32;
    let grown = BoundingBox::from_corners(
        region.x.saturating_sub(pad),
        region.y.saturating_sub(pad),
        (region.right() + pad).min(side),
        (region.bottom() + pad).min(side),
    );
    let mut values: Vec<f64> = map.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let cut = values[values.len() / 10 - 1];
    let (mut inside, mut total) = (0.0, 0.0);
    for ((y, x), &v) in map.indexed_iter() {
        if v >= cut {
            total += v;
            if grown.contains_point(x as u32, y as u32) {
                inside += v;
            }
        }
    }
    inside / total
}

/// Fraction of ground-truth objects in `n` synth-world scenes matched at
/// `iou >= 0.5` by a selective-search RoI after filtering and merging.
pub fn selective_search_recall(n: u64) -> f64 {
    let world = CoocConfig::default();
    let cfg = ProposalConfig::default();
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let scene = generate_scene(&world, &mut rng).unwrap();
        let rois = discover_rois(&scene.image, i, &cfg, &mut rng, None).unwrap();
        for o in &scene.objects {
            total += 1;
            if rois.iter().any(|r| iou(r, &o.bbox) >= 0.5) {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

/// Loss weightings the gradient checks cover.
pub fn weight_sets() -> Vec<LossWeights> {
    vec![
        LossWeights::default(),
        LossWeights::new(1.0, 0.0, 0.0),
        LossWeights::new(0.0, 1.0, 0.0),
        LossWeights::new(0.0, 0.0, 1.0),
        LossWeights {
            halve_var: true,
            ..LossWeights::default()
        },
    ]
}
