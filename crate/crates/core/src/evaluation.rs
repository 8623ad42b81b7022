//! Lift-the-flap probing, occlusion priming maps and the memory probe.

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{eval_context_view, AugmentConfig};
use crate::blob;
use crate::dataset::{FlapSample, Split};
use crate::error::{Error, Result};
use crate::imaging::{heatmap_png, matrix_png, min_max_normalize, upsample_bilinear};
use crate::model::{softmax_rows, SecoModel};
use crate::nn::FeatureMap;
use crate::pairs::BoundingBox;

/// Side of priming maps, in pixels.
pub const MAP_SIDE: usize = 224;
/// Patch sides of the occlusion sweep.
pub const DEFAULT_GRIDS: [usize; 5] = [8, 14, 28, 56, 112];

const FEATURE_CHUNK: usize = 64;

/// Which context features the probe reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    #[serde(rename = "h_c")]
    HC,
    #[serde(rename = "s_c")]
    SC,
    #[default]
    #[serde(rename = "concat")]
    Concat,
}

impl std::str::FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h_c" => Ok(Self::HC),
            "s_c" => Ok(Self::SC),
            "concat" => Ok(Self::Concat),
            other => Err(Error::InvalidConfig(vec![format!("unknown probe input mode {other:?}")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub input_mode: InputMode,
    /// Full-batch gradient steps.
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Concat,
            iterations: 300,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl ProbeConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0) {
            v.push("evaluation.probe.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push("evaluation.probe.momentum must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            v.push("evaluation.probe.weight_decay must be non-negative".into());
        }
        v
    }
}

/// Linear classifier over frozen context features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `(features, classes)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input_mode: InputMode,
    pub classes: Vec<String>,
}

impl LinearProbe {
    /// All-zero probe; every prediction is class 0.
    pub fn zeros(dim: usize, classes: Vec<String>, input_mode: InputMode) -> Self {
        let c = classes.len();
        Self {
            weight: Array2::zeros((dim, c)),
            bias: Array1::zeros(c),
            input_mode,
            classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.weight) + &self.bias
    }

    pub fn probabilities(&self, features: &Array2<f64>) -> Array2<f64> {
        softmax_rows(&self.logits(features))
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predict(&self, features: &Array2<f64>) -> Vec<usize> {
        self.logits(features).rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if p.classes.len() < 2 || p.weight.ncols() != p.classes.len() || p.bias.len() != p.classes.len() {
            return Err(Error::Shape("probe weight, bias and class list disagree".into()));
        }
        Ok(p)
    }
}

/// Index of the first maximum.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn stack(views: &[Array3<f32>]) -> FeatureMap<f32> {
    let (h, w, c) = views[0].dim();
    let mut out = Array4::<f32>::zeros((views.len(), h, w, c));
    for (i, v) in views.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(v);
    }
    FeatureMap::from_nhwc(out)
}

/// Probe input features for a batch of normalized context views.
pub fn view_features(model: &SecoModel<f32>, views: &[Array3<f32>], mode: InputMode) -> Array2<f64> {
    let dim = feature_dim(model, mode);
    let mut out = Array2::zeros((views.len(), dim));
    for (c, chunk) in views.chunks(FEATURE_CHUNK).enumerate() {
        let (h_c, r) = model.context_features(&stack(chunk));
        let feats = match mode {
            InputMode::HC => h_c,
            InputMode::SC => r.s_c,
            InputMode::Concat => ndarray::concatenate![Axis(1), h_c, r.s_c],
        };
        out.slice_mut(s![c * FEATURE_CHUNK..c * FEATURE_CHUNK + chunk.len(), ..])
            .assign(&feats.mapv(f64::from));
    }
    out
}

pub fn feature_dim(model: &SecoModel<f32>, mode: InputMode) -> usize {
    match mode {
        InputMode::HC => model.embed_dim(),
        InputMode::SC => model.hidden(),
        InputMode::Concat => model.embed_dim() + model.hidden(),
    }
}

/// Features of every sample's flapped context view.
pub fn flap_features(
    model: &SecoModel<f32>,
    split: &Split,
    samples: &[FlapSample],
    mode: InputMode,
    augment: &AugmentConfig,
) -> Array2<f64> {
    let mut out = Array2::zeros((samples.len(), feature_dim(model, mode)));
    for (c, chunk) in samples.chunks(FEATURE_CHUNK).enumerate() {
        let views: Vec<_> = chunk
            .iter()
            .map(|s| eval_context_view(&split.images[s.image], Some(&s.flap), augment))
            .collect();
        out.slice_mut(s![c * FEATURE_CHUNK..c * FEATURE_CHUNK + chunk.len(), ..])
            .assign(&view_features(model, &views, mode));
    }
    out
}

/// Multinomial logistic regression on standardized features, folded back
/// into the raw feature space.
pub fn fit_probe(
    features: &Array2<f64>,
    labels: &[usize],
    classes: Vec<String>,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations));
    }
    let (n, d) = features.dim();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} feature rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::UnknownClass(bad.to_string()));
    }
    let c = classes.len();
    let mut seen = vec![false; c];
    labels.iter().for_each(|&l| seen[l] = true);
    let missing: Vec<String> = classes.iter().zip(&seen).filter(|(_, s)| !**s).map(|(n, _)| n.clone()).collect();
    if !missing.is_empty() || c < 2 {
        return Err(Error::MissingClasses(missing));
    }

    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let std = features.std_axis(Axis(0), 0.0).mapv(|v| if v > 1e-12 { v } else { 1.0 });
    let x = (features - &mean) / &std;
    let mut onehot = Array2::<f64>::zeros((n, c));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }

    let mut w = Array2::<f64>::zeros((d, c));
    let mut b = Array1::<f64>::zeros(c);
    let mut vw = w.clone();
    let mut vb = b.clone();
    let inv_n = 1.0 / n as f64;
    for _ in 0..cfg.iterations {
        let p = softmax_rows(&(x.dot(&w) + &b));
        let err = (p - &onehot) * inv_n;
        let gw = x.t().dot(&err) + &w * cfg.weight_decay;
        let gb = err.sum_axis(Axis(0));
        vw = vw * cfg.momentum + gw;
        vb = vb * cfg.momentum + gb;
        w.scaled_add(-cfg.lr, &vw);
        b.scaled_add(-cfg.lr, &vb);
    }

    let weight = &w / &std.clone().insert_axis(Axis(1));
    let bias = b - mean.dot(&weight);
    Ok(LinearProbe {
        weight,
        bias,
        input_mode: cfg.input_mode,
        classes,
    })
}

/// Trains a probe on frozen features of flapped context views.
pub fn train_probe(
    model: &SecoModel<f32>,
    split: &Split,
    samples: &[FlapSample],
    cfg: &ProbeConfig,
    augment: &AugmentConfig,
) -> Result<LinearProbe> {
    if samples.is_empty() {
        return Err(Error::Empty("probe training set"));
    }
    let feats = flap_features(model, split, samples, cfg.input_mode, augment);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    fit_probe(&feats, &labels, split.class_names(), cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlapReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub input_mode: InputMode,
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions, {} labels", predictions.len(), labels.len())));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Top-1 accuracy on flapped test samples.
pub fn lift_the_flap(
    model: &SecoModel<f32>,
    probe: &LinearProbe,
    split: &Split,
    samples: &[FlapSample],
    augment: &AugmentConfig,
) -> Result<FlapReport> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let feats = flap_features(model, split, samples, probe.input_mode, augment);
    if feats.ncols() != probe.weight.nrows() {
        return Err(Error::Shape(format!(
            "probe expects {} features, model gives {}",
            probe.weight.nrows(),
            feats.ncols()
        )));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let predictions = probe.predict(&feats);
    let acc = accuracy(&predictions, &labels)?;
    Ok(FlapReport {
        accuracy: acc,
        correct: (acc * labels.len() as f64).round() as usize,
        total: labels.len(),
        input_mode: probe.input_mode,
    })
}

/// Class probability of an image under a set of flaps.
pub trait OcclusionScorer {
    /// Probability of `class` for `image` with each flap blacked out in turn.
    fn probabilities(&self, image: &RgbImage, flaps: &[BoundingBox], class: usize) -> Result<Vec<f64>>;
}

/// A frozen model with its probe.
pub struct ProbedModel<'a> {
    pub model: &'a SecoModel<f32>,
    pub probe: &'a LinearProbe,
    pub augment: &'a AugmentConfig,
}

impl OcclusionScorer for ProbedModel<'_> {
    fn probabilities(&self, image: &RgbImage, flaps: &[BoundingBox], class: usize) -> Result<Vec<f64>> {
        if class >= self.probe.num_classes() {
            return Err(Error::UnknownClass(class.to_string()));
        }
        let mut out = Vec::with_capacity(flaps.len());
        for chunk in flaps.chunks(FEATURE_CHUNK) {
            let views: Vec<_> = chunk.iter().map(|f| eval_context_view(image, Some(f), self.augment)).collect();
            let p = self.probe.probabilities(&view_features(self.model, &views, self.probe.input_mode));
            out.extend(p.column(class).iter().copied());
        }
        Ok(out)
    }
}

fn to_map_side(image: &RgbImage) -> RgbImage {
    let side = MAP_SIDE as u32;
    if image.dimensions() == (side, side) {
        image.clone()
    } else {
        image::imageops::resize(image, side, side, image::imageops::FilterType::Triangle)
    }
}

/// Multi-scale occlusion map for `class` over a 224x224 version of `image`.
pub fn priming_map(
    scorer: &dyn OcclusionScorer,
    image: &RgbImage,
    class: usize,
    grids: &[usize],
) -> Result<Array2<f64>> {
    if grids.is_empty() {
        return Err(Error::Empty("grid sizes"));
    }
    if let Some(&g) = grids.iter().find(|&&g| g == 0 || !MAP_SIDE.is_multiple_of(g)) {
        return Err(Error::GridSize(g));
    }
    let image = to_map_side(image);
    let mut acc = Array2::<f64>::zeros((MAP_SIDE, MAP_SIDE));
    for &g in grids {
        let n = MAP_SIDE / g;
        let flaps: Vec<BoundingBox> = (0..n * n)
            .map(|i| BoundingBox::new(((i % n) * g) as u32, ((i / n) * g) as u32, g as u32, g as u32))
            .collect();
        let probs = scorer.probabilities(&image, &flaps, class)?;
        let grid = Array2::from_shape_vec((n, n), probs).map_err(|e| Error::Shape(e.to_string()))?;
        acc += &upsample_bilinear(min_max_normalize(&grid).view(), MAP_SIDE, MAP_SIDE);
    }
    acc /= grids.len() as f64;
    Ok(min_max_normalize(&acc))
}

/// Root mean squared difference of two equal-shaped maps.
pub fn rmse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Empty("map"));
    }
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// Writes `<stem>.bin` (float32 blob) and `<stem>.png` (heatmap).
pub fn write_map(map: &Array2<f64>, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    blob::write(&stem.with_extension("bin"), map.shape(), map.iter().map(|&v| v as f32))?;
    heatmap_png(map.view()).save(stem.with_extension("png"))?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<Array2<f64>> {
    let (shape, data) = blob::read(path)?;
    if shape.len() != 2 {
        return Err(Error::Shape(format!("expected a 2-D map, found shape {shape:?}")));
    }
    Array2::from_shape_vec((shape[0], shape[1]), data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Pairwise KL divergences between per-class slot distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub classes: Vec<String>,
    /// `values[[i, j]] = KL(p_i || p_j)`; NaN where either class is undefined.
    pub values: Array2<f64>,
    /// Argmax-slot counts, `(classes, slots)`.
    pub frequencies: Array2<f64>,
    /// False for classes without samples.
    pub defined: Vec<bool>,
}

impl KlMatrix {
    /// Builds the matrix from argmax-slot counts.
    pub fn from_frequencies(classes: Vec<String>, frequencies: Array2<f64>) -> Result<Self> {
        let (c, k) = frequencies.dim();
        if c != classes.len() || k == 0 {
            return Err(Error::Shape(format!("{} classes, frequency matrix {:?}", classes.len(), (c, k))));
        }
        let defined: Vec<bool> = frequencies.rows().into_iter().map(|r| r.sum() > 0.0).collect();
        let dists: Vec<Array1<f64>> = frequencies
            .rows()
            .into_iter()
            .map(|r| {
                let normed = min_max_normalize(&r.to_owned().insert_axis(Axis(0)));
                softmax_rows(&normed).row(0).to_owned()
            })
            .collect();
        let values = Array2::from_shape_fn((c, c), |(i, j)| {
            if !defined[i] || !defined[j] {
                f64::NAN
            } else if i == j {
                0.0
            } else {
                dists[i].iter().zip(dists[j].iter()).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0)
            }
        });
        Ok(Self {
            classes,
            values,
            frequencies,
            defined,
        })
    }

    /// Mean over defined off-diagonal entries, split by whether the two
    /// classes share a group.
    pub fn grouped_means(&self, groups: &[usize]) -> Result<(f64, f64)> {
        if groups.len() != self.classes.len() {
            return Err(Error::Shape(format!("{} groups for {} classes", groups.len(), self.classes.len())));
        }
        let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
        for ((i, j), &v) in self.values.indexed_iter() {
            if i == j || v.is_nan() {
                continue;
            }
            let slot = if groups[i] == groups[j] { &mut within } else { &mut between };
            slot.0 += v;
            slot.1 += 1;
        }
        if within.1 == 0 || between.1 == 0 {
            return Err(Error::Empty("class pairs for a grouped mean"));
        }
        Ok((within.0 / within.1 as f64, between.0 / between.1 as f64))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("class").chain(self.classes.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(csv_error)?;
        for (c, row) in self.classes.iter().zip(self.values.rows()) {
            let mut record = vec![c.clone()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.png`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(stem.with_extension("csv"), self.to_csv()?)?;
        let shown = self.values.mapv(|v| if v.is_nan() { 0.0 } else { v });
        matrix_png(shown.view(), 24).save(stem.with_extension("png"))?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Counts, per class, which memory slot receives the most attention when
/// that class's object is flapped, then compares the classes.
pub fn memory_probe(
    model: &SecoModel<f32>,
    split: &Split,
    samples: &[FlapSample],
    augment: &AugmentConfig,
) -> Result<KlMatrix> {
    if !model.config.use_memory {
        return Err(Error::InvalidConfig(vec!["memory probe needs a model with memory".into()]));
    }
    let classes = split.class_names();
    let mut freq = Array2::<f64>::zeros((classes.len(), model.slots()));
    for chunk in samples.chunks(FEATURE_CHUNK) {
        let views: Vec<_> = chunk
            .iter()
            .map(|s| eval_context_view(&split.images[s.image], Some(&s.flap), augment))
            .collect();
        let (_, r) = model.context_features(&stack(&views));
        let attn = r.attn.expect("memory enabled");
        for (s, row) in chunk.iter().zip(attn.rows()) {
            if s.label >= classes.len() {
                return Err(Error::UnknownClass(s.label.to_string()));
            }
            freq[[s.label, argmax(row.iter().map(|&v| f64::from(v)))]] += 1.0;
        }
    }
    KlMatrix::from_frequencies(classes, freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax([0.0; 4]), 0);
    }

    #[test]
    fn probe_fits_separable_features() {
        let mut feats = Array2::zeros((90, 3));
        let mut labels = Vec::new();
        for i in 0..90 {
            let l = i % 3;
            feats[[i, l]] = 5.0 + (i as f64 * 0.37).sin();
            feats[[i, (l + 1) % 3]] = (i as f64 * 0.91).cos();
            labels.push(l);
        }
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let probe = fit_probe(&feats, &labels, names.clone(), &ProbeConfig::default()).unwrap();
        assert!(accuracy(&probe.predict(&feats), &labels).unwrap() >= 0.99);

        let err = fit_probe(&feats, &vec![0; 90], names, &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingClasses(ref m) if m == &["b".to_string(), "c".to_string()]));
    }

    #[test]
    fn zero_probe_predicts_class_zero() {
        let p = LinearProbe::zeros(4, vec!["x".into(), "y".into()], InputMode::HC);
        let f = Array2::from_elem((5, 4), 0.3);
        assert_eq!(p.predict(&f), vec![0; 5]);
        assert_eq!(accuracy(&p.predict(&f), &[0; 5]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn rmse_bounds() {
        let z = Array2::<f64>::zeros((224, 224));
        let o = Array2::<f64>::ones((224, 224));
        assert_eq!(rmse(z.view(), z.view()).unwrap(), 0.0);
        assert_eq!(rmse(z.view(), o.view()).unwrap(), 1.0);
        assert!(rmse(z.view(), Array2::zeros((2, 2)).view()).is_err());
    }

    struct Constant;
    impl OcclusionScorer for Constant {
        fn probabilities(&self, _: &RgbImage, flaps: &[BoundingBox], _: usize) -> Result<Vec<f64>> {
            Ok(vec![0.4; flaps.len()])
        }
    }

    #[test]
    fn constant_scorer_gives_zero_map() {
        let img = RgbImage::new(224, 224);
        let m = priming_map(&Constant, &img, 0, &DEFAULT_GRIDS).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert!(matches!(priming_map(&Constant, &img, 0, &[10]), Err(Error::GridSize(10))));
    }

    #[test]
    fn kl_of_one_hot_rows() {
        let f = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0; 4]];
        let names = ["a", "b", "c", "d"].map(String::from).to_vec();
        let kl = KlMatrix::from_frequencies(names, f).unwrap();
        let e = std::f64::consts::E;
        let (p, q) = (e / (e + 3.0), 1.0 / (e + 3.0));
        let expected = p * (p / q).ln() + q * (q / p).ln();
        assert!((kl.values[[0, 1]] - expected).abs() < 1e-12);
        assert_eq!(kl.values[[0, 1]], kl.values[[1, 0]]);
        assert_eq!(kl.values[[0, 2]], 0.0);
        assert_eq!(kl.values[[1, 1]], 0.0);
        assert!(!kl.defined[3] && kl.values[[3, 0]].is_nan());
        let (within, between) = kl.grouped_means(&[0, 1, 0, 1]).unwrap();
        assert_eq!(within, 0.0);
        assert!(between > 0.0);
        assert!(kl.to_csv().unwrap().starts_with("class,a,b,c,d\n"));
    }
}
