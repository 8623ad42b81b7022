//! Self-supervised training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use ndarray::{s, Array4};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_views, AugmentConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SecoModel};
use crate::nn::{FeatureMap, Module, Sgd};
use crate::objective::{mean_std, total_loss_with_grad, LossBreakdown, LossWeights};
use crate::pairs::BoundingBox;
use crate::rng::stream;

const EPOCH_ORDER_TAG: u64 = 0x5eed_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Context/target pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Overrides the `0.2 * batch_size / 256` rule when set.
    pub base_lr: Option<f64>,
    pub min_lr: f64,
    pub pairs_per_image: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the gradient so its global L2 norm is at most this value.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Write a checkpoint after every epoch (the final one is always written).
    pub checkpoint_every_epoch: bool,
    /// Checkpoint whose matching tensors initialize the model.
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            warmup_epochs: 10,
            base_lr: None,
            min_lr: 0.0002,
            pairs_per_image: 4,
            momentum: 0.9,
            weight_decay: 1e-6,
            grad_clip: None,
            seed: 0,
            checkpoint_every_epoch: true,
            init_from: None,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(0.2 * self.batch_size as f64 / 256.0)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push("trainer.batch_size must be at least 2".into());
        }
        if self.epochs == 0 {
            v.push("trainer.epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            v.push("trainer.warmup_epochs must not exceed epochs".into());
        }
        if self.pairs_per_image == 0 {
            v.push("trainer.pairs_per_image must be at least 1".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            v.push("trainer.grad_clip must be positive".into());
        }
        if self.min_lr > self.base_lr() {
            v.push("trainer.min_lr must not exceed the base learning rate".into());
        }
        v
    }
}

/// Linear warm-up from zero, then cosine decay reaching `min_lr` on the last
/// step.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr();
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warm {
        return base * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    let progress = if span == 0 {
        if step > warm { 1.0 } else { 0.0 }
    } else {
        (step - warm) as f64 / span as f64
    };
    // The end points are returned verbatim so they hold exactly.
    if progress <= 0.0 {
        base
    } else if progress >= 1.0 {
        cfg.min_lr
    } else {
        cfg.min_lr + (base - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `k` items, without replacement when enough exist. `None` for an image
/// without pairs, which callers skip.
pub fn sample_pairs<T: Clone, R: Rng + ?Sized>(pairs: &[T], k: usize, rng: &mut R) -> Option<Vec<T>> {
    if pairs.is_empty() {
        return None;
    }
    if pairs.len() >= k {
        Some(index::sample(rng, pairs.len(), k).into_iter().map(|i| pairs[i].clone()).collect())
    } else {
        Some((0..k).map(|_| pairs[rng.random_range(0..pairs.len())].clone()).collect())
    }
}

/// Unlabeled training images with their RoIs. Carries no category ids.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub image_ids: Vec<u64>,
    pub images: Vec<RgbImage>,
    pub rois: Vec<Vec<BoundingBox>>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.rois.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Mean per-dimension batch std of `s_c`.
    pub std_c: f64,
    pub std_t: f64,
    pub wall_ms: u64,
}

/// One optimizer step on a batch of views; returns the loss breakdown.
pub fn train_step(
    model: &mut SecoModel<f32>,
    optimizer: &mut Sgd<f32>,
    targets: &FeatureMap<f32>,
    contexts: &FeatureMap<f32>,
    weights: &LossWeights,
    lr: f64,
    grad_clip: Option<f64>,
    step: usize,
) -> Result<(LossBreakdown, f64, f64)> {
    model.zero_grad();
    let trace = model.forward_train(targets, contexts);
    let (loss, g_c, g_t) = total_loss_with_grad(&trace.retrieval.s_c, &trace.s_t, weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: serde_json::to_string(&loss).unwrap_or_default(),
        });
    }
    let std_c = mean_std(&trace.retrieval.s_c);
    let std_t = mean_std(&trace.s_t);
    model.backward(trace, &g_t, &g_c);
    if let Some(max) = grad_clip {
        clip_grad_norm(model, max as f32);
    }
    optimizer.step(model.params_mut(""), lr as f32);
    Ok((loss, std_c, std_t))
}

/// Scales all gradients by `max / norm` when their global norm exceeds `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut SecoModel<f32>, max: f32) -> f32 {
    let mut params = model.params_mut("");
    let norm = params
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f32>())
        .sum::<f32>()
        .sqrt();
    if norm > max {
        let k = max / norm;
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * k);
        }
    }
    norm
}

pub struct FitOptions<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub weights: &'a LossWeights,
    /// Checkpoints and `train_log.jsonl` go here when set.
    pub out_dir: Option<&'a Path>,
}

pub struct FitOutcome {
    pub model: SecoModel<f32>,
    pub log: Vec<StepLog>,
    pub steps_per_epoch: usize,
}

impl FitOutcome {
    /// Mean of `std_c` over the last epoch's steps.
    pub fn final_std_c(&self) -> f64 {
        let last = self.log.last().map_or(0, |l| l.epoch);
        let tail: Vec<f64> = self.log.iter().filter(|l| l.epoch == last).map(|l| l.std_c).collect();
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

fn stack(views: &[ndarray::Array3<f32>]) -> FeatureMap<f32> {
    let (h, w, c) = views[0].dim();
    let mut out = Array4::<f32>::zeros((views.len(), h, w, c));
    for (i, v) in views.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(v);
    }
    FeatureMap::from_nhwc(out)
}

/// Trains from scratch (or from `init_from`) on `data`.
pub fn fit(data: &PairSet, opts: &FitOptions<'_>) -> Result<FitOutcome> {
    let cfg = opts.train;
    let mut violations = cfg.violations();
    violations.extend(opts.model.violations());
    violations.extend(opts.augment.violations());
    violations.extend(opts.weights.violations());
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations));
    }
    let usable: Vec<usize> = (0..data.len()).filter(|&i| !data.rois[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let k = cfg.pairs_per_image;
    let images_per_step = (cfg.batch_size / k).max(1);
    let steps_per_epoch = (usable.len() / images_per_step).max(1);

    let mut model = SecoModel::<f32>::new(opts.model, cfg.seed)?;
    if let Some(dir) = &cfg.init_from {
        let n = checkpoint::import_tensors(&mut model, dir, "")?;
        log::info!("imported {n} tensors from {}", dir.display());
    }
    let mut optimizer = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);

    let mut log_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut stream(cfg.seed, &[EPOCH_ORDER_TAG, epoch as u64]));
        for chunk in order.chunks(images_per_step).take(steps_per_epoch) {
            let mut targets = Vec::with_capacity(chunk.len() * k);
            let mut contexts = Vec::with_capacity(chunk.len() * k);
            for &i in chunk {
                let id = data.image_ids[i];
                let mut rng = stream(cfg.seed, &[id, epoch as u64]);
                let picked = sample_pairs(&data.rois[i], k, &mut rng).expect("usable image has pairs");
                for (j, roi) in picked.iter().enumerate() {
                    let mut rng = stream(cfg.seed, &[id, j as u64, epoch as u64]);
                    let (t, c, _) = augment_views(&data.images[i], roi, None, &mut rng, opts.augment);
                    targets.push(t);
                    contexts.push(c);
                }
            }
            if targets.len() < 2 {
                continue;
            }
            let lr = lr_at(step, steps_per_epoch, cfg);
            let (loss, std_c, std_t) =
                train_step(&mut model, &mut optimizer, &stack(&targets), &stack(&contexts), opts.weights, lr, cfg.grad_clip, step)?;
            let entry = StepLog {
                step,
                epoch,
                lr,
                loss,
                std_c,
                std_t,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if let Some(f) = &mut log_file {
                serde_json::to_writer(&mut *f, &entry)?;
                f.write_all(b"\n")?;
            }
            log::debug!(
                "epoch {epoch} step {step} lr {lr:.5} total {:.4} mse {:.4} std_c {std_c:.3}",
                loss.total,
                loss.mse
            );
            log.push(entry);
            step += 1;
        }
        if let Some(f) = &mut log_file {
            f.flush()?;
        }
        if let Some(dir) = opts.out_dir {
            if cfg.checkpoint_every_epoch && epoch + 1 < cfg.epochs {
                checkpoint::save(&model, &dir.join("checkpoints").join(format!("epoch_{epoch:03}")), cfg.seed, step)?;
            }
        }
    }
    if let Some(dir) = opts.out_dir {
        checkpoint::save(&model, &dir.join("checkpoint"), cfg.seed, step)?;
    }
    Ok(FitOutcome {
        model,
        log,
        steps_per_epoch,
    })
}
