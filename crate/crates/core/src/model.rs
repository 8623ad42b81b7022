//! Two-stream encoder with an attention-addressed external memory.
//!
//! The context stream queries `K` memory slots with `phi_c(h_c)` against keys
//! `phi_k(M)` and reads back a convex combination of the slots; the target
//! stream is projected by `phi_t`.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Arch, Encoder, EncoderTrace, FeatureMap, Linear, Module, ParamMut, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Channel widths of the tiny encoder; the last one is the embedding size.
    pub tiny_widths: Vec<usize>,
    /// Projection / memory width `H`.
    pub hidden: usize,
    /// Number of memory slots `K`.
    pub slots: usize,
    /// One encoder for both streams instead of two.
    pub shared_encoder: bool,
    /// When false the context embedding is `phi_c(h_c)` without retrieval.
    pub use_memory: bool,
    pub projection_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Tiny,
            tiny_widths: vec![16, 32, 64, 128],
            hidden: 128,
            slots: 64,
            shared_encoder: false,
            use_memory: true,
            projection_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        Self {
            arch: Arch::PaperScale,
            hidden: 512,
            slots: 200,
            ..Self::default()
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self.arch {
            Arch::Tiny => self.tiny_widths.last().copied().unwrap_or(0),
            Arch::PaperScale => 2048,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.arch == Arch::Tiny && (self.tiny_widths.is_empty() || self.tiny_widths.contains(&0)) {
            v.push("model.tiny_widths must be non-empty and positive".into());
        }
        if self.hidden == 0 || self.slots == 0 {
            v.push("model.hidden and model.slots must be positive".into());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct SecoModel<F> {
    pub config: ModelConfig,
    pub target_encoder: Encoder<F>,
    /// `None` when both streams share `target_encoder`.
    pub context_encoder: Option<Encoder<F>>,
    pub phi_t: Linear<F>,
    pub phi_c: Linear<F>,
    pub phi_k: Linear<F>,
    /// `K x H`, one slot per row.
    pub memory: Array2<F>,
    pub memory_grad: Array2<F>,
}

/// Output of a retrieval, with what backward needs.
#[derive(Clone, Debug)]
pub struct Retrieval<F> {
    pub s_c: Array2<F>,
    /// `N x K` attention rows; `None` without memory.
    pub attn: Option<Array2<F>>,
    query: Option<Array2<F>>,
    keys: Option<Array2<F>>,
}

/// Everything kept from a training forward pass.
pub struct TrainTrace<F> {
    pub h_t: Array2<F>,
    pub h_c: Array2<F>,
    pub s_t: Array2<F>,
    pub retrieval: Retrieval<F>,
    target_trace: EncoderTrace<F>,
    context_trace: EncoderTrace<F>,
}

fn build_encoder<F: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Encoder<F> {
    match cfg.arch {
        Arch::Tiny => Encoder::tiny(&cfg.tiny_widths, rng),
        Arch::PaperScale => Encoder::resnet50(rng),
    }
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

impl<F: Real> SecoModel<F> {
    /// Deterministic in `seed`. The memory is Xavier-uniform over `(K, H)`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let violations = cfg.violations();
        if !violations.is_empty() {
            return Err(Error::InvalidConfig(violations));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, k) = (cfg.embed_dim(), cfg.hidden, cfg.slots);
        let target_encoder = build_encoder(cfg, &mut rng);
        let context_encoder = (!cfg.shared_encoder).then(|| build_encoder(cfg, &mut rng));
        let bias = cfg.projection_bias;
        let phi_t = Linear::new(d, h, bias, &mut rng);
        let phi_c = Linear::new(d, h, bias, &mut rng);
        let phi_k = Linear::new(h, h, bias, &mut rng);
        let memory = nn::uniform_matrix(k, h, nn::xavier_bound(k, h), &mut rng);
        Ok(Self {
            config: cfg.clone(),
            target_encoder,
            context_encoder,
            phi_t,
            phi_c,
            phi_k,
            memory_grad: Array2::zeros((k, h)),
            memory,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.target_encoder.out_dim()
    }

    pub fn hidden(&self) -> usize {
        self.memory.ncols()
    }

    pub fn slots(&self) -> usize {
        self.memory.nrows()
    }

    pub fn context_encoder(&self) -> &Encoder<F> {
        self.context_encoder.as_ref().unwrap_or(&self.target_encoder)
    }

    fn context_encoder_mut(&mut self) -> &mut Encoder<F> {
        self.context_encoder.as_mut().unwrap_or(&mut self.target_encoder)
    }

    /// Inference-mode `h_c`.
    pub fn encode_context(&self, views: &FeatureMap<F>) -> Array2<F> {
        self.context_encoder().forward(views)
    }

    /// Inference-mode `h_t`.
    pub fn encode_target(&self, views: &FeatureMap<F>) -> Array2<F> {
        self.target_encoder.forward(views)
    }

    pub fn project_target(&self, h_t: &Array2<F>) -> Array2<F> {
        self.phi_t.forward(h_t)
    }

    /// `s_c` and attention for a batch of context embeddings.
    pub fn retrieve(&self, h_c: &Array2<F>) -> Retrieval<F> {
        if !self.config.use_memory {
            return Retrieval {
                s_c: self.phi_c.forward(h_c),
                attn: None,
                query: None,
                keys: None,
            };
        }
        let query = self.phi_c.forward(h_c);
        let keys = self.phi_k.forward(&self.memory);
        let scale = F::one() / F::lit(self.hidden() as f64).sqrt();
        let attn = softmax_rows(&(query.dot(&keys.t()) * scale));
        Retrieval {
            s_c: attn.dot(&self.memory),
            attn: Some(attn),
            query: Some(query),
            keys: Some(keys),
        }
    }

    /// Accumulates head gradients for `ds_c = dL/ds_c`; returns `dL/dh_c`.
    pub fn retrieve_backward(&mut self, h_c: &Array2<F>, r: &Retrieval<F>, ds_c: &Array2<F>) -> Array2<F> {
        let (Some(attn), Some(query), Some(keys)) = (&r.attn, &r.query, &r.keys) else {
            return self.phi_c.backward(h_c, ds_c);
        };
        let scale = F::one() / F::lit(self.hidden() as f64).sqrt();
        let dattn = ds_c.dot(&self.memory.t());
        self.memory_grad += &attn.t().dot(ds_c);
        let inner = (&dattn * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dlogits = attn * &(&dattn - &inner);
        let dquery = dlogits.dot(keys) * scale;
        let dkeys = dlogits.t().dot(query) * scale;
        let dmem = self.phi_k.backward(&self.memory, &dkeys);
        self.memory_grad += &dmem;
        self.phi_c.backward(h_c, &dquery)
    }

    /// Training-mode forward of both streams (batch statistics; running
    /// statistics are updated).
    pub fn forward_train(&mut self, targets: &FeatureMap<F>, contexts: &FeatureMap<F>) -> TrainTrace<F> {
        let (h_t, target_trace) = self.target_encoder.forward_train(targets);
        let (h_c, context_trace) = self.context_encoder_mut().forward_train(contexts);
        let s_t = self.phi_t.forward(&h_t);
        let retrieval = self.retrieve(&h_c);
        TrainTrace {
            h_t,
            h_c,
            s_t,
            retrieval,
            target_trace,
            context_trace,
        }
    }

    /// Accumulates gradients of every parameter from the embedding gradients.
    pub fn backward(&mut self, trace: TrainTrace<F>, ds_t: &Array2<F>, ds_c: &Array2<F>) {
        let dh_t = self.phi_t.backward(&trace.h_t, ds_t);
        let dh_c = self.retrieve_backward(&trace.h_c, &trace.retrieval, ds_c);
        self.target_encoder.backward(trace.target_trace, &dh_t);
        self.context_encoder_mut().backward(trace.context_trace, &dh_c);
    }

    /// Inference-mode `(h_c, s_c, attn)` for context views.
    pub fn context_features(&self, views: &FeatureMap<F>) -> (Array2<F>, Retrieval<F>) {
        let h_c = self.encode_context(views);
        let r = self.retrieve(&h_c);
        (h_c, r)
    }
}

impl<F: Real> Module<F> for SecoModel<F> {
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, F>> {
        let mut out = self.target_encoder.params_mut(&nn::join(prefix, "target_encoder"));
        if let Some(e) = &mut self.context_encoder {
            out.extend(e.params_mut(&nn::join(prefix, "context_encoder")));
        }
        out.extend(self.phi_t.params_mut(&nn::join(prefix, "phi_t")));
        out.extend(self.phi_c.params_mut(&nn::join(prefix, "phi_c")));
        out.extend(self.phi_k.params_mut(&nn::join(prefix, "phi_k")));
        out.push(ParamMut {
            name: nn::join(prefix, "memory"),
            value: self.memory.view_mut().into_dyn(),
            grad: self.memory_grad.view_mut().into_dyn(),
        });
        out
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = self.target_encoder.tensors(&nn::join(prefix, "target_encoder"));
        if let Some(e) = &self.context_encoder {
            out.extend(e.tensors(&nn::join(prefix, "context_encoder")));
        }
        out.extend(self.phi_t.tensors(&nn::join(prefix, "phi_t")));
        out.extend(self.phi_c.tensors(&nn::join(prefix, "phi_c")));
        out.extend(self.phi_k.tensors(&nn::join(prefix, "phi_k")));
        out.push((nn::join(prefix, "memory"), self.memory.view().into_dyn()));
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = self.target_encoder.tensors_mut(&nn::join(prefix, "target_encoder"));
        if let Some(e) = &mut self.context_encoder {
            out.extend(e.tensors_mut(&nn::join(prefix, "context_encoder")));
        }
        out.extend(self.phi_t.tensors_mut(&nn::join(prefix, "phi_t")));
        out.extend(self.phi_c.tensors_mut(&nn::join(prefix, "phi_c")));
        out.extend(self.phi_k.tensors_mut(&nn::join(prefix, "phi_k")));
        out.push((nn::join(prefix, "memory"), self.memory.view_mut().into_dyn()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array4};

    fn small(shared: bool) -> ModelConfig {
        ModelConfig {
            tiny_widths: vec![4, 8],
            hidden: 6,
            slots: 5,
            shared_encoder: shared,
            ..Default::default()
        }
    }

    fn views(seed: u64, n: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_nhwc(Array4::from_shape_simple_fn((n, 8, 8, 3), || nn::normal(&mut rng)))
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let cfg = ModelConfig::paper_scale();
        let cfg = ModelConfig {
            arch: Arch::Tiny,
            ..cfg
        };
        let a = SecoModel::<f32>::new(&cfg, 3).unwrap();
        let b = SecoModel::<f32>::new(&cfg, 3).unwrap();
        assert_eq!(a.tensors(""), b.tensors(""));
        let bound = (6.0f32 / (200.0 + 512.0)).sqrt();
        assert_eq!(a.memory.dim(), (200, 512));
        assert!(a.memory.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identical_slots_are_returned_verbatim() {
        let mut m = SecoModel::<f64>::new(&small(false), 0).unwrap();
        let slot = array![0.5, -1.0, 2.0, 0.0, 3.0, 1.5];
        for mut row in m.memory.rows_mut() {
            row.assign(&slot);
        }
        let h = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        let r = m.retrieve(&h);
        for row in r.s_c.rows() {
            for (a, b) in row.iter().zip(&slot) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_attends_uniformly() {
        let mut m = SecoModel::<f64>::new(&small(false), 1).unwrap();
        m.phi_c.weight.fill(0.0);
        m.phi_c.bias = Some(Array1::zeros(6));
        let r = m.retrieve(&Array2::ones((2, 8)));
        let attn = r.attn.unwrap();
        assert!(attn.iter().all(|a| (a - 0.2).abs() < 1e-12));
        let mean = m.memory.mean_axis(Axis(0)).unwrap();
        for (a, b) in r.s_c.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_views_give_zero_embeddings() {
        let mut m = SecoModel::<f64>::new(&small(false), 2).unwrap();
        for (name, mut t) in m.tensors_mut("") {
            if name.ends_with(".bias") && name.contains("encoder") {
                t.fill(0.0);
            }
        }
        let zero = FeatureMap::from_nhwc(Array4::zeros((2, 8, 8, 3)));
        assert!(m.encode_context(&zero).iter().all(|v| *v == 0.0));
        assert!(m.encode_target(&zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batched_encoding_matches_single_items() {
        let m = SecoModel::<f64>::new(&small(false), 4).unwrap();
        let x = views(5, 3);
        let batched = m.encode_context(&x);
        let nhwc = x.clone().into_nhwc();
        for i in 0..3 {
            let one = FeatureMap::from_nhwc(nhwc.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned());
            let h = m.encode_context(&one);
            for (a, b) in h.row(0).iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn non_shared_streams_are_independent() {
        let mut m = SecoModel::<f64>::new(&small(false), 6).unwrap();
        let x = views(7, 2);
        let before = m.encode_context(&x);
        for (name, mut t) in m.tensors_mut("") {
            if name.starts_with("target_encoder") {
                t.mapv_inplace(|v| v + 0.5);
            }
        }
        assert_eq!(before, m.encode_context(&x));

        let mut shared = SecoModel::<f64>::new(&small(true), 6).unwrap();
        let before = shared.encode_context(&x);
        for (name, mut t) in shared.tensors_mut("") {
            if name.starts_with("target_encoder") && name.ends_with("weight") {
                t.mapv_inplace(|v| v + 0.5);
            }
        }
        assert_ne!(before, shared.encode_context(&x));
    }

    #[test]
    fn non_shared_storage_is_disjoint() {
        let m = SecoModel::<f32>::new(&small(false), 0).unwrap();
        let ranges = |prefix: &str| -> Vec<(usize, usize)> {
            m.tensors("")
                .into_iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, t)| {
                    let p = t.as_ptr() as usize;
                    (p, p + t.len() * 4)
                })
                .collect()
        };
        let t = ranges("target_encoder");
        let c = ranges("context_encoder");
        assert!(!c.is_empty());
        for a in &t {
            for b in &c {
                assert!(a.1 <= b.0 || b.1 <= a.0);
            }
        }
    }

    #[test]
    fn identity_projection_passes_embeddings_through() {
        let cfg = ModelConfig {
            tiny_widths: vec![4, 6],
            ..small(false)
        };
        let mut m = SecoModel::<f64>::new(&cfg, 0).unwrap();
        m.phi_t = Linear::from_parts(Array2::eye(6), Some(Array1::zeros(6)));
        let h = Array2::from_shape_fn((2, 6), |(i, j)| (i as f64) - j as f64);
        assert_eq!(m.project_target(&h), h);
    }
}
