use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    global_avg_pool, global_avg_pool_backward, BatchNorm, BatchNormCache, Conv2d, ConvCache,
    FeatureMap, MaxPool, MaxPoolCache, Module, ParamMut, Real,
};

/// Encoder family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Stride-2 conv/BN/ReLU blocks followed by global average pooling.
    Tiny,
    /// ResNet-50 (bottleneck v1.5) with a 2048-wide output.
    PaperScale,
}

impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Arch::Tiny),
            "paper-scale" => Ok(Arch::PaperScale),
            other => Err(format!("unknown arch `{other}` (expected tiny or paper-scale)")),
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBn<F> {
    conv: Conv2d<F>,
    bn: BatchNorm<F>,
}

struct ConvBnCache<F> {
    conv: ConvCache<F>,
    bn: BatchNormCache<F>,
}

impl<F: Real> ConvBn<F> {
    fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, pad, false, rng),
            bn: BatchNorm::new(cout),
        }
    }

    fn forward_eval(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        let y = self.conv.forward(x);
        FeatureMap {
            data: self.bn.forward_eval(&y.data),
            ..y
        }
    }

    fn forward_train(&mut self, x: &FeatureMap<F>) -> (FeatureMap<F>, ConvBnCache<F>) {
        let (y, conv) = self.conv.forward_cached(x, true);
        let (data, bn) = self.bn.forward_train(&y.data);
        (FeatureMap { data, ..y }, ConvBnCache { conv, bn })
    }

    fn backward(
        &mut self,
        cache: ConvBnCache<F>,
        dy: FeatureMap<F>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<F>> {
        let dconv = self.bn.backward(cache.bn, &dy.data);
        let dconv = FeatureMap { data: dconv, ..dy };
        self.conv.backward(cache.conv, &dconv, need_input_grad)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.extend(self.conv.tensors(&format!("{prefix}.conv")));
        out.extend(self.bn.tensors(&format!("{prefix}.bn")));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.extend(self.conv.tensors_mut(&format!("{prefix}.conv")));
        out.extend(self.bn.tensors_mut(&format!("{prefix}.bn")));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.extend(self.conv.params_mut(&format!("{prefix}.conv")));
        out.extend(self.bn.params_mut(&format!("{prefix}.bn")));
    }
}

fn relu_inplace<F: Real>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Masks `grad` where the ReLU output was not positive.
fn relu_backward<F: Real>(out: &Array2<F>, grad: &mut Array2<F>) {
    Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
}

#[derive(Clone, Debug)]
struct Bottleneck<F> {
    reduce: ConvBn<F>,
    spatial: ConvBn<F>,
    expand: ConvBn<F>,
    downsample: Option<ConvBn<F>>,
}

struct BottleneckCache<F> {
    reduce: ConvBnCache<F>,
    reduce_out: Array2<F>,
    spatial: ConvBnCache<F>,
    spatial_out: Array2<F>,
    expand: ConvBnCache<F>,
    downsample: Option<ConvBnCache<F>>,
    out: Array2<F>,
}

impl<F: Real> Bottleneck<F> {
    fn new<R: Rng + ?Sized>(cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * 4;
        let downsample = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 0, rng));
        let mut expand = ConvBn::new(width, cout, 1, 1, 0, rng);
        // Zero-init of the last BN scale so each residual block starts as identity.
        expand.bn.gamma.fill(F::zero());
        Self {
            reduce: ConvBn::new(cin, width, 1, 1, 0, rng),
            spatial: ConvBn::new(width, width, 3, stride, 1, rng),
            expand,
            downsample,
        }
    }

    fn forward_eval(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        let mut a = self.reduce.forward_eval(x);
        relu_inplace(&mut a.data);
        let mut b = self.spatial.forward_eval(&a);
        relu_inplace(&mut b.data);
        let mut c = self.expand.forward_eval(&b);
        match &self.downsample {
            Some(d) => c.data += &d.forward_eval(x).data,
            None => c.data += &x.data,
        }
        relu_inplace(&mut c.data);
        c
    }

    fn forward_train(&mut self, x: &FeatureMap<F>) -> (FeatureMap<F>, BottleneckCache<F>) {
        let (mut a, reduce) = self.reduce.forward_train(x);
        relu_inplace(&mut a.data);
        let (mut b, spatial) = self.spatial.forward_train(&a);
        relu_inplace(&mut b.data);
        let (mut c, expand) = self.expand.forward_train(&b);
        let downsample = match &mut self.downsample {
            Some(d) => {
                let (s, cache) = d.forward_train(x);
                c.data += &s.data;
                Some(cache)
            }
            None => {
                c.data += &x.data;
                None
            }
        };
        relu_inplace(&mut c.data);
        let cache = BottleneckCache {
            reduce,
            reduce_out: a.data,
            spatial,
            spatial_out: b.data,
            expand,
            downsample,
            out: c.data.clone(),
        };
        (c, cache)
    }

    fn backward(&mut self, cache: BottleneckCache<F>, mut dy: FeatureMap<F>) -> FeatureMap<F> {
        relu_backward(&cache.out, &mut dy.data);
        let shortcut = match (&mut self.downsample, cache.downsample) {
            (Some(d), Some(dc)) => d.backward(dc, dy.clone(), true).expect("input grad"),
            _ => dy.clone(),
        };
        let mut db = self.expand.backward(cache.expand, dy, true).expect("input grad");
        relu_backward(&cache.spatial_out, &mut db.data);
        let mut da = self.spatial.backward(cache.spatial, db, true).expect("input grad");
        relu_backward(&cache.reduce_out, &mut da.data);
        let mut dx = self.reduce.backward(cache.reduce, da, true).expect("input grad");
        dx.data += &shortcut.data;
        dx
    }
}

#[derive(Clone, Debug)]
enum Block<F> {
    ConvBnRelu(ConvBn<F>),
    MaxPool(MaxPool),
    Bottleneck(Box<Bottleneck<F>>),
}

enum BlockCache<F> {
    ConvBnRelu(ConvBnCache<F>, Array2<F>),
    MaxPool(MaxPoolCache),
    Bottleneck(Box<BottleneckCache<F>>),
}

/// A convolutional encoder mapping NHWC images to `(n, out_dim)` embeddings.
#[derive(Clone, Debug)]
pub struct Encoder<F> {
    blocks: Vec<Block<F>>,
    out_dim: usize,
}

/// Intermediate state kept between a training forward pass and its backward.
pub struct EncoderTrace<F> {
    caches: Vec<BlockCache<F>>,
    pooled_height: usize,
    pooled_width: usize,
}

impl<F: Real> Encoder<F> {
    /// Stride-2 3x3 conv/BN/ReLU blocks; the last width is the embedding size.
    pub fn tiny<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(!widths.is_empty(), "tiny encoder needs at least one block");
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(widths.len());
        for &w in widths {
            blocks.push(Block::ConvBnRelu(ConvBn::new(cin, w, 3, 2, 1, rng)));
            cin = w;
        }
        Self {
            blocks,
            out_dim: cin,
        }
    }

    /// ResNet-50: 7x7 stem, max pool, bottleneck stages of depth (3, 4, 6, 3).
    pub fn resnet50<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut blocks = vec![
            Block::ConvBnRelu(ConvBn::new(3, 64, 7, 2, 3, rng)),
            Block::MaxPool(MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            }),
        ];
        let mut cin = 64;
        for (stage, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                blocks.push(Block::Bottleneck(Box::new(Bottleneck::new(cin, width, stride, rng))));
                cin = width * 4;
            }
        }
        Self {
            blocks,
            out_dim: cin,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Inference-mode forward (running normalization statistics).
    pub fn forward(&self, x: &FeatureMap<F>) -> Array2<F> {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = match block {
                Block::ConvBnRelu(unit) => {
                    let mut y = unit.forward_eval(&cur);
                    relu_inplace(&mut y.data);
                    y
                }
                Block::MaxPool(p) => p.forward(&cur).0,
                Block::Bottleneck(b) => b.forward_eval(&cur),
            };
        }
        global_avg_pool(&cur)
    }

    /// Training-mode forward; updates running statistics.
    pub fn forward_train(&mut self, x: &FeatureMap<F>) -> (Array2<F>, EncoderTrace<F>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &mut self.blocks {
            cur = match block {
                Block::ConvBnRelu(unit) => {
                    let (mut y, cache) = unit.forward_train(&cur);
                    relu_inplace(&mut y.data);
                    caches.push(BlockCache::ConvBnRelu(cache, y.data.clone()));
                    y
                }
                Block::MaxPool(p) => {
                    let (y, cache) = p.forward(&cur);
                    caches.push(BlockCache::MaxPool(cache));
                    y
                }
                Block::Bottleneck(b) => {
                    let (y, cache) = b.forward_train(&cur);
                    caches.push(BlockCache::Bottleneck(Box::new(cache)));
                    y
                }
            };
        }
        let trace = EncoderTrace {
            caches,
            pooled_height: cur.height,
            pooled_width: cur.width,
        };
        (global_avg_pool(&cur), trace)
    }

    /// Accumulates parameter gradients from `dh = dL/d(embedding)`.
    pub fn backward(&mut self, trace: EncoderTrace<F>, dh: &Array2<F>) {
        let mut grad = global_avg_pool_backward(dh, trace.pooled_height, trace.pooled_width);
        let n_blocks = self.blocks.len();
        for (i, (block, cache)) in self.blocks.iter_mut().zip(trace.caches).enumerate().rev() {
            let first = i == 0;
            grad = match (block, cache) {
                (Block::ConvBnRelu(unit), BlockCache::ConvBnRelu(c, out)) => {
                    relu_backward(&out, &mut grad.data);
                    match unit.backward(c, grad, !first) {
                        Some(g) => g,
                        None => break,
                    }
                }
                (Block::MaxPool(p), BlockCache::MaxPool(c)) => p.backward(c, &grad),
                (Block::Bottleneck(b), BlockCache::Bottleneck(c)) => b.backward(*c, grad),
                _ => unreachable!("trace does not match encoder ({n_blocks} blocks)"),
            };
        }
    }
}

impl<F: Real> Module<F> for Encoder<F> {
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, F>> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.block{i}");
            match block {
                Block::ConvBnRelu(u) => u.params_mut(&p, &mut out),
                Block::MaxPool(_) => {}
                Block::Bottleneck(b) => {
                    let b = &mut **b;
                    b.reduce.params_mut(&format!("{p}.reduce"), &mut out);
                    b.spatial.params_mut(&format!("{p}.spatial"), &mut out);
                    b.expand.params_mut(&format!("{p}.expand"), &mut out);
                    if let Some(d) = &mut b.downsample {
                        d.params_mut(&format!("{p}.downsample"), &mut out);
                    }
                }
            }
        }
        out
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            match block {
                Block::ConvBnRelu(u) => u.tensors(&p, &mut out),
                Block::MaxPool(_) => {}
                Block::Bottleneck(b) => {
                    b.reduce.tensors(&format!("{p}.reduce"), &mut out);
                    b.spatial.tensors(&format!("{p}.spatial"), &mut out);
                    b.expand.tensors(&format!("{p}.expand"), &mut out);
                    if let Some(d) = &b.downsample {
                        d.tensors(&format!("{p}.downsample"), &mut out);
                    }
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.block{i}");
            match block {
                Block::ConvBnRelu(u) => u.tensors_mut(&p, &mut out),
                Block::MaxPool(_) => {}
                Block::Bottleneck(b) => {
                    let b = &mut **b;
                    b.reduce.tensors_mut(&format!("{p}.reduce"), &mut out);
                    b.spatial.tensors_mut(&format!("{p}.spatial"), &mut out);
                    b.expand.tensors_mut(&format!("{p}.expand"), &mut out);
                    if let Some(d) = &mut b.downsample {
                        d.tensors_mut(&format!("{p}.downsample"), &mut out);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturb_bn<F: Real>(enc: &mut Encoder<F>, rng: &mut ChaCha8Rng) {
        for (name, mut t) in enc.tensors_mut("e") {
            if name.ends_with("gamma") || name.ends_with("beta") {
                t.mapv_inplace(|_| F::lit(rng.random_range(0.3..1.2)));
            }
        }
    }

    /// Central differences on a scalar readout of the training-mode forward.
    fn check_encoder_grads(mut enc: Encoder<f64>, x: FeatureMap<f64>, rng: &mut ChaCha8Rng) {
        let (h, trace) = enc.clone().forward_train(&x);
        let up = Array2::from_shape_simple_fn(h.dim(), || rng.random_range(-1.0..1.0));
        enc.zero_grad();
        let mut work = enc.clone();
        let (_, trace2) = work.forward_train(&x);
        drop(trace);
        work.backward(trace2, &up);
        let analytic: Vec<(String, Vec<f64>)> = work
            .params_mut("e")
            .into_iter()
            .map(|p| (p.name, p.grad.iter().copied().collect()))
            .collect();
        let loss = |e: &Encoder<f64>| {
            let mut e = e.clone();
            (&e.forward_train(&x).0 * &up).sum()
        };
        let eps = 1e-5;
        for (pi, (name, grads)) in analytic.iter().enumerate() {
            for &idx in &[0usize, grads.len() / 2, grads.len() - 1] {
                let mut plus = enc.clone();
                let mut minus = enc.clone();
                plus.params_mut("e")[pi].value.as_slice_mut().unwrap()[idx] += eps;
                minus.params_mut("e")[pi].value.as_slice_mut().unwrap()[idx] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let a = grads[idx];
                let err = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-4);
                assert!(err < 1e-4, "{name}[{idx}]: fd={fd} analytic={a}");
            }
        }
    }

    #[test]
    fn tiny_encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut enc = Encoder::<f64>::tiny(&[4, 6, 5], &mut rng);
        perturb_bn(&mut enc, &mut rng);
        let x = Array4::from_shape_simple_fn((3, 12, 12, 3), || rng.random_range(-1.0..1.0));
        check_encoder_grads(enc, FeatureMap::from_nhwc(x), &mut rng);
    }

    #[test]
    fn bottleneck_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut enc = Encoder::<f64> {
            blocks: vec![
                Block::ConvBnRelu(ConvBn::new(3, 4, 3, 1, 1, &mut rng)),
                Block::MaxPool(MaxPool { kernel: 3, stride: 2, padding: 1 }),
                Block::Bottleneck(Box::new(Bottleneck::new(4, 2, 2, &mut rng))),
                Block::Bottleneck(Box::new(Bottleneck::new(8, 2, 1, &mut rng))),
            ],
            out_dim: 8,
        };
        perturb_bn(&mut enc, &mut rng);
        let x = Array4::from_shape_simple_fn((2, 8, 8, 3), || rng.random_range(-1.0..1.0));
        check_encoder_grads(enc, FeatureMap::from_nhwc(x), &mut rng);
    }

    #[test]
    fn resnet50_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::<f32>::resnet50(&mut rng);
        assert_eq!(enc.out_dim(), 2048);
        let x = Array4::<f32>::zeros((1, 32, 32, 3));
        let h = enc.forward(&FeatureMap::from_nhwc(x));
        assert_eq!(h.dim(), (1, 2048));
    }
}
