use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, normal, FeatureMap, Module, ParamMut, Real};

/// 2-D convolution over NHWC feature maps, lowered to im2col + GEMM.
///
/// The kernel is stored as a `(k*k*in_channels, out_channels)` matrix whose
/// row index is `(ky*k + kx)*in_channels + c`.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub weight_grad: Array2<F>,
    pub bias_grad: Option<Array1<F>>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub struct ConvCache<F> {
    cols: Option<Array2<F>>,
    input: Option<FeatureMap<F>>,
    in_height: usize,
    in_width: usize,
}

impl<F: Real> Conv2d<F> {
    /// Kaiming-normal (fan-out, ReLU gain) initialization.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_out).sqrt();
        let rows = kernel * kernel * in_channels;
        let weight = Array2::from_shape_simple_fn((rows, out_channels), || {
            F::lit(std * normal(rng))
        });
        Self {
            weight_grad: Array2::zeros((rows, out_channels)),
            weight,
            bias: bias.then(|| Array1::zeros(out_channels)),
            bias_grad: bias.then(|| Array1::zeros(out_channels)),
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &FeatureMap<F>) -> Array2<F> {
        let (n, h, w, c) = (x.batch, x.height, x.width, x.channels());
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let row_len = k * k * c;
        let mut cols = Array2::<F>::zeros((n * oh * ow, row_len));
        let src = x.data.as_slice().expect("contiguous input");
        let dst = cols.as_slice_mut().expect("contiguous cols");
        let pad = self.padding as isize;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((b * h + iy as usize) * w + ix as usize) * c;
                            let d = row + (ky * k + kx) * c;
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, n: usize, h: usize, w: usize) -> Array2<F> {
        let c = self.in_channels;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let row_len = k * k * c;
        let mut dx = Array2::<F>::zeros((n * h * w, c));
        let src = dcols.as_slice().expect("contiguous cols");
        let dst = dx.as_slice_mut().expect("contiguous dx");
        let pad = self.padding as isize;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((b * h + iy as usize) * w + ix as usize) * c;
                            let s = row + (ky * k + kx) * c;
                            for (o, i) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                *o += *i;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        self.forward_cached(x, false).0
    }

    /// Forward pass that keeps what the backward pass needs. When `keep` is
    /// false the cache is empty.
    pub fn forward_cached(&self, x: &FeatureMap<F>, keep: bool) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let (mut out, cache) = if self.is_pointwise() {
            let out = x.data.dot(&self.weight);
            let cache = ConvCache {
                cols: None,
                input: keep.then(|| x.clone()),
                in_height: x.height,
                in_width: x.width,
            };
            (out, cache)
        } else {
            let cols = self.im2col(x);
            let out = cols.dot(&self.weight);
            let cache = ConvCache {
                cols: keep.then_some(cols),
                input: None,
                in_height: x.height,
                in_width: x.width,
            };
            (out, cache)
        };
        if let Some(b) = &self.bias {
            out += b;
        }
        (FeatureMap::new(out, x.batch, oh, ow), cache)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: ConvCache<F>,
        dout: &FeatureMap<F>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<F>> {
        let n = dout.batch;
        let cols = match (&cache.cols, &cache.input) {
            (Some(cols), _) => cols,
            (None, Some(input)) => &input.data,
            _ => panic!("conv backward without cached forward"),
        };
        self.weight_grad += &cols.t().dot(&dout.data);
        if let Some(bg) = &mut self.bias_grad {
            *bg += &dout.data.sum_axis(Axis(0));
        }
        if !need_input_grad {
            return None;
        }
        let dcols = dout.data.dot(&self.weight.t());
        let dx = if self.is_pointwise() {
            dcols
        } else {
            self.col2im(&dcols, n, cache.in_height, cache.in_width)
        };
        Some(FeatureMap::new(dx, n, cache.in_height, cache.in_width))
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, F>> {
        let mut out = vec![ParamMut {
            name: join(prefix, "weight"),
            value: self.weight.view_mut().into_dyn(),
            grad: self.weight_grad.view_mut().into_dyn(),
        }];
        if let (Some(b), Some(g)) = (&mut self.bias, &mut self.bias_grad) {
            out.push(ParamMut {
                name: join(prefix, "bias"),
                value: b.view_mut().into_dyn(),
                grad: g.view_mut().into_dyn(),
            });
        }
        out
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![(join(prefix, "weight"), self.weight.view().into_dyn())];
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.view().into_dyn()));
        }
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![(join(prefix, "weight"), self.weight.view_mut().into_dyn())];
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b.view_mut().into_dyn()));
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

    fn direct_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, h, w, c) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Array4::zeros((n, oh, ow, conv.out_channels));
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..conv.out_channels {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bb| bb[o]);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += x[[b, iy as usize, ix as usize, ci]]
                                        * conv.weight[[(ky * k + kx) * c + ci, o]];
                                }
                            }
                        }
                        out[[b, oy, ox, o]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 2, 1), (3, 1, 1), (1, 2, 0), (7, 2, 3), (1, 1, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, true, &mut rng);
            conv.bias.as_mut().unwrap().mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let x = Array4::from_shape_simple_fn((2, 9, 7, 3), || rng.random_range(-1.0..1.0));
            let got = conv.forward(&FeatureMap::from_nhwc(x.clone())).into_nhwc();
            let want = direct_conv(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p) in &[(3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, true, &mut rng);
            let x = Array4::from_shape_simple_fn((2, 5, 6, 2), || rng.random_range(-1.0..1.0));
            let fm = FeatureMap::from_nhwc(x.clone());
            let (out, cache) = conv.forward_cached(&fm, true);
            let upstream = Array2::from_shape_simple_fn(out.data.dim(), || rng.random_range(-1.0..1.0));
            let loss = |c: &Conv2d<f64>, input: &FeatureMap<f64>| (&c.forward(input).data * &upstream).sum();
            let dout = FeatureMap::new(upstream.clone(), out.batch, out.height, out.width);
            let dx = conv.backward(cache, &dout, true).unwrap();
            let eps = 1e-6;
            for idx in [0usize, conv.weight.len() / 2, conv.weight.len() - 1] {
                let (r, c) = (idx / conv.out_channels, idx % conv.out_channels);
                let mut plus = conv.clone();
                plus.weight[[r, c]] += eps;
                let mut minus = conv.clone();
                minus.weight[[r, c]] -= eps;
                let fd = (loss(&plus, &fm) - loss(&minus, &fm)) / (2.0 * eps);
                assert!((fd - conv.weight_grad[[r, c]]).abs() < 1e-6, "weight grad");
            }
            for idx in [0usize, 5, 17, fm.data.len() - 1] {
                let (r, c) = (idx / 2, idx % 2);
                let mut plus = fm.clone();
                plus.data[[r, c]] += eps;
                let mut minus = fm.clone();
                minus.data[[r, c]] -= eps;
                let fd = (loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * eps);
                assert!((fd - dx.data[[r, c]]).abs() < 1e-6, "input grad");
            }
        }
    }
}
