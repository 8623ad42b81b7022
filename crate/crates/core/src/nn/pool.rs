use ndarray::Array2;

use super::{FeatureMap, Real};

/// Max pooling with square window; used by the ResNet stem.
#[derive(Clone, Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_height: usize,
    in_width: usize,
    in_rows: usize,
}

impl MaxPool {
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward<F: Real>(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, MaxPoolCache) {
        let (n, h, w, c) = (x.batch, x.height, x.width, x.channels());
        let (oh, ow) = self.output_size(h, w);
        let mut out = Array2::from_elem((n * oh * ow, c), F::neg_infinity());
        let mut argmax = vec![0usize; n * oh * ow * c];
        let src = x.data.as_slice().expect("contiguous");
        let dst = out.as_slice_mut().expect("contiguous");
        let pad = self.padding as isize;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((b * oh + oy) * ow + ox) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = ((b * h + iy as usize) * w + ix as usize) * c;
                            for ch in 0..c {
                                if src[i + ch] > dst[o + ch] {
                                    dst[o + ch] = src[i + ch];
                                    argmax[o + ch] = i + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        let cache = MaxPoolCache {
            argmax,
            in_height: h,
            in_width: w,
            in_rows: n * h * w,
        };
        (FeatureMap::new(out, n, oh, ow), cache)
    }

    pub fn backward<F: Real>(&self, cache: MaxPoolCache, dout: &FeatureMap<F>) -> FeatureMap<F> {
        let c = dout.channels();
        let mut dx = Array2::<F>::zeros((cache.in_rows, c));
        let dst = dx.as_slice_mut().expect("contiguous");
        for (g, &i) in dout.data.iter().zip(&cache.argmax) {
            dst[i] += *g;
        }
        FeatureMap::new(dx, dout.batch, cache.in_height, cache.in_width)
    }
}

/// Mean over spatial positions: `(n*h*w, c)` to `(n, c)`.
pub fn global_avg_pool<F: Real>(x: &FeatureMap<F>) -> Array2<F> {
    let hw = x.height * x.width;
    let c = x.channels();
    let mut out = Array2::<F>::zeros((x.batch, c));
    let scale = F::one() / F::lit(hw as f64);
    for b in 0..x.batch {
        let block = x.data.slice(ndarray::s![b * hw..(b + 1) * hw, ..]);
        let mut row = out.row_mut(b);
        for r in block.rows() {
            row += &r;
        }
        row *= scale;
    }
    out
}

pub fn global_avg_pool_backward<F: Real>(
    dh: &Array2<F>,
    height: usize,
    width: usize,
) -> FeatureMap<F> {
    let (n, c) = dh.dim();
    let hw = height * width;
    let scale = F::one() / F::lit(hw as f64);
    let mut dx = Array2::<F>::zeros((n * hw, c));
    for b in 0..n {
        let g = dh.row(b).mapv(|v| v * scale);
        for r in 0..hw {
            dx.row_mut(b * hw + r).assign(&g);
        }
    }
    FeatureMap::new(dx, n, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_fn((1, 4, 4, 1), |(_, y, x, _)| (y * 4 + x) as f64);
        let pool = MaxPool { kernel: 2, stride: 2, padding: 0 };
        let (out, cache) = pool.forward(&FeatureMap::from_nhwc(x));
        assert_eq!(out.data.column(0).to_vec(), vec![5.0, 7.0, 13.0, 15.0]);
        let dout = FeatureMap::<f64>::new(Array2::ones((4, 1)), 1, 2, 2);
        let dx = pool.backward(cache, &dout);
        assert_eq!(dx.data.sum(), 4.0);
        assert_eq!(dx.data[[15, 0]], 1.0);
        assert_eq!(dx.data[[0, 0]], 0.0);
    }

    #[test]
    fn average_pool_round_trip_shapes() {
        let x = FeatureMap::new(Array2::from_shape_fn((2 * 3 * 3, 2), |(r, c)| (r + c) as f64), 2, 3, 3);
        let h = global_avg_pool(&x);
        assert_eq!(h.dim(), (2, 2));
        assert!((h[[0, 0]] - 4.0).abs() < 1e-12);
        let dx = global_avg_pool_backward(&h, 3, 3);
        assert_eq!(dx.data.dim(), (18, 2));
    }
}
