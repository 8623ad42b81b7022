use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

use super::{join, Module, ParamMut, Real};

/// Batch normalization over the channel (column) axis.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; inference mode uses the running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub gamma_grad: Array1<F>,
    pub beta_grad: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

pub struct BatchNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            gamma_grad: Array1::zeros(channels),
            beta_grad: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::lit(0.1),
            eps: F::lit(1e-5),
        }
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let scale = &self.gamma / &self.running_var.mapv(|v| (v + self.eps).sqrt());
        let shift = &self.beta - &(&self.running_mean * &scale);
        x * &scale + &shift
    }

    pub fn forward_train(&mut self, x: &Array2<F>) -> (Array2<F>, BatchNormCache<F>) {
        let m = x.nrows();
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / F::lit(m as f64);
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std;
        let out = &xhat * &self.gamma + &self.beta;

        let unbiased = if m > 1 {
            &var * F::lit(m as f64 / (m - 1) as f64)
        } else {
            var.clone()
        };
        let keep = F::one() - self.momentum;
        self.running_mean = &self.running_mean * keep + &(&mean * self.momentum);
        self.running_var = &self.running_var * keep + &(&unbiased * self.momentum);
        (out, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: BatchNormCache<F>, dy: &Array2<F>) -> Array2<F> {
        let m = F::lit(dy.nrows() as f64);
        self.beta_grad += &dy.sum_axis(Axis(0));
        self.gamma_grad += &(dy * &cache.xhat).sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let scale = &cache.inv_std / m;
        let mut dx = dxhat * m - &sum_dxhat;
        dx -= &(&cache.xhat * &sum_dxhat_xhat);
        dx * &scale
    }
}

impl<F: Real> Module<F> for BatchNorm<F> {
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, F>> {
        vec![
            ParamMut {
                name: join(prefix, "gamma"),
                value: self.gamma.view_mut().into_dyn(),
                grad: self.gamma_grad.view_mut().into_dyn(),
            },
            ParamMut {
                name: join(prefix, "beta"),
                value: self.beta.view_mut().into_dyn(),
                grad: self.beta_grad.view_mut().into_dyn(),
            },
        ]
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, F>)> {
        vec![
            (join(prefix, "gamma"), self.gamma.view().into_dyn()),
            (join(prefix, "beta"), self.beta.view().into_dyn()),
            (join(prefix, "running_mean"), self.running_mean.view().into_dyn()),
            (join(prefix, "running_var"), self.running_var.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            (join(prefix, "gamma"), self.gamma.view_mut().into_dyn()),
            (join(prefix, "beta"), self.beta.view_mut().into_dyn()),
            (join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn()),
            (join(prefix, "running_var"), self.running_var.view_mut().into_dyn()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-2.0..2.0));
        let up = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0));
        let loss = |bn: &BatchNorm<f64>, x: &Array2<f64>| {
            let mut b = bn.clone();
            (&b.forward_train(x).0 * &up).sum()
        };
        let mut work = bn.clone();
        let (_, cache) = work.forward_train(&x);
        let dx = work.backward(cache, &up);
        let eps = 1e-6;
        for r in 0..6 {
            for c in 0..3 {
                let mut p = x.clone();
                p[[r, c]] += eps;
                let mut m = x.clone();
                m[[r, c]] -= eps;
                let fd = (loss(&bn, &p) - loss(&bn, &m)) / (2.0 * eps);
                assert!((fd - dx[[r, c]]).abs() < 1e-6);
            }
        }
        for c in 0..3 {
            let mut p = bn.clone();
            p.gamma[c] += eps;
            let mut m = bn.clone();
            m.gamma[c] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - work.gamma_grad[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.running_mean = Array1::from(vec![1.0, -1.0]);
        bn.running_var = Array1::from(vec![4.0, 1.0]);
        bn.eps = 0.0;
        let y = bn.forward_eval(&Array2::from_shape_vec((1, 2), vec![3.0, 0.0]).unwrap());
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((y[[0, 1]] - 1.0).abs() < 1e-12);
    }
}
