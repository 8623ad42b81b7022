use ndarray::{ArrayD, Zip};

use super::{ParamMut, Real};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: F,
    pub weight_decay: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: F, weight_decay: F) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `params` must be enumerated in the same order on
    /// every call.
    pub fn step(&mut self, params: Vec<ParamMut<'_, F>>, lr: F) {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter set changed");
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (mut p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, vel| {
                    let g = g + wd * *w;
                    *vel = mu * *vel + g;
                    *w -= lr * *vel;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Module};
    use ndarray::array;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut lin = Linear::<f32>::from_parts(array![[1.0, 2.0], [3.0, 4.0]], Some(array![0.5, -0.5]));
        lin.weight_grad.fill(10.0);
        let before = lin.weight.clone();
        let mut opt = Sgd::new(0.9, 1e-6);
        opt.step(lin.params_mut(""), 0.0);
        assert_eq!(lin.weight, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut lin = Linear::<f64>::from_parts(array![[0.0]], None);
        let mut opt = Sgd::new(0.5, 0.0);
        lin.weight_grad.fill(1.0);
        opt.step(lin.params_mut(""), 1.0);
        assert_eq!(lin.weight[[0, 0]], -1.0);
        opt.step(lin.params_mut(""), 1.0);
        assert_eq!(lin.weight[[0, 0]], -2.5);
    }
}
