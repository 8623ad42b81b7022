use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, uniform_matrix, Module, ParamMut, Real};

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub weight_grad: Array2<F>,
    pub bias_grad: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    /// `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = uniform_matrix(input, output, bound, rng);
        let bias = bias.then(|| {
            Array1::from_shape_simple_fn(output, || F::lit(rng.random_range(-bound..=bound)))
        });
        Self::from_parts(weight, bias)
    }

    pub fn from_parts(weight: Array2<F>, bias: Option<Array1<F>>) -> Self {
        let (i, o) = weight.dim();
        if let Some(b) = &bias {
            assert_eq!(b.len(), o, "bias length");
        }
        Self {
            weight_grad: Array2::zeros((i, o)),
            bias_grad: bias.as_ref().map(|_| Array1::zeros(o)),
            weight,
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates gradients for the input `x` that produced the output
    /// gradient `dy`; returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.weight_grad += &x.t().dot(dy);
        if let Some(bg) = &mut self.bias_grad {
            *bg += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }
}

impl<F: Real> Module<F> for Linear<F> {
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
