//! A small NHWC tensor engine with hand-written backward passes.
//!
//! Activations are stored as `(batch * height * width, channels)` matrices so
//! that convolutions become a single GEMM after im2col and normalization layers
//! reduce over rows.

mod conv;
mod encoder;
mod linear;
mod norm;
mod optim;
mod pool;

pub use conv::{Conv2d, ConvCache};
pub use encoder::{Arch, Encoder, EncoderTrace};
pub use linear::Linear;
pub use norm::{BatchNorm, BatchNormCache};
pub use optim::Sgd;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool, MaxPoolCache};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

/// Floating point element type usable by the engine (`f32` for training,
/// `f64` for gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A batch of feature maps in NHWC order, flattened to `(n*h*w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub data: Array2<F>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl<F: Real> FeatureMap<F> {
    pub fn new(data: Array2<F>, batch: usize, height: usize, width: usize) -> Self {
        assert_eq!(data.nrows(), batch * height * width, "feature map rows");
        Self {
            data,
            batch,
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Wraps an `(n, h, w, c)` array.
    pub fn from_nhwc(x: Array4<F>) -> Self {
        let (n, h, w, c) = x.dim();
        let x = x.as_standard_layout().into_owned();
        let data = x
            .into_shape_with_order((n * h * w, c))
            .expect("standard layout reshape");
        Self::new(data, n, h, w)
    }

    pub fn into_nhwc(self) -> Array4<F> {
        let c = self.channels();
        self.data
            .into_shape_with_order((self.batch, self.height, self.width, c))
            .expect("standard layout reshape")
    }
}

/// A trainable tensor and its accumulated gradient.
pub struct ParamMut<'a, F> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Uniform access to parameters and persistent buffers for optimizers and
/// checkpoints. Tensor order is stable and defines checkpoint layout.
pub trait Module<F: Real> {
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_, F>>;

    /// Every persistent tensor (parameters followed by buffers such as running
    /// statistics).
    fn tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, F>)>;

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, F>)>;

    fn zero_grad(&mut self) {
        for mut p in self.params_mut("") {
            p.grad.fill(F::zero());
        }
    }

    fn num_params(&mut self) -> usize {
        self.params_mut("").iter().map(|p| p.value.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Samples `U(-bound, bound)` into a fresh matrix.
pub fn uniform_matrix<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        F::lit(rng.random_range(-bound..=bound))
    })
}

/// Xavier/Glorot uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
