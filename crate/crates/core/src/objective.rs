//! Agreement, variance and covariance terms and their weighted total.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Target standard deviation of the variance hinge.
    pub var_target: f64,
    pub var_eps: f64,
    /// Halve the summed variance terms.
    pub halve_var: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 25.0,
            beta: 25.0,
            gamma: 1.0,
            var_target: 1.0,
            var_eps: 1e-4,
            halve_var: false,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            v.push("objective: alpha, beta and gamma must be non-negative".into());
        }
        if !(self.var_eps > 0.0) {
            v.push("objective.var_eps must be positive".into());
        }
        v
    }

    fn var_factor(&self) -> f64 {
        if self.halve_var {
            0.5
        } else {
            1.0
        }
    }
}

/// Unweighted components plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub var_c: f64,
    pub var_t: f64,
    pub cov_c: f64,
    pub cov_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.mse, self.var_c, self.var_t, self.cov_c, self.cov_t, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_pair<F: Real>(a: &Array2<F>, b: &Array2<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Empty("embedding batch"));
    }
    Ok(())
}

fn centered<F: Real>(s: &Array2<F>) -> Result<Array2<F>> {
    if s.nrows() < 2 {
        return Err(Error::InsufficientBatch(s.nrows()));
    }
    let mean = s.mean_axis(Axis(0)).expect("non-empty batch");
    Ok(s - &mean)
}

/// `(1/N) sum_i |s_c^i - s_t^i|^2`.
pub fn mse_loss<F: Real>(s_c: &Array2<F>, s_t: &Array2<F>) -> Result<F> {
    check_pair(s_c, s_t)?;
    let d = s_c - s_t;
    Ok(d.mapv(|v| v * v).sum() / F::lit(s_c.nrows() as f64))
}

/// Mean over dimensions of `relu(tau - sqrt(var_j + eps))`, unbiased variance.
pub fn variance_loss<F: Real>(s: &Array2<F>, tau: f64, eps: f64) -> Result<F> {
    Ok(variance_terms(s, tau, eps)?.0)
}

/// Loss value, per-dimension std and centered batch.
fn variance_terms<F: Real>(s: &Array2<F>, tau: f64, eps: f64) -> Result<(F, Vec<F>, Array2<F>)> {
    let xc = centered(s)?;
    let n1 = F::lit((s.nrows() - 1) as f64);
    let std: Vec<F> = xc
        .axis_iter(Axis(1))
        .map(|col| (col.mapv(|v| v * v).sum() / n1 + F::lit(eps)).sqrt())
        .collect();
    let tau = F::lit(tau);
    let loss = std.iter().map(|&sd| (tau - sd).max(F::zero())).sum::<F>() / F::lit(s.ncols() as f64);
    Ok((loss, std, xc))
}

/// `(1/H) sum_{j != k} C_jk^2` with the `N - 1` covariance.
pub fn covariance_loss<F: Real>(s: &Array2<F>) -> Result<F> {
    Ok(covariance_terms(s)?.0)
}

/// Loss value, off-diagonal covariance and centered batch.
fn covariance_terms<F: Real>(s: &Array2<F>) -> Result<(F, Array2<F>, Array2<F>)> {
    let xc = centered(s)?;
    let n1 = F::lit((s.nrows() - 1) as f64);
    let mut cov = xc.t().dot(&xc) / n1;
    cov.diag_mut().fill(F::zero());
    let loss = cov.mapv(|v| v * v).sum() / F::lit(s.ncols() as f64);
    Ok((loss, cov, xc))
}

pub fn total_loss<F: Real>(s_c: &Array2<F>, s_t: &Array2<F>, w: &LossWeights) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(s_c, s_t, w)?.0)
}

/// The weighted total with its gradients with respect to `s_c` and `s_t`.
pub fn total_loss_with_grad<F: Real>(
    s_c: &Array2<F>,
    s_t: &Array2<F>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Array2<F>, Array2<F>)> {
    check_pair(s_c, s_t)?;
    let (n, h) = s_c.dim();
    if n < 2 {
        return Err(Error::InsufficientBatch(n));
    }
    let mse = mse_loss(s_c, s_t)?;
    let diff = s_c - s_t;
    let mut g_c = &diff * F::lit(2.0 * w.alpha / n as f64);
    let mut g_t = g_c.mapv(|v| -v);

    let var_scale = w.beta * w.var_factor();
    let nh = F::lit(h as f64);
    let n1 = F::lit((n - 1) as f64);
    let add_var = |s: &Array2<F>, g: &mut Array2<F>| -> Result<F> {
        let (loss, std, xc) = variance_terms(s, w.var_target, w.var_eps)?;
        let tau = F::lit(w.var_target);
        for (j, col) in xc.axis_iter(Axis(1)).enumerate() {
            if tau - std[j] > F::zero() {
                let k = F::lit(var_scale) / (nh * n1 * std[j]);
                let mut gcol = g.column_mut(j);
                gcol.zip_mut_with(&col, |gv, &x| *gv -= k * x);
            }
        }
        Ok(loss)
    };
    let var_c = add_var(s_c, &mut g_c)?;
    let var_t = add_var(s_t, &mut g_t)?;

    let cov_scale = F::lit(4.0 * w.gamma) / (nh * n1);
    let add_cov = |s: &Array2<F>, g: &mut Array2<F>| -> Result<F> {
        let (loss, cov, xc) = covariance_terms(s)?;
        if w.gamma != 0.0 {
            *g += &(xc.dot(&cov) * cov_scale);
        }
        Ok(loss)
    };
    let cov_c = add_cov(s_c, &mut g_c)?;
    let cov_t = add_cov(s_t, &mut g_t)?;

    let to = |v: F| v.to_f64().unwrap_or(f64::NAN);
    let mut b = LossBreakdown {
        mse: to(mse),
        var_c: to(var_c),
        var_t: to(var_t),
        cov_c: to(cov_c),
        cov_t: to(cov_t),
        total: 0.0,
    };
    b.total = w.alpha * b.mse + var_scale * (b.var_c + b.var_t) + w.gamma * (b.cov_c + b.cov_t);
    Ok((b, g_c, g_t))
}

/// Mean over dimensions of the per-dimension batch standard deviation.
pub fn mean_std<F: Real>(s: &Array2<F>) -> f64 {
    if s.nrows() < 2 {
        return 0.0;
    }
    let n1 = (s.nrows() - 1) as f64;
    let mean = s.mean_axis(Axis(0)).expect("non-empty");
    let xc = s - &mean;
    xc.axis_iter(Axis(1))
        .map(|c| (c.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>() / n1).sqrt())
        .sum::<f64>()
        / s.ncols() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_examples() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 0.0]];
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!(mse_loss(&a, &array![[1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn variance_of_constant_batch() {
        let s = Array2::from_elem((5, 3), 2.0f64);
        let v = variance_loss(&s, 1.0, 1e-4).unwrap();
        assert!((v - 0.99).abs() < 1e-12);
        assert!(matches!(variance_loss(&array![[1.0]], 1.0, 1e-4), Err(Error::InsufficientBatch(1))));
    }

    #[test]
    fn covariance_of_duplicated_columns() {
        let s = array![[1.0, 1.0], [-1.0, -1.0], [3.0, 3.0], [-3.0, -3.0]];
        let v: f64 = 20.0 / 3.0;
        let c: f64 = covariance_loss(&s).unwrap();
        assert!((c - 2.0 * v * v / 2.0).abs() < 1e-9);
        assert_eq!(covariance_loss(&array![[1.0], [2.0]]).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let a = array![[1.0, 2.0], [0.0, 5.0], [3.0, -1.0]];
        let b = array![[0.0, 1.0], [2.0, 2.0], [1.0, 1.0]];
        let t = total_loss(&a, &b, &LossWeights::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(t.total, 0.0);
        let only_mse = total_loss(&a, &b, &LossWeights::new(3.0, 0.0, 0.0)).unwrap();
        assert!((only_mse.total - 3.0 * only_mse.mse).abs() < 1e-12);
    }
}
