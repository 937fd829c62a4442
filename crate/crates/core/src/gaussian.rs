//! Unimodal Gaussian policy fit by maximum likelihood; the reference point for
//! how much multimodality a diffusion policy recovers.

use ndarray::{Array2, ArrayView2};

use crate::nn::{Mlp, Scalar};
use crate::rng::{normal_matrix, Rng};
use crate::Result;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct GaussianPolicy<F> {
    /// Outputs `[mean | log_std]`.
    pub net: Mlp<F>,
    d_a: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
}

impl<F: Scalar> GaussianPolicy<F> {
    pub fn new(d_s: usize, d_a: usize, action_low: Vec<f64>, action_high: Vec<f64>, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![d_s];
        widths.extend_from_slice(hidden);
        widths.push(2 * d_a);
        Ok(Self {
            net: Mlp::new(&widths, rng)?,
            d_a,
            action_low,
            action_high,
        })
    }

    /// Mean negative log-likelihood (up to the constant) and its gradient.
    pub fn nll_loss(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<(F, Vec<F>)> {
        let n = states.nrows();
        let (out, tape) = self.net.forward_tape(states)?;
        let inv = F::one() / F::c(n as f64);
        let mut grad = Array2::zeros(out.dim());
        let mut loss = F::zero();
        for i in 0..n {
            for j in 0..self.d_a {
                let mu = out[[i, j]];
                let raw = out[[i, self.d_a + j]];
                let clipped = raw < F::c(LOG_STD_MIN) || raw > F::c(LOG_STD_MAX);
                let log_std = raw.max(F::c(LOG_STD_MIN)).min(F::c(LOG_STD_MAX));
                let inv_var = (-(log_std + log_std)).exp();
                let d = actions[[i, j]] - mu;
                loss = loss + (F::c(0.5) * d * d * inv_var + log_std) * inv;
                grad[[i, j]] = -d * inv_var * inv;
                grad[[i, self.d_a + j]] = if clipped {
                    F::zero()
                } else {
                    (F::one() - d * d * inv_var) * inv
                };
            }
        }
        let g = self.net.backward(&tape, grad.view())?;
        Ok((loss, g))
    }

    pub fn sample_actions(&self, states: ArrayView2<F>, rng: &mut Rng) -> Result<Array2<F>> {
        let out = self.net.forward(states)?;
        let z: Array2<F> = normal_matrix(rng, states.nrows(), self.d_a);
        let mut a = Array2::zeros((states.nrows(), self.d_a));
        for i in 0..states.nrows() {
            for j in 0..self.d_a {
                let log_std = out[[i, self.d_a + j]].max(F::c(LOG_STD_MIN)).min(F::c(LOG_STD_MAX));
                let v = out[[i, j]] + log_std.exp() * z[[i, j]];
                a[[i, j]] = v.max(F::c(self.action_low[j])).min(F::c(self.action_high[j]));
            }
        }
        Ok(a)
    }
}
