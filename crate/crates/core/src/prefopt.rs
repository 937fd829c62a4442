//! Preference-based improvement of the surrogate policy against the frozen
//! behavior policy, and the weighted-regression baseline.
//!
//! Log-likelihoods are the single-draw surrogates `-|eps - eps(noised a)|^2`.
//! For a pair `(a, a_hat)` with label `gamma` (`+1` when `a` has the larger
//! value) every term of the pair is scored at one shared `(k, eps)`, and the
//! preference logit is
//!
//! ```text
//! x = eta * gamma * (delta(a) - delta(a_hat)),   delta(.) = log pi_psi(.) - log pi_b(.)
//! ```
//!
//! so minimising `-log sigmoid(x)` raises the relative likelihood of whichever
//! action the label prefers. The `eta` argument of the loss functions is the
//! full multiplier of the log-ratios; [`PrefLossConfig::temperature`] folds in
//! the surrogate scale.

use ndarray::{concatenate, Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::critic::Critic;
use crate::diffusion::{DiffusionPolicy, NoiseDraw};
use crate::nn::{axpy, Scalar};
use crate::prefgen::PreferenceBatch;
use crate::{Error, Result};

/// Upper clip of the weighted-regression weights.
pub const WR_WEIGHT_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefLossConfig {
    /// Preference temperature.
    pub eta: f64,
    /// Label flip probability of the anti-noise mixture.
    pub lambda: f64,
    /// Weight of the improvement term in the surrogate policy's loss.
    pub xi: f64,
    /// Factor applied to every surrogate log-likelihood. The ELBO of a K-step
    /// chain sums K per-step terms and a single uniformly drawn step estimates
    /// that sum only up to the factor K, so K is the natural setting.
    pub logp_scale: f64,
}

impl Default for PrefLossConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            lambda: 0.2,
            xi: 1.0,
            logp_scale: 1.0,
        }
    }
}

impl PrefLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        check_lambda(self.lambda)?;
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be non-negative, got {}", self.xi)));
        }
        if !(self.logp_scale > 0.0 && self.logp_scale.is_finite()) {
            return Err(Error::Config(format!("logp_scale must be positive, got {}", self.logp_scale)));
        }
        Ok(())
    }

    /// Multiplier of the log-likelihood ratios in the preference logit.
    pub fn temperature(&self) -> f64 {
        self.eta * self.logp_scale
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..0.5).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 0.5), got {lambda}")));
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Bradley-Terry probability that the generated action is preferred:
/// `sigmoid(eta * delta_hat - eta * delta_data)`.
pub fn bt_probability(delta_hat: f64, delta_data: f64, eta: f64) -> f64 {
    sigmoid(eta * delta_hat - eta * delta_data)
}

/// Per-pair preference logits together with the recorded surrogate pass.
struct PairForward<F> {
    fwd: crate::diffusion::DenoiseForward<F>,
    /// Logit per pair.
    x: Vec<F>,
    /// `eta * gamma` per pair.
    scale: Vec<F>,
}

fn pair_forward<F: Scalar>(
    psi: &DiffusionPolicy<F>,
    behavior: &DiffusionPolicy<F>,
    pref: &PreferenceBatch<F>,
    draw: &NoiseDraw<F>,
    eta: f64,
) -> Result<PairForward<F>> {
    let n = pref.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty preference batch".into()));
    }
    if draw.len() != n {
        return Err(Error::Shape(format!("{} noise draws for {n} pairs", draw.len())));
    }
    // Rows [0, n) are dataset actions, [n, 2n) generated ones, at identical noise.
    let states = concatenate(Axis(0), &[pref.states.view(), pref.states.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let actions = concatenate(Axis(0), &[pref.a_data.view(), pref.a_gen.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let both = draw.doubled();
    let fwd = psi.denoise_forward(states.view(), actions.view(), &both)?;
    let e_b = behavior.denoising_errors(states.view(), actions.view(), &both)?;
    let eta = F::c(eta);
    let mut x = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for i in 0..n {
        // log pi = -error, so delta = e_b - e_psi.
        let delta_data = e_b[i] - fwd.errors[i];
        let delta_gen = e_b[n + i] - fwd.errors[n + i];
        let c = eta * F::c(pref.gamma[i] as f64);
        x.push(c * (delta_data - delta_gen));
        scale.push(c);
    }
    Ok(PairForward { fwd, x, scale })
}

/// Values and gradient of a label mixture.
#[derive(Debug, Clone)]
pub struct PrefLoss<F> {
    /// Mean of `w_keep * softplus(-x) + w_flip * softplus(x)`.
    pub loss: F,
    /// The unflipped term alone, `mean softplus(-x)`.
    pub loss_imp: F,
    /// Gradient of `loss` w.r.t. the surrogate parameters.
    pub grads: Vec<F>,
}

/// `mean_i [w_keep * softplus(-x_i) + w_flip * softplus(x_i)]` with its gradient.
/// No restriction on the weights; [`l_anti`] is the validated entry point.
pub fn label_mixture<F: Scalar>(
    psi: &DiffusionPolicy<F>,
    behavior: &DiffusionPolicy<F>,
    pref: &PreferenceBatch<F>,
    draw: &NoiseDraw<F>,
    eta: f64,
    w_keep: F,
    w_flip: F,
) -> Result<PrefLoss<F>> {
    let pf = pair_forward(psi, behavior, pref, draw, eta)?;
    let n = pref.len();
    let inv = F::one() / F::c(n as f64);
    let mut loss = F::zero();
    let mut loss_imp = F::zero();
    let mut coeffs = vec![F::zero(); 2 * n];
    for i in 0..n {
        let x = pf.x[i];
        let keep = softplus(-x);
        loss = loss + (w_keep * keep + w_flip * softplus(x));
        loss_imp = loss_imp + keep;
        // d/dx of the mixture, then chain through x = c (e_psi(a_hat) - e_psi(a)) + const.
        let g = (w_flip * sigmoid_f(x) - w_keep * sigmoid_f(-x)) * inv;
        coeffs[i] = -g * pf.scale[i];
        coeffs[n + i] = g * pf.scale[i];
    }
    let mut grads = vec![F::zero(); psi.net.num_params()];
    psi.accumulate_error_grads(&pf.fwd, &coeffs, &mut grads)?;
    Ok(PrefLoss {
        loss: loss * inv,
        loss_imp: loss_imp * inv,
        grads,
    })
}

/// `-mean log sigmoid(x)`.
pub fn l_imp<F: Scalar>(
    psi: &DiffusionPolicy<F>,
    behavior: &DiffusionPolicy<F>,
    pref: &PreferenceBatch<F>,
    draw: &NoiseDraw<F>,
    eta: f64,
) -> Result<(F, Vec<F>)> {
    let r = label_mixture(psi, behavior, pref, draw, eta, F::one(), F::zero())?;
    Ok((r.loss, r.grads))
}

/// `(1 - lambda) L_imp + lambda L_imp` with every label flipped, at shared noise.
pub fn l_anti<F: Scalar>(
    psi: &DiffusionPolicy<F>,
    behavior: &DiffusionPolicy<F>,
    pref: &PreferenceBatch<F>,
    draw: &NoiseDraw<F>,
    eta: f64,
    lambda: f64,
) -> Result<PrefLoss<F>> {
    check_lambda(lambda)?;
    label_mixture(psi, behavior, pref, draw, eta, F::one() - F::c(lambda), F::c(lambda))
}

/// Components of the surrogate policy's objective.
#[derive(Debug, Clone)]
pub struct TotalLoss<F> {
    pub loss_d: F,
    pub loss_imp: F,
    pub loss_anti: F,
    /// `loss_d + xi * loss_anti`.
    pub total: F,
    pub grads: Vec<F>,
}

/// Behavior cloning of the surrogate on the data batch plus `xi` times the
/// anti-noise preference loss. With `xi = 0` the preference gradient is not
/// added at all.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    psi: &DiffusionPolicy<F>,
    behavior: &DiffusionPolicy<F>,
    states: ArrayView2<F>,
    actions: ArrayView2<F>,
    bc_draw: &NoiseDraw<F>,
    pref: &PreferenceBatch<F>,
    pref_draw: &NoiseDraw<F>,
    cfg: &PrefLossConfig,
) -> Result<TotalLoss<F>> {
    cfg.validate()?;
    let (loss_d, mut grads) = psi.bc_loss(states, actions, bc_draw)?;
    let anti = l_anti(psi, behavior, pref, pref_draw, cfg.temperature(), cfg.lambda)?;
    let xi = F::c(cfg.xi);
    if cfg.xi != 0.0 {
        axpy(&mut grads, xi, &anti.grads);
    }
    Ok(TotalLoss {
        loss_d,
        loss_imp: anti.loss_imp,
        loss_anti: anti.loss,
        total: loss_d + xi * anti.loss,
        grads,
    })
}

/// `clip(exp(advantage / eta_wr), 0, WR_WEIGHT_MAX)`.
pub fn wr_weight(advantage: f64, eta_wr: f64) -> f64 {
    (advantage / eta_wr).exp().clamp(0.0, WR_WEIGHT_MAX)
}

/// Advantage-weighted denoising loss `mean_i w_i e_i` with
/// `w_i = wr_weight(min Q(s_i, a_i) - V(s_i))`. Returns the loss, its gradient,
/// and the weights.
pub fn wr_loss<F: Scalar>(
    policy: &DiffusionPolicy<F>,
    critic: &Critic<F>,
    states: ArrayView2<F>,
    actions: ArrayView2<F>,
    draw: &NoiseDraw<F>,
    eta_wr: f64,
) -> Result<(F, Vec<F>, Array1<f64>)> {
    if !(eta_wr > 0.0) {
        return Err(Error::Config(format!("eta_wr must be positive, got {eta_wr}")));
    }
    let q = critic.q_min(states, actions)?;
    let v = critic.value(states)?;
    let w: Array1<f64> = ndarray::Zip::from(&q)
        .and(&v)
        .map_collect(|&q, &v| wr_weight(q.f64() - v.f64(), eta_wr));
    weighted_bc(policy, states, actions, draw, &w).map(|(l, g)| (l, g, w))
}

/// `mean_i w_i e_i` and its gradient for fixed weights.
pub fn weighted_bc<F: Scalar>(
    policy: &DiffusionPolicy<F>,
    states: ArrayView2<F>,
    actions: ArrayView2<F>,
    draw: &NoiseDraw<F>,
    weights: &Array1<f64>,
) -> Result<(F, Vec<F>)> {
    let n = actions.nrows();
    if n == 0 || weights.len() != n {
        return Err(Error::Shape("one weight per non-empty batch row".into()));
    }
    let fwd = policy.denoise_forward(states, actions, draw)?;
    let inv = F::one() / F::c(n as f64);
    let coeffs: Vec<F> = weights.iter().map(|&w| F::c(w) * inv).collect();
    let loss = fwd.errors.iter().zip(&coeffs).fold(F::zero(), |acc, (&e, &c)| acc + c * e);
    let mut grads = vec![F::zero(); policy.net.num_params()];
    policy.accumulate_error_grads(&fwd, &coeffs, &mut grads)?;
    Ok((loss, grads))
}
