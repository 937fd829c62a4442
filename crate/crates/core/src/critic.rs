//! Implicit Q-learning critic: a state-value network fit by expectile
//! regression against twin target Q networks, and twin Q networks fit to
//! one-step TD targets bootstrapped through the value network.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::nn::{Mlp, Scalar};
use crate::rng::Rng;
use crate::{Error, Result};

/// Asymmetric weight `|tau - 1{u < 0}|`.
#[inline]
pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Expectile loss `|tau - 1{u < 0}| u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

/// The `tau`-expectile of equally weighted `values`: the root of
/// `sum_i w_i(v_i - m) (v_i - m)`, found by bisection.
pub fn expectile(values: &[f64], tau: f64) -> f64 {
    assert!(!values.is_empty());
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let g = |m: f64| -> f64 { values.iter().map(|&v| expectile_weight(v - m, tau) * (v - m)).sum() };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub tau: f64,
    pub gamma: f64,
    /// Polyak rate of the target networks.
    pub rho: f64,
    pub hidden: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            gamma: 0.99,
            rho: 0.005,
            hidden: vec![64, 64, 64],
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0.5, 1), got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic<F> {
    pub q1: Mlp<F>,
    pub q2: Mlp<F>,
    pub v: Mlp<F>,
    pub q1_target: Mlp<F>,
    pub q2_target: Mlp<F>,
    pub cfg: CriticConfig,
}

/// Loss value and gradients of the twin Q regression.
#[derive(Debug, Clone)]
pub struct QLoss<F> {
    pub loss: F,
    pub grad_q1: Vec<F>,
    pub grad_q2: Vec<F>,
}

fn sa<F: Scalar>(states: ArrayView2<F>, actions: ArrayView2<F>) -> Array2<F> {
    concatenate(Axis(1), &[states, actions]).expect("state/action row counts differ")
}

fn column<F: Scalar>(out: Array2<F>) -> Array1<F> {
    out.index_axis_move(Axis(1), 0)
}

impl<F: Scalar> Critic<F> {
    /// Targets start as copies of the online Q networks.
    pub fn new(d_s: usize, d_a: usize, cfg: CriticConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let widths = |d_in: usize| {
            let mut w = vec![d_in];
            w.extend_from_slice(&cfg.hidden);
            w.push(1);
            w
        };
        let q1 = Mlp::new(&widths(d_s + d_a), rng)?;
        let q2 = Mlp::new(&widths(d_s + d_a), rng)?;
        let v = Mlp::new(&widths(d_s), rng)?;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            v,
            cfg,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Critic<G> {
        Critic {
            q1: self.q1.cast(),
            q2: self.q2.cast(),
            v: self.v.cast(),
            q1_target: self.q1_target.cast(),
            q2_target: self.q2_target.cast(),
            cfg: self.cfg.clone(),
        }
    }

    pub fn q1_values(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>> {
        Ok(column(self.q1.forward(sa(states, actions).view())?))
    }

    pub fn q2_values(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>> {
        Ok(column(self.q2.forward(sa(states, actions).view())?))
    }

    /// `min(Q1, Q2)` of the online networks.
    pub fn q_min(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>> {
        let x = sa(states, actions);
        let a = column(self.q1.forward(x.view())?);
        let b = column(self.q2.forward(x.view())?);
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| x.min(y)))
    }

    /// `min(Q1_target, Q2_target)`.
    pub fn target_q_min(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>> {
        let x = sa(states, actions);
        let a = column(self.q1_target.forward(x.view())?);
        let b = column(self.q2_target.forward(x.view())?);
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| x.min(y)))
    }

    pub fn value(&self, states: ArrayView2<F>) -> Result<Array1<F>> {
        Ok(column(self.v.forward(states)?))
    }

    /// Expectile regression of V toward the target twin-Q minimum. Gradients are
    /// for V only.
    pub fn v_loss(&self, batch: &Batch<F>) -> Result<(F, Vec<F>)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let target = self.target_q_min(batch.states.view(), batch.actions.view())?;
        let (v, tape) = self.v.forward_tape(batch.states.view())?;
        let tau = F::c(self.cfg.tau);
        let inv = F::one() / F::c(n as f64);
        let mut loss = F::zero();
        let mut grad_out = Array2::zeros((n, 1));
        for i in 0..n {
            let u = target[i] - v[[i, 0]];
            let w = if u < F::zero() { F::one() - tau } else { tau };
            loss = loss + w * u * u;
            grad_out[[i, 0]] = -F::c(2.0) * w * u * inv;
        }
        let grads = self.v.backward(&tape, grad_out.view())?;
        Ok((loss * inv, grads))
    }

    /// TD targets `r + gamma (1 - terminal) V(s')`.
    pub fn td_targets(&self, batch: &Batch<F>) -> Result<Array1<F>> {
        let v_next = self.value(batch.next_states.view())?;
        let gamma = F::c(self.cfg.gamma);
        Ok(ndarray::Zip::from(&batch.rewards)
            .and(&batch.terminals)
            .and(&v_next)
            .map_collect(|&r, &d, &v| r + gamma * (F::one() - d) * v))
    }

    /// Sum of the two mean squared TD errors. Gradients are for Q1 and Q2 only.
    pub fn q_loss(&self, batch: &Batch<F>) -> Result<QLoss<F>> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let y = self.td_targets(batch)?;
        let x = sa(batch.states.view(), batch.actions.view());
        let inv = F::one() / F::c(n as f64);
        let mut total = F::zero();
        let mut grads = Vec::with_capacity(2);
        for net in [&self.q1, &self.q2] {
            let (q, tape) = net.forward_tape(x.view())?;
            let mut g = Array2::zeros((n, 1));
            for i in 0..n {
                let d = q[[i, 0]] - y[i];
                total = total + d * d * inv;
                g[[i, 0]] = F::c(2.0) * d * inv;
            }
            grads.push(net.backward(&tape, g.view())?);
        }
        let grad_q2 = grads.pop().unwrap();
        let grad_q1 = grads.pop().unwrap();
        Ok(QLoss {
            loss: total,
            grad_q1,
            grad_q2,
        })
    }

    /// `target <- (1 - rho) target + rho online`, elementwise.
    pub fn polyak_update(&mut self) {
        let rho = F::c(self.cfg.rho);
        let keep = F::one() - rho;
        for (target, online) in [(&mut self.q1_target, &self.q1), (&mut self.q2_target, &self.q2)] {
            for (t, &o) in target.params_mut().iter_mut().zip(online.params()) {
                *t = keep * *t + rho * o;
            }
        }
    }
}
