//! Conditional diffusion policy over actions.
//!
//! The noise network sees `[noisy action | time embedding | state]` and predicts
//! the Gaussian noise that produced the noisy action. Training uses the usual
//! noise-prediction (behavior-cloning) loss; actions are drawn with DDPM ancestral
//! sampling; a single-timestep denoising error doubles as a per-sample
//! log-likelihood surrogate.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, Scalar, Tape, TimeEmbedding};
use crate::rng::{normal_matrix, Rng};
use crate::{Error, Result};

/// How a [`NoiseSchedule`] was built; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// Betas evenly spaced from `start` to `end`.
    Linear { steps: usize, start: f64, end: f64 },
    /// Discretized variance-preserving SDE with linearly growing rate
    /// `b(t) = b_min + (b_max - b_min) t`:
    /// `alpha_k = exp(-b_min / K - (b_max - b_min) (2k - 1) / (2 K^2))`.
    Vp { steps: usize, b_min: f64, b_max: f64 },
}

impl ScheduleSpec {
    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::Linear { steps, .. } | ScheduleSpec::Vp { steps, .. } => steps,
        }
    }

    pub fn vp(steps: usize) -> Self {
        ScheduleSpec::Vp {
            steps,
            b_min: 0.1,
            b_max: 10.0,
        }
    }
}

/// beta / alpha / alpha-bar tables for steps `k = 1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let k = spec.steps();
        if k == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = match spec {
            ScheduleSpec::Linear { start, end, .. } => (0..k)
                .map(|i| {
                    if k == 1 {
                        start
                    } else {
                        start + (end - start) * i as f64 / (k - 1) as f64
                    }
                })
                .collect(),
            ScheduleSpec::Vp { b_min, b_max, .. } => (1..=k)
                .map(|i| {
                    let kf = k as f64;
                    let log_alpha = -b_min / kf - (b_max - b_min) * (2.0 * i as f64 - 1.0) / (2.0 * kf * kf);
                    -log_alpha.exp_m1()
                })
                .collect(),
        };
        Self::from_betas(spec, betas)
    }

    fn from_betas(spec: ScheduleSpec, betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("betas must lie in (0, 1): {betas:?}")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let last = *alpha_bars.last().unwrap();
        if !(last < 0.01) {
            return Err(Error::Config(format!(
                "schedule ends at alpha_bar = {last:.4}; it must fall below 0.01 so the chain starts from (near) pure noise"
            )));
        }
        Ok(Self {
            spec,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `k` is 1-based throughout.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::InvalidInput(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Architecture and schedule of a diffusion policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub schedule: ScheduleSpec,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            time_dim: 16,
            schedule: ScheduleSpec::vp(20),
        }
    }
}

/// One diffusion step and one Gaussian noise vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<F> {
    pub ks: Vec<usize>,
    pub eps: Array2<F>,
}

impl<F: Scalar> NoiseDraw<F> {
    /// `k ~ Uniform{1..=steps}`, `eps ~ N(0, I)` per row.
    pub fn sample(rows: usize, d_a: usize, steps: usize, rng: &mut Rng) -> Self {
        let ks = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
        let eps = normal_matrix(rng, rows, d_a);
        Self { ks, eps }
    }

    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }

    /// The draw stacked on top of itself, for scoring two action sets at
    /// identical noise.
    pub fn doubled(&self) -> Self {
        let mut ks = self.ks.clone();
        ks.extend_from_slice(&self.ks);
        let eps = ndarray::concatenate(Axis(0), &[self.eps.view(), self.eps.view()]).unwrap();
        Self { ks, eps }
    }

    pub fn cast<G: Scalar>(&self) -> NoiseDraw<G> {
        NoiseDraw {
            ks: self.ks.clone(),
            eps: self.eps.mapv(|v| G::c(v.f64())),
        }
    }
}

/// Recorded forward pass of the noise network over a batch of noised actions.
pub struct DenoiseForward<F> {
    tape: Tape<F>,
    /// `prediction - eps` per row.
    residual: Array2<F>,
    /// Squared denoising error per row.
    pub errors: Array1<F>,
}

/// Noise-prediction network with its schedule and action bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy<F> {
    pub net: Mlp<F>,
    schedule: NoiseSchedule,
    embedding: TimeEmbedding,
    embed_table: Array2<F>,
    d_s: usize,
    d_a: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
}

impl<F: Scalar> DiffusionPolicy<F> {
    pub fn new(
        d_s: usize,
        d_a: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        cfg: &PolicyConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![d_a + cfg.time_dim + d_s];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(d_a);
        let net = Mlp::new(&widths, rng)?;
        Self::from_parts(
            net,
            NoiseSchedule::new(cfg.schedule)?,
            TimeEmbedding::new(cfg.time_dim)?,
            d_s,
            action_low,
            action_high,
        )
    }

    pub fn from_parts(
        net: Mlp<F>,
        schedule: NoiseSchedule,
        embedding: TimeEmbedding,
        d_s: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
    ) -> Result<Self> {
        let d_a = net.output_dim();
        if net.input_dim() != d_a + embedding.dim() + d_s {
            return Err(Error::Shape(format!(
                "noise network input {} != d_a {} + d_e {} + d_s {}",
                net.input_dim(),
                d_a,
                embedding.dim(),
                d_s
            )));
        }
        if action_low.len() != d_a || action_high.len() != d_a {
            return Err(Error::Shape("action bounds must have length d_a".into()));
        }
        if action_low.iter().zip(&action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action_low must be below action_high".into()));
        }
        let embed_table = embedding.table(schedule.steps());
        Ok(Self {
            net,
            schedule,
            embedding,
            embed_table,
            d_s,
            d_a,
            action_low,
            action_high,
        })
    }

    /// Same policy in another precision.
    pub fn cast<G: Scalar>(&self) -> DiffusionPolicy<G> {
        DiffusionPolicy {
            net: self.net.cast(),
            schedule: self.schedule.clone(),
            embedding: self.embedding,
            embed_table: self.embed_table.mapv(|v| G::c(v.f64())),
            d_s: self.d_s,
            d_a: self.d_a,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    /// `a^k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps`.
    pub fn noise_forward(&self, a0: ArrayView1<F>, k: usize, eps: ArrayView1<F>) -> Result<Array1<F>> {
        self.schedule.check_step(k)?;
        if a0.len() != self.d_a || eps.len() != self.d_a {
            return Err(Error::Shape("action and noise must have length d_a".into()));
        }
        let ab = self.schedule.alpha_bar(k);
        Ok(&a0 * F::c(ab.sqrt()) + &eps * F::c((1.0 - ab).sqrt()))
    }

    fn check_draw(&self, rows: usize, draw: &NoiseDraw<F>) -> Result<()> {
        if draw.len() != rows || draw.eps.dim() != (rows, self.d_a) {
            return Err(Error::Shape(format!(
                "noise draw for {} rows does not match batch of {rows}",
                draw.len()
            )));
        }
        for &k in &draw.ks {
            self.schedule.check_step(k)?;
        }
        Ok(())
    }

    fn noised(&self, actions: ArrayView2<F>, draw: &NoiseDraw<F>) -> Array2<F> {
        let mut out = Array2::zeros(actions.dim());
        for (i, &k) in draw.ks.iter().enumerate() {
            let ab = self.schedule.alpha_bar(k);
            let (ca, ce) = (F::c(ab.sqrt()), F::c((1.0 - ab).sqrt()));
            for j in 0..self.d_a {
                out[[i, j]] = ca * actions[[i, j]] + ce * draw.eps[[i, j]];
            }
        }
        out
    }

    fn net_input(&self, noisy: ArrayView2<F>, ks: &[usize], states: ArrayView2<F>) -> Array2<F> {
        let rows = noisy.nrows();
        let d_e = self.embedding.dim();
        let mut x = Array2::zeros((rows, self.d_a + d_e + self.d_s));
        x.slice_mut(s![.., ..self.d_a]).assign(&noisy);
        for (i, &k) in ks.iter().enumerate() {
            x.slice_mut(s![i, self.d_a..self.d_a + d_e])
                .assign(&self.embed_table.row(k - 1));
        }
        x.slice_mut(s![.., self.d_a + d_e..]).assign(&states);
        x
    }

    fn check_rows(&self, states: &ArrayView2<F>, actions: &ArrayView2<F>) -> Result<()> {
        if states.ncols() != self.d_s || actions.ncols() != self.d_a || states.nrows() != actions.nrows() {
            return Err(Error::Shape(format!(
                "states {:?} / actions {:?} do not match d_s = {}, d_a = {}",
                states.dim(),
                actions.dim(),
                self.d_s,
                self.d_a
            )));
        }
        Ok(())
    }

    /// eps_theta(noisy, k; s), batched.
    pub fn predict_noise(&self, noisy: ArrayView2<F>, ks: &[usize], states: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_rows(&states, &noisy)?;
        self.net.forward(self.net_input(noisy, ks, states).view())
    }

    /// Per-row `|eps - eps_theta(noise_forward(a0, k, eps), k; s)|^2`.
    pub fn denoising_errors(&self, states: ArrayView2<F>, actions: ArrayView2<F>, draw: &NoiseDraw<F>) -> Result<Array1<F>> {
        self.check_rows(&states, &actions)?;
        self.check_draw(actions.nrows(), draw)?;
        let noisy = self.noised(actions, draw);
        let pred = self.net.forward(self.net_input(noisy.view(), &draw.ks, states).view())?;
        Ok((&pred - &draw.eps).mapv(|v| v * v).sum_axis(Axis(1)))
    }

    /// Like [`DiffusionPolicy::denoising_errors`], recording the pass for gradients.
    pub fn denoise_forward(&self, states: ArrayView2<F>, actions: ArrayView2<F>, draw: &NoiseDraw<F>) -> Result<DenoiseForward<F>> {
        self.check_rows(&states, &actions)?;
        self.check_draw(actions.nrows(), draw)?;
        let noisy = self.noised(actions, draw);
        let (pred, tape) = self.net.forward_tape(self.net_input(noisy.view(), &draw.ks, states).view())?;
        let residual = pred - &draw.eps;
        let errors = residual.mapv(|v| v * v).sum_axis(Axis(1));
        Ok(DenoiseForward { tape, residual, errors })
    }

    /// Accumulates the gradient of `sum_i coeffs[i] * errors[i]` into `grads`.
    pub fn accumulate_error_grads(&self, fwd: &DenoiseForward<F>, coeffs: &[F], grads: &mut [F]) -> Result<()> {
        if coeffs.len() != fwd.errors.len() {
            return Err(Error::Shape("one coefficient per denoising error".into()));
        }
        let mut g = fwd.residual.clone();
        for (mut row, &c) in g.rows_mut().into_iter().zip(coeffs) {
            let scale = F::c(2.0) * c;
            row.mapv_inplace(|v| v * scale);
        }
        self.net.backward_acc(&fwd.tape, g.view(), grads)
    }

    /// Behavior-cloning loss with explicit noise: mean per-row denoising error,
    /// and its gradient w.r.t. the network parameters.
    pub fn bc_loss(&self, states: ArrayView2<F>, actions: ArrayView2<F>, draw: &NoiseDraw<F>) -> Result<(F, Vec<F>)> {
        let n = actions.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let fwd = self.denoise_forward(states, actions, draw)?;
        let inv = F::one() / F::c(n as f64);
        let loss = fwd.errors.sum() * inv;
        let mut grads = vec![F::zero(); self.net.num_params()];
        self.accumulate_error_grads(&fwd, &vec![inv; n], &mut grads)?;
        Ok((loss, grads))
    }

    /// [`DiffusionPolicy::bc_loss`] with `k` and `eps` drawn from `rng`.
    pub fn bc_loss_rng(&self, states: ArrayView2<F>, actions: ArrayView2<F>, rng: &mut Rng) -> Result<(F, Vec<F>)> {
        let draw = NoiseDraw::sample(actions.nrows(), self.d_a, self.schedule.steps(), rng);
        self.bc_loss(states, actions, &draw)
    }

    /// Surrogate log-likelihood `-|eps - eps_theta(noise_forward(a0, k, eps), k; s)|^2`
    /// at caller-supplied `(k, eps)`.
    pub fn elbo_logprob(&self, state: ArrayView1<F>, a0: ArrayView1<F>, k: usize, eps: ArrayView1<F>) -> Result<F> {
        let draw = NoiseDraw {
            ks: vec![k],
            eps: eps.to_owned().insert_axis(Axis(0)),
        };
        let e = self.denoising_errors(
            state.insert_axis(Axis(0)),
            a0.insert_axis(Axis(0)),
            &draw,
        )?;
        Ok(-e[0])
    }

    /// Batched surrogate log-likelihoods.
    pub fn elbo_logprobs(&self, states: ArrayView2<F>, actions: ArrayView2<F>, draw: &NoiseDraw<F>) -> Result<Array1<F>> {
        Ok(-self.denoising_errors(states, actions, draw)?)
    }

    /// Posterior mean of the reverse step:
    /// `(a^k - beta_k / sqrt(1 - abar_k) * eps_theta) / sqrt(alpha_k)`.
    fn reverse_mean(&self, a: &Array2<F>, k: usize, states: ArrayView2<F>) -> Result<Array2<F>> {
        let ks = vec![k; a.nrows()];
        let eps = self.predict_noise(a.view(), &ks, states)?;
        let coef = F::c(self.schedule.beta(k) / (1.0 - self.schedule.alpha_bar(k)).sqrt());
        let inv_sqrt_alpha = F::c(1.0 / self.schedule.alpha(k).sqrt());
        Ok((a - &(eps * coef)) * inv_sqrt_alpha)
    }

    fn clip(&self, a: &mut Array2<F>) {
        for mut row in a.rows_mut() {
            for j in 0..self.d_a {
                let (lo, hi) = (F::c(self.action_low[j]), F::c(self.action_high[j]));
                row[j] = row[j].max(lo).min(hi);
            }
        }
    }

    /// Ancestral sampling from caller-supplied noise. `start` is `a^K`; `noise(k)`
    /// supplies `z` for steps `k > 1` (the last step adds no noise). The result is
    /// clipped to the action bounds.
    pub fn sample_from(
        &self,
        states: ArrayView2<F>,
        start: Array2<F>,
        mut noise: impl FnMut(usize) -> Array2<F>,
    ) -> Result<Array2<F>> {
        if start.dim() != (states.nrows(), self.d_a) {
            return Err(Error::Shape("initial noise must be (rows, d_a)".into()));
        }
        let mut a = start;
        for k in (1..=self.schedule.steps()).rev() {
            let mut next = self.reverse_mean(&a, k, states)?;
            if k > 1 {
                let z = noise(k);
                next.scaled_add(F::c(self.schedule.beta(k).sqrt()), &z);
            }
            a = next;
        }
        self.clip(&mut a);
        Ok(a)
    }

    /// One action per state row.
    pub fn sample_actions(&self, states: ArrayView2<F>, rng: &mut Rng) -> Result<Array2<F>> {
        let rows = states.nrows();
        let start = normal_matrix(rng, rows, self.d_a);
        self.sample_from(states, start, |_| normal_matrix(rng, rows, self.d_a))
    }

    pub fn sample_action(&self, state: ArrayView1<F>, rng: &mut Rng) -> Result<Array1<F>> {
        let a = self.sample_actions(state.insert_axis(Axis(0)), rng)?;
        Ok(a.row(0).to_owned())
    }
}
