//! The training loop: per batch, behavior cloning of the behavior policy, one
//! critic update, preference generation, and the surrogate policy update.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::checkpoint::Checkpoint;
use crate::critic::{Critic, CriticConfig};
use crate::dataset::OfflineDataset;
use crate::diffusion::{DiffusionPolicy, NoiseDraw, NoiseSchedule, PolicyConfig, ScheduleSpec};
use crate::envs::Env;
use crate::eval::{csv_err, normalize_score, rollout_score, PolicyActor};
use crate::nn::{Adam, AdamConfig, Mlp, TimeEmbedding};
use crate::prefgen::{self, SamplingStrategy, Strategy};
use crate::prefopt::{self, PrefLossConfig};
use crate::rng::{self, Rng, RngState, Stream};
use crate::{Error, Result};

/// How the surrogate policy is improved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Behavior cloning plus the anti-noise preference loss.
    Paodp,
    /// Advantage-weighted behavior cloning.
    Wr,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Paodp => "paodp",
            Method::Wr => "wr",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paodp" => Ok(Method::Paodp),
            "wr" => Ok(Method::Wr),
            other => Err(Error::Config(format!("unknown method {other:?}; expected paodp or wr"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eta: f64,
    pub lambda: f64,
    pub xi: f64,
    pub n_actions: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub strategy: Strategy,
    pub tau: f64,
    pub gamma: f64,
    pub rho: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub method: Method,
    pub eta_wr: f64,
    /// Probability of flipping each generated label.
    pub label_noise: f64,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub time_dim: usize,
    /// Factor on the surrogate log-likelihoods of the preference loss; `None`
    /// (written `auto`) means K.
    pub logp_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 1000,
            batch_size: 256,
            learning_rate: 3e-4,
            eta: 0.1,
            lambda: 0.2,
            xi: 1.0,
            n_actions: 10,
            k: 20,
            strategy: Strategy::Max,
            tau: 0.7,
            gamma: 0.99,
            rho: 0.005,
            seed: 0,
            checkpoint_every: 5,
            eval_every: 1,
            eval_episodes: 50,
            method: Method::Paodp,
            eta_wr: 0.1,
            label_noise: 0.0,
            hidden: vec![64, 64, 64],
            critic_hidden: vec![64, 64, 64],
            time_dim: 16,
            logp_scale: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|w| parse(key, w)).collect()
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: [&'static str; 24] = [
        "epochs",
        "steps_per_epoch",
        "batch_size",
        "learning_rate",
        "eta",
        "lambda",
        "xi",
        "n_actions",
        "K",
        "strategy",
        "tau",
        "gamma",
        "rho",
        "seed",
        "checkpoint_every",
        "eval_every",
        "eval_episodes",
        "method",
        "eta_wr",
        "label_noise",
        "hidden",
        "critic_hidden",
        "time_dim",
        "logp_scale",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "xi" => self.xi = parse(key, value)?,
            "n_actions" => self.n_actions = parse(key, value)?,
            "K" => self.k = parse(key, value)?,
            "strategy" => self.strategy = value.trim().parse()?,
            "tau" => self.tau = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "method" => self.method = value.trim().parse()?,
            "eta_wr" => self.eta_wr = parse(key, value)?,
            "label_noise" => self.label_noise = parse(key, value)?,
            "hidden" => self.hidden = parse_widths(key, value)?,
            "critic_hidden" => self.critic_hidden = parse_widths(key, value)?,
            "time_dim" => self.time_dim = parse(key, value)?,
            "logp_scale" => {
                self.logp_scale = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown config key {other:?}; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "epochs" => self.epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "eta" => self.eta.to_string(),
            "lambda" => self.lambda.to_string(),
            "xi" => self.xi.to_string(),
            "n_actions" => self.n_actions.to_string(),
            "K" => self.k.to_string(),
            "strategy" => self.strategy.to_string(),
            "tau" => self.tau.to_string(),
            "gamma" => self.gamma.to_string(),
            "rho" => self.rho.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "method" => self.method.to_string(),
            "eta_wr" => self.eta_wr.to_string(),
            "label_noise" => self.label_noise.to_string(),
            "hidden" => join_widths(&self.hidden),
            "critic_hidden" => join_widths(&self.critic_hidden),
            "time_dim" => self.time_dim.to_string(),
            "logp_scale" => self.logp_scale.map_or_else(|| "auto".to_string(), |v| v.to_string()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Parses flat `key = value` text over the defaults. Blank lines and `#`
    /// comments are ignored; repeated keys are an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    /// All keys with their resolved values, one `key = value` per line.
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps_per_epoch", self.steps_per_epoch as usize),
            ("batch_size", self.batch_size),
            ("n_actions", self.n_actions),
            ("K", self.k),
            ("checkpoint_every", self.checkpoint_every as usize),
            ("eval_every", self.eval_every as usize),
            ("eval_episodes", self.eval_episodes),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.eta_wr > 0.0) {
            return Err(Error::Config("eta_wr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1]".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        if self.hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.pref_loss().validate()?;
        self.sampling().validate()?;
        self.critic().validate()?;
        NoiseSchedule::new(self.schedule())?;
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec::vp(self.k)
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            schedule: self.schedule(),
        }
    }

    pub fn critic(&self) -> CriticConfig {
        CriticConfig {
            tau: self.tau,
            gamma: self.gamma,
            rho: self.rho,
            hidden: self.critic_hidden.clone(),
        }
    }

    pub fn pref_loss(&self) -> PrefLossConfig {
        PrefLossConfig {
            eta: self.eta,
            lambda: self.lambda,
            xi: self.xi,
            logp_scale: self.logp_scale.unwrap_or(self.k as f64),
        }
    }

    pub fn sampling(&self) -> SamplingStrategy {
        SamplingStrategy {
            kind: self.strategy,
            eta: self.eta,
            n: self.n_actions,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Random streams consumed by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub data: Rng,
    pub noise: Rng,
    pub candidates: Rng,
    pub label_noise: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: rng::stream(seed, Stream::Data),
            noise: rng::stream(seed, Stream::Noise),
            candidates: rng::stream(seed, Stream::Candidates),
            label_noise: rng::stream(seed, Stream::LabelNoise),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StreamStates {
    data: RngState,
    noise: RngState,
    candidates: RngState,
    label_noise: RngState,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Behavior policy.
    pub theta: DiffusionPolicy<f32>,
    /// Surrogate optimal policy.
    pub psi: DiffusionPolicy<f32>,
    pub critic: Critic<f32>,
    pub opt_theta: Adam<f32>,
    pub opt_psi: Adam<f32>,
    pub opt_q1: Adam<f32>,
    pub opt_q2: Adam<f32>,
    pub opt_v: Adam<f32>,
    pub step: u64,
    pub epoch: u64,
    pub streams: Streams,
}

/// Loss values of one training step. Preference columns are `None` when the
/// surrogate is trained by weighted regression.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_bc_theta: f64,
    pub loss_v: f64,
    pub loss_q: f64,
    pub loss_imp: Option<f64>,
    pub loss_anti: Option<f64>,
    pub loss_total_psi: f64,
    pub mean_gamma: Option<f64>,
    pub mean_q_gen: Option<f64>,
    pub eval_score: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "epoch",
    "loss_bc_theta",
    "loss_v",
    "loss_q",
    "loss_imp",
    "loss_anti",
    "loss_total_psi",
    "mean_gamma",
    "eval_score",
];

impl StepMetrics {
    fn record(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.step.to_string(),
            self.epoch.to_string(),
            self.loss_bc_theta.to_string(),
            self.loss_v.to_string(),
            self.loss_q.to_string(),
            opt(self.loss_imp),
            opt(self.loss_anti),
            self.loss_total_psi.to_string(),
            opt(self.mean_gamma),
            opt(self.eval_score),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        let field = |i: usize| r.get(i).unwrap_or("");
        let req = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Metadata(format!("bad metrics value {:?} in column {}", field(i), METRICS_COLUMNS[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                req(i).map(Some)
            }
        };
        Ok(Self {
            step: req(0)? as u64,
            epoch: req(1)? as u64,
            loss_bc_theta: req(2)?,
            loss_v: req(3)?,
            loss_q: req(4)?,
            loss_imp: opt(5)?,
            loss_anti: opt(6)?,
            loss_total_psi: req(7)?,
            mean_gamma: opt(8)?,
            mean_q_gen: None,
            eval_score: opt(9)?,
        })
    }
}

fn finite(what: &str, v: f32, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

fn net_tensors(ckpt: &mut Checkpoint, name: &str, net: &Mlp<f32>) -> Result<()> {
    ckpt.push(name, vec![net.num_params()], net.params().to_vec())
}

fn adam_tensors(ckpt: &mut Checkpoint, name: &str, opt: &Adam<f32>) -> Result<()> {
    let (m, v) = opt.moments();
    ckpt.push(format!("{name}.m"), vec![m.len()], m.to_vec())?;
    ckpt.push(format!("{name}.v"), vec![v.len()], v.to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    step: u64,
    epoch: u64,
    d_s: usize,
    d_a: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    schedule: ScheduleSpec,
    policy_widths: Vec<usize>,
    q_widths: Vec<usize>,
    v_widths: Vec<usize>,
    /// Adam step counts, in the order theta, psi, q1, q2, v.
    adam_steps: [u64; 5],
}

impl TrainState {
    /// Fresh state: `psi` starts as a copy of `theta`.
    pub fn new(config: &TrainConfig, d_s: usize, d_a: usize, action_low: Vec<f64>, action_high: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(config.seed, Stream::Init);
        let theta = DiffusionPolicy::new(d_s, d_a, action_low, action_high, &config.policy(), &mut init)?;
        let critic = Critic::new(d_s, d_a, config.critic(), &mut init)?;
        let adam = config.adam();
        Ok(Self {
            config: config.clone(),
            psi: theta.clone(),
            opt_theta: Adam::new(theta.net.num_params(), adam),
            opt_psi: Adam::new(theta.net.num_params(), adam),
            opt_q1: Adam::new(critic.q1.num_params(), adam),
            opt_q2: Adam::new(critic.q2.num_params(), adam),
            opt_v: Adam::new(critic.v.num_params(), adam),
            theta,
            critic,
            step: 0,
            epoch: 0,
            streams: Streams::new(config.seed),
        })
    }

    pub fn for_dataset(config: &TrainConfig, ds: &OfflineDataset) -> Result<Self> {
        Self::new(
            config,
            ds.d_s(),
            ds.d_a(),
            ds.action_low.iter().map(|&x| x as f64).collect(),
            ds.action_high.iter().map(|&x| x as f64).collect(),
        )
    }

    /// One update of every network on `batch`.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<StepMetrics> {
        let step = self.step + 1;
        let states = batch.states.view();
        let actions = batch.actions.view();

        // Behavior cloning of theta. The same draw is reused for psi's cloning
        // term so that both see identical noise.
        let bc_draw = NoiseDraw::sample(batch.len(), self.theta.d_a(), self.theta.schedule().steps(), &mut self.streams.noise);
        let (loss_bc, g_theta) = self.theta.bc_loss(states, actions, &bc_draw)?;
        let loss_bc_theta = finite("loss_bc_theta", loss_bc, step)?;
        self.opt_theta.step(self.theta.net.params_mut(), &g_theta);

        // Critic: value expectile regression, then TD regression, then targets.
        let (lv, g_v) = self.critic.v_loss(batch)?;
        let loss_v = finite("loss_v", lv, step)?;
        self.opt_v.step(self.critic.v.params_mut(), &g_v);
        let q = self.critic.q_loss(batch)?;
        let loss_q = finite("loss_q", q.loss, step)?;
        self.opt_q1.step(self.critic.q1.params_mut(), &q.grad_q1);
        self.opt_q2.step(self.critic.q2.params_mut(), &q.grad_q2);
        self.critic.polyak_update();

        let metrics = match self.config.method {
            Method::Paodp => {
                let mut pref = prefgen::generate(
                    &self.theta,
                    &self.critic,
                    states,
                    actions,
                    &self.config.sampling(),
                    &mut self.streams.candidates,
                )?;
                if self.config.label_noise > 0.0 {
                    pref.corrupt_labels(self.config.label_noise, &mut self.streams.label_noise);
                }
                let pref_draw = NoiseDraw::sample(pref.len(), self.psi.d_a(), self.psi.schedule().steps(), &mut self.streams.noise);
                let total = prefopt::total_loss(
                    &self.psi,
                    &self.theta,
                    states,
                    actions,
                    &bc_draw,
                    &pref,
                    &pref_draw,
                    &self.config.pref_loss(),
                )?;
                let loss_imp = finite("loss_imp", total.loss_imp, step)?;
                let loss_anti = finite("loss_anti", total.loss_anti, step)?;
                let loss_total_psi = finite("loss_total_psi", total.total, step)?;
                self.opt_psi.step(self.psi.net.params_mut(), &total.grads);
                StepMetrics {
                    step,
                    epoch: self.epoch + 1,
                    loss_bc_theta,
                    loss_v,
                    loss_q,
                    loss_imp: Some(loss_imp),
                    loss_anti: Some(loss_anti),
                    loss_total_psi,
                    mean_gamma: Some(pref.mean_gamma()),
                    mean_q_gen: Some(pref.mean_q_gen()),
                    eval_score: None,
                }
            }
            Method::Wr => {
                let (l, g, _) = prefopt::wr_loss(&self.psi, &self.critic, states, actions, &bc_draw, self.config.eta_wr)?;
                let loss_total_psi = finite("loss_total_psi", l, step)?;
                self.opt_psi.step(self.psi.net.params_mut(), &g);
                StepMetrics {
                    step,
                    epoch: self.epoch + 1,
                    loss_bc_theta,
                    loss_v,
                    loss_q,
                    loss_imp: None,
                    loss_anti: None,
                    loss_total_psi,
                    mean_gamma: None,
                    mean_q_gen: None,
                    eval_score: None,
                }
            }
        };
        self.step = step;
        Ok(metrics)
    }

    /// Network parameters, optimizer moments, counters and config. Random
    /// streams go to a separate sidecar; see [`TrainState::stream_sidecar`].
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (low, high) = self.theta.action_bounds();
        let meta = CheckpointMeta {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            d_s: self.theta.d_s(),
            d_a: self.theta.d_a(),
            action_low: low.to_vec(),
            action_high: high.to_vec(),
            schedule: self.theta.schedule().spec(),
            policy_widths: self.theta.net.widths().to_vec(),
            q_widths: self.critic.q1.widths().to_vec(),
            v_widths: self.critic.v.widths().to_vec(),
            adam_steps: [
                self.opt_theta.step_count(),
                self.opt_psi.step_count(),
                self.opt_q1.step_count(),
                self.opt_q2.step_count(),
                self.opt_v.step_count(),
            ],
        };
        let mut c = Checkpoint::new(serde_json::to_value(&meta)?);
        net_tensors(&mut c, "theta", &self.theta.net)?;
        net_tensors(&mut c, "psi", &self.psi.net)?;
        net_tensors(&mut c, "q1", &self.critic.q1)?;
        net_tensors(&mut c, "q2", &self.critic.q2)?;
        net_tensors(&mut c, "v", &self.critic.v)?;
        net_tensors(&mut c, "q1_target", &self.critic.q1_target)?;
        net_tensors(&mut c, "q2_target", &self.critic.q2_target)?;
        adam_tensors(&mut c, "adam_theta", &self.opt_theta)?;
        adam_tensors(&mut c, "adam_psi", &self.opt_psi)?;
        adam_tensors(&mut c, "adam_q1", &self.opt_q1)?;
        adam_tensors(&mut c, "adam_q2", &self.opt_q2)?;
        adam_tensors(&mut c, "adam_v", &self.opt_v)?;
        Ok(c)
    }

    /// JSON positions of every training stream.
    pub fn stream_sidecar(&self) -> Result<String> {
        let s = StreamStates {
            data: RngState::capture(&self.streams.data),
            noise: RngState::capture(&self.streams.noise),
            candidates: RngState::capture(&self.streams.candidates),
            label_noise: RngState::capture(&self.streams.label_noise),
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }

    /// Rebuilds a state from a checkpoint and its stream sidecar.
    pub fn from_checkpoint(ckpt: &Checkpoint, sidecar: &str) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())?;
        let mlp = |name: &str, widths: &[usize]| -> Result<Mlp<f32>> { Mlp::from_params(widths, ckpt.get(name)?.data.clone()) };
        let policy = |name: &str| -> Result<DiffusionPolicy<f32>> {
            DiffusionPolicy::from_parts(
                mlp(name, &meta.policy_widths)?,
                NoiseSchedule::new(meta.schedule)?,
                TimeEmbedding::new(meta.config.time_dim)?,
                meta.d_s,
                meta.action_low.clone(),
                meta.action_high.clone(),
            )
        };
        let adam_cfg = meta.config.adam();
        let adam = |name: &str, n: usize, t: u64| -> Result<Adam<f32>> {
            let mut a = Adam::new(n, adam_cfg);
            a.restore(ckpt.get(&format!("{name}.m"))?.data.clone(), ckpt.get(&format!("{name}.v"))?.data.clone(), t)?;
            Ok(a)
        };
        let theta = policy("theta")?;
        let psi = policy("psi")?;
        let critic = Critic {
            q1: mlp("q1", &meta.q_widths)?,
            q2: mlp("q2", &meta.q_widths)?,
            v: mlp("v", &meta.v_widths)?,
            q1_target: mlp("q1_target", &meta.q_widths)?,
            q2_target: mlp("q2_target", &meta.q_widths)?,
            cfg: meta.config.critic(),
        };
        let s: StreamStates = serde_json::from_str(sidecar)?;
        let [t_theta, t_psi, t_q1, t_q2, t_v] = meta.adam_steps;
        Ok(Self {
            opt_theta: adam("adam_theta", theta.net.num_params(), t_theta)?,
            opt_psi: adam("adam_psi", psi.net.num_params(), t_psi)?,
            opt_q1: adam("adam_q1", critic.q1.num_params(), t_q1)?,
            opt_q2: adam("adam_q2", critic.q2.num_params(), t_q2)?,
            opt_v: adam("adam_v", critic.v.num_params(), t_v)?,
            config: meta.config,
            theta,
            psi,
            critic,
            step: meta.step,
            epoch: meta.epoch,
            streams: Streams {
                data: s.data.restore()?,
                noise: s.noise.restore()?,
                candidates: s.candidates.restore()?,
                label_noise: s.label_noise.restore()?,
            },
        })
    }

    /// Writes `ckpt_{epoch}.paoc` and `ckpt_{epoch}.rng.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = checkpoint_path(dir, self.epoch);
        self.to_checkpoint()?.write(&path)?;
        let side = sidecar_path(dir, self.epoch);
        fs::write(&side, self.stream_sidecar()?).map_err(|e| Error::io(&side, e))?;
        Ok(path)
    }

    /// Loads a checkpoint written by [`TrainState::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let side = path.with_extension("rng.json");
        let sidecar = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Self::from_checkpoint(&ckpt, &sidecar)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("ckpt_{epoch}.paoc"))
}

fn sidecar_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("ckpt_{epoch}.rng.json"))
}

/// Highest-epoch checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(epoch) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".paoc"))
            .and_then(|e| e.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
            best = Some((epoch, path));
        }
    }
    Ok(best)
}

pub struct RunOptions<'a> {
    /// Directory for metrics and checkpoints; nothing is written when `None`.
    pub out: Option<PathBuf>,
    /// Continue from the latest checkpoint in `out`.
    pub resume: bool,
    /// Environment for periodic evaluation of the surrogate policy.
    pub env: Option<&'a dyn Env>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            out: None,
            resume: false,
            env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub epoch: u64,
    pub step: u64,
    pub raw: f64,
    pub normalized: f64,
}

pub struct RunOutput {
    pub state: TrainState,
    pub history: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Mean return and normalized score of the surrogate policy.
pub fn evaluate(state: &TrainState, ds: &OfflineDataset, env: &dyn Env, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let actor = PolicyActor::new(&state.psi, ds);
    let raw = rollout_score(env, &actor, episodes, seed)?;
    Ok((raw, normalize_score(raw, ds.ref_random_score, ds.ref_expert_score)?))
}

fn dump_batch(dir: &Path, step: u64, batch: &Batch<f32>) {
    #[derive(Serialize)]
    struct Dump {
        states: Vec<Vec<f32>>,
        actions: Vec<Vec<f32>>,
        rewards: Vec<f32>,
        next_states: Vec<Vec<f32>>,
        terminals: Vec<f32>,
    }
    let rows = |m: &ndarray::Array2<f32>| m.rows().into_iter().map(|r| r.to_vec()).collect();
    let dump = Dump {
        states: rows(&batch.states),
        actions: rows(&batch.actions),
        rewards: batch.rewards.to_vec(),
        next_states: rows(&batch.next_states),
        terminals: batch.terminals.to_vec(),
    };
    let path = dir.join(format!("nonfinite_step_{step}.json"));
    match serde_json::to_vec_pretty(&dump).map(|b| fs::write(&path, b)) {
        Ok(Ok(())) => log::error!("offending batch written to {}", path.display()),
        _ => log::error!("could not write offending batch to {}", path.display()),
    }
}

/// Rows of a metrics CSV with `step <= up_to_step`; empty when the file is absent.
pub fn read_metrics(path: &Path, up_to_step: u64) -> Result<Vec<StepMetrics>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let m = StepMetrics::from_record(&rec.map_err(|e| csv_err(path, e))?)?;
        if m.step <= up_to_step {
            out.push(m);
        }
    }
    Ok(out)
}

fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
    for m in rows {
        w.write_record(m.record()).map_err(|e| csv_err(path, e))?;
    }
    Ok(w)
}

/// Trains for `config.epochs` epochs of `steps_per_epoch` steps, evaluating the
/// surrogate policy every `eval_every` epochs and checkpointing every
/// `checkpoint_every` epochs (and after the last one).
pub fn run(config: &TrainConfig, ds: &OfflineDataset, opts: &RunOptions) -> Result<RunOutput> {
    config.validate()?;
    ds.validate()?;
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let resumed = match (&opts.out, opts.resume) {
        (Some(dir), true) => latest_checkpoint(dir)?,
        _ => None,
    };
    let (mut state, mut history) = match resumed {
        Some((epoch, path)) => {
            log::info!("resuming from {} (epoch {epoch})", path.display());
            let state = TrainState::load(&path)?;
            if state.config != *config {
                log::warn!("checkpoint config differs from the requested config; continuing with the checkpoint's");
            }
            let dir = opts.out.as_ref().unwrap();
            let history = read_metrics(&dir.join(METRICS_FILE), state.step)?;
            (state, history)
        }
        None => (TrainState::for_dataset(config, ds)?, Vec::new()),
    };
    let cfg = state.config.clone();

    let mut writer = match &opts.out {
        Some(dir) => Some(write_metrics(&dir.join(METRICS_FILE), &history)?),
        None => None,
    };
    if let (Some(dir), 0) = (&opts.out, state.epoch) {
        state.save(dir)?;
    }

    let mut evals: Vec<EvalPoint> = history
        .iter()
        .filter_map(|m| {
            m.eval_score.map(|n| EvalPoint {
                epoch: m.epoch,
                step: m.step,
                raw: f64::NAN,
                normalized: n,
            })
        })
        .collect();

    while state.epoch < cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let batch = Batch::sample(ds, cfg.batch_size, &mut state.streams.data);
            let m = match state.train_step(&batch) {
                Ok(m) => m,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = &opts.out {
                        dump_batch(dir, state.step + 1, &batch);
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            history.push(m);
        }
        state.epoch += 1;
        if let (Some(env), true) = (opts.env, state.epoch % cfg.eval_every == 0) {
            let (raw, normalized) = evaluate(&state, ds, env, cfg.eval_episodes, cfg.seed)?;
            log::info!("epoch {} step {}: return {raw:.4}, normalized {normalized:.2}", state.epoch, state.step);
            if let Some(last) = history.last_mut() {
                last.eval_score = Some(normalized);
            }
            evals.push(EvalPoint {
                epoch: state.epoch,
                step: state.step,
                raw,
                normalized,
            });
        }
        if let (Some(w), Some(dir)) = (writer.as_mut(), &opts.out) {
            let start = history.partition_point(|m| m.epoch < state.epoch);
            for m in &history[start..] {
                w.write_record(m.record()).map_err(|e| csv_err(dir, e))?;
            }
            w.flush().map_err(|e| Error::io(dir, e))?;
            if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
                state.save(dir)?;
            }
        }
    }
    if let (Some(w), Some(dir)) = (writer.as_mut(), &opts.out) {
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(RunOutput { state, history, evals })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
