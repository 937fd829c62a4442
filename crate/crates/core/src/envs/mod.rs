//! Synthetic environments with analytically known structure, and scripted
//! behavior policies that produce offline datasets of graded quality.

pub mod bandit;
pub mod maze;

pub use bandit::{Bandit, BANDIT_ID};
pub use maze::{Maze, TabularQ, ValueBackup, MAZE_ID};

use std::str::FromStr;

use crate::dataset::{DatasetInfo, OfflineDataset, Transition};
use crate::rng::{self, Rng, Stream};
use crate::{Error, Result};

pub const ENV_IDS: [&str; 2] = [BANDIT_ID, MAZE_ID];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardStyle {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub env_id: String,
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub reward_style: RewardStyle,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| if a.is_nan() { 0.0f64.clamp(lo, hi) } else { a.clamp(lo, hi) })
            .collect()
    }
}

/// Environment state: observation plus elapsed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    /// Reached a terminal condition of the task (not a timeout).
    pub terminal: bool,
    /// Episode over: terminal or horizon reached.
    pub done: bool,
}

/// Deterministic step function over explicit state values.
pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self) -> EnvState;
    /// Out-of-range actions are clipped to the declared bounds.
    fn step(&self, state: &EnvState, action: &[f64]) -> StepOutcome;
}

/// Anything that maps a raw observation to an action.
pub trait Actor: Sync {
    fn act(&self, obs: &[f64], rng: &mut Rng) -> Vec<f64>;
}

impl<F: Fn(&[f64], &mut Rng) -> Vec<f64> + Sync> Actor for F {
    fn act(&self, obs: &[f64], rng: &mut Rng) -> Vec<f64> {
        self(obs, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Expert,
    Medium,
    Mixed,
    Random,
}

impl FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "mixed" => Ok(Quality::Mixed),
            "random" => Ok(Quality::Random),
            other => Err(Error::Config(format!(
                "unknown quality tier {other:?}; expected one of expert, medium, mixed, random"
            ))),
        }
    }
}

/// Environment with scripted behavior policies of each quality tier.
pub trait ScriptedEnv: Env {
    fn behavior(&self, quality: Quality) -> Box<dyn Actor + '_>;
}

/// Looks up an environment by id.
pub fn make_env(env_id: &str) -> Result<Box<dyn ScriptedEnv>> {
    match env_id {
        BANDIT_ID => Ok(Box::new(Bandit::default())),
        MAZE_ID => Ok(Box::new(Maze::default())),
        other => Err(Error::Config(format!(
            "unknown env id {other:?}; valid ids: {}",
            ENV_IDS.join(", ")
        ))),
    }
}

/// Runs one episode and returns its transitions.
pub fn run_episode(env: &dyn Env, actor: &dyn Actor, rng: &mut Rng) -> Vec<Transition> {
    let mut state = env.reset();
    let mut out = Vec::new();
    loop {
        let action = env.spec().clip_action(&actor.act(&state.obs, rng));
        let step = env.step(&state, &action);
        out.push(Transition {
            state: state.obs.iter().map(|&x| x as f32).collect(),
            action: action.iter().map(|&x| x as f32).collect(),
            reward: step.reward as f32,
            next_state: step.next.obs.iter().map(|&x| x as f32).collect(),
            terminal: step.terminal,
        });
        if step.done {
            return out;
        }
        state = step.next;
    }
}

/// Undiscounted return of one episode.
pub fn episode_return(env: &dyn Env, actor: &dyn Actor, rng: &mut Rng) -> f64 {
    let mut state = env.reset();
    let mut total = 0.0;
    loop {
        let action = env.spec().clip_action(&actor.act(&state.obs, rng));
        let step = env.step(&state, &action);
        total += step.reward;
        if step.done {
            return total;
        }
        state = step.next;
    }
}

pub const REFERENCE_EPISODES: usize = 100;

/// Rolls out the scripted behavior of `quality` until `n` transitions are
/// collected. Reference scores come from 100 scripted random and expert episodes.
/// The returned dataset is raw (not normalized).
pub fn generate_dataset(env: &dyn ScriptedEnv, quality: Quality, n: usize, seed: u64) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, Stream::Generate);
    let behavior = env.behavior(quality);
    let mut transitions = Vec::with_capacity(n);
    while transitions.len() < n {
        let ep = run_episode(env, behavior.as_ref(), &mut rng);
        let take = (n - transitions.len()).min(ep.len());
        transitions.extend(ep.into_iter().take(take));
    }

    let mut ref_rng = rng::stream(seed, Stream::Eval);
    let mut reference = |q: Quality| {
        let actor = env.behavior(q);
        (0..REFERENCE_EPISODES)
            .map(|_| episode_return(env, actor.as_ref(), &mut ref_rng))
            .sum::<f64>()
            / REFERENCE_EPISODES as f64
    };
    let ref_random_score = reference(Quality::Random);
    let ref_expert_score = reference(Quality::Expert);

    let spec = env.spec();
    OfflineDataset::from_transitions(
        DatasetInfo {
            env_id: spec.env_id.clone(),
            d_s: spec.d_s,
            d_a: spec.d_a,
            action_low: spec.action_low.iter().map(|&x| x as f32).collect(),
            action_high: spec.action_high.iter().map(|&x| x as f32).collect(),
            ref_random_score,
            ref_expert_score,
        },
        &transitions,
    )
}
