use std::f64::consts::PI;

use rand::Rng as _;

use super::{Actor, Env, EnvSpec, EnvState, Quality, RewardStyle, ScriptedEnv, StepOutcome};
use crate::rng::{normal, Rng};

pub const BANDIT_ID: &str = "bandit8";

/// One-step continuous bandit whose reward is a mixture of Gaussian bumps.
///
/// `reward(a) = max_i v_i * exp(-|a - c_i|^2 / (2 sigma^2))`. The observation is a
/// single constant coordinate.
#[derive(Debug, Clone)]
pub struct Bandit {
    spec: EnvSpec,
    pub centers: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    pub sigma: f64,
    /// Radius defining membership of an action in a mode.
    pub mode_radius: f64,
    /// Per-dimension spread of scripted actions around a mode center.
    pub behavior_std: f64,
    pub expert_std: f64,
    /// Fraction of uniformly random actions in the mixed tier.
    pub mixed_uniform_frac: f64,
}

impl Default for Bandit {
    fn default() -> Self {
        let ring = 0.65;
        // Best mode sits at angle 0 so its center lies on the 0.005 search grid.
        let values = vec![1.0, 0.35, 0.6, 0.3, 0.5, 0.4, 0.55, 0.45];
        let centers = (0..8)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / 8.0;
                [ring * th.cos(), ring * th.sin()]
            })
            .collect();
        Self::new(centers, values, 0.08, 0.1)
    }
}

impl Bandit {
    pub fn new(centers: Vec<[f64; 2]>, values: Vec<f64>, sigma: f64, mode_radius: f64) -> Self {
        assert_eq!(centers.len(), values.len());
        Self {
            spec: EnvSpec {
                env_id: BANDIT_ID.into(),
                d_s: 1,
                d_a: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: 1,
                reward_style: RewardStyle::Dense,
            },
            centers,
            values,
            sigma,
            mode_radius,
            behavior_std: 0.05,
            expert_std: 0.03,
            mixed_uniform_frac: 0.2,
        }
    }

    pub fn num_modes(&self) -> usize {
        self.centers.len()
    }

    pub fn reward(&self, a: &[f64]) -> f64 {
        self.centers
            .iter()
            .zip(&self.values)
            .map(|(c, v)| {
                let d2 = (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2);
                v * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
            })
            .fold(0.0, f64::max)
    }

    pub fn best_mode(&self) -> usize {
        (0..self.values.len())
            .max_by(|&i, &j| self.values[i].total_cmp(&self.values[j]))
            .unwrap()
    }

    /// Index of the mode whose center is within `mode_radius` of `a`, if any.
    pub fn mode_of(&self, a: &[f64]) -> Option<usize> {
        self.centers.iter().position(|c| {
            ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt() <= self.mode_radius
        })
    }

    /// max_a reward(a) by exhaustive search over a square grid of spacing `step`.
    pub fn grid_optimum(&self, step: f64) -> (f64, [f64; 2]) {
        let n = (2.0 / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for i in 0..=n {
            for j in 0..=n {
                let a = [-1.0 + i as f64 * step, -1.0 + j as f64 * step];
                let r = self.reward(&a);
                if r > best.0 {
                    best = (r, a);
                }
            }
        }
        best
    }

    fn around(&self, mode: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
        let c = self.centers[mode];
        vec![c[0] + std * normal(rng), c[1] + std * normal(rng)]
    }

    fn uniform(rng: &mut Rng) -> Vec<f64> {
        vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
    }
}

impl Env for Bandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self) -> EnvState {
        EnvState { obs: vec![0.0], t: 0 }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> StepOutcome {
        let a = self.spec.clip_action(action);
        StepOutcome {
            next: EnvState {
                obs: state.obs.clone(),
                t: state.t + 1,
            },
            reward: self.reward(&a),
            terminal: true,
            done: true,
        }
    }
}

impl ScriptedEnv for Bandit {
    fn behavior(&self, quality: Quality) -> Box<dyn Actor + '_> {
        match quality {
            Quality::Expert => {
                let best = self.best_mode();
                Box::new(move |_: &[f64], rng: &mut Rng| self.around(best, self.expert_std, rng))
            }
            Quality::Medium => {
                // Uniform over the three most valuable modes.
                let mut order: Vec<usize> = (0..self.num_modes()).collect();
                order.sort_by(|&i, &j| self.values[j].total_cmp(&self.values[i]));
                order.truncate(3);
                Box::new(move |_: &[f64], rng: &mut Rng| {
                    let m = order[rng.random_range(0..order.len())];
                    self.around(m, self.behavior_std, rng)
                })
            }
            Quality::Mixed => Box::new(move |_: &[f64], rng: &mut Rng| {
                if rng.random::<f64>() < self.mixed_uniform_frac {
                    Self::uniform(rng)
                } else {
                    let m = rng.random_range(0..self.num_modes());
                    self.around(m, self.behavior_std, rng)
                }
            }),
            Quality::Random => Box::new(|_: &[f64], rng: &mut Rng| Self::uniform(rng)),
        }
    }
}
