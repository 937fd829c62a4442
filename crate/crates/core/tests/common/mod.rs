//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;

use paodp::batch::Batch;
use paodp::critic::{Critic, CriticConfig};
use paodp::dataset::{normalize_states, OfflineDataset};
use paodp::diffusion::{DiffusionPolicy, NoiseDraw, PolicyConfig, ScheduleSpec};
use paodp::envs::{generate_dataset, make_env, Quality};
use paodp::nn::gradcheck::{self, GradCheckReport};
use paodp::prefgen::PreferenceBatch;
use paodp::prefopt::{self, PrefLossConfig};
use paodp::rng::{normal_matrix, stream, Rng, Stream};
use paodp::trainer::TrainConfig;

pub const D_S: usize = 2;
pub const D_A: usize = 2;
pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn tiny_policy_config() -> PolicyConfig {
    PolicyConfig {
        hidden: vec![8, 8],
        time_dim: 4,
        schedule: ScheduleSpec::vp(5),
    }
}

/// Noise network of 154 parameters.
pub fn tiny_policy(seed: u64) -> DiffusionPolicy<f64> {
    let mut rng = stream(seed, Stream::Init);
    DiffusionPolicy::new(D_S, D_A, vec![-1.0; D_A], vec![1.0; D_A], &tiny_policy_config(), &mut rng).unwrap()
}

pub fn tiny_critic(seed: u64) -> Critic<f64> {
    let mut rng = stream(seed, Stream::Init);
    let cfg = CriticConfig {
        hidden: vec![8, 8],
        ..CriticConfig::default()
    };
    let mut c = Critic::new(D_S, D_A, cfg, &mut rng).unwrap();
    // Targets that differ from the online nets exercise both paths.
    for p in c.q1_target.params_mut() {
        *p *= 0.9;
    }
    c
}

pub fn with_params(policy: &DiffusionPolicy<f64>, params: &[f64]) -> DiffusionPolicy<f64> {
    let mut p = policy.clone();
    p.net.params_mut().copy_from_slice(params);
    p
}

pub fn random_batch(rows: usize, rng: &mut Rng) -> Batch<f64> {
    let uniform = |m: Array2<f64>| m.mapv(|v: f64| v.tanh());
    Batch {
        states: normal_matrix(rng, rows, D_S),
        actions: uniform(normal_matrix(rng, rows, D_A)),
        rewards: normal_matrix::<f64>(rng, rows, 1).column(0).to_owned(),
        next_states: normal_matrix(rng, rows, D_S),
        terminals: (0..rows).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
    }
}

/// Pairs with mixed labels over random states and actions.
pub fn random_pairs(rows: usize, rng: &mut Rng) -> PreferenceBatch<f64> {
    let b = random_batch(rows, rng);
    PreferenceBatch {
        states: b.states,
        a_data: b.actions,
        a_gen: normal_matrix::<f64>(rng, rows, D_A).mapv(|v| v.tanh()),
        gamma: (0..rows).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect(),
        q_data: vec![0.0; rows],
        q_gen: vec![0.0; rows],
    }
}

pub fn draw(rows: usize, rng: &mut Rng) -> NoiseDraw<f64> {
    NoiseDraw::sample(rows, D_A, 5, rng)
}

/// The seven losses checked against central differences, in reporting order.
pub const LOSSES: [&str; 7] = ["bc_loss", "v_update", "q_update", "l_imp", "l_anti", "total_loss", "wr_loss"];

/// Finite-difference report of one named loss on fixed tiny networks.
pub fn gradient_report(name: &str) -> GradCheckReport {
    let mut rng = stream(11, Stream::Data);
    let batch = random_batch(6, &mut rng);
    let pairs = random_pairs(6, &mut rng);
    let bc_draw = draw(6, &mut rng);
    let pref_draw = draw(6, &mut rng);
    let behavior = tiny_policy(1);
    let psi = tiny_policy(2);
    let critic = tiny_critic(3);
    let cfg = PrefLossConfig {
        eta: 0.7,
        lambda: 0.3,
        xi: 1.5,
        logp_scale: 1.0,
    };
    let (s, a) = (batch.states.view(), batch.actions.view());
    match name {
        "bc_loss" => {
            let (_, g) = psi.bc_loss(s, a, &bc_draw).unwrap();
            gradcheck::check(psi.net.params(), &g, H, |p| with_params(&psi, p).bc_loss(s, a, &bc_draw).unwrap().0)
        }
        "v_update" => {
            let (_, g) = critic.v_loss(&batch).unwrap();
            gradcheck::check(critic.v.params(), &g, H, |p| {
                let mut c = critic.clone();
                c.v.params_mut().copy_from_slice(p);
                c.v_loss(&batch).unwrap().0
            })
        }
        "q_update" => {
            let ql = critic.q_loss(&batch).unwrap();
            let n1 = critic.q1.num_params();
            let params: Vec<f64> = critic.q1.params().iter().chain(critic.q2.params()).copied().collect();
            let grads: Vec<f64> = ql.grad_q1.iter().chain(&ql.grad_q2).copied().collect();
            gradcheck::check(&params, &grads, H, |p| {
                let mut c = critic.clone();
                c.q1.params_mut().copy_from_slice(&p[..n1]);
                c.q2.params_mut().copy_from_slice(&p[n1..]);
                c.q_loss(&batch).unwrap().loss
            })
        }
        "l_imp" => {
            let eta = cfg.temperature();
            let (_, g) = prefopt::l_imp(&psi, &behavior, &pairs, &pref_draw, eta).unwrap();
            gradcheck::check(psi.net.params(), &g, H, |p| {
                prefopt::l_imp(&with_params(&psi, p), &behavior, &pairs, &pref_draw, eta).unwrap().0
            })
        }
        "l_anti" => {
            let eta = cfg.temperature();
            let r = prefopt::l_anti(&psi, &behavior, &pairs, &pref_draw, eta, cfg.lambda).unwrap();
            gradcheck::check(psi.net.params(), &r.grads, H, |p| {
                prefopt::l_anti(&with_params(&psi, p), &behavior, &pairs, &pref_draw, eta, cfg.lambda)
                    .unwrap()
                    .loss
            })
        }
        "total_loss" => {
            let t = prefopt::total_loss(&psi, &behavior, s, a, &bc_draw, &pairs, &pref_draw, &cfg).unwrap();
            gradcheck::check(psi.net.params(), &t.grads, H, |p| {
                prefopt::total_loss(&with_params(&psi, p), &behavior, s, a, &bc_draw, &pairs, &pref_draw, &cfg)
                    .unwrap()
                    .total
            })
        }
        "wr_loss" => {
            let (_, g, w) = prefopt::wr_loss(&psi, &critic, s, a, &bc_draw, 0.5).unwrap();
            assert!(w.iter().any(|&x| (x - 1.0).abs() > 1e-3), "weights should be non-trivial");
            gradcheck::check(psi.net.params(), &g, H, |p| {
                prefopt::wr_loss(&with_params(&psi, p), &critic, s, a, &bc_draw, 0.5).unwrap().0
            })
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Normalized bandit8 dataset of the given quality.
pub fn bandit_dataset(quality: Quality, n: usize, seed: u64) -> OfflineDataset {
    let env = make_env("bandit8").unwrap();
    normalize_states(generate_dataset(env.as_ref(), quality, n, seed).unwrap())
}

/// A configuration small enough for multi-epoch tests.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        steps_per_epoch: 6,
        batch_size: 16,
        n_actions: 3,
        k: 5,
        checkpoint_every: 1,
        eval_every: 1,
        eval_episodes: 8,
        hidden: vec![16, 16],
        critic_hidden: vec![16, 16],
        time_dim: 4,
        ..TrainConfig::default()
    }
}
