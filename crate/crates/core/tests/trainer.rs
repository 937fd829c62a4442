mod common;

use std::fs;
use std::path::Path;

use paodp::batch::Batch;
use paodp::diffusion::NoiseDraw;
use paodp::envs::{make_env, Quality};
use paodp::prefgen;
use paodp::prefopt;
use paodp::trainer::{checkpoint_path, run, RunOptions, TrainConfig, TrainState, METRICS_FILE};

use common::{bandit_dataset, small_config};

fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Fresh-moment Adam step computed outside the optimizer: `p - lr * g / (|g| + eps)`.
fn assert_first_adam_step(before: &[f32], after: &[f32], grads: &[f32], lr: f64, what: &str) {
    assert_eq!(before.len(), grads.len());
    for (i, ((&p0, &p1), &g)) in before.iter().zip(after).zip(grads).enumerate() {
        let g = g as f64;
        let expected = p0 as f64 - lr * g / (g.abs() + 1e-8);
        assert!((p1 as f64 - expected).abs() <= 1e-6, "{what}[{i}]: {p1} vs {expected}");
    }
}

#[test]
fn single_step_matches_out_of_loop_gradients() {
    let ds = bandit_dataset(Quality::Mixed, 256, 3);
    let cfg = small_config();
    let mut st = TrainState::for_dataset(&cfg, &ds).unwrap();
    let before = st.clone();
    let batch = Batch::<f32>::sample(&ds, cfg.batch_size, &mut st.streams.data);
    let mut noise = st.streams.noise.clone();
    let mut candidates = st.streams.candidates.clone();
    st.train_step(&batch).unwrap();

    let (s, a) = (batch.states.view(), batch.actions.view());
    let k = cfg.k;
    let bc_draw = NoiseDraw::sample(batch.len(), 2, k, &mut noise);
    let (_, g_theta) = before.theta.bc_loss(s, a, &bc_draw).unwrap();
    assert_first_adam_step(before.theta.net.params(), st.theta.net.params(), &g_theta, cfg.learning_rate, "theta");

    let (_, g_v) = before.critic.v_loss(&batch).unwrap();
    assert_first_adam_step(before.critic.v.params(), st.critic.v.params(), &g_v, cfg.learning_rate, "v");

    // Preferences come from the already updated behavior policy and critic.
    let pref = prefgen::generate(&st.theta, &st.critic, s, a, &cfg.sampling(), &mut candidates).unwrap();
    let pref_draw = NoiseDraw::sample(pref.len(), 2, k, &mut noise);
    let total = prefopt::total_loss(&before.psi, &st.theta, s, a, &bc_draw, &pref, &pref_draw, &cfg.pref_loss()).unwrap();
    assert_first_adam_step(before.psi.net.params(), st.psi.net.params(), &total.grads, cfg.learning_rate, "psi");
}

#[test]
fn zero_xi_keeps_psi_identical_to_theta() {
    let ds = bandit_dataset(Quality::Mixed, 256, 4);
    let cfg = TrainConfig { xi: 0.0, ..small_config() };
    let mut st = TrainState::for_dataset(&cfg, &ds).unwrap();
    for _ in 0..10 {
        let b = Batch::<f32>::sample(&ds, cfg.batch_size, &mut st.streams.data);
        st.train_step(&b).unwrap();
        assert_eq!(bits(st.psi.net.params()), bits(st.theta.net.params()), "step {}", st.step);
    }
}

#[test]
fn restored_state_reproduces_the_next_step() {
    let ds = bandit_dataset(Quality::Mixed, 256, 5);
    let cfg = small_config();
    let mut st = TrainState::for_dataset(&cfg, &ds).unwrap();
    for _ in 0..7 {
        let b = Batch::<f32>::sample(&ds, cfg.batch_size, &mut st.streams.data);
        st.train_step(&b).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = st.save(dir.path()).unwrap();
    let mut restored = TrainState::load(&path).unwrap();

    let b1 = Batch::<f32>::sample(&ds, cfg.batch_size, &mut st.streams.data);
    let b2 = Batch::<f32>::sample(&ds, cfg.batch_size, &mut restored.streams.data);
    assert_eq!(b1, b2);
    let m1 = st.train_step(&b1).unwrap();
    let m2 = restored.train_step(&b2).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(bits(st.theta.net.params()), bits(restored.theta.net.params()));
    assert_eq!(bits(st.psi.net.params()), bits(restored.psi.net.params()));
    assert_eq!(bits(st.critic.q1.params()), bits(restored.critic.q1.params()));
    assert_eq!(bits(st.critic.q2_target.params()), bits(restored.critic.q2_target.params()));
    assert_eq!(bits(st.critic.v.params()), bits(restored.critic.v.params()));
}

fn run_into(dir: &Path, cfg: &TrainConfig, resume: bool) {
    let ds = bandit_dataset(Quality::Mixed, 256, 6);
    let env = make_env("bandit8").unwrap();
    let opts = RunOptions {
        out: Some(dir.to_path_buf()),
        resume,
        env: Some(env.as_ref()),
    };
    run(cfg, &ds, &opts).unwrap();
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn same_seed_gives_identical_metrics_and_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config();
    run_into(a.path(), &cfg, false);
    run_into(b.path(), &cfg, false);
    assert_eq!(read(a.path().join(METRICS_FILE)), read(b.path().join(METRICS_FILE)));
    for e in 0..=cfg.epochs {
        assert_eq!(read(checkpoint_path(a.path(), e)), read(checkpoint_path(b.path(), e)));
    }

    let c = tempfile::tempdir().unwrap();
    run_into(c.path(), &TrainConfig { seed: 1, ..cfg }, false);
    assert_ne!(read(a.path().join(METRICS_FILE)), read(c.path().join(METRICS_FILE)));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = TrainConfig {
        epochs: 3,
        ..small_config()
    };
    let full = tempfile::tempdir().unwrap();
    run_into(full.path(), &cfg, false);

    // Simulate an interruption after epoch 1: only its checkpoint and the
    // metrics written so far survive, plus rows past the checkpoint.
    let part = tempfile::tempdir().unwrap();
    for name in ["ckpt_1.paoc", "ckpt_1.rng.json", METRICS_FILE] {
        fs::copy(full.path().join(name), part.path().join(name)).unwrap();
    }
    run_into(part.path(), &cfg, true);
    assert_eq!(read(full.path().join(METRICS_FILE)), read(part.path().join(METRICS_FILE)));
    assert_eq!(read(checkpoint_path(full.path(), 3)), read(checkpoint_path(part.path(), 3)));
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let ds = bandit_dataset(Quality::Mixed, 64, 7);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let out = run(&cfg, &ds, &opts).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.state.step, 0);
    let fresh = TrainState::for_dataset(&cfg, &ds).unwrap();
    assert_eq!(bits(out.state.theta.net.params()), bits(fresh.theta.net.params()));
    assert!(checkpoint_path(dir.path(), 0).exists());
}
