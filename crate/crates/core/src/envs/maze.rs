use std::collections::VecDeque;

use rand::Rng as _;

use super::{Actor, Env, EnvSpec, EnvState, Quality, RewardStyle, ScriptedEnv, StepOutcome};
use crate::critic::expectile;
use crate::dataset::{DatasetInfo, OfflineDataset, Transition};
use crate::rng::{normal, Rng};
use crate::Result;

pub const MAZE_ID: &str = "maze-sparse";

/// Grid resolution used by the tabular oracles.
pub const CELL: f64 = 0.05;
const GRID: usize = 21;
const EPS: f64 = 1e-9;

/// The eight quantized velocity commands used by tabular oracles and scripted
/// behavior.
pub const QUANTIZED_ACTIONS: [[f64; 2]; 8] = [
    [1.0, 0.0],
    [1.0, 1.0],
    [0.0, 1.0],
    [-1.0, 1.0],
    [-1.0, 0.0],
    [-1.0, -1.0],
    [0.0, -1.0],
    [1.0, -1.0],
];

type Segment = ([f64; 2], [f64; 2]);

/// Point navigation in the unit square with wall segments and a sparse goal.
///
/// `s' = clip(s + 0.1 a)`; a move whose path touches a wall leaves the point where
/// it was. Reward is 1 on entering the goal box, which ends the episode.
#[derive(Debug, Clone)]
pub struct Maze {
    spec: EnvSpec,
    pub start: [f64; 2],
    pub goal_low: [f64; 2],
    pub goal_high: [f64; 2],
    pub walls: Vec<Segment>,
    pub speed: f64,
    /// Gaussian noise added to scripted expert actions.
    pub expert_noise: f64,
}

impl Default for Maze {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                env_id: MAZE_ID.into(),
                d_s: 2,
                d_a: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: 100,
                reward_style: RewardStyle::Sparse,
            },
            start: [0.1, 0.1],
            goal_low: [0.8, 0.8],
            goal_high: [1.0, 1.0],
            walls: vec![([0.5, 0.0], [0.5, 0.7])],
            speed: 0.1,
            expert_noise: 0.1,
        }
    }
}

fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    orient(a, b, p).abs() <= EPS
        && p[0] >= a[0].min(b[0]) - EPS
        && p[0] <= a[0].max(b[0]) + EPS
        && p[1] >= a[1].min(b[1]) - EPS
        && p[1] <= a[1].max(b[1]) + EPS
}

/// Closed-segment intersection, touching included.
fn segments_touch(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    let strictly_opposite = |x: f64, y: f64| (x > EPS && y < -EPS) || (x < -EPS && y > EPS);
    if strictly_opposite(d1, d2) && strictly_opposite(d3, d4) {
        return true;
    }
    on_segment(q1, q2, p1) || on_segment(q1, q2, p2) || on_segment(p1, p2, q1) || on_segment(p1, p2, q2)
}

/// Tabular Q over the grid cells, indexed by `(cell, quantized action)`.
#[derive(Debug, Clone)]
pub struct TabularQ {
    pub cells: Vec<[usize; 2]>,
    pub q: Vec<[f64; 8]>,
    pub v: Vec<f64>,
    pub sweeps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueBackup {
    /// Optimal control: V(s) = max_a Q(s, a).
    Max,
    /// V(s) = tau-expectile of Q(s, .) over the eight quantized actions, uniformly
    /// weighted (the empirical support of the grid dataset).
    Expectile(f64),
}

/// Successor structure of the grid: for each source cell and quantized action,
/// the reward, terminal flag and successor cell (when not terminal).
#[derive(Debug, Clone)]
struct GridModel {
    cells: Vec<[usize; 2]>,
    next: Vec<[(f64, bool, Option<usize>); 8]>,
}

impl Maze {
    pub fn in_goal(&self, p: &[f64]) -> bool {
        (0..2).all(|i| p[i] >= self.goal_low[i] - EPS && p[i] <= self.goal_high[i] + EPS)
    }

    pub fn on_wall(&self, p: [f64; 2]) -> bool {
        self.walls.iter().any(|&(a, b)| on_segment(a, b, p))
    }

    fn blocked(&self, from: [f64; 2], to: [f64; 2]) -> bool {
        self.walls.iter().any(|&(a, b)| segments_touch(from, to, a, b))
    }

    fn move_point(&self, p: [f64; 2], a: &[f64]) -> [f64; 2] {
        let to = [
            snap((p[0] + self.speed * a[0]).clamp(0.0, 1.0)),
            snap((p[1] + self.speed * a[1]).clamp(0.0, 1.0)),
        ];
        if self.blocked(p, to) {
            p
        } else {
            to
        }
    }

    pub fn cell_point(cell: [usize; 2]) -> [f64; 2] {
        [snap(cell[0] as f64 * CELL), snap(cell[1] as f64 * CELL)]
    }

    /// Nearest grid cell of a point.
    pub fn nearest_cell(p: &[f64]) -> [usize; 2] {
        let idx = |x: f64| ((x / CELL).round().max(0.0) as usize).min(GRID - 1);
        [idx(p[0]), idx(p[1])]
    }

    /// Non-wall, non-goal grid cells: the sources of the grid transition set.
    pub fn source_cells(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for i in 0..GRID {
            for j in 0..GRID {
                let p = Self::cell_point([i, j]);
                if !self.on_wall(p) && !self.in_goal(&p) {
                    out.push([i, j]);
                }
            }
        }
        out
    }

    fn model(&self) -> GridModel {
        let cells = self.source_cells();
        let mut index = vec![usize::MAX; GRID * GRID];
        for (k, c) in cells.iter().enumerate() {
            index[c[0] * GRID + c[1]] = k;
        }
        let next = cells
            .iter()
            .map(|&c| {
                let p = Self::cell_point(c);
                let mut row = [(0.0, false, None); 8];
                for (ai, a) in QUANTIZED_ACTIONS.iter().enumerate() {
                    let q = self.move_point(p, a);
                    if self.in_goal(&q) {
                        row[ai] = (1.0, true, None);
                    } else {
                        let nc = Self::nearest_cell(&q);
                        let k = index[nc[0] * GRID + nc[1]];
                        debug_assert!(k != usize::MAX);
                        row[ai] = (0.0, false, Some(k));
                    }
                }
                row
            })
            .collect();
        GridModel { cells, next }
    }

    /// Minimum number of quantized moves from every source cell to the goal, by
    /// breadth-first search over the reversed grid graph. `None` if unreachable.
    pub fn steps_to_goal(&self) -> (Vec<[usize; 2]>, Vec<Option<usize>>) {
        let m = self.model();
        let n = m.cells.len();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut dist = vec![None; n];
        let mut queue = VecDeque::new();
        for (s, row) in m.next.iter().enumerate() {
            for &(_, term, nxt) in row {
                if term {
                    if dist[s].is_none() {
                        dist[s] = Some(1);
                        queue.push_back(s);
                    }
                } else if let Some(t) = nxt {
                    preds[t].push(s);
                }
            }
        }
        while let Some(t) = queue.pop_front() {
            let d = dist[t].unwrap();
            for &s in &preds[t] {
                if dist[s].is_none() {
                    dist[s] = Some(d + 1);
                    queue.push_back(s);
                }
            }
        }
        (m.cells, dist)
    }

    /// One synchronous Bellman sweep over the grid model.
    pub fn bellman_sweep(&self, v: &[f64], gamma: f64, backup: ValueBackup) -> (Vec<[f64; 8]>, Vec<f64>) {
        let m = self.model();
        sweep(&m, v, gamma, backup)
    }

    /// Value iteration to a fixed point (sup-norm change below `tol`).
    pub fn value_iteration(&self, gamma: f64, backup: ValueBackup, tol: f64) -> TabularQ {
        let m = self.model();
        let mut v = vec![0.0; m.cells.len()];
        let mut sweeps = 0;
        loop {
            let (q, nv) = sweep(&m, &v, gamma, backup);
            sweeps += 1;
            let delta = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = nv;
            if delta < tol || sweeps > 100_000 {
                return TabularQ {
                    cells: m.cells,
                    q,
                    v,
                    sweeps,
                };
            }
        }
    }

    /// Every source cell paired with every quantized action: the transition set
    /// the critic oracle is defined on. Raw (unnormalized) states.
    pub fn grid_dataset(&self) -> Result<OfflineDataset> {
        let m = self.model();
        let mut ts = Vec::with_capacity(m.cells.len() * 8);
        for &c in &m.cells {
            let p = Self::cell_point(c);
            for a in QUANTIZED_ACTIONS.iter() {
                let q = self.move_point(p, a);
                ts.push(Transition {
                    state: vec![p[0] as f32, p[1] as f32],
                    action: vec![a[0] as f32, a[1] as f32],
                    reward: if self.in_goal(&q) { 1.0 } else { 0.0 },
                    next_state: vec![q[0] as f32, q[1] as f32],
                    terminal: self.in_goal(&q),
                });
            }
        }
        OfflineDataset::from_transitions(
            DatasetInfo {
                env_id: MAZE_ID.into(),
                d_s: 2,
                d_a: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                ref_random_score: 0.0,
                ref_expert_score: 1.0,
            },
            &ts,
        )
    }

    /// Greedy shortest-path action from the nearest grid cell.
    pub fn greedy_action(&self, obs: &[f64], dist: &[Option<usize>], index: &[usize]) -> [f64; 2] {
        let c = Self::nearest_cell(obs);
        let p = Self::cell_point(c);
        let mut best = (usize::MAX, QUANTIZED_ACTIONS[0]);
        for a in QUANTIZED_ACTIONS {
            let q = self.move_point(p, &a);
            let d = if self.in_goal(&q) {
                0
            } else {
                let nc = Self::nearest_cell(&q);
                match index.get(nc[0] * GRID + nc[1]).copied() {
                    Some(k) if k != usize::MAX => dist[k].unwrap_or(usize::MAX - 1),
                    _ => usize::MAX - 1,
                }
            };
            if d < best.0 {
                best = (d, a);
            }
        }
        best.1
    }

    fn distance_index(&self) -> (Vec<Option<usize>>, Vec<usize>) {
        let (cells, dist) = self.steps_to_goal();
        let mut index = vec![usize::MAX; GRID * GRID];
        for (k, c) in cells.iter().enumerate() {
            index[c[0] * GRID + c[1]] = k;
        }
        (dist, index)
    }
}

fn sweep(m: &GridModel, v: &[f64], gamma: f64, backup: ValueBackup) -> (Vec<[f64; 8]>, Vec<f64>) {
    let q: Vec<[f64; 8]> = m
        .next
        .iter()
        .map(|row| {
            let mut out = [0.0; 8];
            for (ai, &(r, term, nxt)) in row.iter().enumerate() {
                out[ai] = r + if term { 0.0 } else { gamma * v[nxt.unwrap()] };
            }
            out
        })
        .collect();
    let nv = q
        .iter()
        .map(|qs| match backup {
            ValueBackup::Max => qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ValueBackup::Expectile(tau) => expectile(qs, tau),
        })
        .collect();
    (q, nv)
}

impl TabularQ {
    pub fn cell_index(&self, cell: [usize; 2]) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }
}

impl Env for Maze {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self) -> EnvState {
        EnvState {
            obs: self.start.to_vec(),
            t: 0,
        }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> StepOutcome {
        let a = self.spec.clip_action(action);
        let next = self.move_point([state.obs[0], state.obs[1]], &a);
        let terminal = self.in_goal(&next);
        let t = state.t + 1;
        StepOutcome {
            next: EnvState { obs: next.to_vec(), t },
            reward: if terminal { 1.0 } else { 0.0 },
            terminal,
            done: terminal || t >= self.spec.horizon,
        }
    }
}

impl ScriptedEnv for Maze {
    fn behavior(&self, quality: Quality) -> Box<dyn Actor + '_> {
        let (dist, index) = self.distance_index();
        let noisy_expert = move |obs: &[f64], rng: &mut Rng| -> Vec<f64> {
            let a = self.greedy_action(obs, &dist, &index);
            vec![
                a[0] + self.expert_noise * normal(rng),
                a[1] + self.expert_noise * normal(rng),
            ]
        };
        let uniform = |rng: &mut Rng| vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        match quality {
            Quality::Expert => Box::new(noisy_expert),
            Quality::Medium => Box::new(move |obs: &[f64], rng: &mut Rng| {
                if rng.random::<f64>() < 0.5 {
                    noisy_expert(obs, rng)
                } else {
                    uniform(rng)
                }
            }),
            Quality::Mixed => Box::new(move |obs: &[f64], rng: &mut Rng| {
                if rng.random::<f64>() < 0.25 {
                    noisy_expert(obs, rng)
                } else {
                    uniform(rng)
                }
            }),
            Quality::Random => Box::new(move |_: &[f64], rng: &mut Rng| uniform(rng)),
        }
    }
}
