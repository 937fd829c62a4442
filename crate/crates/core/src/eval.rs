//! Rollout evaluation, normalized scores, the RAT/OMS reporting metrics, and
//! ablation sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::OfflineDataset;
use crate::diffusion::DiffusionPolicy;
use crate::envs::{episode_return, Actor, Env};
use crate::rng::{substream, Rng, Stream};
use crate::trainer::{self, RunOptions, TrainConfig};
use crate::{Error, Result};

/// Checkpoints averaged by [`rat`].
pub const RAT_WINDOW: usize = 10;

/// Wraps a policy trained on normalized states as an actor on raw observations.
pub struct PolicyActor<'a> {
    pub policy: &'a DiffusionPolicy<f32>,
    pub mean: &'a [f32],
    pub std: &'a [f32],
}

impl<'a> PolicyActor<'a> {
    pub fn new(policy: &'a DiffusionPolicy<f32>, ds: &'a OfflineDataset) -> Self {
        Self {
            policy,
            mean: &ds.state_mean,
            std: &ds.state_std,
        }
    }
}

impl Actor for PolicyActor<'_> {
    fn act(&self, obs: &[f64], rng: &mut Rng) -> Vec<f64> {
        let s: Array1<f32> = obs
            .iter()
            .zip(self.mean.iter().zip(self.std))
            .map(|(&o, (&m, &sd))| ((o - m as f64) / sd as f64) as f32)
            .collect();
        match self.policy.sample_action(s.view(), rng) {
            Ok(a) => a.iter().map(|&v| v as f64).collect(),
            Err(e) => panic!("policy does not match environment: {e}"),
        }
    }
}

/// Mean undiscounted return over `episodes`, episode `i` driven by its own
/// substream of `seed`. Episodes run in parallel; the result does not depend on
/// the thread count.
pub fn rollout_score(env: &dyn Env, actor: &dyn Actor, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Stream::Eval, i as u64);
            episode_return(env, actor, &mut rng)
        })
        .collect();
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}

/// `100 (raw - ref_random) / (ref_expert - ref_random)`.
pub fn normalize_score(raw: f64, ref_random: f64, ref_expert: f64) -> Result<f64> {
    if !(ref_expert > ref_random) || !ref_random.is_finite() || !ref_expert.is_finite() {
        return Err(Error::Config(format!(
            "reference scores must satisfy random < expert, got {ref_random} and {ref_expert}"
        )));
    }
    Ok(100.0 * (raw - ref_random) / (ref_expert - ref_random))
}

/// Mean of the last `min(10, len)` scores.
pub fn rat(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no checkpoint scores".into()));
    }
    let tail = &scores[scores.len().saturating_sub(RAT_WINDOW)..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Best checkpoint score.
pub fn oms(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no checkpoint scores".into()));
    }
    Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// RAT after each checkpoint, for curves.
pub fn rat_curve(scores: &[f64]) -> Vec<f64> {
    (1..=scores.len()).map(|n| rat(&scores[..n]).unwrap()).collect()
}

/// Scores of one run at each evaluated checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub epochs: Vec<u64>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub rat: f64,
    pub oms: f64,
}

impl EvalReport {
    pub fn new(epochs: Vec<u64>, raw: Vec<f64>, normalized: Vec<f64>) -> Result<Self> {
        if epochs.len() != raw.len() || raw.len() != normalized.len() {
            return Err(Error::Shape("checkpoint columns differ in length".into()));
        }
        if normalized.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite checkpoint score".into()));
        }
        let rat = rat(&normalized)?;
        let oms = oms(&normalized)?;
        Ok(Self {
            epochs,
            raw,
            normalized,
            rat,
            oms,
        })
    }

    pub fn from_run(out: &trainer::RunOutput) -> Result<Self> {
        Self::new(
            out.evals.iter().map(|e| e.epoch).collect(),
            out.evals.iter().map(|e| e.raw).collect(),
            out.evals.iter().map(|e| e.normalized).collect(),
        )
    }
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Strategy,
    Lambda,
    Xi,
    Method,
    EtaWr,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Strategy => "strategy",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Xi => "xi",
            SweepAxis::Method => "method",
            SweepAxis::EtaWr => "eta_wr",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Strategy, SweepAxis::Lambda, SweepAxis::Xi, SweepAxis::Method, SweepAxis::EtaWr]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}; expected strategy, lambda, xi, method or eta_wr")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRun {
    pub run_id: String,
    pub value: String,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub value: String,
    pub rat_mean: f64,
    pub rat_std: f64,
    pub oms_mean: f64,
    pub oms_std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl SweepResult {
    /// Per-value aggregates across seeds, in first-seen value order.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut values: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !values.contains(&r.value.as_str()) {
                values.push(&r.value);
            }
        }
        values
            .into_iter()
            .map(|v| {
                let runs: Vec<&SweepRun> = self.runs.iter().filter(|r| r.value == v).collect();
                let rats: Vec<f64> = runs.iter().map(|r| r.report.rat).collect();
                let omss: Vec<f64> = runs.iter().map(|r| r.report.oms).collect();
                let (rat_mean, rat_std) = mean_std(&rats);
                let (oms_mean, oms_std) = mean_std(&omss);
                SweepSummary {
                    value: v.to_string(),
                    rat_mean,
                    rat_std,
                    oms_mean,
                    oms_std,
                    seeds: runs.len(),
                }
            })
            .collect()
    }

    /// One row per (run, checkpoint): run_id, axis, value, seed, checkpoint, raw, normalized.
    pub fn write_long_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["run_id", "axis", "value", "seed", "checkpoint", "raw", "normalized"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.runs {
            for i in 0..r.report.epochs.len() {
                w.write_record([
                    r.run_id.clone(),
                    self.axis.to_string(),
                    r.value.clone(),
                    r.seed.to_string(),
                    r.report.epochs[i].to_string(),
                    r.report.raw[i].to_string(),
                    r.report.normalized[i].to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["axis", "value", "seeds", "rat_mean", "rat_std", "oms_mean", "oms_std"])
            .map_err(|e| csv_err(path, e))?;
        for s in self.summary() {
            w.write_record([
                self.axis.to_string(),
                s.value,
                s.seeds.to_string(),
                s.rat_mean.to_string(),
                s.rat_std.to_string(),
                s.oms_mean.to_string(),
                s.oms_std.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Trains and evaluates every `value x seed` combination. When `out` is given,
/// run `{value}_s{seed}` writes its artifacts under `out/{axis}_{value}_s{seed}`.
pub fn ablation_sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    dataset: &OfflineDataset,
    env: &dyn Env,
    out: Option<&Path>,
) -> Result<SweepResult> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let mut configs = Vec::new();
    for v in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(axis.name(), v)?;
            cfg.seed = seed;
            cfg.validate()?;
            configs.push((v.clone(), seed, cfg));
        }
    }
    let mut runs = Vec::with_capacity(configs.len());
    for (value, seed, cfg) in configs {
        let run_id = format!("{}_{}_s{}", axis, value, seed);
        log::info!("sweep run {run_id}");
        let opts = RunOptions {
            out: out.map(|o| o.join(&run_id)),
            resume: false,
            env: Some(env),
        };
        let output = trainer::run(&cfg, dataset, &opts)?;
        runs.push(SweepRun {
            run_id,
            value,
            seed,
            report: EvalReport::from_run(&output)?,
        });
    }
    Ok(SweepResult { axis, runs })
}

/// A labelled score curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of `curves` as a standalone SVG document, one legend entry per curve.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, curves: &[Curve]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n\
         <rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n",
        left + pw / 2.0,
        escape(title)
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{:.1}</text>\n",
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{:.0}</text>\n",
            sx(fx),
            top + ph + 16.0,
            fx
        );
    }
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    svg += &format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        svg += &format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            w - right + 10.0,
            w - right + 30.0
        );
        svg += &format!(
            "<text class=\"legend\" x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            w - right + 36.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    svg += "</svg>\n";
    svg
}
