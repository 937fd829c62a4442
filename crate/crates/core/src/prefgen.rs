//! Preferred-action generation: draw candidates from the behavior policy, pick
//! one by a strategy over critic values, and label the pair against the
//! dataset action.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::critic::Critic;
use crate::diffusion::DiffusionPolicy;
use crate::nn::Scalar;
use crate::rng::Rng;
use crate::{Error, Result};

/// `+1` if the dataset action has the strictly larger value, `-1` otherwise.
pub fn label(q_data: f64, q_gen: f64) -> Result<i8> {
    if q_data.is_nan() || q_gen.is_nan() {
        return Err(Error::InvalidInput(format!(
            "cannot label a pair with NaN values ({q_data}, {q_gen})"
        )));
    }
    Ok(if q_data > q_gen { 1 } else { -1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Draw with probability `softmax(eta * q)`.
    Importance,
    Max,
    Min,
    /// Lower median of the candidates ranked by value.
    Mean,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Importance, Strategy::Max, Strategy::Min, Strategy::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Importance => "importance",
            Strategy::Max => "max",
            Strategy::Min => "min",
            Strategy::Mean => "mean",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected importance, max, min or mean")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: Strategy,
    /// Temperature of the importance weights `exp(eta * q)`.
    pub eta: f64,
    /// Candidates per state.
    pub n: usize,
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        Self {
            kind: Strategy::Max,
            eta: 0.1,
            n: 10,
        }
    }
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("candidate count must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// `softmax(eta * q)` with the maximum subtracted first.
pub fn softmax(q: &[f64], eta: f64) -> Vec<f64> {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q.iter().map(|&v| (eta * (v - m)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Index chosen by `strategy`; ties go to the lowest index.
pub fn select_index(q: &[f64], strategy: &SamplingStrategy, rng: &mut Rng) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::InvalidInput("no candidates to select from".into()));
    }
    if q.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("candidate value is NaN".into()));
    }
    let argbest = |better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for (i, &v) in q.iter().enumerate().skip(1) {
            if better(v, q[best]) {
                best = i;
            }
        }
        best
    };
    Ok(match strategy.kind {
        Strategy::Max => argbest(|a, b| a > b),
        Strategy::Min => argbest(|a, b| a < b),
        Strategy::Mean => {
            let mut order: Vec<usize> = (0..q.len()).collect();
            order.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
            order[(q.len() - 1) / 2]
        }
        Strategy::Importance => {
            if q.len() == 1 {
                0
            } else {
                let p = softmax(q, strategy.eta);
                WeightedIndex::new(&p)
                    .map_err(|e| Error::InvalidInput(format!("importance weights: {e}")))?
                    .sample(rng)
            }
        }
    })
}

/// Row of `candidates` chosen by `strategy` over `q`.
pub fn select_candidate<F: Scalar>(
    candidates: ArrayView2<F>,
    q: &[f64],
    strategy: &SamplingStrategy,
    rng: &mut Rng,
) -> Result<Array1<F>> {
    if candidates.nrows() != q.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} values",
            candidates.nrows(),
            q.len()
        )));
    }
    let i = select_index(q, strategy, rng)?;
    Ok(candidates.row(i).to_owned())
}

/// Anything that scores state-action pairs.
pub trait ActionValue<F> {
    fn action_values(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>>;
}

impl<F: Scalar> ActionValue<F> for Critic<F> {
    fn action_values(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>> {
        self.q_min(states, actions)
    }
}

impl<F, G> ActionValue<F> for G
where
    G: Fn(ArrayView2<F>, ArrayView2<F>) -> Result<Array1<F>>,
{
    fn action_values(&self, states: ArrayView2<F>, actions: ArrayView2<F>) -> Result<Array1<F>> {
        self(states, actions)
    }
}

/// A batch of labelled preference pairs, one per state row.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceBatch<F> {
    pub states: Array2<F>,
    pub a_data: Array2<F>,
    pub a_gen: Array2<F>,
    /// `+1` when the dataset action is preferred.
    pub gamma: Vec<i8>,
    pub q_data: Vec<f64>,
    pub q_gen: Vec<f64>,
}

impl<F: Scalar> PreferenceBatch<F> {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn mean_gamma(&self) -> f64 {
        self.gamma.iter().map(|&g| g as f64).sum::<f64>() / self.len().max(1) as f64
    }

    /// Mean critic value of the selected candidates.
    pub fn mean_q_gen(&self) -> f64 {
        self.q_gen.iter().sum::<f64>() / self.len().max(1) as f64
    }

    /// The same pairs with every label negated.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        out.gamma.iter_mut().for_each(|g| *g = -*g);
        out
    }

    /// Flips each label independently with probability `rate`; returns the
    /// number flipped.
    pub fn corrupt_labels(&mut self, rate: f64, rng: &mut Rng) -> usize {
        let mut flipped = 0;
        for g in &mut self.gamma {
            if rng.random::<f64>() < rate {
                *g = -*g;
                flipped += 1;
            }
        }
        flipped
    }

    /// Writes one JSON object per pair.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Record {
            state: Vec<f64>,
            a_data: Vec<f64>,
            a_gen: Vec<f64>,
            q_data: f64,
            q_gen: f64,
            gamma: i8,
        }
        let row = |m: &Array2<F>, i: usize| m.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>();
        for i in 0..self.len() {
            let rec = Record {
                state: row(&self.states, i),
                a_data: row(&self.a_data, i),
                a_gen: row(&self.a_gen, i),
                q_data: self.q_data[i],
                q_gen: self.q_gen[i],
                gamma: self.gamma[i],
            };
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out).map_err(|e| Error::io("<preference dump>", e))?;
        }
        Ok(())
    }
}

/// For every `(s, a_data)` row: sample `strategy.n` candidates from `behavior`,
/// score them with `critic`, select one, and label the pair.
pub fn generate<F: Scalar>(
    behavior: &DiffusionPolicy<F>,
    critic: &dyn ActionValue<F>,
    states: ArrayView2<F>,
    a_data: ArrayView2<F>,
    strategy: &SamplingStrategy,
    rng: &mut Rng,
) -> Result<PreferenceBatch<F>> {
    strategy.validate()?;
    let rows = states.nrows();
    let n = strategy.n;
    if a_data.nrows() != rows {
        return Err(Error::Shape("states and dataset actions differ in rows".into()));
    }
    let repeated = {
        let mut r = Array2::zeros((rows * n, states.ncols()));
        for i in 0..rows {
            for j in 0..n {
                r.row_mut(i * n + j).assign(&states.row(i));
            }
        }
        r
    };
    let candidates = behavior.sample_actions(repeated.view(), rng)?;
    let q_cand = critic.action_values(repeated.view(), candidates.view())?;
    let q_data = critic.action_values(states, a_data)?;

    let mut a_gen = Array2::zeros((rows, behavior.d_a()));
    let mut q_gen = Vec::with_capacity(rows);
    let mut gamma = Vec::with_capacity(rows);
    for i in 0..rows {
        let q: Vec<f64> = (0..n).map(|j| q_cand[i * n + j].f64()).collect();
        let pick = select_index(&q, strategy, rng)?;
        a_gen.row_mut(i).assign(&candidates.row(i * n + pick));
        q_gen.push(q[pick]);
        gamma.push(label(q_data[i].f64(), q[pick])?);
    }
    Ok(PreferenceBatch {
        states: states.to_owned(),
        a_data: a_data.to_owned(),
        a_gen,
        gamma,
        q_data: q_data.iter().map(|v| v.f64()).collect(),
        q_gen,
    })
}

/// Recomputes labels for stored pairs with `critic`.
pub fn relabel<F: Scalar>(critic: &dyn ActionValue<F>, batch: &PreferenceBatch<F>) -> Result<Vec<i8>> {
    let qd = critic.action_values(batch.states.view(), batch.a_data.view())?;
    let qg = critic.action_values(batch.states.view(), batch.a_gen.view())?;
    qd.iter()
        .zip(qg.iter())
        .map(|(a, b)| label(a.f64(), b.f64()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    fn strat(kind: Strategy) -> SamplingStrategy {
        SamplingStrategy { kind, eta: 0.1, n: 3 }
    }

    #[test]
    fn label_cases() {
        assert_eq!(label(2.0, 1.0).unwrap(), 1);
        assert_eq!(label(1.0, 1.0).unwrap(), -1);
        assert_eq!(label(0.0, 1.0).unwrap(), -1);
        assert!(label(f64::NAN, 1.0).is_err());
        assert!(label(1.0, f64::NAN).is_err());
    }

    #[test]
    fn deterministic_strategies() {
        let mut rng = stream(0, Stream::Preference);
        let q = [1.0, 5.0, 3.0];
        assert_eq!(select_index(&q, &strat(Strategy::Max), &mut rng).unwrap(), 1);
        assert_eq!(select_index(&q, &strat(Strategy::Min), &mut rng).unwrap(), 0);
        assert_eq!(select_index(&q, &strat(Strategy::Mean), &mut rng).unwrap(), 2);
        // Lower median for even counts.
        assert_eq!(select_index(&[4.0, 1.0, 3.0, 2.0], &strat(Strategy::Mean), &mut rng).unwrap(), 3);
        // Ties go to the lowest index.
        assert_eq!(select_index(&[2.0, 2.0, 1.0], &strat(Strategy::Max), &mut rng).unwrap(), 0);
        assert_eq!(select_index(&[1.0, 2.0, 1.0], &strat(Strategy::Min), &mut rng).unwrap(), 0);
        assert_eq!(select_index(&[1.0, 1.0, 1.0], &strat(Strategy::Mean), &mut rng).unwrap(), 1);
    }

    #[test]
    fn empty_and_nan_rejected() {
        let mut rng = stream(0, Stream::Preference);
        assert!(select_index(&[], &strat(Strategy::Max), &mut rng).is_err());
        assert!(select_index(&[1.0, f64::NAN], &strat(Strategy::Importance), &mut rng).is_err());
    }

    #[test]
    fn softmax_is_stable_at_extremes() {
        let p = softmax(&[-1e4, 1e4, 0.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p[1], 1.0);
        let mut rng = stream(0, Stream::Preference);
        let s = SamplingStrategy { kind: Strategy::Importance, eta: 10.0, n: 3 };
        assert_eq!(select_index(&[-1e4, 1e4, 0.0], &s, &mut rng).unwrap(), 1);
    }

    #[test]
    fn parse_strategy() {
        for k in Strategy::ALL {
            assert_eq!(k.name().parse::<Strategy>().unwrap(), k);
        }
        assert!(matches!("greedy".parse::<Strategy>(), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        assert!(SamplingStrategy { n: 0, ..Default::default() }.validate().is_err());
        assert!(SamplingStrategy { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplingStrategy::default().validate().is_ok());
    }

    #[test]
    fn select_candidate_returns_row() {
        let mut rng = stream(0, Stream::Preference);
        let c = array![[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]];
        let a = select_candidate(c.view(), &[1.0, 5.0, 3.0], &strat(Strategy::Max), &mut rng).unwrap();
        assert_eq!(a, array![1.0, 2.0]);
        assert!(select_candidate(c.view(), &[1.0], &strat(Strategy::Max), &mut rng).is_err());
    }

    #[test]
    fn corruption_flips_requested_fraction() {
        let mut b = PreferenceBatch::<f64> {
            states: Array2::zeros((10_000, 1)),
            a_data: Array2::zeros((10_000, 1)),
            a_gen: Array2::zeros((10_000, 1)),
            gamma: vec![1; 10_000],
            q_data: vec![0.0; 10_000],
            q_gen: vec![0.0; 10_000],
        };
        let mut rng = stream(3, Stream::LabelNoise);
        let k = b.corrupt_labels(0.2, &mut rng);
        assert!((k as f64 / 10_000.0 - 0.2).abs() < 0.015);
        assert_eq!(b.gamma.iter().filter(|&&g| g == -1).count(), k);
    }
}
