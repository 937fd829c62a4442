use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::dataset::OfflineDataset;
use crate::nn::Scalar;
use crate::rng::Rng;

/// A minibatch of transitions, one row per sample. States are as stored in the
/// dataset (normalized when the dataset is).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub states: Array2<F>,
    pub actions: Array2<F>,
    pub rewards: Array1<F>,
    pub next_states: Array2<F>,
    pub terminals: Array1<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_indices(ds: &OfflineDataset, indices: &[usize]) -> Self {
        let (d_s, d_a) = (ds.d_s(), ds.d_a());
        let n = indices.len();
        let mut b = Batch {
            states: Array2::zeros((n, d_s)),
            actions: Array2::zeros((n, d_a)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, d_s)),
            terminals: Array1::zeros(n),
        };
        for (row, &i) in indices.iter().enumerate() {
            for (j, &v) in ds.state(i).iter().enumerate() {
                b.states[[row, j]] = F::c(v as f64);
            }
            for (j, &v) in ds.next_state(i).iter().enumerate() {
                b.next_states[[row, j]] = F::c(v as f64);
            }
            for (j, &v) in ds.action(i).iter().enumerate() {
                b.actions[[row, j]] = F::c(v as f64);
            }
            b.rewards[row] = F::c(ds.reward(i) as f64);
            b.terminals[row] = F::c(if ds.terminal(i) { 1.0 } else { 0.0 });
        }
        b
    }

    /// Uniform sampling with replacement.
    pub fn sample(ds: &OfflineDataset, size: usize, rng: &mut Rng) -> Self {
        let indices: Vec<usize> = (0..size).map(|_| rng.random_range(0..ds.len())).collect();
        Self::from_indices(ds, &indices)
    }

    pub fn cast<G: Scalar>(&self) -> Batch<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::c(v.f64()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::c(v.f64()));
        Batch {
            states: c2(&self.states),
            actions: c2(&self.actions),
            rewards: c1(&self.rewards),
            next_states: c2(&self.next_states),
            terminals: c1(&self.terminals),
        }
    }
}
