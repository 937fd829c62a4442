use ndarray::Array2;

use super::Scalar;

/// Sinusoidal embedding of an integer diffusion step.
///
/// Entry `2i` is `sin(k * w_i)` and entry `2i + 1` is `cos(k * w_i)` with
/// `w_i = base^(-2i / dim)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
    base: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> crate::Result<Self> {
        Self::with_base(dim, 10_000.0)
    }

    pub fn with_base(dim: usize, base: f64) -> crate::Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(crate::Error::Config(format!(
                "time embedding dimension must be positive and even, got {dim}"
            )));
        }
        if !(base > 1.0) {
            return Err(crate::Error::Config(format!("embedding base must exceed 1, got {base}")));
        }
        Ok(Self { dim, base })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn embed(&self, k: usize) -> Vec<f64> {
        let k = k as f64;
        let mut out = Vec::with_capacity(self.dim);
        for i in 0..self.dim / 2 {
            let freq = self.base.powf(-2.0 * i as f64 / self.dim as f64);
            out.push((k * freq).sin());
            out.push((k * freq).cos());
        }
        out
    }

    /// Row `k - 1` holds the embedding of step `k`, for `k = 1..=steps`.
    pub fn table<F: Scalar>(&self, steps: usize) -> Array2<F> {
        let mut t = Array2::zeros((steps, self.dim));
        for k in 1..=steps {
            for (j, v) in self.embed(k).into_iter().enumerate() {
                t[[k - 1, j]] = F::c(v);
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_are_unit_bounded() {
        let e = TimeEmbedding::new(32).unwrap();
        for k in 1..=1000 {
            assert!(e.embed(k).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn adjacent_steps_differ() {
        let e = TimeEmbedding::new(16).unwrap();
        assert_ne!(e.embed(1), e.embed(2));
    }

    #[test]
    fn closed_form_at_k5() {
        let e = TimeEmbedding::new(16).unwrap();
        let v = e.embed(5);
        // Independent evaluation: frequencies 10000^(-j/16) for even j.
        let mut expected = [0.0f64; 16];
        for j in (0..16).step_by(2) {
            let w = 1.0 / 10000f64.powf(j as f64 / 16.0);
            expected[j] = (5.0 * w).sin();
            expected[j + 1] = (5.0 * w).cos();
        }
        for (a, b) in v.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((v[0] - 5f64.sin()).abs() < 1e-15);
        assert!((v[1] - 5f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(TimeEmbedding::new(7).is_err());
    }
}
