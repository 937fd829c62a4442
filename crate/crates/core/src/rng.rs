//! Named random streams derived from one master seed.
//!
//! Every consumer of randomness owns a separate ChaCha stream so that toggling one
//! component never shifts the draws seen by another.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::Scalar;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Noise = 3,
    Candidates = 4,
    Preference = 5,
    LabelNoise = 6,
    Eval = 7,
    Generate = 8,
}

/// Opens `stream` of the master `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Independent generator for sub-task `index` of a stream (episodes, sweep cells).
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut base = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    base.set_stream(((stream as u64) << 32) | (index & 0xFFFF_FFFF));
    base
}

/// Serializable position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// u128 word position, as a decimal string for JSON.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> crate::Result<Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| crate::Error::Metadata("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Metadata(format!("bad rng word_pos {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Draws a standard normal matrix. Values are drawn in f64 and converted, so f32
/// and f64 code paths see the same underlying stream.
pub fn normal_matrix<F: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::c(rng.sample::<f64, _>(StandardNormal)))
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}
