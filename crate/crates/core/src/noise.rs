//! Counter-addressable Gaussian noise.
//!
//! The draw for (seed, path index, step, component) is a pure function of
//! those four numbers: the ChaCha8 key comes from the seed, the stream id is
//! the path index, and the word position is derived from the step. Each
//! step consumes a fixed number of words (Box-Muller on pairs of `u64`), so
//! any step can be regenerated on its own.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Identifies the noise of one ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub path_index: u64,
    pub dim: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, path_index: u64, dim: usize) -> Self {
        Self {
            seed,
            path_index,
            dim,
        }
    }

    pub fn cursor(&self) -> NoiseCursor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path_index);
        NoiseCursor {
            rng,
            words_per_step: 4 * self.dim.div_ceil(2) as u128,
        }
    }

    /// One-off lookup of `b_step`.
    pub fn fill(&self, step: usize, out: &mut [f64]) {
        self.cursor().fill(step, out)
    }
}

/// Reusable generator positioned by step index.
#[derive(Debug, Clone)]
pub struct NoiseCursor {
    rng: ChaCha8Rng,
    words_per_step: u128,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

impl NoiseCursor {
    /// Writes the standard normal vector `b_step` into `out`.
    pub fn fill(&mut self, step: usize, out: &mut [f64]) {
        self.rng.set_word_pos(step as u128 * self.words_per_step);
        for pair in out.chunks_mut(2) {
            // u1 in (0, 1], u2 in [0, 1)
            let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
            let u2 = (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53;
            let radius = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            pair[0] = radius * c;
            if let Some(second) = pair.get_mut(1) {
                *second = radius * s;
            }
        }
    }
}
