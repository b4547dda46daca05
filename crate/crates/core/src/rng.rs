//! Keyed random streams.
//!
//! Every draw is addressed by `(seed, domain, stream, step)`. A stream is a
//! ChaCha8 keystream whose key is derived from the seed and domain; the
//! stream id is the logical sample index and the word position is derived
//! from the step index. Results therefore never depend on execution order,
//! and two simulations that share a `(seed, stream)` see identical draws at
//! identical absolute steps (common random numbers).

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Asset-path Gaussian increments.
pub const DOMAIN_ASSET: u64 = 0x6173_7365_7400_0001;
/// Policyholder-chain jump times and destinations.
pub const DOMAIN_CHAIN: u64 = 0x6368_6169_6e00_0002;
/// Outer stub generation for reports.
pub const DOMAIN_STUB: u64 = 0x7374_7562_0000_0003;
/// Inner continuations of nested estimators.
pub const DOMAIN_INNER: u64 = 0x696e_6e65_7200_0004;

const WORDS_PER_STEP: u128 = 4;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, domain: u64) -> [u8; 32] {
    let mut state = seed ^ domain.rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Factory for keyed streams within one `(seed, domain)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: u64,
}

impl StreamKey {
    pub fn new(seed: u64, domain: u64) -> Self {
        Self { seed, domain }
    }

    /// A Gaussian stream for sample `stream`, positioned at `step`.
    pub fn gaussian(&self, stream: u64, step: usize) -> GaussianStream {
        let mut rng = ChaCha8Rng::from_seed(derive_key(self.seed, self.domain));
        rng.set_stream(stream);
        rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        GaussianStream { rng }
    }

    /// A uniform stream for sample `stream` (variable consumption).
    pub fn uniform(&self, stream: u64) -> UniformStream {
        let mut rng = ChaCha8Rng::from_seed(derive_key(self.seed, self.domain));
        rng.set_stream(stream);
        UniformStream { rng }
    }
}

#[inline]
fn open_unit(bits: u64) -> f64 {
    // (0, 1): never returns an endpoint
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal per step, fixed consumption of four words per step.
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn next_normal(&mut self) -> f64 {
        let u1 = open_unit(self.rng.next_u64());
        let u2 = open_unit(self.rng.next_u64());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

pub struct UniformStream {
    rng: ChaCha8Rng,
}

impl UniformStream {
    pub fn next_open01(&mut self) -> f64 {
        open_unit(self.rng.next_u64())
    }

    /// Exponential variate with the given rate.
    pub fn next_exp(&mut self, rate: f64) -> f64 {
        -self.next_open01().ln() / rate
    }
}
