//! Counter-based random number generation.
//!
//! The generator is a SplitMix64 mix applied to `seed + position * GAMMA`.
//! Every draw is a pure function of `(seed, position)`, so the noise for any
//! step of an inversion can be reproduced without replaying the stream, and
//! two trajectories can share a seed without sharing mutable state.
//!
//! Normal variates come from the trigonometric Box-Muller transform, which
//! consumes exactly two 64-bit words per pair. The integer path is
//! bit-identical everywhere; `ln`/`sin`/`cos` go through libm, so outputs may
//! differ across platforms in the last few ulps.

use crate::error::{CoreError, Result};
use crate::latent::Latent;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent child stream, derived deterministically from the parent.
    pub fn fork(&mut self, tag: u64) -> RngState {
        let child_seed = splitmix64(self.next_u64() ^ splitmix64(tag));
        RngState::new(child_seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let word = self.seed.wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA));
        self.position = self.position.wrapping_add(1);
        splitmix64(word)
    }

    /// Uniform in (0, 1]; never returns 0 so it is safe under `ln`.
    pub fn next_unit(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// One pair of independent standard normals.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// Draws i.i.d. standard-normal entries into a fresh latent of `shape`,
/// advancing `rng` by a fixed number of words.
pub fn sample_gaussian(rng: &mut RngState, shape: &[usize]) -> Result<Latent> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(CoreError::DegenerateShape);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() + 2 <= numel {
        let (a, b) = rng.next_normal_pair();
        data.push(a);
        data.push(b);
    }
    if data.len() < numel {
        let (a, _) = rng.next_normal_pair();
        data.push(a);
    }
    Latent::new(shape.to_vec(), data)
}
