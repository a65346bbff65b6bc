//! Counter-based sample tokens.
//!
//! Every random draw in a run is addressed by `(seed, iteration, role, index)`.
//! A token deterministically expands into its own ChaCha stream, so the same
//! sample can be re-evaluated at two different iterates bit-identically, which
//! the recursive momentum corrections rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DOMAIN_TAG: [u8; 8] = *b"sustain1";

/// What a sample token is used for. Distinct roles never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum SampleRole {
    /// Lower-level gradient sample (zeta).
    Lower = 1,
    /// Upper-level sample shared by both partial gradients of f (xi).
    Upper = 2,
    /// Sample for the cross Hessian of g.
    Cross = 3,
    /// Samples for the lower Hessian factors of the Neumann product.
    Hessian = 4,
    /// The truncation index k drawn for a hypergradient sample.
    Index = 5,
    /// The uniformly drawn returned-iterate index.
    Output = 6,
}

/// Opaque address of one random draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleToken {
    seed: u64,
    iteration: u64,
    role: SampleRole,
    index: u32,
}

impl SampleToken {
    pub fn new(seed: u64, iteration: u64, role: SampleRole, index: u32) -> Self {
        Self {
            seed,
            iteration,
            role,
            index,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn role(&self) -> SampleRole {
        self.role
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    /// Fresh generator positioned at the start of this token's stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.iteration.to_le_bytes());
        key[16..20].copy_from_slice(&(self.role as u32).to_le_bytes());
        key[20..24].copy_from_slice(&self.index.to_le_bytes());
        key[24..32].copy_from_slice(&DOMAIN_TAG);
        ChaCha8Rng::from_seed(key)
    }
}

/// The composite sample of one hypergradient draw: `xi`, `zeta^(0..K)` and `k`.
///
/// The drawn index is part of the sample, so two evaluations of the same
/// composite sample at different iterates use the same truncation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CompositeSample {
    seed: u64,
    iteration: u64,
}

impl CompositeSample {
    pub fn new(seed: u64, iteration: u64) -> Self {
        Self { seed, iteration }
    }

    pub fn upper(&self) -> SampleToken {
        SampleToken::new(self.seed, self.iteration, SampleRole::Upper, 0)
    }

    pub fn cross(&self) -> SampleToken {
        SampleToken::new(self.seed, self.iteration, SampleRole::Cross, 0)
    }

    /// Sample for the `i`-th Neumann factor, `i >= 1`.
    pub fn hessian(&self, i: usize) -> SampleToken {
        SampleToken::new(self.seed, self.iteration, SampleRole::Hessian, i as u32)
    }

    /// Truncation index, uniform on `{0, ..., k_max - 1}`.
    pub fn draw_index(&self, k_max: usize) -> usize {
        assert!(k_max >= 1, "truncation budget must be positive");
        SampleToken::new(self.seed, self.iteration, SampleRole::Index, 0)
            .rng()
            .random_range(0..k_max)
    }
}

/// All draws of one run, keyed by the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleStream {
    seed: u64,
}

impl SampleStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `j`-th lower-level sample of iteration `t`.
    pub fn lower(&self, t: u64, j: u32) -> SampleToken {
        SampleToken::new(self.seed, t, SampleRole::Lower, j)
    }

    pub fn composite(&self, t: u64) -> CompositeSample {
        CompositeSample::new(self.seed, t)
    }

    /// Returned-iterate index `a(T)`, uniform on `{1, ..., horizon}`.
    ///
    /// Drawn from a dedicated substream, independent of every sample draw.
    pub fn output_index(&self, horizon: usize) -> usize {
        assert!(horizon >= 1);
        SampleToken::new(self.seed, 0, SampleRole::Output, 0)
            .rng()
            .random_range(1..=horizon)
    }
}
