//! Counter-based random streams.
//!
//! Every random quantity in the crate is addressed by a key
//! `(seed, stream, position)`: the ChaCha block cipher keyed by `seed` is
//! run on stream `stream` starting at word `position`. A path's Brownian
//! increment at step `k` therefore depends only on `(seed, path_index, k)`
//! and never on which thread produced the neighbouring paths.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags used with [`derive_seed`] so that independent consumers of
/// one user seed never share a keystream.
pub mod tags {
    pub const BRIDGE: u64 = 0x6272_6964_6765; // "bridge"
    pub const NESTED: u64 = 0x6e65_7374_6564; // "nested"
    pub const VALIDATE: u64 = 0x7661_6c69_6400; // "valid"
    pub const LIPSCHITZ: u64 = 0x6c69_7073_6368; // "lipsch"
    pub const VERIFY: u64 = 0x7665_7269_6679; // "verify"
    pub const POLICY: u64 = 0x706f_6c69_6379; // "policy"
    pub const STITCH: u64 = 0x7374_6974_6368; // "stitch"
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a list of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

/// Uniform variates from one keyed ChaCha stream.
#[derive(Clone, Debug)]
pub struct UniformStream {
    rng: ChaCha8Rng,
}

impl UniformStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        UniformStream { rng }
    }

    /// Repositions the stream at its `index`-th 64-bit draw.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(u128::from(index) * 2);
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn next_open_f64(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal pair by the Box–Muller transform (two draws).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let r = (-2.0 * self.next_open_f64().ln()).sqrt();
        let angle = std::f64::consts::TAU * self.next_f64();
        (r * angle.cos(), r * angle.sin())
    }
}

/// Gaussian increments `ΔW_k ~ N(0, Δt I_d)` for one path.
///
/// Each step consumes exactly `2 * ceil(d / 2)` uniform draws, so step `k`
/// starts at a fixed stream position and can be generated out of order.
#[derive(Clone, Debug)]
pub struct IncrementStream {
    uniform: UniformStream,
    dim: usize,
    sqrt_dt: f64,
    next_step: usize,
}

impl IncrementStream {
    pub fn new(seed: u64, path_index: u64, dim: usize, dt: f64) -> Self {
        IncrementStream {
            uniform: UniformStream::new(seed, path_index),
            dim,
            sqrt_dt: dt.sqrt(),
            next_step: 0,
        }
    }

    fn draws_per_step(&self) -> u64 {
        (2 * self.dim.div_ceil(2)) as u64
    }

    /// Writes `ΔW_step` into `out` (length `d`).
    pub fn increment(&mut self, step: usize, out: &mut [f64]) {
        if step != self.next_step {
            self.uniform.seek(step as u64 * self.draws_per_step());
        }
        let mut j = 0;
        while j < self.dim {
            let (z0, z1) = self.uniform.normal_pair();
            out[j] = z0 * self.sqrt_dt;
            if j + 1 < self.dim {
                out[j + 1] = z1 * self.sqrt_dt;
            }
            j += 2;
        }
        self.next_step = step + 1;
    }
}
