//! Keyed, splittable random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! `(seed, domain)` and selected by a 64-bit stream id. ChaCha is a counter
//! based generator, so two streams with different ids never overlap and a
//! stream can be recreated from its key alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the uses of a single user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Per-site environment draws; the stream id is the site index.
    Environment = 1,
    /// Single-chain simulation.
    Chain = 2,
    /// Coupled-pair simulation.
    Coupled = 3,
    /// Monte Carlo estimates of drift statistics.
    Drift = 4,
}

/// Build the generator for `(seed, domain, stream)`.
pub fn stream(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Stream id for a (possibly negative) lattice site.
pub fn site_stream(site: i64) -> u64 {
    site as u64
}
