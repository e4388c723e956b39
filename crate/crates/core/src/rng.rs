//! Named random streams.
//!
//! Every source of randomness in the crate is a pure function of
//! `(seed, tag, indices)`. Two call sites that derive the same triple get the
//! same stream; distinct triples get statistically independent streams. This
//! makes results independent of execution order, so harvesting, rollouts and
//! evaluation can fan out across prompts without changing any output.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha12Rng;

/// Derive a named stream from `(seed, tag, indices)`.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Stream {
    ChaCha12Rng::from_seed(digest(seed, tag, indices))
}

/// Derive a child seed, for handing a whole seed namespace to a sub-procedure.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = digest(seed, tag, &[]);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn digest(seed: u64, tag: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for &i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}
