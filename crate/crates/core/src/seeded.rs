//! Labeled deterministic RNG streams. Every stochastic stage derives its own
//! stream from (base seed, stage label), so adding or reordering stages never
//! shifts another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn seed_stream(base: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&d);
    ChaCha8Rng::from_seed(seed)
}
