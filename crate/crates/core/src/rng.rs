//! Named, seeded random streams. Every consumer derives its own stream from
//! the run seed and a tag, so adding a draw in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, tag: &str) -> Rng {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(tag.as_bytes())
        .finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&d);
    ChaCha8Rng::from_seed(s)
}

/// A child seed, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    use rand::RngCore;
    stream(seed, tag).next_u64()
}
