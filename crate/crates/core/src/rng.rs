//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `name` under `seed`. Distinct names give
/// unrelated streams; the same pair always gives the same stream.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(name.len() as u64).to_le_bytes());
    key[24..].copy_from_slice(b"kgformer");
    ChaCha8Rng::from_seed(key)
}

pub const SHUFFLE: &str = "data-shuffle";
pub const NEGATIVES: &str = "negatives";
pub const SUPPORT: &str = "support";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const EVAL_SUPPORT: &str = "eval-support";
pub const SUBSAMPLE: &str = "train-subsample";
