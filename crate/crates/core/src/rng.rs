//! Seed derivation.
//!
//! Every random draw in the engine comes from a ChaCha20 generator whose
//! seed is derived, not shared. Two schemes cover all uses:
//!
//! - stream derivation: one master seed, distinct stream ids per purpose
//!   (initialization, per-stage shuffling, validation draws);
//! - hash derivation: a SHA-256 over labeled integer parts, for draws that
//!   must be addressable (the noise for cell i in modality m under run seed
//!   s is the same no matter which minibatch or comparison it appears in).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Parameter initialization.
pub const STREAM_INIT: u64 = 1;
/// Generative sampling.
pub const STREAM_GENERATE: u64 = 2;
/// Per-stage minibatch shuffling starts at this stream plus the stage index.
pub const STREAM_SHUFFLE_BASE: u64 = 100;

pub fn derive_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// 32-byte seed from labeled integer parts. The label keeps different
/// derivation sites from colliding even when their parts coincide.
pub fn derive_seed(label: &str, parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    hasher.finalize().into()
}

pub fn hashed_rng(label: &str, parts: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(label, parts))
}

/// First eight bytes of the derived seed, for call sites that address a
/// whole generator family by one integer.
pub fn hashed_u64(label: &str, parts: &[u64]) -> u64 {
    let bytes = derive_seed(label, parts);
    u64::from_le_bytes(bytes[..8].try_into().expect("seed is 32 bytes"))
}
