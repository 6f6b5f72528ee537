//! Stable sub-seed derivation.
//!
//! Every random stream in the toolkit is keyed by a master seed plus a
//! sequence of labels (stage, scene id, frame index, ...). The derivation is a
//! SHA-256 over a length-prefixed encoding so it is stable across platforms,
//! releases and execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a seed path.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Str(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

pub fn derive_seed(master: u64, parts: &[SeedPart<'_>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        match p {
            SeedPart::Str(s) => {
                h.update([0u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
            SeedPart::Int(v) => {
                h.update([1u8]);
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

pub fn derive_u64(master: u64, parts: &[SeedPart<'_>]) -> u64 {
    let bytes = derive_seed(master, parts);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

pub fn rng_for(master: u64, parts: &[SeedPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, parts))
}
