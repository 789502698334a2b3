//! Counter-addressed random substreams.
//!
//! A [`Streams`] value holds a ChaCha8 key derived from `(seed, domain)`.
//! Individual draws come from `stream(index)` or `substream(index, sub)`,
//! which position a fresh generator at a fixed offset of the keystream.
//! Because the offset is a pure function of the indices, trial `i` sees the
//! same numbers whether it runs first, last, or on another thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The concrete generator handed out by [`Streams`].
pub type StreamRng = ChaCha8Rng;

/// Words reserved per sub-index within one ChaCha stream.
const SUB_SPAN_WORDS: u128 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Streams {
    key: [u8; 32],
}

impl Streams {
    pub fn new(seed: u64, domain: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update((domain.len() as u64).to_le_bytes());
        hasher.update(domain.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Streams { key }
    }

    pub fn stream(&self, index: u64) -> StreamRng {
        self.substream(index, 0)
    }

    pub fn substream(&self, index: u64, sub: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        if sub != 0 {
            rng.set_word_pos(u128::from(sub) * SUB_SPAN_WORDS);
        }
        rng
    }
}

/// Expands a master seed into an independent seed for a named stage.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"chipletsim/derive");
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Packs a 2-D grid coordinate into a stream index that does not depend on
/// the grid dimensions.
pub fn grid_index(col: u32, row: u32) -> u64 {
    (u64::from(col) << 32) | u64::from(row)
}
