//! Labeled, counter-style seed derivation.
//!
//! Every random stream in the crate is keyed by a root seed plus a path of
//! labels (`"mask"`, epoch, batch, slot, ...). Streams are derived, never
//! shared, so reordering or parallelising work cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Concrete generator used for every stream.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed))
    }

    pub fn from_raw(raw: u64) -> Self {
        StreamKey(raw)
    }

    /// Child stream for a named subsystem.
    pub fn label(self, label: &str) -> Self {
        self.index(label_hash(label))
    }

    /// Child stream for a numeric coordinate (epoch, batch, slot, layer).
    pub fn index(self, i: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }
}
