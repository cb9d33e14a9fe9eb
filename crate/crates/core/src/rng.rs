//! Label-keyed random streams.
//!
//! Every random draw in the crate is taken from a [`ChaCha8Rng`] whose seed is
//! a pure function of a 64-bit master seed and a path of derivation steps
//! (a purpose tag, a sample index, a tree label). The derivation hash is the
//! SplitMix64 finaliser applied to `key + GOLDEN * (step + 1)`, with tags
//! folded in byte by byte. Streams therefore never depend on traversal order
//! or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const NODE_DOMAIN: u64 = 0xA5A5_1CE5_0DE5_7AB1;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn from_seed(seed: u64) -> Self {
        StreamKey(mix(seed ^ 0x5EED_0F_B8A7_C0DE))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Derives the key for a named purpose, e.g. `"exit-times"`.
    pub fn tag(self, tag: &str) -> Self {
        let mut k = self.0;
        for b in tag.bytes() {
            k = mix(k.wrapping_add(GOLDEN.wrapping_mul(u64::from(b) + 1)));
        }
        StreamKey(mix(k ^ tag.len() as u64))
    }

    /// Derives the key for the `i`-th item (sample, worker, child).
    pub fn index(self, i: u64) -> Self {
        StreamKey(mix(self.0.wrapping_add(GOLDEN.wrapping_mul(i.wrapping_add(1)))))
    }

    /// Key of a tree node addressed by its child-index path from the root.
    ///
    /// Node keys live in their own domain, so `label(&[0])` differs from `index(0)`.
    pub fn label(self, path: &[u8]) -> Self {
        let base = StreamKey(mix(self.0 ^ NODE_DOMAIN));
        path.iter().fold(base, |k, &c| k.index(u64::from(c)))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
