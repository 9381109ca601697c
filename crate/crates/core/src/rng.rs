//! Counter-based random streams. A [`StreamKey`] names a stream; children are
//! derived by index, so the randomness of (epoch, sample, view) never depends
//! on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream domains, so that e.g. the data-order and augmentation streams of
/// one seed never coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    DataOrder = 2,
    Augment = 3,
    Synthetic = 4,
    Probe = 5,
    Bench = 6,
}

/// 128-bit stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(pub u128);

impl StreamKey {
    pub fn new(domain: Domain, seed: u64) -> Self {
        StreamKey(((domain as u64 as u128) << 64) | seed as u128).derive(0)
    }

    pub fn derive(self, index: u64) -> StreamKey {
        let hi = (self.0 >> 64) as u64;
        let lo = self.0 as u64;
        let a = splitmix64(hi ^ splitmix64(index ^ 0x6A09_E667_F3BC_C908));
        let b = splitmix64(lo ^ a ^ splitmix64(index.wrapping_add(0xBB67_AE85_84CA_A73B)));
        StreamKey(((a as u128) << 64) | b as u128)
    }

    pub fn derive_path(self, path: &[u64]) -> StreamKey {
        path.iter().fold(self, |k, &i| k.derive(i))
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..16].copy_from_slice(&self.0.to_le_bytes());
        let hi = (self.0 >> 64) as u64;
        let lo = self.0 as u64;
        seed[16..24].copy_from_slice(&splitmix64(hi ^ 0x3C6E_F372_FE94_F82B).to_le_bytes());
        seed[24..].copy_from_slice(&splitmix64(lo ^ 0xA54F_F53A_5F1D_36F1).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Stable 64-bit hash of an index, used for deterministic splits.
    pub fn hash_index(index: u64) -> u64 {
        splitmix64(index ^ 0x510E_527F_ADE6_82D1)
    }
}
