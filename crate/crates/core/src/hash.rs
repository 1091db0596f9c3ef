//! Stable 64-bit FNV-1a hashing for digests and per-text seeds.
//!
//! `std`'s default hasher is not guaranteed stable across releases, and digests
//! end up persisted in artifact files.

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(OFFSET)
    }
}

impl Fnv64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    Fnv64::new().write(bytes).finish()
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut h = Fnv64::new();
    h.write(&seed.to_le_bytes()).write(&tag.to_le_bytes());
    h.finish()
}
