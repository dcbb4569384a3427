//! Seeded randomness with a portable, version-stable stream.
//!
//! Everything reproducible in this crate draws from ChaCha8 keyed by a
//! `u64` seed and a text label, and converts raw words to ranges with the
//! helpers below rather than `rand`'s distribution code, whose exact output
//! is allowed to change between releases.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the label bytes.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, label)`.
pub fn seeded(seed: u64, label: &str) -> Rng {
    let a = mix(seed);
    let b = mix(label_hash(label) ^ a.rotate_left(17));
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&mix(a ^ b).to_le_bytes());
    key[24..].copy_from_slice(&mix(b.wrapping_add(1)).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform integer in `[0, n)` by rejection; `n` must be nonzero.
pub fn bounded(rng: &mut impl RngCore, n: u64) -> u64 {
    assert!(n > 0, "bounded() needs a nonempty range");
    let zone = u64::MAX - (u64::MAX - n + 1) % n;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % n;
        }
    }
}

/// Uniform `f64` in `[0, 1)` from the top 53 bits.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform `f64` in `[lo, hi)`.
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Picks one element.
pub fn choose<'a, T>(rng: &mut impl RngCore, items: &'a [T]) -> &'a T {
    &items[bounded(rng, items.len() as u64) as usize]
}
