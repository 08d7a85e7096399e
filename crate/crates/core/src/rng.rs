//! Seeded random streams.
//!
//! All randomness derives from one run seed. Each consumer asks for its own
//! stream by a fixed label so that adding a consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label))
}
