//! Deterministic seed derivation.
//!
//! Every random stream in a run is seeded from the master run seed plus
//! a textual path (e.g. `["episode", "3", "rollout", "7"]`), so streams
//! are independent of each other and of evaluation order.

use rand::Rng;
use sha2::{Digest, Sha256};

/// Standard normal draw via Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
