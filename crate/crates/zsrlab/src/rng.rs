//! Seeded randomness helpers shared across modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic sub-seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal via Box-Muller; two uniforms per sample, one discarded.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f32> {
    (0..n).map(|_| (normal(rng) * sigma) as f32).collect()
}

/// Unit vector uniform on the sphere (normalized Gaussian).
pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}
