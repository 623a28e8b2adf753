//! Seeded fixtures shared by the kernel benchmarks.

use comp_core::{Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows × cols` matrix with entries uniform in `[-1, 1)`.
pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).expect("shape matches data")
}

/// Well-conditioned SPD matrix `AᵀA/n + I`.
pub fn random_spd(seed: u64, n: usize) -> Matrix {
    let mut g = random_matrix(seed, 2 * n, n).gram();
    g.scale(1.0 / n as f64);
    g.add_diagonal(1.0);
    g
}

/// Byte tokens from a seeded stream.
pub fn random_tokens(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(32..127)).collect()
}

/// Default toy architecture.
pub fn toy_config() -> ModelConfig {
    ModelConfig::default()
}
