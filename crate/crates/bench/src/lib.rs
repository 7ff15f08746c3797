//! Seeded input generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgc_core::{LayerFeatureStack, Matrix};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite entries")
}

pub fn random_stack(layers: usize, tokens: usize, dim: usize, seed: u64) -> LayerFeatureStack {
    LayerFeatureStack::new(
        (0..layers)
            .map(|l| random_matrix(tokens, dim, seed.wrapping_add(l as u64)))
            .collect(),
    )
    .expect("uniform layer shapes")
}

/// `n` random unit vectors of length `dim`.
pub fn random_units(n: usize, dim: usize, seed: u64) -> Vec<sgc_core::Vector> {
    let m = random_matrix(n, dim, seed);
    (0..n)
        .map(|r| sgc_core::l2_normalize(&m.row_vector(r)).expect("nonzero row"))
        .collect()
}
