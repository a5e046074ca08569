//! Deterministic fixtures shared by the criterion benches.

use pcuda_core::geometry::PointCloud;
use pcuda_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `m` points drawn uniformly from the cube [-1, 1]^3.
pub fn random_cloud(m: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..m).map(|_| [(); 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
    PointCloud::new(points).expect("finite points")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}
