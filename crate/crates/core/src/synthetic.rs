//! Seeded synthetic datasets: an isotropic Gaussian mixture, with an int8
//! variant obtained by fixed-scale quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::VectorDataset;

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    centers: Vec<f32>,
    spread: f32,
}

impl GaussianMixture {
    /// `clusters` centers drawn from N(0, 1) per coordinate; points scatter
    /// around a uniformly chosen center with standard deviation `spread`.
    pub fn new(dim: usize, clusters: usize, spread: f32, seed: u64) -> Self {
        assert!(dim > 0 && clusters > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let centers = (0..dim * clusters).map(|_| normal.sample(&mut rng)).collect();
        GaussianMixture {
            dim,
            centers,
            spread,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, count: usize, seed: u64) -> VectorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, self.spread).unwrap();
        let clusters = self.centers.len() / self.dim;
        let mut data = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            let c = rng.random_range(0..clusters);
            let center = &self.centers[c * self.dim..(c + 1) * self.dim];
            data.extend(center.iter().map(|&x| x + noise.sample(&mut rng)));
        }
        VectorDataset::from_f32(self.dim, data).expect("dim > 0")
    }
}

/// Quantizes float data to int8 as `clamp(round(x * scale), -127, 127)`.
pub fn quantize_i8(ds: &VectorDataset, scale: f32) -> VectorDataset {
    let data = ds
        .to_f32_matrix()
        .into_iter()
        .map(|x| (x * scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    VectorDataset::from_i8(ds.dim(), data).expect("dim > 0")
}

/// The standard desk-scale workload: `count` base vectors plus `queries`
/// held-out queries from the same mixture.
pub fn desk_dataset(count: usize, queries: usize, dim: usize, seed: u64) -> (VectorDataset, VectorDataset) {
    let mix = GaussianMixture::new(dim, 64, 1.0, seed);
    (
        mix.sample(count, seed.wrapping_add(1)),
        mix.sample(queries, seed.wrapping_add(2)),
    )
}
