//! Lloyd k-means with k-means++ seeding over row-major `f32` matrices.
//! Shared by centroid selection, the centroid tree and PQ training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::l2_f32;
use crate::par::{self, Exec};

/// Nearest center of every row as `(center index, squared distance)`.
pub fn assign(exec: Exec, data: &[f32], dim: usize, centers: &[f32]) -> Vec<(u32, f32)> {
    let n = data.len() / dim;
    par::map_range(exec, n, |i| nearest(&data[i * dim..(i + 1) * dim], centers, dim))
}

pub fn nearest(row: &[f32], centers: &[f32], dim: usize) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = l2_f32(row, center);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut min_d: Vec<f32> = data
        .chunks_exact(dim)
        .map(|r| l2_f32(r, &centers[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = min_d.iter().map(|&d| d as f64).sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                target -= d as f64;
                if target < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let row = &data[pick * dim..(pick + 1) * dim];
        centers.extend_from_slice(row);
        for (d, r) in min_d.iter_mut().zip(data.chunks_exact(dim)) {
            let nd = l2_f32(r, row);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centers
}

/// Runs k-means and returns `k` centers (row-major). `k` must not exceed the
/// number of rows. Empty clusters keep their previous center.
pub fn kmeans(exec: Exec, data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Vec<f32> {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "k={k} out of range for {n} rows");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(data, dim, k, &mut rng);
    for _ in 0..iters {
        let labels = assign(exec, data, dim, &centers);
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &(c, _)) in data.chunks_exact(dim).zip(&labels) {
            let c = c as usize;
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                let v = (sums[c * dim + j] / counts[c] as f64) as f32;
                if v != centers[c * dim + j] {
                    moved = true;
                }
                centers[c * dim + j] = v;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let data = [0.0f32, 0.1, 0.2, 10.0, 10.1, 10.2];
        let centers = kmeans(Exec::Sequential, &data, 1, 2, 10, 1);
        let mut c = centers.clone();
        c.sort_by(f32::total_cmp);
        assert!((c[0] - 0.1).abs() < 1e-5);
        assert!((c[1] - 10.1).abs() < 1e-5);
    }

    #[test]
    fn k_equals_n_reproduces_points() {
        let data = [3.0f32, 1.0, 2.0];
        let centers = kmeans(Exec::Sequential, &data, 1, 3, 5, 9);
        let mut c = centers.clone();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![1.0, 2.0, 3.0]);
    }
}
