//! Product quantization: per-chunk codebooks and asymmetric distance tables.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::VectorDataset;
use crate::kmeans;
use crate::par::{self, Exec};
use crate::{Error, Result};

pub const PQ_CENTERS: usize = 256;
pub const PQ_ITERS: usize = 25;
pub const PQ_SAMPLE: usize = 100_000;

/// Splits `0..dim` into `chunks` contiguous ranges; the first `dim % chunks`
/// ranges get one extra coordinate.
pub fn chunk_ranges(dim: usize, chunks: usize) -> Result<Vec<Range<usize>>> {
    if chunks == 0 || chunks > dim {
        return Err(Error::invalid(format!(
            "pq chunk count {chunks} must lie in 1..={dim}"
        )));
    }
    let base = dim / chunks;
    let extra = dim % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

/// Default chunk count `max(dim / 8, 48)`, clamped to `dim`.
pub fn default_chunks(dim: usize) -> usize {
    (dim / 8).max(48).min(dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqCodebook {
    dim: usize,
    ranges: Vec<Range<usize>>,
    /// Per chunk: `centers × chunk_len` row-major.
    centers: Vec<Vec<f32>>,
}

/// Query-specific table: `table[chunk * 256 + code]` is the squared
/// distance between the query sub-vector and that center.
#[derive(Debug, Clone, PartialEq)]
pub struct PqTable {
    chunks: usize,
    table: Vec<f32>,
}

impl PqTable {
    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn entry(&self, chunk: usize, code: u8) -> f32 {
        self.table[chunk * PQ_CENTERS + code as usize]
    }
}

pub fn pq_distance(table: &PqTable, code: &[u8]) -> f32 {
    code.iter()
        .enumerate()
        .map(|(c, &k)| table.table[c * PQ_CENTERS + k as usize])
        .sum()
}

/// Trains a codebook on (a sample of) `dataset` and encodes every row.
pub fn train_pq(exec: Exec, dataset: &VectorDataset, chunks: usize, seed: u64) -> Result<(PqCodebook, Vec<u8>)> {
    let dim = dataset.dim();
    let ranges = chunk_ranges(dim, chunks)?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train PQ on an empty dataset"));
    }
    let rows = dataset.to_f32_matrix();
    let n = dataset.count();
    let sample_rows: Vec<f32> = if n > PQ_SAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = sample(&mut rng, n, PQ_SAMPLE).into_vec();
        ids.sort_unstable();
        ids.iter()
            .flat_map(|&i| rows[i * dim..(i + 1) * dim].iter().copied())
            .collect()
    } else {
        rows.clone()
    };
    let m = sample_rows.len() / dim;
    let k = PQ_CENTERS.min(m);
    let centers = par::map_slice(exec, &ranges, |r| {
        let sub: Vec<f32> = sample_rows
            .chunks_exact(dim)
            .flat_map(|row| row[r.clone()].iter().copied())
            .collect();
        let chunk_seed = seed.wrapping_add(r.start as u64 + 1);
        kmeans::kmeans(Exec::Sequential, &sub, r.len(), k, PQ_ITERS, chunk_seed)
    });
    let book = PqCodebook { dim, ranges, centers };
    let codes = par::map_range(exec, n, |i| book.encode(&rows[i * dim..(i + 1) * dim]));
    Ok((book, codes.concat()))
}

impl PqCodebook {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunks(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn center_count(&self, chunk: usize) -> usize {
        self.centers[chunk].len() / self.ranges[chunk].len()
    }

    pub fn encode(&self, row: &[f32]) -> Vec<u8> {
        self.ranges
            .iter()
            .zip(&self.centers)
            .map(|(r, c)| kmeans::nearest(&row[r.clone()], c, r.len()).0 as u8)
            .collect()
    }

    pub fn reconstruct(&self, code: &[u8]) -> Vec<f32> {
        let mut out = vec![0f32; self.dim];
        for ((r, c), &k) in self.ranges.iter().zip(&self.centers).zip(code) {
            let len = r.len();
            out[r.clone()].copy_from_slice(&c[k as usize * len..(k as usize + 1) * len]);
        }
        out
    }

    pub fn lookup_table(&self, query: &[f32]) -> PqTable {
        let mut table = vec![f32::INFINITY; self.chunks() * PQ_CENTERS];
        for (ci, (r, c)) in self.ranges.iter().zip(&self.centers).enumerate() {
            let q = &query[r.clone()];
            for (k, center) in c.chunks_exact(r.len()).enumerate() {
                table[ci * PQ_CENTERS + k] = crate::dataset::l2_f32(q, center);
            }
        }
        PqTable {
            chunks: self.chunks(),
            table,
        }
    }
}
