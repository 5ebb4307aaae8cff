//! Vector datasets, ANN-benchmark binary formats, exact distances and the
//! brute-force ground-truth oracle.
//!
//! Supported formats (all little-endian):
//!
//! * `fvecs` / `bvecs`: every vector is prefixed by its dimension as `i32`,
//!   followed by `dim` `f32` (fvecs) or `u8` (bvecs) components.
//! * `fbin` / `i8bin`: a `(count: u32, dim: u32)` header, then `count * dim`
//!   `f32` (fbin) or `i8` (i8bin) components.
//!
//! `bvecs` stores unsigned bytes; they are loaded as `i8` by subtracting 128,
//! which preserves all pairwise L2 distances and round-trips exactly.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F32,
    I8,
}

impl ElemType {
    pub fn size(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::I8 => 1,
        }
    }
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElemType::F32 => f.write_str("float32"),
            ElemType::I8 => f.write_str("int8"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VecFormat {
    Fvecs,
    Bvecs,
    Fbin,
    I8bin,
}

impl VecFormat {
    pub fn elem(self) -> ElemType {
        match self {
            VecFormat::Fvecs | VecFormat::Fbin => ElemType::F32,
            VecFormat::Bvecs | VecFormat::I8bin => ElemType::I8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            VecFormat::Fvecs => "fvecs",
            VecFormat::Bvecs => "bvecs",
            VecFormat::Fbin => "fbin",
            VecFormat::I8bin => "i8bin",
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
    }
}

impl FromStr for VecFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fvecs" => Ok(VecFormat::Fvecs),
            "bvecs" => Ok(VecFormat::Bvecs),
            "fbin" => Ok(VecFormat::Fbin),
            "i8bin" | "u8bin" => Ok(VecFormat::I8bin),
            other => Err(Error::invalid(format!("unknown vector format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl VectorData {
    fn len(&self) -> usize {
        match self {
            VectorData::F32(v) => v.len(),
            VectorData::I8(v) => v.len(),
        }
    }
}

/// Borrowed view of a single vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VectorRef<'a> {
    F32(&'a [f32]),
    I8(&'a [i8]),
}

impl<'a> VectorRef<'a> {
    pub fn dim(&self) -> usize {
        match self {
            VectorRef::F32(v) => v.len(),
            VectorRef::I8(v) => v.len(),
        }
    }

    pub fn elem(&self) -> ElemType {
        match self {
            VectorRef::F32(_) => ElemType::F32,
            VectorRef::I8(_) => ElemType::I8,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.dim() * self.elem().size()
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            VectorRef::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VectorRef::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            VectorRef::F32(v) => v.to_vec(),
            VectorRef::I8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Squared L2 distance to a vector serialized little-endian with the same
    /// element type and dimension. The caller guarantees `bytes.len()`.
    pub fn squared_l2_le(&self, bytes: &[u8]) -> f64 {
        match self {
            VectorRef::F32(q) => {
                let mut acc = 0f32;
                for (x, c) in q.iter().zip(bytes.chunks_exact(4)) {
                    let y = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    let d = x - y;
                    acc += d * d;
                }
                acc as f64
            }
            VectorRef::I8(q) => {
                let mut acc = 0i64;
                for (&x, &b) in q.iter().zip(bytes) {
                    let d = x as i32 - (b as i8) as i32;
                    acc += (d * d) as i64;
                }
                acc as f64
            }
        }
    }
}

/// Decodes a little-endian vector of `elem` into a freshly allocated `f32` row.
pub fn decode_f32(elem: ElemType, bytes: &[u8]) -> Vec<f32> {
    match elem {
        ElemType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        ElemType::I8 => bytes.iter().map(|&b| (b as i8) as f32).collect(),
    }
}

/// `count` vectors of a fixed dimension stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    dim: usize,
    data: VectorData,
}

impl VectorDataset {
    pub fn from_f32(dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(dim, VectorData::F32(data))
    }

    pub fn from_i8(dim: usize, data: Vec<i8>) -> Result<Self> {
        Self::new(dim, VectorData::I8(data))
    }

    pub fn new(dim: usize, data: VectorData) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(VectorDataset { dim, data })
    }

    pub fn empty(dim: usize, elem: ElemType) -> Result<Self> {
        match elem {
            ElemType::F32 => Self::from_f32(dim, Vec::new()),
            ElemType::I8 => Self::from_i8(dim, Vec::new()),
        }
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elem(&self) -> ElemType {
        match self.data {
            VectorData::F32(_) => ElemType::F32,
            VectorData::I8(_) => ElemType::I8,
        }
    }

    pub fn data(&self) -> &VectorData {
        &self.data
    }

    pub fn row_bytes(&self) -> usize {
        self.dim * self.elem().size()
    }

    pub fn row(&self, i: usize) -> VectorRef<'_> {
        let r = i * self.dim..(i + 1) * self.dim;
        match &self.data {
            VectorData::F32(v) => VectorRef::F32(&v[r]),
            VectorData::I8(v) => VectorRef::I8(&v[r]),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = VectorRef<'_>> + '_ {
        (0..self.count()).map(move |i| self.row(i))
    }

    /// Copy of the given rows, in order.
    pub fn select(&self, ids: &[usize]) -> VectorDataset {
        let data = match &self.data {
            VectorData::F32(v) => VectorData::F32(
                ids.iter()
                    .flat_map(|&i| v[i * self.dim..(i + 1) * self.dim].iter().copied())
                    .collect(),
            ),
            VectorData::I8(v) => VectorData::I8(
                ids.iter()
                    .flat_map(|&i| v[i * self.dim..(i + 1) * self.dim].iter().copied())
                    .collect(),
            ),
        };
        VectorDataset {
            dim: self.dim,
            data,
        }
    }

    /// Row-major `f32` copy of the whole dataset (int8 widened).
    pub fn to_f32_matrix(&self) -> Vec<f32> {
        match &self.data {
            VectorData::F32(v) => v.clone(),
            VectorData::I8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

/// Exact squared Euclidean distance. Int8 operands are widened to `i32` and
/// accumulated in `i64`, so the result is exact.
pub fn squared_l2(a: VectorRef<'_>, b: VectorRef<'_>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    match (a, b) {
        (VectorRef::F32(x), VectorRef::F32(y)) => Ok(l2_f32(x, y) as f64),
        (VectorRef::I8(x), VectorRef::I8(y)) => Ok(l2_i8(x, y) as f64),
        _ => Err(Error::ElemMismatch(format!(
            "cannot compare {} with {}",
            a.elem(),
            b.elem()
        ))),
    }
}

#[inline]
pub(crate) fn l2_f32(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
pub(crate) fn l2_i8(a: &[i8], b: &[i8]) -> i64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i32 - y as i32;
            (d * d) as i64
        })
        .sum()
}

/// Unchecked distance for callers that already validated dims and elems.
#[inline]
pub(crate) fn dist(a: VectorRef<'_>, b: VectorRef<'_>) -> f64 {
    match (a, b) {
        (VectorRef::F32(x), VectorRef::F32(y)) => l2_f32(x, y) as f64,
        (VectorRef::I8(x), VectorRef::I8(y)) => l2_i8(x, y) as f64,
        _ => unreachable!("element types validated by caller"),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn load_vectors(path: impl AsRef<Path>, format: VecFormat) -> Result<VectorDataset> {
    let bytes = fs::read(path)?;
    parse_vectors(&bytes, format)
}

pub fn parse_vectors(bytes: &[u8], format: VecFormat) -> Result<VectorDataset> {
    let name = format.name();
    match format {
        VecFormat::Fvecs | VecFormat::Bvecs => {
            let esize = format.elem().size();
            let mut dim: Option<usize> = None;
            let mut pos = 0usize;
            let mut f = Vec::new();
            let mut b = Vec::new();
            while pos < bytes.len() {
                if bytes.len() - pos < 4 {
                    return Err(Error::format(name, "truncated dimension prefix"));
                }
                let d = i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                if d <= 0 {
                    return Err(Error::format(name, format!("non-positive dimension {d}")));
                }
                let d = d as usize;
                match dim {
                    None => dim = Some(d),
                    Some(prev) if prev != d => {
                        return Err(Error::format(
                            name,
                            format!("inconsistent dimension {d} (expected {prev})"),
                        ))
                    }
                    _ => {}
                }
                pos += 4;
                let need = d * esize;
                if bytes.len() - pos < need {
                    return Err(Error::format(name, "truncated vector body"));
                }
                let body = &bytes[pos..pos + need];
                match format {
                    VecFormat::Fvecs => f.extend(
                        body.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                    ),
                    _ => b.extend(body.iter().map(|&x| (x as i16 - 128) as i8)),
                }
                pos += need;
            }
            let dim = dim.ok_or_else(|| Error::format(name, "empty file has no dimension"))?;
            match format {
                VecFormat::Fvecs => VectorDataset::from_f32(dim, f),
                _ => VectorDataset::from_i8(dim, b),
            }
        }
        VecFormat::Fbin | VecFormat::I8bin => {
            if bytes.len() < 8 {
                return Err(Error::format(name, "truncated header"));
            }
            let count = read_u32(bytes, 0) as usize;
            let dim = read_u32(bytes, 4) as usize;
            if dim == 0 {
                return Err(Error::format(name, "dimension must be positive"));
            }
            let esize = format.elem().size();
            let need = count
                .checked_mul(dim)
                .and_then(|x| x.checked_mul(esize))
                .ok_or_else(|| Error::format(name, "header size overflow"))?;
            let body = &bytes[8..];
            if body.len() < need {
                return Err(Error::format(
                    name,
                    format!("truncated body: {} of {need} bytes", body.len()),
                ));
            }
            if body.len() > need {
                return Err(Error::format(name, "trailing bytes after body"));
            }
            match format {
                VecFormat::Fbin => VectorDataset::from_f32(
                    dim,
                    body.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                _ => VectorDataset::from_i8(dim, body.iter().map(|&x| x as i8).collect()),
            }
        }
    }
}

pub fn write_vectors(dataset: &VectorDataset, path: impl AsRef<Path>, format: VecFormat) -> Result<()> {
    let bytes = encode_vectors(dataset, format)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_vectors(dataset: &VectorDataset, format: VecFormat) -> Result<Vec<u8>> {
    if format.elem() != dataset.elem() {
        return Err(Error::ElemMismatch(format!(
            "{} format cannot hold {} data",
            format.name(),
            dataset.elem()
        )));
    }
    let dim = dataset.dim();
    let mut out = Vec::with_capacity(8 + dataset.count() * (4 + dataset.row_bytes()));
    match format {
        VecFormat::Fvecs | VecFormat::Bvecs => {
            for row in dataset.rows() {
                out.extend_from_slice(&(dim as i32).to_le_bytes());
                match row {
                    VectorRef::I8(v) => out.extend(v.iter().map(|&x| (x as i16 + 128) as u8)),
                    r => r.write_le(&mut out),
                }
            }
        }
        VecFormat::Fbin | VecFormat::I8bin => {
            let count = u32::try_from(dataset.count())
                .map_err(|_| Error::invalid("too many vectors for a 32-bit header"))?;
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(&(dim as u32).to_le_bytes());
            for row in dataset.rows() {
                row.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

/// Exact k nearest neighbours of each query, ascending by distance, ties
/// broken by smaller id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    k: usize,
    ids: Vec<u32>,
    dists: Vec<f32>,
}

impl GroundTruth {
    pub fn new(k: usize, ids: Vec<u32>, dists: Vec<f32>) -> Result<Self> {
        if k == 0 || ids.len() % k != 0 || ids.len() != dists.len() {
            return Err(Error::invalid("ground truth shape mismatch"));
        }
        Ok(GroundTruth { k, ids, dists })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn query_count(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn ids(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn dists(&self, q: usize) -> &[f32] {
        &self.dists[q * self.k..(q + 1) * self.k]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.ids.len() * 8);
        out.extend_from_slice(&(self.query_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        self.ids.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.dists.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("groundtruth", "truncated header"));
        }
        let q = read_u32(bytes, 0) as usize;
        let k = read_u32(bytes, 4) as usize;
        if k == 0 {
            return Err(Error::format("groundtruth", "k must be positive"));
        }
        let n = q * k;
        if bytes.len() != 8 + n * 8 {
            return Err(Error::format("groundtruth", "body length does not match header"));
        }
        let ids = (0..n).map(|i| read_u32(bytes, 8 + 4 * i)).collect();
        let dists = (0..n)
            .map(|i| f32::from_bits(read_u32(bytes, 8 + 4 * n + 4 * i)))
            .collect();
        GroundTruth::new(k, ids, dists)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn check_compatible(dataset: &VectorDataset, queries: &VectorDataset) -> Result<()> {
    if dataset.dim() != queries.dim() {
        return Err(Error::DimMismatch {
            expected: dataset.dim(),
            actual: queries.dim(),
        });
    }
    if dataset.elem() != queries.elem() {
        return Err(Error::ElemMismatch(format!(
            "dataset is {}, queries are {}",
            dataset.elem(),
            queries.elem()
        )));
    }
    Ok(())
}

pub fn brute_force_topk(dataset: &VectorDataset, queries: &VectorDataset, k: usize) -> Result<GroundTruth> {
    brute_force_topk_with(Exec::default(), dataset, queries, k)
}

pub fn brute_force_topk_with(
    exec: Exec,
    dataset: &VectorDataset,
    queries: &VectorDataset,
    k: usize,
) -> Result<GroundTruth> {
    check_compatible(dataset, queries)?;
    if k == 0 || k > dataset.count() {
        return Err(Error::invalid(format!(
            "k={k} must be in 1..={}",
            dataset.count()
        )));
    }
    let rows = par::map_range(exec, queries.count(), |q| {
        let query = queries.row(q);
        let mut scored: Vec<(f64, u32)> = dataset
            .rows()
            .enumerate()
            .map(|(i, r)| (dist(query, r), i as u32))
            .collect();
        top_k_sorted(&mut scored, k);
        scored
    });
    let mut ids = Vec::with_capacity(queries.count() * k);
    let mut dists = Vec::with_capacity(queries.count() * k);
    for row in rows {
        for (d, i) in row {
            ids.push(i);
            dists.push(d as f32);
        }
    }
    GroundTruth::new(k, ids, dists)
}

/// Truncates `scored` to its `k` smallest `(dist, id)` pairs in ascending order.
pub(crate) fn top_k_sorted(scored: &mut Vec<(f64, u32)>, k: usize) {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
}

/// Fraction of the first `k` true neighbours present in `result`. Only the
/// first `k` result ids count; missing slots are misses.
pub fn recall_at_k(result: &[u32], truth: &[u32], k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let truth = &truth[..k.min(truth.len())];
    let result = &result[..k.min(result.len())];
    let hits = truth.iter().filter(|t| result.contains(t)).count();
    hits as f64 / k as f64
}
