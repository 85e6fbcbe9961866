//! Reference block payload: a uniform cell grid of scalars with conservative
//! split (replication) and merge (mean) operators, plus per-level
//! distribution statistics.

use serde::Serialize;

use crate::block_id::BlockId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::migration::DataDescriptor;
use crate::sim::wire::{WireReader, WireWriter};

/// `n^d` scalar cells of one block; cell `(i, j, k)` is stored at
/// `i + n * (j + n * k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPayload {
    dim: u8,
    n: u32,
    level: u8,
    values: Vec<f64>,
}

impl GridPayload {
    pub fn new(dim: u8, n: u32, level: u8, values: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dim) || n == 0 {
            return Err(Error::contract(format!("invalid grid: dim {dim}, n {n}")));
        }
        let cells = (n as usize).pow(dim as u32);
        if values.len() != cells {
            return Err(Error::contract(format!(
                "grid with n = {n} needs {cells} values, got {}",
                values.len()
            )));
        }
        Ok(GridPayload { dim, n, level, values })
    }

    pub fn constant(dim: u8, n: u32, level: u8, value: f64) -> Result<Self> {
        GridPayload::new(dim, n, level, vec![value; (n as usize).pow(dim as u32)])
    }

    pub fn from_fn(dim: u8, n: u32, level: u8, mut f: impl FnMut([u32; 3]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity((n as usize).pow(dim as u32));
        let nz = if dim == 3 { n } else { 1 };
        for k in 0..nz {
            for j in 0..n {
                for i in 0..n {
                    values.push(f([i, j, k]));
                }
            }
        }
        GridPayload::new(dim, n, level, values)
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    fn index(&self, c: [u32; 3]) -> usize {
        let n = self.n as usize;
        c[0] as usize + n * (c[1] as usize + n * c[2] as usize)
    }

    pub fn value(&self, c: [u32; 3]) -> f64 {
        self.values[self.index(c)]
    }

    /// Volume of one cell for a root block of unit extent.
    pub fn cell_volume(&self) -> f64 {
        let h = 0.5f64.powi(self.level as i32) / self.n as f64;
        h.powi(self.dim as i32)
    }

    /// Σ value · cell volume.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `n (u32), level (u8), n^d little-endian f64`.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::with_capacity(5 + 8 * self.values.len());
        w.u32(self.n).u8(self.level);
        for v in &self.values {
            w.f64(*v);
        }
        w.finish()
    }

    pub fn decode(dim: u8, bytes: &[u8]) -> Result<Self> {
        let mut r = WireReader::new(bytes);
        let n = r.u32()?;
        let level = r.u8()?;
        let cells = (n as usize).pow(dim as u32);
        if r.remaining() != 8 * cells {
            return Err(Error::protocol(format!(
                "grid stream with n = {n} carries {} value bytes",
                r.remaining()
            )));
        }
        let values = (0..cells).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        GridPayload::new(dim, n, level, values)
    }

    /// Coarse cell range along one axis covered by child half `half`.
    fn coarse_range(n: u32, half: u32) -> (u32, u32) {
        let lo = (half * n) / 2;
        let hi = (half * n + n - 1) / 2;
        (lo, hi + 1)
    }

    /// The coarse cells a child needs to build itself by replication.
    fn child_source(&self, digit: u8) -> Vec<f64> {
        let axes: Vec<(u32, u32)> = (0..3)
            .map(|k| {
                if k < self.dim as usize {
                    GridPayload::coarse_range(self.n, (digit as u32 >> k) & 1)
                } else {
                    (0, 1)
                }
            })
            .collect();
        let mut out = Vec::new();
        for k in axes[2].0..axes[2].1 {
            for j in axes[1].0..axes[1].1 {
                for i in axes[0].0..axes[0].1 {
                    out.push(self.value([i, j, k]));
                }
            }
        }
        out
    }

    /// Builds child `digit` from the coarse cells returned by `child_source`.
    fn child_from_source(dim: u8, n: u32, parent_level: u8, digit: u8, src: &[f64]) -> Result<Self> {
        let ranges: Vec<(u32, u32)> = (0..3)
            .map(|k| {
                if k < dim as usize {
                    GridPayload::coarse_range(n, (digit as u32 >> k) & 1)
                } else {
                    (0, 1)
                }
            })
            .collect();
        let w = [ranges[0].1 - ranges[0].0, ranges[1].1 - ranges[1].0];
        let expect = ranges.iter().map(|(a, b)| (b - a) as usize).product::<usize>();
        if src.len() != expect {
            return Err(Error::protocol(format!(
                "split stream for child {digit} carries {} of {expect} values",
                src.len()
            )));
        }
        let half = |k: usize| (digit as u32 >> k) & 1;
        GridPayload::from_fn(dim, n, parent_level + 1, |c| {
            let mut local = [0u32; 3];
            for k in 0..dim as usize {
                let coarse = (half(k) * n + c[k]) / 2;
                local[k] = coarse - ranges[k].0;
            }
            src[(local[0] + w[0] * (local[1] + w[1] * local[2])) as usize]
        })
    }
}

/// Replication split: child cell `(i, j, k)` of child `c` takes the value of
/// the coarse cell covering it. Children are indexed by Morton digit.
pub fn split_payload(coarse: &GridPayload) -> Vec<GridPayload> {
    (0..1u8 << coarse.dim)
        .map(|digit| {
            let src = coarse.child_source(digit);
            GridPayload::child_from_source(coarse.dim, coarse.n, coarse.level, digit, &src)
                .expect("consistent child source")
        })
        .collect()
}

/// Pairwise sum, exact for equal summands.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean merge: every coarse cell is the mean of the `2^d` fine cells it
/// covers. `children` are indexed by Morton digit.
pub fn merge_payloads(children: &[GridPayload]) -> Result<GridPayload> {
    let first = children
        .first()
        .ok_or_else(|| Error::contract("merge needs child payloads"))?;
    let (dim, n, level) = (first.dim, first.n, first.level);
    if children.len() != 1 << dim {
        return Err(Error::contract(format!(
            "merge needs {} children, got {}",
            1 << dim,
            children.len()
        )));
    }
    if level == 0 {
        return Err(Error::contract("level-0 payloads cannot be merged"));
    }
    if children.iter().any(|c| c.dim != dim || c.n != n || c.level != level) {
        return Err(Error::contract("merged children disagree on grid shape or level"));
    }
    let k_axes = dim as usize;
    let mut buf = Vec::with_capacity(1 << dim);
    GridPayload::from_fn(dim, n, level - 1, |c| {
        buf.clear();
        // fine cells covering coarse cell c, in Morton order of the offsets
        for off in 0..1u32 << dim {
            let mut digit = 0u8;
            let mut local = [0u32; 3];
            for k in 0..k_axes {
                let g = 2 * c[k] + ((off >> k) & 1);
                digit |= ((g / n) as u8) << k;
                local[k] = g % n;
            }
            buf.push(children[digit as usize].value(local));
        }
        pairwise_sum(&buf) / (1u32 << dim) as f64
    })
}

/// Data descriptor for [`GridPayload`]: migration and merge streams use the
/// payload wire encoding; a split stream carries only the coarse cells the
/// child covers, so refinement happens on the receiving rank.
#[derive(Clone, Debug)]
pub struct GridDescriptor {
    name: String,
}

impl GridDescriptor {
    pub fn new(name: impl Into<String>) -> Self {
        GridDescriptor { name: name.into() }
    }
}

impl Default for GridDescriptor {
    fn default() -> Self {
        GridDescriptor::new("grid")
    }
}

impl DataDescriptor for GridDescriptor {
    type Item = GridPayload;

    fn name(&self) -> &str {
        &self.name
    }

    fn payload_bytes(&self, item: &GridPayload) -> usize {
        5 + 8 * item.cells()
    }

    fn serialize_for_migration(&self, _: &Domain, _: BlockId, item: &GridPayload) -> Vec<u8> {
        item.encode()
    }

    fn deserialize_after_migration(&self, domain: &Domain, _: BlockId, bytes: &[u8]) -> Result<GridPayload> {
        GridPayload::decode(domain.dim(), bytes)
    }

    fn serialize_for_split(&self, _: &Domain, _: BlockId, item: &GridPayload) -> Vec<Vec<u8>> {
        (0..1u8 << item.dim)
            .map(|digit| {
                let src = item.child_source(digit);
                let mut w = WireWriter::with_capacity(5 + 8 * src.len());
                w.u32(item.n).u8(item.level);
                for v in src {
                    w.f64(v);
                }
                w.finish()
            })
            .collect()
    }

    fn deserialize_child_after_split(&self, domain: &Domain, child: BlockId, bytes: &[u8]) -> Result<GridPayload> {
        let mut r = WireReader::new(bytes);
        let n = r.u32()?;
        let level = r.u8()?;
        let mut src = Vec::with_capacity(r.remaining() / 8);
        while !r.is_empty() {
            src.push(r.f64()?);
        }
        GridPayload::child_from_source(domain.dim(), n, level, domain.child_digit(child), &src)
    }

    fn serialize_for_merge(&self, _: &Domain, _: BlockId, item: &GridPayload) -> Vec<u8> {
        item.encode()
    }

    fn deserialize_after_merge(&self, domain: &Domain, _: BlockId, parts: &[&[u8]]) -> Result<GridPayload> {
        let children = parts
            .iter()
            .map(|p| GridPayload::decode(domain.dim(), p))
            .collect::<Result<Vec<_>>>()?;
        merge_payloads(&children)
    }
}

/// Distribution of one level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelShare {
    pub count: u64,
    /// Fraction of the domain volume covered by this level.
    pub coverage: f64,
    /// Fraction of the workload (cells weighted by 2^level time steps).
    pub workload: f64,
    /// Fraction of blocks, i.e. of memory for equal-sized blocks.
    pub memory: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelStats {
    pub levels: Vec<LevelShare>,
}

/// Coverage, workload and memory shares per level from block counts.
pub fn level_stats(counts: &[u64], dim: u8) -> Result<LevelStats> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::contract("level statistics need at least one block"));
    }
    let volume: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(l, &c)| c as f64 * 0.5f64.powi((dim as usize * l) as i32))
        .collect();
    let work: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(l, &c)| c as f64 * 2f64.powi(l as i32))
        .collect();
    let vsum: f64 = volume.iter().sum();
    let wsum: f64 = work.iter().sum();
    Ok(LevelStats {
        levels: counts
            .iter()
            .enumerate()
            .map(|(l, &c)| LevelShare {
                count: c,
                coverage: volume[l] / vsum,
                workload: work[l] / wsum,
                memory: c as f64 / total as f64,
            })
            .collect(),
    })
}
