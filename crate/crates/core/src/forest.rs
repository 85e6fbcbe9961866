//! The distributed block forest.
//!
//! Every rank owns a set of leaf blocks. A block knows its spatially adjacent
//! neighbors (id, owning rank, adjacency kind) and nothing else about remote
//! blocks; the octree structure is implicit in the ids.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::block_id::BlockId;
use crate::domain::{AdjacencyKind, Domain};
use crate::error::{Error, Result};
use crate::migration::DataRegistry;
use crate::sim::Rank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeighborRecord {
    pub id: BlockId,
    pub rank: Rank,
    pub kind: AdjacencyKind,
}

/// Type-erased per-block data items, indexed by registration handle.
#[derive(Clone, Default)]
pub struct Payloads(Vec<Option<Arc<dyn Any + Send + Sync>>>);

impl Payloads {
    pub fn get<T: Any>(&self, handle: usize) -> Option<&T> {
        self.0.get(handle)?.as_ref()?.downcast_ref::<T>()
    }

    pub fn get_any(&self, handle: usize) -> Option<&Arc<dyn Any + Send + Sync>> {
        self.0.get(handle)?.as_ref()
    }

    pub fn set<T: Any + Send + Sync>(&mut self, handle: usize, value: T) {
        self.set_arc(handle, Arc::new(value));
    }

    pub fn set_arc(&mut self, handle: usize, value: Arc<dyn Any + Send + Sync>) {
        if self.0.len() <= handle {
            self.0.resize(handle + 1, None);
        }
        self.0[handle] = Some(value);
    }

    pub fn take(&mut self, handle: usize) -> Option<Arc<dyn Any + Send + Sync>> {
        self.0.get_mut(handle)?.take()
    }

    /// Number of slots, occupied or not.
    pub fn slots(&self) -> usize {
        self.0.len()
    }

    pub fn is_set(&self, handle: usize) -> bool {
        matches!(self.0.get(handle), Some(Some(_)))
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}

impl fmt::Debug for Payloads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let set: Vec<usize> = (0..self.0.len()).filter(|&h| self.is_set(h)).collect();
        f.debug_tuple("Payloads").field(&set).finish()
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub id: BlockId,
    pub level: u8,
    pub owner: Rank,
    /// Sorted by neighbor id, no duplicates, never the block itself.
    pub neighbors: Vec<NeighborRecord>,
    pub weight: f64,
    pub target_level: u8,
    pub data: Payloads,
}

impl Block {
    pub fn new(domain: &Domain, id: BlockId, owner: Rank) -> Self {
        let level = domain.level(id);
        Block {
            id,
            level,
            owner,
            neighbors: Vec::new(),
            weight: 1.0,
            target_level: level,
            data: Payloads::default(),
        }
    }

    pub fn neighbor_ranks(&self) -> impl Iterator<Item = Rank> + '_ {
        self.neighbors.iter().map(|n| n.rank)
    }
}

/// Lookup structure over a complete leaf set, used to derive neighborhoods
/// geometrically.
pub struct LeafIndex<'a> {
    domain: &'a Domain,
    owners: HashMap<BlockId, Rank>,
}

impl<'a> LeafIndex<'a> {
    pub fn new(domain: &'a Domain, leaves: impl IntoIterator<Item = (BlockId, Rank)>) -> Self {
        LeafIndex {
            domain,
            owners: leaves.into_iter().collect(),
        }
    }

    pub fn owner(&self, id: BlockId) -> Option<Rank> {
        self.owners.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    /// Every leaf adjacent to `id`, or a balance error if some adjacent leaf
    /// is more than one level away.
    pub fn neighbors_of(&self, id: BlockId) -> Result<Vec<NeighborRecord>> {
        let d = self.domain;
        let level = d.level(id);
        let mut found = BTreeSet::new();
        for dir in d.directions() {
            let Some(cell) = d.neighbor_cell(id, dir) else {
                continue;
            };
            if self.owners.contains_key(&cell) {
                found.insert(cell);
                continue;
            }
            // coarser neighbor
            let mut anc = cell;
            let mut hit = None;
            for up in 1..=level {
                anc = d.parent(anc)?;
                if self.owners.contains_key(&anc) {
                    hit = Some((up, anc));
                    break;
                }
            }
            if let Some((up, anc)) = hit {
                if up > 1 {
                    return Err(Error::Balance { a: id, b: anc });
                }
                found.insert(anc);
                continue;
            }
            // finer neighbors: children of the cell that touch `id`
            if level >= d.max_levels() {
                continue;
            }
            for child in d.children(cell)? {
                if d.adjacency(id, child).is_none() {
                    continue;
                }
                if self.owners.contains_key(&child) {
                    found.insert(child);
                } else if let Some(deep) = self.first_leaf_touching(id, child)? {
                    return Err(Error::Balance { a: id, b: deep });
                }
            }
        }
        found.remove(&id);
        let mut out = Vec::with_capacity(found.len());
        for n in found {
            let kind = d
                .adjacency(id, n)
                .ok_or_else(|| Error::Audit(format!("candidate neighbor {n} of {id} does not touch it")))?;
            out.push(NeighborRecord {
                id: n,
                rank: self.owners[&n],
                kind,
            });
        }
        Ok(out)
    }

    fn first_leaf_touching(&self, id: BlockId, region: BlockId) -> Result<Option<BlockId>> {
        let d = self.domain;
        if self.owners.contains_key(&region) {
            return Ok(Some(region));
        }
        if d.level(region) >= d.max_levels() {
            return Ok(None);
        }
        for c in d.children(region)? {
            if d.adjacency(id, c).is_some() {
                if let Some(hit) = self.first_leaf_touching(id, c)? {
                    return Ok(Some(hit));
                }
            }
        }
        Ok(None)
    }
}

/// Checks that `leaves` tile every root block exactly once.
pub fn check_tiling(domain: &Domain, leaves: impl IntoIterator<Item = BlockId>) -> Result<()> {
    let leaves: BTreeSet<BlockId> = leaves.into_iter().collect();
    let d = domain.dim() as u32;
    let ml = domain.max_levels() as u32;
    let mut volume = vec![0u128; domain.num_roots() as usize];
    for &id in &leaves {
        if !domain.is_valid(id) {
            return Err(Error::Audit(format!("{id} is not a valid block id")));
        }
        let level = domain.level(id) as u32;
        volume[domain.root_of(id) as usize] += 1u128 << (d * (ml - level));
        let mut anc = id;
        for _ in 0..level {
            anc = domain.parent(anc)?;
            if leaves.contains(&anc) {
                return Err(Error::Audit(format!("{id} overlaps its ancestor {anc}")));
            }
        }
    }
    let full = 1u128 << (d * ml);
    for (root, v) in volume.iter().enumerate() {
        if *v != full {
            return Err(Error::Audit(format!("root {root} covered {v}/{full} by leaves")));
        }
    }
    Ok(())
}

/// Whether all geometrically adjacent leaves differ by at most one level.
pub fn check_two_to_one(domain: &Domain, leaves: impl IntoIterator<Item = BlockId>) -> bool {
    let index = LeafIndex::new(domain, leaves.into_iter().map(|id| (id, 0)));
    let ids: Vec<BlockId> = index.owners.keys().copied().collect();
    ids.into_iter().all(|id| index.neighbors_of(id).is_ok())
}

#[derive(Clone)]
pub struct BlockForest {
    domain: Domain,
    ranks: Vec<BTreeMap<BlockId, Block>>,
    registry: DataRegistry,
}

impl fmt::Debug for BlockForest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockForest")
            .field("domain", &self.domain)
            .field("ranks", &self.ranks.len())
            .field("blocks", &self.num_blocks())
            .finish()
    }
}

impl BlockForest {
    /// Builds a forest from an ownership assignment of leaves and populates
    /// all neighborhoods.
    pub fn from_leaves(
        domain: Domain,
        num_ranks: usize,
        leaves: impl IntoIterator<Item = (BlockId, Rank)>,
    ) -> Result<Self> {
        let leaves: Vec<(BlockId, Rank)> = leaves.into_iter().collect();
        check_tiling(&domain, leaves.iter().map(|&(id, _)| id))?;
        let mut ranks = vec![BTreeMap::new(); num_ranks];
        for &(id, owner) in &leaves {
            if owner >= num_ranks {
                return Err(Error::Fabric {
                    dest: owner,
                    size: num_ranks,
                });
            }
            ranks[owner].insert(id, Block::new(&domain, id, owner));
        }
        let mut forest = BlockForest {
            domain,
            ranks,
            registry: DataRegistry::default(),
        };
        forest.compute_neighborhood()?;
        Ok(forest)
    }

    /// A uniformly refined forest, distributed in contiguous Morton segments.
    pub fn uniform(domain: Domain, level: u8, num_ranks: usize) -> Result<Self> {
        let leaves = LeafSet::uniform(&domain, level)?;
        let owners = leaves.distribute_along_curve(num_ranks, crate::curve::CurveOrder::Morton);
        BlockForest::from_leaves(domain, num_ranks, owners)
    }

    pub(crate) fn from_parts(domain: Domain, ranks: Vec<BTreeMap<BlockId, Block>>, registry: DataRegistry) -> Self {
        BlockForest {
            domain,
            ranks,
            registry,
        }
    }

    pub(crate) fn into_parts(self) -> (Domain, Vec<BTreeMap<BlockId, Block>>, DataRegistry) {
        (self.domain, self.ranks, self.registry)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn num_ranks(&self) -> usize {
        self.ranks.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.ranks.iter().map(BTreeMap::len).sum()
    }

    pub fn rank_blocks(&self, rank: Rank) -> &BTreeMap<BlockId, Block> {
        &self.ranks[rank]
    }

    pub fn rank_blocks_mut(&mut self, rank: Rank) -> &mut BTreeMap<BlockId, Block> {
        &mut self.ranks[rank]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.ranks.iter().flat_map(BTreeMap::values)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.ranks.iter_mut().flat_map(BTreeMap::values_mut)
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.ranks.iter().find_map(|r| r.get(&id))
    }

    pub fn registry(&self) -> &DataRegistry {
        &self.registry
    }

    pub(crate) fn registry_mut(&mut self) -> &mut DataRegistry {
        &mut self.registry
    }

    /// `(id, owner)` of every block, sorted by id.
    pub fn ownership(&self) -> Vec<(BlockId, Rank)> {
        let mut v: Vec<(BlockId, Rank)> = self.blocks().map(|b| (b.id, b.owner)).collect();
        v.sort();
        v
    }

    pub fn leaf_ids(&self) -> Vec<BlockId> {
        self.ownership().into_iter().map(|(id, _)| id).collect()
    }

    /// Block counts per level (index = level, length = max_levels + 1).
    pub fn level_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.domain.max_levels() as usize + 1];
        for b in self.blocks() {
            counts[b.level as usize] += 1;
        }
        counts
    }

    /// Block counts per level on each rank.
    pub fn level_counts_per_rank(&self) -> Vec<Vec<u64>> {
        self.ranks
            .iter()
            .map(|blocks| {
                let mut counts = vec![0u64; self.domain.max_levels() as usize + 1];
                for b in blocks.values() {
                    counts[b.level as usize] += 1;
                }
                counts
            })
            .collect()
    }

    /// Recomputes every block's neighbor records from the global leaf set.
    pub fn compute_neighborhood(&mut self) -> Result<()> {
        let index = LeafIndex::new(
            &self.domain,
            self.ranks
                .iter()
                .enumerate()
                .flat_map(|(r, blocks)| blocks.keys().map(move |&id| (id, r))),
        );
        for blocks in &mut self.ranks {
            for block in blocks.values_mut() {
                block.neighbors = index.neighbors_of(block.id)?;
            }
        }
        Ok(())
    }

    pub fn check_two_to_one(&self) -> bool {
        check_two_to_one(&self.domain, self.blocks().map(|b| b.id))
    }

    /// Full structural audit: tiling, ownership consistency, neighbor
    /// symmetry with mirrored kinds, and records that match the geometry.
    pub fn validate(&self) -> Result<()> {
        check_tiling(&self.domain, self.blocks().map(|b| b.id))?;
        let owners: HashMap<BlockId, Rank> = self.blocks().map(|b| (b.id, b.owner)).collect();
        for (r, blocks) in self.ranks.iter().enumerate() {
            for b in blocks.values() {
                if b.owner != r {
                    return Err(Error::Audit(format!(
                        "block {} stored on rank {r} claims owner {}",
                        b.id, b.owner
                    )));
                }
                if b.level != self.domain.level(b.id) {
                    return Err(Error::Audit(format!("block {} has wrong level", b.id)));
                }
                let mut last = None;
                for n in &b.neighbors {
                    if n.id == b.id || Some(n.id) <= last {
                        return Err(Error::Audit(format!(
                            "block {} has unsorted, duplicate or self neighbor records",
                            b.id
                        )));
                    }
                    last = Some(n.id);
                    if owners.get(&n.id) != Some(&n.rank) {
                        return Err(Error::Audit(format!(
                            "block {} records neighbor {} on rank {}, actual owner {:?}",
                            b.id,
                            n.id,
                            n.rank,
                            owners.get(&n.id)
                        )));
                    }
                    if self.domain.adjacency(b.id, n.id) != Some(n.kind) {
                        return Err(Error::Audit(format!(
                            "block {} records wrong adjacency for {}",
                            b.id, n.id
                        )));
                    }
                    let other = self.ranks[n.rank].get(&n.id).expect("owner checked");
                    if !other
                        .neighbors
                        .iter()
                        .any(|m| m.id == b.id && m.rank == r && m.kind == n.kind)
                    {
                        return Err(Error::Audit(format!(
                            "neighbor relation {} -> {} is not mirrored",
                            b.id, n.id
                        )));
                    }
                }
            }
        }
        let index = LeafIndex::new(&self.domain, owners.iter().map(|(&k, &v)| (k, v)));
        for b in self.blocks() {
            if index.neighbors_of(b.id)? != b.neighbors {
                return Err(Error::Audit(format!("block {} misses neighbors", b.id)));
            }
        }
        Ok(())
    }

    /// Distinct remote block ids a rank knows about (through neighbor records).
    pub fn remote_records(&self, rank: Rank) -> usize {
        self.ranks[rank]
            .values()
            .flat_map(|b| b.neighbors.iter())
            .filter(|n| n.rank != rank)
            .map(|n| n.id)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Ranks owning at least one block adjacent to a block of `rank`.
    pub fn process_neighbors(&self, rank: Rank) -> BTreeSet<Rank> {
        self.ranks[rank]
            .values()
            .flat_map(|b| b.neighbor_ranks())
            .filter(|&r| r != rank)
            .collect()
    }

    /// Line-oriented text dump, one block per line in id order:
    /// `id_hex level owner weight neighbor_count {nid_hex:rank:kind}*`.
    pub fn dump(&self) -> String {
        let mut blocks: Vec<&Block> = self.blocks().collect();
        blocks.sort_by_key(|b| b.id);
        let mut out = String::new();
        for b in blocks {
            dump_line(&mut out, b.id, b.level, b.owner, b.weight, &b.neighbors, None);
        }
        out
    }
}

pub(crate) fn dump_line(
    out: &mut String,
    id: BlockId,
    level: u8,
    owner: Rank,
    weight: f64,
    neighbors: &[NeighborRecord],
    sources: Option<&[Rank]>,
) {
    let _ = write!(out, "{id} {level} {owner} {weight} {}", neighbors.len());
    for n in neighbors {
        let _ = write!(out, " {}:{}:{}", n.id, n.rank, n.kind.as_str());
    }
    if let Some(sources) = sources {
        let list: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
        let _ = write!(out, " sources=[{}]", list.join(","));
    }
    out.push('\n');
}

/// One parsed line of a forest or proxy dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub id: BlockId,
    pub level: u8,
    pub owner: Rank,
    pub weight: f64,
    pub neighbors: Vec<NeighborRecord>,
    pub sources: Option<Vec<Rank>>,
}

pub fn parse_dump(text: &str) -> Result<Vec<DumpRecord>> {
    let bad = |line: &str| Error::Config(format!("malformed dump line: {line}"));
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let mut next = || it.next().ok_or_else(|| bad(line));
        let id = BlockId::from_raw(u64::from_str_radix(next()?, 16).map_err(|_| bad(line))?);
        let level = next()?.parse().map_err(|_| bad(line))?;
        let owner = next()?.parse().map_err(|_| bad(line))?;
        let weight = next()?.parse().map_err(|_| bad(line))?;
        let count: usize = next()?.parse().map_err(|_| bad(line))?;
        let mut neighbors = Vec::with_capacity(count);
        for _ in 0..count {
            let field = next()?;
            let mut parts = field.split(':');
            let (Some(nid), Some(rank), Some(kind), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(line));
            };
            neighbors.push(NeighborRecord {
                id: BlockId::from_raw(u64::from_str_radix(nid, 16).map_err(|_| bad(line))?),
                rank: rank.parse().map_err(|_| bad(line))?,
                kind: AdjacencyKind::parse(kind).ok_or_else(|| bad(line))?,
            });
        }
        let sources = match it.next() {
            None => None,
            Some(field) => {
                let inner = field
                    .strip_prefix("sources=[")
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| bad(line))?;
                let list = inner
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad(line)))
                    .collect::<Result<Vec<Rank>>>()?;
                Some(list)
            }
        };
        out.push(DumpRecord {
            id,
            level,
            owner,
            weight,
            neighbors,
            sources,
        });
    }
    Ok(out)
}

/// A sequential leaf-set editor used to set up initial partitionings.
#[derive(Clone, Debug)]
pub struct LeafSet {
    domain: Domain,
    leaves: BTreeSet<BlockId>,
}

impl LeafSet {
    pub fn roots(domain: &Domain) -> Self {
        LeafSet {
            domain: domain.clone(),
            leaves: (0..domain.num_roots()).map(|r| domain.root_block(r)).collect(),
        }
    }

    pub fn uniform(domain: &Domain, level: u8) -> Result<Self> {
        let mut set = LeafSet::roots(domain);
        for _ in 0..level {
            let all: Vec<BlockId> = set.leaves.iter().copied().collect();
            for id in all {
                set.split(id)?;
            }
        }
        Ok(set)
    }

    pub fn from_ids(domain: &Domain, ids: impl IntoIterator<Item = BlockId>) -> Result<Self> {
        let leaves: BTreeSet<BlockId> = ids.into_iter().collect();
        check_tiling(domain, leaves.iter().copied())?;
        Ok(LeafSet {
            domain: domain.clone(),
            leaves,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.leaves.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.leaves.contains(&id)
    }

    /// Replaces a leaf by its children (no balancing).
    pub fn split(&mut self, id: BlockId) -> Result<()> {
        if !self.leaves.remove(&id) {
            return Err(Error::Domain(format!("{id} is not a leaf")));
        }
        let kids = match self.domain.children(id) {
            Ok(k) => k,
            Err(e) => {
                self.leaves.insert(id);
                return Err(e);
            }
        };
        self.leaves.extend(kids);
        Ok(())
    }

    /// Splits leaves until every leaf below `level` satisfying `pred` is gone,
    /// then restores 2:1 balance.
    pub fn refine_where(&mut self, level: u8, pred: impl Fn(&Domain, BlockId) -> bool) -> Result<()> {
        loop {
            let todo: Vec<BlockId> = self
                .leaves
                .iter()
                .copied()
                .filter(|&id| self.domain.level(id) < level && pred(&self.domain, id))
                .collect();
            if todo.is_empty() {
                break;
            }
            for id in todo {
                self.split(id)?;
            }
        }
        self.balance()
    }

    /// Splits coarse leaves until every adjacent pair differs by at most one
    /// level (face, edge and corner adjacency).
    pub fn balance(&mut self) -> Result<()> {
        loop {
            let index = LeafIndex::new(&self.domain, self.leaves.iter().map(|&id| (id, 0)));
            let mut offenders = BTreeSet::new();
            for &id in &self.leaves {
                if let Err(Error::Balance { a, b }) = index.neighbors_of(id) {
                    let coarse = if self.domain.level(a) < self.domain.level(b) {
                        a
                    } else {
                        b
                    };
                    offenders.insert(coarse);
                }
            }
            if offenders.is_empty() {
                return Ok(());
            }
            for id in offenders {
                if self.leaves.contains(&id) {
                    self.split(id)?;
                }
            }
        }
    }

    /// Assigns contiguous curve segments of near-equal length to ranks.
    pub fn distribute_along_curve(&self, num_ranks: usize, order: crate::curve::CurveOrder) -> Vec<(BlockId, Rank)> {
        let mut ids: Vec<BlockId> = self.leaves.iter().copied().collect();
        ids.sort_by_key(|&id| self.domain.curve_key(id, order));
        let n = ids.len();
        ids.into_iter()
            .enumerate()
            .map(|(k, id)| (id, k * num_ranks / n.max(1)))
            .collect()
    }
}
