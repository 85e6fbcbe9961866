//! Stage 2: the proxy forest.
//!
//! A proxy block exists for every block of the partitioning that results
//! from applying the target levels. Proxies carry topology only (id,
//! neighbors, weight, a few user bytes) plus links to the actual blocks: an
//! actual block stores the rank of every proxy it turns into (one, or 2^d
//! for a split) and a proxy stores the rank of every actual block it is made
//! from (one, or 2^d for a merge). Load balancing moves proxies around and
//! keeps both link directions intact; the actual data only moves once, in
//! the migration stage.
//!
//! Split children start on the rank of their parent; a merged block starts
//! on the rank of the sibling with the lowest id (child digit 0).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::block_id::BlockId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::forest::{dump_line, Block, BlockForest, NeighborRecord};
use crate::local::LocalForest;
use crate::migration::DataRegistry;
use crate::sim::wire::{WireReader, WireWriter};
use crate::sim::{Comm, Fabric, Metrics, Rank};

/// Largest user payload a proxy block may carry.
pub const PROXY_PAYLOAD_CAP: usize = 64;

/// How a proxy block relates to the actual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProxyOrigin {
    /// Same id as one actual block.
    Kept,
    /// One of the children of a splitting actual block.
    SplitChild,
    /// Parent of 2^d merging actual blocks.
    Merged,
}

impl ProxyOrigin {
    fn code(self) -> u8 {
        match self {
            ProxyOrigin::Kept => 0,
            ProxyOrigin::SplitChild => 1,
            ProxyOrigin::Merged => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ProxyOrigin::Kept),
            1 => Ok(ProxyOrigin::SplitChild),
            2 => Ok(ProxyOrigin::Merged),
            _ => Err(Error::protocol(format!("unknown proxy origin {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBlock {
    pub id: BlockId,
    pub level: u8,
    pub owner: Rank,
    /// Sorted by neighbor id.
    pub neighbors: Vec<NeighborRecord>,
    pub weight: f64,
    /// Ranks holding the actual block(s): one entry, or one per child digit
    /// for a merged block.
    pub sources: Vec<Rank>,
    pub payload: Vec<u8>,
    pub origin: ProxyOrigin,
}

impl ProxyBlock {
    pub fn set_payload(&mut self, bytes: Vec<u8>) -> Result<()> {
        if bytes.len() > PROXY_PAYLOAD_CAP {
            return Err(Error::contract(format!(
                "proxy payload of {} bytes exceeds {PROXY_PAYLOAD_CAP}",
                bytes.len()
            )));
        }
        self.payload = bytes;
        Ok(())
    }

    /// The actual blocks this proxy is made from, with the link slot each
    /// of them uses for this proxy, paired with the rank holding them.
    pub fn actual_links(&self, domain: &Domain) -> Result<Vec<(BlockId, usize, Rank)>> {
        Ok(match self.origin {
            ProxyOrigin::Kept => vec![(self.id, 0, self.sources[0])],
            ProxyOrigin::SplitChild => vec![(
                domain.parent(self.id)?,
                domain.child_digit(self.id) as usize,
                self.sources[0],
            )],
            ProxyOrigin::Merged => domain
                .children(self.id)?
                .into_iter()
                .zip(self.sources.iter())
                .map(|(c, &r)| (c, 0, r))
                .collect(),
        })
    }

    pub(crate) fn encode(&self, w: &mut WireWriter) {
        w.id(self.id).u8(self.origin.code()).f64(self.weight);
        w.u8(self.sources.len() as u8);
        for &s in &self.sources {
            w.rank(s);
        }
        w.u16(self.neighbors.len() as u16);
        for n in &self.neighbors {
            w.id(n.id).rank(n.rank);
        }
        w.u8(self.payload.len() as u8).bytes(&self.payload);
    }

    pub(crate) fn decode(domain: &Domain, owner: Rank, r: &mut WireReader<'_>) -> Result<Self> {
        let id = r.id()?;
        let origin = ProxyOrigin::from_code(r.u8()?)?;
        let weight = r.f64()?;
        let sources = (0..r.u8()?).map(|_| r.rank()).collect::<Result<Vec<_>>>()?;
        let count = r.u16()?;
        let mut neighbors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nid = r.id()?;
            let rank = r.rank()?;
            let kind = domain
                .adjacency(id, nid)
                .ok_or_else(|| Error::protocol(format!("proxy {id} lists non-adjacent neighbor {nid}")))?;
            neighbors.push(NeighborRecord { id: nid, rank, kind });
        }
        let len = r.u8()? as usize;
        let payload = r.take(len)?.to_vec();
        Ok(ProxyBlock {
            id,
            level: domain.level(id),
            owner,
            neighbors,
            weight,
            sources,
            payload,
            origin,
        })
    }

    /// Wire size of one migrated proxy record.
    pub fn record_bytes(&self) -> usize {
        8 + 1 + 8 + 1 + 4 * self.sources.len() + 2 + 12 * self.neighbors.len() + 1 + self.payload.len()
    }
}

/// Target ranks of one actual block: one, or one per child digit if it
/// splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActualLink {
    pub targets: Vec<Rank>,
}

/// The proxy blocks owned by one rank plus the links of the actual blocks
/// stored there.
#[derive(Clone, Debug)]
pub struct ProxyPart {
    pub domain: Domain,
    pub rank: Rank,
    pub proxies: BTreeMap<BlockId, ProxyBlock>,
    pub links: BTreeMap<BlockId, ActualLink>,
}

/// Rank-local weight callback; the default assigns 1 to every proxy.
pub type WeightFn = Arc<dyn Fn(&Domain, &ProxyBlock) -> f64 + Send + Sync>;

impl ProxyPart {
    /// Ranks owning proxies adjacent to a local proxy.
    pub fn process_neighbors(&self) -> BTreeSet<Rank> {
        self.proxies
            .values()
            .flat_map(|p| p.neighbors.iter().map(|n| n.rank))
            .filter(|&r| r != self.rank)
            .collect()
    }

    /// Sum of the weights of local proxies, per level if `per_level`
    /// (index = level) or as a single entry.
    pub fn loads(&self, per_level: bool) -> Vec<f64> {
        let mut out = vec![
            0.0;
            if per_level {
                self.domain.max_levels() as usize + 1
            } else {
                1
            }
        ];
        for p in self.proxies.values() {
            out[if per_level { p.level as usize } else { 0 }] += p.weight;
        }
        out
    }

    /// Evaluates the weight callback on every local proxy.
    pub fn set_weights(&mut self, weight: &dyn Fn(&Domain, &ProxyBlock) -> f64) -> Result<()> {
        for p in self.proxies.values_mut() {
            let w = weight(&self.domain, p);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::contract(format!("weight {w} for proxy {}", p.id)));
            }
            p.weight = w;
        }
        Ok(())
    }
}

/// Payload of the first construction exchange: what happens to a boundary
/// block and, for merges, who owns the merged proxy.
const KEEP: u8 = 0;
const SPLIT: u8 = 1;
const MERGE: u8 = 2;

fn fate(b: &Block) -> u8 {
    if b.target_level > b.level {
        SPLIT
    } else if b.target_level < b.level {
        MERGE
    } else {
        KEEP
    }
}

/// Owner of the proxy that replaces a merging group: the rank of child 0.
fn merge_owner(domain: &Domain, b: &Block) -> Result<Rank> {
    let first = domain.child(domain.parent(b.id)?, 0)?;
    if first == b.id {
        return Ok(b.owner);
    }
    b.neighbors
        .iter()
        .find(|n| n.id == first)
        .map(|n| n.rank)
        .ok_or(Error::Balance { a: b.id, b: first })
}

type MergeCandidates = (BlockId, Vec<(BlockId, Rank)>);

/// Proxies (with initial owners) an actual block turns into.
fn proxies_of(domain: &Domain, id: BlockId, fate: u8, rank: Rank, owner: Rank) -> Result<Vec<(BlockId, Rank)>> {
    Ok(match fate {
        SPLIT => domain.children(id)?.into_iter().map(|c| (c, rank)).collect(),
        MERGE => vec![(domain.parent(id)?, owner)],
        _ => vec![(id, rank)],
    })
}

/// Builds this rank's part of the proxy forest from target levels. Proxy
/// creation and the link setup are rank-local; two neighbor exchanges
/// provide the neighborhoods.
pub async fn build_proxy_local(comm: &mut Comm, local: &LocalForest) -> Result<ProxyPart> {
    let d = &local.domain;
    let rank = local.rank;
    let neighbors = local.process_neighbors();
    let boundary = local.boundary();

    // what every local block turns into
    let mut fates: HashMap<BlockId, (u8, Rank)> = HashMap::new();
    for b in local.blocks.values() {
        let f = fate(b);
        let owner = if f == MERGE { merge_owner(d, b)? } else { rank };
        fates.insert(b.id, (f, owner));
    }
    let payloads: BTreeMap<Rank, Vec<u8>> = boundary
        .iter()
        .map(|(&r, ids)| {
            let mut w = WireWriter::with_capacity(4 + 13 * ids.len());
            w.u32(ids.len() as u32);
            for id in ids {
                let (f, owner) = fates[id];
                w.id(*id).u8(f).rank(owner);
            }
            (r, w.finish())
        })
        .collect();
    let received = comm.neighbor_exchange(&neighbors, payloads).await?;
    for bytes in received.values() {
        let mut r = WireReader::new(bytes);
        for _ in 0..r.u32()? {
            let id = r.id()?;
            let f = r.u8()?;
            let owner = r.rank()?;
            fates.insert(id, (f, owner));
        }
    }

    // candidate neighbor proxies per local actual block
    let remote_rank: HashMap<BlockId, Rank> = local
        .blocks
        .values()
        .flat_map(|b| b.neighbors.iter().map(|n| (n.id, n.rank)))
        .collect();
    let candidates = |b: &Block| -> Result<Vec<(BlockId, Rank)>> {
        let mut out = Vec::new();
        let (f, owner) = fates[&b.id];
        out.extend(proxies_of(d, b.id, f, rank, owner)?);
        for n in &b.neighbors {
            let (nf, nowner) = *fates
                .get(&n.id)
                .ok_or_else(|| Error::protocol(format!("no target information for neighbor {}", n.id)))?;
            out.extend(proxies_of(d, n.id, nf, n.rank, nowner)?);
        }
        Ok(out)
    };

    let mut proxies: BTreeMap<BlockId, ProxyBlock> = BTreeMap::new();
    let mut links: BTreeMap<BlockId, ActualLink> = BTreeMap::new();
    let mut merge_cands: BTreeMap<BlockId, Vec<(BlockId, Rank)>> = BTreeMap::new();
    // per merge owner: the merging blocks with their neighbor candidates
    let mut to_owner: BTreeMap<Rank, Vec<MergeCandidates>> = BTreeMap::new();
    for b in local.blocks.values() {
        let (f, owner) = fates[&b.id];
        match f {
            SPLIT => {
                links.insert(
                    b.id,
                    ActualLink {
                        targets: vec![rank; d.children_per_split()],
                    },
                );
                let cands = candidates(b)?;
                for c in d.children(b.id)? {
                    proxies.insert(c, new_proxy(d, c, rank, vec![rank], ProxyOrigin::SplitChild, &cands)?);
                }
            }
            MERGE => {
                links.insert(b.id, ActualLink { targets: vec![owner] });
                let parent = d.parent(b.id)?;
                let cands = candidates(b)?;
                if owner == rank {
                    merge_cands.entry(parent).or_default().extend(cands);
                } else {
                    to_owner.entry(owner).or_default().push((parent, cands));
                }
            }
            _ => {
                links.insert(b.id, ActualLink { targets: vec![rank] });
                let cands = candidates(b)?;
                proxies.insert(b.id, new_proxy(d, b.id, rank, vec![rank], ProxyOrigin::Kept, &cands)?);
            }
        }
    }

    // siblings on other ranks hand their candidates to the merge owner
    let payloads: BTreeMap<Rank, Vec<u8>> = to_owner
        .into_iter()
        .map(|(r, groups)| {
            let mut w = WireWriter::new();
            w.u32(groups.len() as u32);
            for (parent, cands) in groups {
                w.id(parent).u32(cands.len() as u32);
                for (id, owner) in cands {
                    w.id(id).rank(owner);
                }
            }
            (r, w.finish())
        })
        .collect();
    let received = comm.neighbor_exchange(&neighbors, payloads).await?;
    for bytes in received.values() {
        let mut r = WireReader::new(bytes);
        for _ in 0..r.u32()? {
            let parent = r.id()?;
            let n = r.u32()?;
            let list = merge_cands.entry(parent).or_default();
            for _ in 0..n {
                let id = r.id()?;
                let owner = r.rank()?;
                list.push((id, owner));
            }
        }
    }
    for (parent, cands) in merge_cands {
        let sources = d
            .children(parent)?
            .into_iter()
            .map(|c| {
                if local.blocks.contains_key(&c) {
                    Ok(rank)
                } else {
                    remote_rank
                        .get(&c)
                        .copied()
                        .ok_or_else(|| Error::protocol(format!("merge owner of {parent} does not know child {c}")))
                }
            })
            .collect::<Result<Vec<Rank>>>()?;
        proxies.insert(
            parent,
            new_proxy(d, parent, rank, sources, ProxyOrigin::Merged, &cands)?,
        );
    }
    Ok(ProxyPart {
        domain: d.clone(),
        rank,
        proxies,
        links,
    })
}

fn new_proxy(
    d: &Domain,
    id: BlockId,
    owner: Rank,
    sources: Vec<Rank>,
    origin: ProxyOrigin,
    cands: &[(BlockId, Rank)],
) -> Result<ProxyBlock> {
    let level = d.level(id);
    let mut seen = BTreeMap::new();
    for &(c, r) in cands {
        if c == id {
            continue;
        }
        if let Some(kind) = d.adjacency(id, c) {
            if d.level(c).abs_diff(level) > 1 {
                return Err(Error::Balance { a: id, b: c });
            }
            seen.insert(c, NeighborRecord { id: c, rank: r, kind });
        }
    }
    Ok(ProxyBlock {
        id,
        level,
        owner,
        neighbors: seen.into_values().collect(),
        weight: 1.0,
        sources,
        payload: Vec::new(),
        origin,
    })
}

/// Per-rank accounting of one proxy migration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProxyMigrationStats {
    pub sent: usize,
    pub received: usize,
    /// Bytes of the proxy records sent.
    pub record_bytes: usize,
    /// Link updates sent to (remote) source ranks.
    pub link_updates: usize,
}

const TAG_PROXIES: u8 = 0;
const TAG_LINKS: u8 = 1;

/// Moves proxies to their target ranks. Ranks owning adjacent proxies
/// learn the new owners over process-graph edges; proxy records and link
/// updates for the actual blocks travel as pair messages. `expected` is the
/// set of ranks this rank was told to receive proxies from.
pub async fn migrate_proxies(
    comm: &mut Comm,
    part: &mut ProxyPart,
    targets: &BTreeMap<BlockId, Rank>,
    expected: &BTreeSet<Rank>,
) -> Result<ProxyMigrationStats> {
    let rank = part.rank;
    let d = part.domain.clone();
    let mut stats = ProxyMigrationStats::default();
    let moving: BTreeMap<BlockId, Rank> = targets
        .iter()
        .filter(|(id, &r)| r != rank && part.proxies.contains_key(id))
        .map(|(&id, &r)| (id, r))
        .collect();
    for (id, &r) in targets {
        if !part.proxies.contains_key(id) {
            return Err(Error::contract(format!("rank {rank} assigns unknown proxy {id}")));
        }
        if r >= comm.size() {
            return Err(Error::Fabric {
                dest: r,
                size: comm.size(),
            });
        }
    }

    // 1. tell neighbor owners about the new owners
    let neighbors = part.process_neighbors();
    let mut updates: BTreeMap<Rank, Vec<(BlockId, Rank)>> = BTreeMap::new();
    for (&id, &to) in &moving {
        let ranks: BTreeSet<Rank> = part.proxies[&id]
            .neighbors
            .iter()
            .map(|n| n.rank)
            .filter(|&r| r != rank)
            .collect();
        for r in ranks {
            updates.entry(r).or_default().push((id, to));
        }
    }
    let payloads = updates
        .into_iter()
        .map(|(r, list)| {
            let mut w = WireWriter::with_capacity(4 + 12 * list.len());
            w.u32(list.len() as u32);
            for (id, to) in list {
                w.id(id).rank(to);
            }
            (r, w.finish())
        })
        .collect();
    let received = comm.neighbor_exchange(&neighbors, payloads).await?;
    let mut new_owner: HashMap<BlockId, Rank> = moving.iter().map(|(&k, &v)| (k, v)).collect();
    for bytes in received.values() {
        let mut r = WireReader::new(bytes);
        for _ in 0..r.u32()? {
            let id = r.id()?;
            let to = r.rank()?;
            new_owner.insert(id, to);
        }
    }
    for p in part.proxies.values_mut() {
        for n in &mut p.neighbors {
            if let Some(&to) = new_owner.get(&n.id) {
                n.rank = to;
            }
        }
    }

    // 2. ship proxies and repoint the actual blocks' links
    let mut records: BTreeMap<Rank, Vec<ProxyBlock>> = BTreeMap::new();
    let mut link_updates: BTreeMap<Rank, Vec<(BlockId, usize, Rank)>> = BTreeMap::new();
    for (&id, &to) in &moving {
        let p = part.proxies.remove(&id).expect("moving proxy is local");
        for (actual, slot, src) in p.actual_links(&d)? {
            link_updates.entry(src).or_default().push((actual, slot, to));
        }
        records.entry(to).or_default().push(p);
    }
    if let Some(local) = link_updates.remove(&rank) {
        for (actual, slot, to) in local {
            apply_link(part, actual, slot, to)?;
        }
    }
    for (to, list) in records {
        let mut w = WireWriter::new();
        w.u8(TAG_PROXIES).u32(list.len() as u32);
        for p in &list {
            stats.sent += 1;
            stats.record_bytes += p.record_bytes();
            p.encode(&mut w);
        }
        comm.send(to, w.finish())?;
    }
    for (to, list) in link_updates {
        let mut w = WireWriter::with_capacity(5 + 16 * list.len());
        w.u8(TAG_LINKS).u32(list.len() as u32);
        for (actual, slot, r) in list {
            stats.link_updates += 1;
            w.id(actual).u8(slot as u8).rank(r);
        }
        comm.send(to, w.finish())?;
    }
    comm.sync().await;
    let mut senders = BTreeSet::new();
    for (src, bytes) in comm.take_pairs() {
        let mut r = WireReader::new(&bytes);
        match r.u8()? {
            TAG_PROXIES => {
                senders.insert(src);
                for _ in 0..r.u32()? {
                    let p = ProxyBlock::decode(&d, rank, &mut r)?;
                    stats.received += 1;
                    if part.proxies.insert(p.id, p).is_some() {
                        return Err(Error::protocol(format!("rank {rank} received a proxy it owns")));
                    }
                }
            }
            TAG_LINKS => {
                for _ in 0..r.u32()? {
                    let actual = r.id()?;
                    let slot = r.u8()? as usize;
                    let to = r.rank()?;
                    apply_link(part, actual, slot, to)?;
                }
            }
            t => return Err(Error::protocol(format!("unknown proxy message tag {t}"))),
        }
    }
    let mut want = expected.clone();
    want.remove(&rank);
    if senders != want {
        return Err(Error::protocol(format!(
            "rank {rank} expected proxies from {want:?}, received from {senders:?}"
        )));
    }
    for p in part.proxies.values_mut() {
        p.owner = rank;
    }
    Ok(stats)
}

fn apply_link(part: &mut ProxyPart, actual: BlockId, slot: usize, to: Rank) -> Result<()> {
    let link = part
        .links
        .get_mut(&actual)
        .ok_or_else(|| Error::protocol(format!("rank {} has no actual block {actual}", part.rank)))?;
    let t = link
        .targets
        .get_mut(slot)
        .ok_or_else(|| Error::protocol(format!("actual block {actual} has no link slot {slot}")))?;
    *t = to;
    Ok(())
}

/// Global view of all proxy parts, used for audits, statistics and dumps.
#[derive(Clone, Debug)]
pub struct ProxyForest {
    pub domain: Domain,
    pub parts: Vec<ProxyPart>,
}

impl ProxyForest {
    pub fn new(parts: Vec<ProxyPart>) -> Result<Self> {
        let domain = parts
            .first()
            .map(|p| p.domain.clone())
            .ok_or_else(|| Error::contract("a proxy forest needs at least one rank"))?;
        Ok(ProxyForest { domain, parts })
    }

    pub fn num_ranks(&self) -> usize {
        self.parts.len()
    }

    pub fn proxies(&self) -> impl Iterator<Item = &ProxyBlock> {
        self.parts.iter().flat_map(|p| p.proxies.values())
    }

    pub fn proxy(&self, id: BlockId) -> Option<&ProxyBlock> {
        self.parts.iter().find_map(|p| p.proxies.get(&id))
    }

    pub fn ownership(&self) -> Vec<(BlockId, Rank)> {
        let mut v: Vec<(BlockId, Rank)> = self.proxies().map(|p| (p.id, p.owner)).collect();
        v.sort();
        v
    }

    /// Per-rank block counts per level.
    pub fn level_counts_per_rank(&self) -> Vec<Vec<u64>> {
        self.parts
            .iter()
            .map(|part| {
                let mut c = vec![0u64; self.domain.max_levels() as usize + 1];
                for p in part.proxies.values() {
                    c[p.level as usize] += 1;
                }
                c
            })
            .collect()
    }

    /// The proxy topology as a block forest (no data), e.g. for structural
    /// validation.
    pub fn to_forest(&self) -> BlockForest {
        let ranks = self
            .parts
            .iter()
            .map(|part| {
                part.proxies
                    .values()
                    .map(|p| {
                        let mut b = Block::new(&self.domain, p.id, p.owner);
                        b.neighbors = p.neighbors.clone();
                        b.weight = p.weight;
                        (p.id, b)
                    })
                    .collect()
            })
            .collect();
        BlockForest::from_parts(self.domain.clone(), ranks, DataRegistry::default())
    }

    /// Tiling, 2:1 balance, neighbor symmetry and owner consistency.
    pub fn validate(&self) -> Result<()> {
        for (r, part) in self.parts.iter().enumerate() {
            if part.rank != r || part.proxies.values().any(|p| p.owner != r) {
                return Err(Error::Audit(format!("proxy part {r} has inconsistent owners")));
            }
        }
        self.to_forest().validate()
    }

    /// Checks both link directions against the actual forest: every actual
    /// block's targets name the owners of its proxies, and every proxy's
    /// sources name the owners of its actual blocks.
    pub fn audit_links(&self, actual: &BlockForest) -> Result<()> {
        let d = &self.domain;
        let owner: HashMap<BlockId, Rank> = self.proxies().map(|p| (p.id, p.owner)).collect();
        for (r, part) in self.parts.iter().enumerate() {
            let local = actual.rank_blocks(r);
            let linked: BTreeSet<&BlockId> = part.links.keys().collect();
            if linked != local.keys().collect::<BTreeSet<_>>() {
                return Err(Error::Audit(format!("rank {r}: links do not match actual blocks")));
            }
            for (&id, link) in &part.links {
                let b = &local[&id];
                let expect: Vec<(BlockId, Rank)> = if b.target_level > b.level {
                    d.children(id)?.into_iter().zip(link.targets.iter().copied()).collect()
                } else if b.target_level < b.level {
                    vec![(d.parent(id)?, link.targets[0])]
                } else {
                    vec![(id, link.targets[0])]
                };
                if b.target_level > b.level && link.targets.len() != d.children_per_split() {
                    return Err(Error::Audit(format!(
                        "split block {id} has {} targets",
                        link.targets.len()
                    )));
                }
                for (pid, t) in expect {
                    if owner.get(&pid) != Some(&t) {
                        return Err(Error::Audit(format!(
                            "actual {id} targets rank {t} for proxy {pid}, owner is {:?}",
                            owner.get(&pid)
                        )));
                    }
                }
            }
        }
        for p in self.proxies() {
            let want = if p.origin == ProxyOrigin::Merged {
                d.children_per_split()
            } else {
                1
            };
            if p.sources.len() != want {
                return Err(Error::Audit(format!("proxy {} has {} sources", p.id, p.sources.len())));
            }
            for (aid, _, src) in p.actual_links(d)? {
                if actual.rank_blocks(src).get(&aid).is_none() {
                    return Err(Error::Audit(format!(
                        "proxy {} names rank {src} as source of {aid}",
                        p.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forest dump lines plus `sources=[..]`.
    pub fn dump(&self) -> String {
        let mut all: Vec<&ProxyBlock> = self.proxies().collect();
        all.sort_by_key(|p| p.id);
        let mut out = String::new();
        for p in all {
            dump_line(
                &mut out,
                p.id,
                p.level,
                p.owner,
                p.weight,
                &p.neighbors,
                Some(&p.sources),
            );
        }
        out
    }
}

/// Builds the proxy forest of a forest whose blocks carry final target
/// levels.
pub fn build_proxy(forest: &BlockForest, fabric: &Fabric) -> Result<(ProxyForest, Metrics)> {
    let out = fabric.run_each(forest.locals(), |mut comm, local| async move {
        comm.set_stage("proxy");
        build_proxy_local(&mut comm, &local).await
    })?;
    Ok((ProxyForest::new(out.results)?, out.metrics))
}

/// Evaluates `weight` on every proxy (rank-locally).
pub fn set_proxy_weights(proxy: &mut ProxyForest, weight: &WeightFn) -> Result<()> {
    for part in &mut proxy.parts {
        part.set_weights(&**weight)?;
    }
    Ok(())
}

/// Weight callback returning 1 for every proxy.
pub fn unit_weight() -> WeightFn {
    Arc::new(|_, _| 1.0)
}

/// Weight callback modelling level subcycling: `2^level`.
pub fn level_weight() -> WeightFn {
    Arc::new(|_, p| 2f64.powi(p.level as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::CurveOrder;
    use crate::forest::LeafSet;

    fn d2(roots: [u32; 3], ml: u8) -> Domain {
        Domain::new(2, roots, ml).unwrap()
    }

    fn with_targets(mut forest: BlockForest, f: impl Fn(&Domain, BlockId) -> u8) -> BlockForest {
        let d = forest.domain().clone();
        for b in forest.blocks_mut() {
            b.target_level = f(&d, b.id);
        }
        forest
    }

    #[test]
    fn identity_targets_mirror_the_forest() {
        let forest = BlockForest::uniform(d2([2, 2, 1], 3), 1, 4).unwrap();
        let (proxy, metrics) = build_proxy(&forest, &Fabric::new(4)).unwrap();
        proxy.validate().unwrap();
        proxy.audit_links(&forest).unwrap();
        assert_eq!(proxy.ownership(), forest.ownership());
        for p in proxy.proxies() {
            assert_eq!(p.sources, vec![p.owner]);
            assert_eq!(p.neighbors, forest.block(p.id).unwrap().neighbors);
            assert_eq!(p.weight, 1.0);
        }
        // only the two connectivity rounds communicate
        for r in 0..4 {
            let n = forest.process_neighbors(r).len() as u64;
            assert_eq!(metrics.rank_stage(r, "proxy").p2p_msgs, n);
        }
        assert_eq!(metrics.total().collectives, 0);
    }

    #[test]
    fn split_children_stay_with_their_parent() {
        let domain = d2([2, 1, 1], 3);
        let forest = BlockForest::uniform(domain.clone(), 0, 2).unwrap();
        let split = domain.root_block(0);
        let forest = with_targets(forest, |d, id| d.level(id) + (id == split) as u8);
        let (proxy, _) = build_proxy(&forest, &Fabric::new(2)).unwrap();
        proxy.validate().unwrap();
        proxy.audit_links(&forest).unwrap();
        let kids = domain.children(split).unwrap();
        for c in &kids {
            let p = proxy.proxy(*c).unwrap();
            assert_eq!((p.owner, p.origin), (0, ProxyOrigin::SplitChild));
            assert_eq!(p.sources, vec![0]);
        }
        assert_eq!(proxy.parts[0].links[&split].targets, vec![0; 4]);
    }

    #[test]
    fn merge_from_two_ranks() {
        let domain = d2([1, 1, 1], 3);
        let set = LeafSet::uniform(&domain, 1).unwrap();
        // children 0, 1 on rank 0 and 2, 3 on rank 1
        let owners = set.distribute_along_curve(2, CurveOrder::Morton);
        let forest = BlockForest::from_leaves(domain.clone(), 2, owners).unwrap();
        let forest = with_targets(forest, |_, _| 0);
        let (proxy, _) = build_proxy(&forest, &Fabric::new(2)).unwrap();
        proxy.validate().unwrap();
        proxy.audit_links(&forest).unwrap();
        let root = domain.root_block(0);
        let p = proxy.proxy(root).unwrap();
        assert_eq!(p.origin, ProxyOrigin::Merged);
        assert_eq!(p.sources, vec![0, 0, 1, 1]);
        assert_eq!(p.owner, 0);
        assert_eq!(proxy.parts[1].links[&domain.child(root, 2).unwrap()].targets, vec![0]);
    }

    #[test]
    fn merged_proxy_collects_neighbors_from_remote_siblings() {
        // root 0 coarsens; its children live on three ranks, and a neighbor
        // of child 3 lives on a rank the merge owner never talks to directly
        let domain = d2([2, 1, 1], 2);
        let set = LeafSet::uniform(&domain, 1).unwrap();
        let leaves: Vec<BlockId> = set.ids().collect();
        let owners: Vec<(BlockId, Rank)> = leaves
            .iter()
            .map(|&id| {
                let r = if domain.root_of(id) == 0 {
                    [0, 1, 0, 2][domain.decode(id).1[0] as usize]
                } else {
                    3
                };
                (id, r)
            })
            .collect();
        let forest = BlockForest::from_leaves(domain.clone(), 4, owners).unwrap();
        let forest = with_targets(forest, |d, id| if d.root_of(id) == 0 { 0 } else { d.level(id) });
        let (proxy, _) = build_proxy(&forest, &Fabric::new(4)).unwrap();
        proxy.validate().unwrap();
        proxy.audit_links(&forest).unwrap();
        assert_eq!(proxy.proxy(domain.root_block(0)).unwrap().sources, vec![0, 1, 0, 2]);
    }

    #[test]
    fn unbalanced_targets_are_rejected() {
        let domain = d2([2, 1, 1], 3);
        let mut set = LeafSet::roots(&domain);
        set.split(domain.root_block(1)).unwrap();
        let owners = set.distribute_along_curve(1, CurveOrder::Morton);
        let forest = BlockForest::from_leaves(domain.clone(), 1, owners).unwrap();
        let left = domain.make_block_id(1, &[0]).unwrap();
        let forest = with_targets(forest, |d, id| d.level(id) + (id == left) as u8);
        let err = build_proxy(&forest, &Fabric::new(1)).unwrap_err();
        assert!(matches!(err.root(), Error::Balance { .. }), "{err}");
    }

    #[test]
    fn weights_and_payload_limits() {
        let forest = BlockForest::uniform(d2([1, 1, 1], 3), 3, 1).unwrap();
        let (mut proxy, _) = build_proxy(&forest, &Fabric::new(1)).unwrap();
        set_proxy_weights(&mut proxy, &level_weight()).unwrap();
        assert!(proxy.proxies().all(|p| p.weight == 8.0));
        let cells: WeightFn = Arc::new(|_, p| p.payload.first().copied().unwrap_or(0) as f64);
        let part = &mut proxy.parts[0];
        for p in part.proxies.values_mut() {
            p.set_payload(vec![16]).unwrap();
        }
        part.set_weights(&*cells).unwrap();
        assert!(part.proxies.values().all(|p| p.weight == 16.0));
        let negative: WeightFn = Arc::new(|_, _| -1.0);
        assert!(set_proxy_weights(&mut proxy, &negative).is_err());
        let p = proxy.parts[0].proxies.values_mut().next().unwrap();
        assert!(p.set_payload(vec![0; 65]).is_err());
    }

    #[test]
    fn record_round_trip() {
        let forest = BlockForest::uniform(d2([2, 2, 1], 3), 1, 2).unwrap();
        let (proxy, _) = build_proxy(&forest, &Fabric::new(2)).unwrap();
        let mut p = proxy.proxies().next().unwrap().clone();
        p.set_payload(vec![1, 2, 3]).unwrap();
        p.weight = 2.5;
        let mut w = WireWriter::new();
        p.encode(&mut w);
        let bytes = w.finish();
        assert_eq!(bytes.len(), p.record_bytes());
        let back = ProxyBlock::decode(&proxy.domain, p.owner, &mut WireReader::new(&bytes)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn dump_carries_sources() {
        let forest = BlockForest::uniform(d2([1, 1, 1], 3), 1, 2).unwrap();
        let forest = with_targets(forest, |_, _| 0);
        let (proxy, _) = build_proxy(&forest, &Fabric::new(2)).unwrap();
        let text = proxy.dump();
        let recs = crate::forest::parse_dump(&text).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].sources, Some(vec![0, 0, 1, 1]));
    }

    #[test]
    fn migration_keeps_links_intact() {
        let domain = d2([2, 2, 1], 3);
        let forest = BlockForest::uniform(domain.clone(), 1, 4).unwrap();
        let split = forest.leaf_ids()[0];
        let forest = with_targets(forest, |d, id| d.level(id) + (id == split) as u8);
        let fabric = Fabric::new(4);
        let (proxy, _) = build_proxy(&forest, &fabric).unwrap();
        // rank 0 sends two of the split children to rank 1, rank 3 sends
        // everything to rank 2
        let kids = domain.children(split).unwrap();
        let plan: Vec<BTreeMap<BlockId, Rank>> = proxy
            .parts
            .iter()
            .map(|part| {
                part.proxies
                    .keys()
                    .filter_map(|&id| match part.rank {
                        0 if id == kids[1] || id == kids[3] => Some((id, 1)),
                        3 => Some((id, 2)),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        let expected: Vec<BTreeSet<Rank>> = vec![
            BTreeSet::new(),
            BTreeSet::from([0]),
            BTreeSet::from([3]),
            BTreeSet::new(),
        ];
        let states: Vec<_> = proxy.parts.clone().into_iter().zip(plan).zip(expected).collect();
        let out = fabric
            .run_each(states, |mut comm, ((mut part, plan), exp)| async move {
                let stats = migrate_proxies(&mut comm, &mut part, &plan, &exp).await?;
                Ok((part, stats))
            })
            .unwrap();
        let stats: Vec<ProxyMigrationStats> = out.results.iter().map(|(_, s)| *s).collect();
        let moved = ProxyForest::new(out.results.into_iter().map(|(p, _)| p).collect()).unwrap();
        moved.validate().unwrap();
        moved.audit_links(&forest).unwrap();
        assert_eq!(moved.proxy(kids[1]).unwrap().owner, 1);
        assert!(moved.parts[3].proxies.is_empty());
        assert_eq!(stats[0].sent, 2);
        // only ids, sources, neighbor ids (+ ranks), weight and payload
        for p in moved.proxies().filter(|p| p.owner != 0 || p.id == kids[0]) {
            assert!(p.record_bytes() <= 8 + 1 + 8 + 1 + 4 * 4 + 2 + 12 * p.neighbors.len() + 1 + PROXY_PAYLOAD_CAP);
        }
    }

    #[test]
    fn unexpected_senders_are_a_protocol_error() {
        let forest = BlockForest::uniform(d2([2, 1, 1], 3), 0, 2).unwrap();
        let fabric = Fabric::new(2);
        let (proxy, _) = build_proxy(&forest, &fabric).unwrap();
        let root0 = forest.domain().root_block(0);
        let err = fabric
            .run_each(proxy.parts, move |mut comm, mut part| async move {
                let plan = if part.rank == 0 {
                    BTreeMap::from([(root0, 1)])
                } else {
                    BTreeMap::new()
                };
                migrate_proxies(&mut comm, &mut part, &plan, &BTreeSet::new()).await
            })
            .unwrap_err();
        assert!(matches!(err.root(), Error::Protocol(_)), "{err}");
    }
}
