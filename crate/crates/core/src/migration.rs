//! Data registration and the final pipeline stage: refinement, coarsening
//! and migration of block data in one step, driven by the links between
//! actual blocks and the balanced proxy forest.
//!
//! Every block data item is handled through six callbacks. A block that
//! keeps its level and owner is left untouched; everything else is
//! serialized on the source rank and deserialized on the target rank, even
//! if both are the same. Refined data is only ever materialized on the
//! target rank: the source sends one byte stream per child.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::marker::PhantomData;
use std::sync::Arc;

use crate::block_id::BlockId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::forest::{Block, BlockForest};
use crate::local::LocalForest;
use crate::proxy::{ProxyForest, ProxyOrigin, ProxyPart};
use crate::sim::wire::{WireReader, WireWriter};
use crate::sim::{Comm, Fabric, Metrics, Rank};

pub(crate) type AnyItem = Arc<dyn Any + Send + Sync>;

/// The six serialization callbacks of one block data item.
pub trait DataDescriptor: Send + Sync + 'static {
    type Item: Send + Sync + 'static;

    /// Unique name of the data slot.
    fn name(&self) -> &str;

    /// Bytes the item occupies, used for memory accounting.
    fn payload_bytes(&self, item: &Self::Item) -> usize;

    fn serialize_for_migration(&self, domain: &Domain, id: BlockId, item: &Self::Item) -> Vec<u8>;

    fn deserialize_after_migration(&self, domain: &Domain, id: BlockId, bytes: &[u8]) -> Result<Self::Item>;

    /// One byte stream per child, indexed by child digit.
    fn serialize_for_split(&self, domain: &Domain, id: BlockId, item: &Self::Item) -> Vec<Vec<u8>>;

    fn deserialize_child_after_split(&self, domain: &Domain, child: BlockId, bytes: &[u8]) -> Result<Self::Item>;

    /// The contribution of one sibling to its merged parent.
    fn serialize_for_merge(&self, domain: &Domain, id: BlockId, item: &Self::Item) -> Vec<u8>;

    /// Builds the parent from all contributions, indexed by child digit.
    fn deserialize_after_merge(&self, domain: &Domain, parent: BlockId, parts: &[&[u8]]) -> Result<Self::Item>;
}

/// Typed handle to a registered data slot.
pub struct DataHandle<T> {
    index: usize,
    _item: PhantomData<fn() -> T>,
}

impl<T> DataHandle<T> {
    pub fn index(&self) -> usize {
        self.index
    }
}

impl<T> Clone for DataHandle<T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for DataHandle<T> {}

impl<T> fmt::Debug for DataHandle<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataHandle({})", self.index)
    }
}

impl<T> PartialEq for DataHandle<T> {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index
    }
}

trait ErasedDescriptor: Send + Sync {
    fn name(&self) -> &str;
    fn payload_bytes(&self, item: &AnyItem) -> Result<usize>;
    fn ser_migrate(&self, d: &Domain, id: BlockId, item: &AnyItem) -> Result<Vec<u8>>;
    fn de_migrate(&self, d: &Domain, id: BlockId, bytes: &[u8]) -> Result<AnyItem>;
    fn ser_split(&self, d: &Domain, id: BlockId, item: &AnyItem) -> Result<Vec<Vec<u8>>>;
    fn de_split(&self, d: &Domain, child: BlockId, bytes: &[u8]) -> Result<AnyItem>;
    fn ser_merge(&self, d: &Domain, id: BlockId, item: &AnyItem) -> Result<Vec<u8>>;
    fn de_merge(&self, d: &Domain, parent: BlockId, parts: &[&[u8]]) -> Result<AnyItem>;
}

struct Typed<D>(D);

impl<D: DataDescriptor> Typed<D> {
    fn cast<'a>(&self, item: &'a AnyItem) -> Result<&'a D::Item> {
        item.downcast_ref::<D::Item>()
            .ok_or_else(|| Error::contract(format!("data slot '{}' holds a value of the wrong type", self.0.name())))
    }
}

impl<D: DataDescriptor> ErasedDescriptor for Typed<D> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn payload_bytes(&self, item: &AnyItem) -> Result<usize> {
        Ok(self.0.payload_bytes(self.cast(item)?))
    }

    fn ser_migrate(&self, d: &Domain, id: BlockId, item: &AnyItem) -> Result<Vec<u8>> {
        Ok(self.0.serialize_for_migration(d, id, self.cast(item)?))
    }

    fn de_migrate(&self, d: &Domain, id: BlockId, bytes: &[u8]) -> Result<AnyItem> {
        Ok(Arc::new(self.0.deserialize_after_migration(d, id, bytes)?))
    }

    fn ser_split(&self, d: &Domain, id: BlockId, item: &AnyItem) -> Result<Vec<Vec<u8>>> {
        let streams = self.0.serialize_for_split(d, id, self.cast(item)?);
        if streams.len() != d.children_per_split() {
            return Err(Error::contract(format!(
                "split callback of '{}' produced {} streams",
                self.0.name(),
                streams.len()
            )));
        }
        Ok(streams)
    }

    fn de_split(&self, d: &Domain, child: BlockId, bytes: &[u8]) -> Result<AnyItem> {
        Ok(Arc::new(self.0.deserialize_child_after_split(d, child, bytes)?))
    }

    fn ser_merge(&self, d: &Domain, id: BlockId, item: &AnyItem) -> Result<Vec<u8>> {
        Ok(self.0.serialize_for_merge(d, id, self.cast(item)?))
    }

    fn de_merge(&self, d: &Domain, parent: BlockId, parts: &[&[u8]]) -> Result<AnyItem> {
        Ok(Arc::new(self.0.deserialize_after_merge(d, parent, parts)?))
    }
}

/// The registered data slots of a forest.
#[derive(Clone, Default)]
pub struct DataRegistry {
    slots: Vec<Arc<dyn ErasedDescriptor>>,
}

impl fmt::Debug for DataRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.slots.iter().map(|s| s.name())).finish()
    }
}

impl DataRegistry {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.name()).collect()
    }

    pub fn register<D: DataDescriptor>(&mut self, descriptor: D) -> Result<DataHandle<D::Item>> {
        if self.slots.iter().any(|s| s.name() == descriptor.name()) {
            return Err(Error::contract(format!(
                "data slot '{}' is already registered",
                descriptor.name()
            )));
        }
        self.slots.push(Arc::new(Typed(descriptor)));
        Ok(DataHandle {
            index: self.slots.len() - 1,
            _item: PhantomData,
        })
    }

    /// Rejects blocks carrying data in slots nobody registered.
    fn check_block(&self, block: &Block) -> Result<()> {
        for h in self.slots.len()..block.data.slots() {
            if block.data.is_set(h) {
                return Err(Error::contract(format!(
                    "block {} carries data in unregistered slot {h}",
                    block.id
                )));
            }
        }
        Ok(())
    }

    fn block_bytes(&self, block: &Block) -> Result<usize> {
        let mut total = 0;
        for (h, slot) in self.slots.iter().enumerate() {
            if let Some(item) = block.data.get_any(h) {
                total += slot.payload_bytes(item)?;
            }
        }
        Ok(total)
    }
}

impl BlockForest {
    /// Binds a data slot; all later migrations route through its callbacks.
    pub fn register_data<D: DataDescriptor>(&mut self, descriptor: D) -> Result<DataHandle<D::Item>> {
        self.registry_mut().register(descriptor)
    }
}

impl Block {
    pub fn data_of<T: Any>(&self, handle: DataHandle<T>) -> Option<&T> {
        self.data.get::<T>(handle.index)
    }

    pub fn set_data<T: Any + Send + Sync>(&mut self, handle: DataHandle<T>, value: T) {
        self.data.set(handle.index, value);
    }
}

/// High-water-mark accounting of payload bytes held by one rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct MemoryMeter {
    live: usize,
    peak: usize,
}

impl MemoryMeter {
    fn alloc(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, n: usize) {
        self.live -= n;
    }
}

/// Per-rank payload accounting of one migration stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MigrationStats {
    /// Payload bytes held before the stage.
    pub pre_local: usize,
    /// Payload bytes held after the stage.
    pub post_local: usize,
    /// Serialized bytes received from other ranks.
    pub incoming: usize,
    /// Serialized bytes sent to other ranks.
    pub outgoing: usize,
    /// Largest set of streams produced from a single block.
    pub largest_block_streams: usize,
    /// High-water mark of payload plus buffered stream bytes.
    pub peak: usize,
    pub blocks_sent: usize,
    pub blocks_serialized: usize,
}

const KIND_MIGRATE: u8 = 0;
const KIND_SPLIT_CHILD: u8 = 1;
const KIND_MERGE_PART: u8 = 2;

/// One serialized block record: header plus one stream per data slot.
struct Record {
    id: BlockId,
    kind: u8,
    part: u8,
    streams: Vec<(u32, Vec<u8>)>,
}

impl Record {
    fn bytes(&self) -> usize {
        self.streams.iter().map(|(_, s)| s.len()).sum()
    }

    fn encode(&self, w: &mut WireWriter) {
        w.id(self.id).u8(self.kind).u8(self.part);
        w.u32(self.streams.len() as u32);
        for (h, s) in &self.streams {
            w.u32(*h).u32(s.len() as u32).bytes(s);
        }
    }

    fn decode(r: &mut WireReader<'_>) -> Result<Record> {
        let id = r.id()?;
        let kind = r.u8()?;
        let part = r.u8()?;
        let n = r.u32()? as usize;
        let mut streams = Vec::with_capacity(n);
        for _ in 0..n {
            let h = r.u32()?;
            let len = r.u32()? as usize;
            streams.push((h, r.take(len)?.to_vec()));
        }
        Ok(Record {
            id,
            kind,
            part,
            streams,
        })
    }
}

/// Executes the migration stage on one rank: consumes the actual blocks and
/// the balanced proxy part and produces the new local blocks.
pub async fn migrate_local(
    comm: &mut Comm,
    local: LocalForest,
    proxy: ProxyPart,
) -> Result<(LocalForest, MigrationStats)> {
    let LocalForest {
        domain,
        rank,
        blocks,
        registry,
    } = local;
    let d = &domain;
    let mut stats = MigrationStats::default();
    let mut meter = MemoryMeter::default();
    for b in blocks.values() {
        registry.check_block(b)?;
        let n = registry.block_bytes(b)?;
        stats.pre_local += n;
        meter.alloc(n);
    }

    let mut kept: BTreeMap<BlockId, Block> = BTreeMap::new();
    let mut outgoing: BTreeMap<Rank, Vec<Record>> = BTreeMap::new();
    let mut local_records: Vec<Record> = Vec::new();

    for (id, mut block) in blocks {
        let link = proxy
            .links
            .get(&id)
            .ok_or_else(|| Error::Audit(format!("actual block {id} on rank {rank} has no proxy link")))?;
        let splits = link.targets.len() == d.children_per_split() && block.target_level > block.level;
        let merges = block.target_level + 1 == block.level;
        if !splits && !merges && link.targets[0] == rank {
            kept.insert(id, block);
            continue;
        }
        let bytes = registry.block_bytes(&block)?;
        let mut produced = 0usize;
        if splits {
            let mut per_child: Vec<Vec<(u32, Vec<u8>)>> = vec![Vec::new(); d.children_per_split()];
            for (h, slot) in registry.slots.iter().enumerate() {
                if let Some(item) = block.data.get_any(h) {
                    for (c, s) in slot.ser_split(d, id, item)?.into_iter().enumerate() {
                        produced += s.len();
                        meter.alloc(s.len());
                        per_child[c].push((h as u32, s));
                    }
                }
            }
            for (c, streams) in per_child.into_iter().enumerate() {
                let rec = Record {
                    id: d.child(id, c as u8)?,
                    kind: KIND_SPLIT_CHILD,
                    part: c as u8,
                    streams,
                };
                route(rank, link.targets[c], rec, &mut outgoing, &mut local_records);
            }
        } else {
            let kind = if merges { KIND_MERGE_PART } else { KIND_MIGRATE };
            let mut streams = Vec::new();
            for (h, slot) in registry.slots.iter().enumerate() {
                if let Some(item) = block.data.get_any(h) {
                    let s = if merges {
                        slot.ser_merge(d, id, item)?
                    } else {
                        slot.ser_migrate(d, id, item)?
                    };
                    produced += s.len();
                    meter.alloc(s.len());
                    streams.push((h as u32, s));
                }
            }
            let rec = Record {
                id,
                kind,
                part: if merges { d.child_digit(id) } else { 0 },
                streams,
            };
            route(rank, link.targets[0], rec, &mut outgoing, &mut local_records);
        }
        stats.blocks_serialized += 1;
        stats.largest_block_streams = stats.largest_block_streams.max(produced);
        // the source data is released as soon as it is serialized
        block.data = Default::default();
        meter.free(bytes);
    }

    let expected: BTreeSet<Rank> = proxy
        .proxies
        .values()
        .flat_map(|p| p.sources.iter().copied())
        .filter(|&s| s != rank)
        .collect();
    for (dest, records) in outgoing {
        let mut w = WireWriter::new();
        w.u32(records.len() as u32);
        for rec in &records {
            stats.outgoing += rec.bytes();
            stats.blocks_sent += 1;
            rec.encode(&mut w);
        }
        comm.send(dest, w.finish())?;
    }
    // streams handed to the fabric leave this rank at the barrier
    meter.free(stats.outgoing);
    comm.sync().await;

    let mut records = local_records;
    let mut senders = BTreeSet::new();
    for (src, bytes) in comm.take_pairs() {
        senders.insert(src);
        let mut r = WireReader::new(&bytes);
        let n = r.u32()?;
        for _ in 0..n {
            let rec = Record::decode(&mut r)?;
            stats.incoming += rec.bytes();
            meter.alloc(rec.bytes());
            records.push(rec);
        }
    }
    if senders != expected {
        return Err(Error::protocol(format!(
            "rank {rank} expected data from {expected:?}, received from {senders:?}"
        )));
    }

    let mut by_id: BTreeMap<BlockId, Vec<Record>> = BTreeMap::new();
    for rec in records {
        let key = if rec.kind == KIND_MERGE_PART {
            d.parent(rec.id)?
        } else {
            rec.id
        };
        by_id.entry(key).or_default().push(rec);
    }

    let mut out = BTreeMap::new();
    for (id, p) in &proxy.proxies {
        let mut block = Block::new(d, *id, rank);
        block.neighbors = p.neighbors.clone();
        block.weight = p.weight;
        if let Some(old) = kept.remove(id) {
            if p.origin != ProxyOrigin::Kept {
                return Err(Error::Audit(format!("block {id} kept but proxy is {:?}", p.origin)));
            }
            block.data = old.data;
            out.insert(*id, block);
            continue;
        }
        let recs = by_id.remove(id).unwrap_or_default();
        match p.origin {
            ProxyOrigin::Kept | ProxyOrigin::SplitChild => {
                let want = if p.origin == ProxyOrigin::Kept {
                    KIND_MIGRATE
                } else {
                    KIND_SPLIT_CHILD
                };
                let [rec] = <[Record; 1]>::try_from(recs)
                    .map_err(|v| Error::protocol(format!("block {id}: expected one record, got {}", v.len())))?;
                if rec.kind != want {
                    return Err(Error::protocol(format!("block {id}: unexpected record kind")));
                }
                for (h, s) in &rec.streams {
                    let slot = registry
                        .slots
                        .get(*h as usize)
                        .ok_or_else(|| Error::contract(format!("record for {id} names unregistered slot {h}")))?;
                    let item = if want == KIND_MIGRATE {
                        slot.de_migrate(d, *id, s)?
                    } else {
                        slot.de_split(d, *id, s)?
                    };
                    meter.alloc(slot.payload_bytes(&item)?);
                    meter.free(s.len());
                    block.data.set_arc(*h as usize, item);
                }
            }
            ProxyOrigin::Merged => {
                let k = d.children_per_split();
                let mut parts: Vec<Option<Record>> = (0..k).map(|_| None).collect();
                for rec in recs {
                    if rec.kind != KIND_MERGE_PART || rec.part as usize >= k {
                        return Err(Error::protocol(format!("block {id}: unexpected record")));
                    }
                    let slot = rec.part as usize;
                    if parts[slot].replace(rec).is_some() {
                        return Err(Error::protocol(format!("block {id}: duplicate merge part {slot}")));
                    }
                }
                let parts: Vec<Record> = parts
                    .into_iter()
                    .enumerate()
                    .map(|(c, p)| {
                        p.ok_or_else(|| Error::protocol(format!("merged block {id} misses contribution {c}")))
                    })
                    .collect::<Result<_>>()?;
                for (h, slot) in registry.slots.iter().enumerate() {
                    let streams: Vec<&[u8]> = parts
                        .iter()
                        .filter_map(|p| {
                            p.streams
                                .iter()
                                .find(|(sh, _)| *sh as usize == h)
                                .map(|(_, s)| s.as_slice())
                        })
                        .collect();
                    if streams.is_empty() {
                        continue;
                    }
                    if streams.len() != k {
                        return Err(Error::protocol(format!(
                            "merged block {id} misses contributions for slot {h}"
                        )));
                    }
                    let item = slot.de_merge(d, *id, &streams)?;
                    meter.alloc(slot.payload_bytes(&item)?);
                    meter.free(streams.iter().map(|s| s.len()).sum());
                    block.data.set_arc(h, item);
                }
            }
        }
        out.insert(*id, block);
    }
    if let Some(id) = kept.keys().next() {
        return Err(Error::Audit(format!("block {id} has no proxy on rank {rank}")));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Audit(format!(
            "data for {id} arrived at rank {rank} without a proxy"
        )));
    }
    for b in out.values() {
        stats.post_local += registry.block_bytes(b)?;
    }
    stats.peak = meter.peak;
    Ok((
        LocalForest {
            domain,
            rank,
            blocks: out,
            registry,
        },
        stats,
    ))
}

/// Adapts `forest` to the balanced `proxy` on `fabric` (stage tag
/// "migration"): audits the links, then runs [`migrate_local`] on every
/// rank. Returns the new forest and per-rank statistics.
pub fn migrate_forest(
    forest: BlockForest,
    proxy: ProxyForest,
    fabric: &Fabric,
) -> Result<(BlockForest, Vec<MigrationStats>, Metrics)> {
    proxy.audit_links(&forest)?;
    let domain = forest.domain().clone();
    let registry = forest.registry().clone();
    let states: Vec<(LocalForest, ProxyPart)> = forest.into_locals().into_iter().zip(proxy.parts).collect();
    let out = fabric.run_each(states, |mut comm, (local, part)| async move {
        comm.set_stage("migration");
        migrate_local(&mut comm, local, part).await
    })?;
    let mut locals = Vec::with_capacity(out.results.len());
    let mut stats = Vec::with_capacity(out.results.len());
    for (local, s) in out.results {
        locals.push(local);
        stats.push(s);
    }
    Ok((BlockForest::from_locals(domain, registry, locals), stats, out.metrics))
}

fn route(rank: Rank, dest: Rank, rec: Record, outgoing: &mut BTreeMap<Rank, Vec<Record>>, local: &mut Vec<Record>) {
    if dest == rank {
        local.push(rec);
    } else {
        outgoing.entry(dest).or_default().push(rec);
    }
}
