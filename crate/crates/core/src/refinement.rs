//! Stage 1: block-level refinement and coarsening.
//!
//! A marker callback proposes a relative target level (−1, 0, +1) for every
//! local block. Refinement marks are always honoured; additional blocks are
//! forced to split until the refined forest is 2:1 balanced. Afterwards,
//! coarsening is accepted for complete sibling groups whose merged block
//! would not violate 2:1 balance against the final levels of its neighbors.
//!
//! Both phases are iterative and exchange per-block state only with
//! neighboring ranks. A forced split can only cascade towards coarser
//! levels, so `max_levels − 1` exchange rounds suffice for the refinement
//! phase. A merge of a group on level ℓ can only depend on merges of groups
//! on level ℓ + 1, and each such dependency needs two hops (a neighbor's new
//! level, then the readiness of remote siblings), so the coarsening phase
//! uses `2 · max_levels − 1` rounds. Within a rank the rules are evaluated to
//! a fixpoint in ascending id order after every round.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::block_id::BlockId;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::forest::{Block, BlockForest, LeafIndex};
use crate::grid_payload::GridPayload;
use crate::local::LocalForest;
use crate::migration::DataHandle;
use crate::sim::wire::{WireReader, WireWriter};
use crate::sim::{Comm, Fabric, Metrics, Rank};

/// Application callback proposing a relative target level for a block.
///
/// Must return −1 (coarsen), 0 (keep) or +1 (refine) and may only look at
/// the block it is given.
pub trait Marker: Send + Sync {
    fn mark(&self, domain: &Domain, block: &Block) -> i8;
}

impl<F> Marker for F
where
    F: Fn(&Domain, &Block) -> i8 + Send + Sync,
{
    fn mark(&self, domain: &Domain, block: &Block) -> i8 {
        self(domain, block)
    }
}

/// Marks blocks whose largest cell value reaches `threshold` for refinement
/// and, optionally, blocks whose largest value stays below `coarsen_below`
/// for coarsening.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdMarker {
    pub handle: DataHandle<GridPayload>,
    pub threshold: f64,
    pub coarsen_below: Option<f64>,
}

impl ThresholdMarker {
    pub fn new(handle: DataHandle<GridPayload>, threshold: f64) -> Self {
        ThresholdMarker {
            handle,
            threshold,
            coarsen_below: None,
        }
    }

    pub fn coarsen_below(mut self, value: f64) -> Self {
        self.coarsen_below = Some(value);
        self
    }
}

impl Marker for ThresholdMarker {
    fn mark(&self, domain: &Domain, block: &Block) -> i8 {
        let Some(grid) = block.data_of(self.handle) else {
            return 0;
        };
        let max = grid.max_value();
        if max >= self.threshold && block.level < domain.max_levels() {
            1
        } else if self.coarsen_below.is_some_and(|c| max < c) {
            -1
        } else {
            0
        }
    }
}

/// How the refinement stage ended on all ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum RefineOutcome {
    /// No block was marked anywhere; aborted after the first reduction.
    NothingMarked,
    /// Marks existed but none of them survived; aborted after the second
    /// reduction.
    NothingAccepted,
    /// At least one block changes its level.
    Changed,
}

impl RefineOutcome {
    pub fn proceeds(self) -> bool {
        self == RefineOutcome::Changed
    }
}

/// Exchange rounds of the refinement phase.
pub fn refinement_rounds(domain: &Domain) -> u32 {
    (domain.max_levels() as u32).saturating_sub(1)
}

/// Exchange rounds of the coarsening phase.
pub fn coarsening_rounds(domain: &Domain) -> u32 {
    (2 * domain.max_levels() as u32).saturating_sub(1)
}

fn apply_delta(domain: &Domain, id: BlockId, level: u8, delta: i8) -> Result<u8> {
    match delta {
        0 => Ok(level),
        1 if level < domain.max_levels() => Ok(level + 1),
        1 => Err(Error::contract(format!(
            "block {id} is on the finest level {level} and cannot be refined"
        ))),
        // root blocks cannot be coarsened; the mark is ignored
        -1 if level == 0 => Ok(level),
        -1 => Ok(level - 1),
        d => Err(Error::contract(format!(
            "marker proposed level change {d} for block {id}"
        ))),
    }
}

/// Evaluates the marker on every local block and stores the proposed target
/// levels. Returns whether any block proposes a change. No communication.
pub fn mark_targets(local: &mut LocalForest, marker: &dyn Marker) -> Result<bool> {
    let LocalForest { domain, blocks, .. } = local;
    let mut any = false;
    for b in blocks.values_mut() {
        let delta = marker.mark(domain, b);
        b.target_level = apply_delta(domain, b.id, b.level, delta)?;
        any |= b.target_level != b.level;
    }
    Ok(any)
}

/// Per-block state sent to neighbor ranks: up to two bytes after the id.
type State = [u8; 2];

async fn exchange_states(
    comm: &mut Comm,
    neighbors: &BTreeSet<Rank>,
    boundary: &BTreeMap<Rank, Vec<BlockId>>,
    width: usize,
    state: impl Fn(BlockId) -> State,
    remote: &mut HashMap<BlockId, State>,
) -> Result<()> {
    let payloads: BTreeMap<Rank, Vec<u8>> = boundary
        .iter()
        .map(|(&r, ids)| {
            let mut w = WireWriter::with_capacity(4 + ids.len() * (8 + width));
            w.u32(ids.len() as u32);
            for &id in ids {
                w.id(id);
                for &byte in &state(id)[..width] {
                    w.u8(byte);
                }
            }
            (r, w.finish())
        })
        .collect();
    let received = comm.neighbor_exchange(neighbors, payloads).await?;
    for bytes in received.values() {
        let mut r = WireReader::new(bytes);
        let n = r.u32()?;
        for _ in 0..n {
            let id = r.id()?;
            let mut s = [0u8; 2];
            for byte in s.iter_mut().take(width) {
                *byte = r.u8()?;
            }
            remote.insert(id, s);
        }
    }
    Ok(())
}

/// Level a block has after splitting (if it splits), ignoring coarsening.
fn refined_level(b: &Block) -> u8 {
    b.target_level.max(b.level)
}

/// Forces splits until no local block has a neighbor more than one level
/// finer after refinement. Remote levels come from the last exchange.
fn force_splits_locally(local: &mut LocalForest, remote: &HashMap<BlockId, State>) -> usize {
    let mut forced = 0;
    loop {
        let mut todo = Vec::new();
        for b in local.blocks.values() {
            if b.target_level > b.level {
                continue;
            }
            let too_fine = b.neighbors.iter().any(|n| {
                let e = match local.blocks.get(&n.id) {
                    Some(nb) => Some(refined_level(nb)),
                    None => remote.get(&n.id).map(|s| s[0]),
                };
                e.is_some_and(|e| e > b.level + 1)
            });
            if too_fine {
                todo.push(b.id);
            }
        }
        if todo.is_empty() {
            return forced;
        }
        for id in todo {
            let b = local.blocks.get_mut(&id).expect("local block");
            b.target_level = b.level + 1;
            forced += 1;
        }
    }
}

/// Adds the splits required for 2:1 balance. Refinement marks are never
/// removed; a block forced to split loses a coarsening mark.
pub async fn enforce_refinement(comm: &mut Comm, local: &mut LocalForest) -> Result<()> {
    let neighbors = local.process_neighbors();
    let boundary = local.boundary();
    let mut remote = HashMap::new();
    force_splits_locally(local, &remote);
    for _ in 0..refinement_rounds(&local.domain) {
        let blocks = &local.blocks;
        exchange_states(
            comm,
            &neighbors,
            &boundary,
            1,
            |id| [refined_level(&blocks[&id]), 0],
            &mut remote,
        )
        .await?;
        force_splits_locally(local, &remote);
    }
    Ok(())
}

const CAND: u8 = 1;
const READY: u8 = 2;

#[derive(Clone, Copy, Debug, Default)]
struct MergeState {
    /// Level after the stage if the block's group is accepted or not.
    t: u8,
    cand: bool,
    ready: bool,
    accepted: bool,
}

impl MergeState {
    fn wire(&self) -> State {
        let mut flags = 0;
        if self.cand {
            flags |= CAND;
        }
        if self.ready {
            flags |= READY;
        }
        [self.t, flags]
    }
}

struct Coarsening<'a> {
    domain: &'a Domain,
    blocks: &'a BTreeMap<BlockId, Block>,
    state: BTreeMap<BlockId, MergeState>,
    /// What every local block looked like in the last exchange.
    sent: BTreeMap<BlockId, State>,
    remote: HashMap<BlockId, State>,
}

impl Coarsening<'_> {
    fn siblings(&self, id: BlockId) -> Vec<BlockId> {
        self.domain.siblings(id).unwrap_or_default()
    }

    /// Upper bound of a neighbor's final level as far as this rank knows.
    fn level_bound(&self, n: &crate::forest::NeighborRecord) -> u8 {
        if let Some(s) = self.state.get(&n.id) {
            return s.t;
        }
        match self.remote.get(&n.id) {
            Some(s) => s[0],
            None => (self.domain.level(n.id) + 1).min(self.domain.max_levels()),
        }
    }

    fn is_ready(&self, b: &Block, siblings: &[BlockId]) -> bool {
        b.neighbors
            .iter()
            .filter(|n| !siblings.contains(&n.id))
            .all(|n| self.level_bound(n) <= b.level)
    }

    /// Accepts every group whose members all reported cand + ready in the
    /// last exchange (local members included, using what they sent).
    fn accept_from_snapshot(&mut self) {
        let ids: Vec<BlockId> = self.state.keys().copied().collect();
        for id in ids {
            let s = self.state[&id];
            if !s.cand || s.accepted {
                continue;
            }
            let ok = self.siblings(id).iter().all(|sib| {
                let snap = self.sent.get(sib).or_else(|| self.remote.get(sib));
                snap.is_some_and(|f| f[1] & (CAND | READY) == CAND | READY)
            });
            if ok {
                self.accept(id);
            }
        }
    }

    fn accept(&mut self, id: BlockId) {
        let s = self.state.get_mut(&id).expect("local block");
        s.accepted = true;
        s.t = self.blocks[&id].level - 1;
    }

    /// Recomputes readiness and accepts groups living entirely on this rank
    /// until nothing changes.
    fn local_fixpoint(&mut self) {
        loop {
            let mut changed = false;
            let ids: Vec<BlockId> = self.state.keys().copied().collect();
            for &id in &ids {
                let s = self.state[&id];
                if !s.cand || s.ready {
                    continue;
                }
                let sibs = self.siblings(id);
                if self.is_ready(&self.blocks[&id], &sibs) {
                    self.state.get_mut(&id).expect("local").ready = true;
                    changed = true;
                }
            }
            for &id in &ids {
                let s = self.state[&id];
                if !s.cand || s.accepted {
                    continue;
                }
                let sibs = self.siblings(id);
                let all_local_ready = sibs
                    .iter()
                    .all(|sib| self.state.get(sib).is_some_and(|st| st.cand && st.ready));
                if all_local_ready {
                    for sib in sibs {
                        if !self.state[&sib].accepted {
                            self.accept(sib);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return;
            }
        }
    }
}

/// Accepts coarsening marks of complete sibling groups that keep the forest
/// 2:1 balanced and resets all other coarsening marks. Expects the
/// refinement targets to be final.
pub async fn accept_coarsening(comm: &mut Comm, local: &mut LocalForest) -> Result<()> {
    let neighbors = local.process_neighbors();
    let boundary = local.boundary();
    let domain = &local.domain;
    let mut c = Coarsening {
        domain,
        blocks: &local.blocks,
        state: BTreeMap::new(),
        sent: BTreeMap::new(),
        remote: HashMap::new(),
    };
    for b in local.blocks.values() {
        let mut cand = b.level > 0 && b.target_level + 1 == b.level;
        if cand {
            // every sibling must be a leaf; siblings always touch each other
            let sibs = c.siblings(b.id);
            cand = sibs
                .iter()
                .all(|s| *s == b.id || b.neighbors.iter().any(|n| n.id == *s));
        }
        c.state.insert(
            b.id,
            MergeState {
                t: refined_level(b),
                cand,
                ready: false,
                accepted: false,
            },
        );
    }
    c.local_fixpoint();
    for _ in 0..coarsening_rounds(domain) {
        c.sent = c.state.iter().map(|(&id, s)| (id, s.wire())).collect();
        let sent = &c.sent;
        exchange_states(comm, &neighbors, &boundary, 2, |id| sent[&id], &mut c.remote).await?;
        c.accept_from_snapshot();
        c.local_fixpoint();
    }
    let finals: Vec<(BlockId, u8)> = c
        .state
        .iter()
        .map(|(&id, s)| {
            (
                id,
                if s.accepted {
                    s.t
                } else {
                    refined_level(&local.blocks[&id])
                },
            )
        })
        .collect();
    for (id, t) in finals {
        local.blocks.get_mut(&id).expect("local block").target_level = t;
    }
    Ok(())
}

/// The whole stage on one rank: marking, the first reduction, 2:1
/// enforcement, coarsening acceptance and the second reduction.
/// On abort all target levels equal the current levels.
pub async fn refine_local(comm: &mut Comm, local: &mut LocalForest, marker: &dyn Marker) -> Result<RefineOutcome> {
    let marked = mark_targets(local, marker)?;
    if !comm.all_reduce_or(marked).await {
        return Ok(RefineOutcome::NothingMarked);
    }
    enforce_refinement(comm, local).await?;
    accept_coarsening(comm, local).await?;
    let changed = local.blocks.values().any(|b| b.target_level != b.level);
    if !comm.all_reduce_or(changed).await {
        return Ok(RefineOutcome::NothingAccepted);
    }
    Ok(RefineOutcome::Changed)
}

/// Runs the refinement stage over a distributed forest on `fabric` (whose
/// size must match the forest's rank count). Target levels are stored in
/// the returned forest's blocks.
pub fn refine_forest(
    forest: BlockForest,
    marker: Arc<dyn Marker>,
    fabric: &Fabric,
) -> Result<(BlockForest, RefineOutcome, Metrics)> {
    let domain = forest.domain().clone();
    let registry = forest.registry().clone();
    let out = fabric.run_each(forest.into_locals(), move |mut comm, mut local| {
        let marker = marker.clone();
        async move {
            comm.set_stage("refinement");
            let outcome = refine_local(&mut comm, &mut local, &*marker).await?;
            Ok((local, outcome))
        }
    })?;
    let outcome = out.results[0].1;
    let locals = out.results.into_iter().map(|(l, _)| l).collect();
    Ok((BlockForest::from_locals(domain, registry, locals), outcome, out.metrics))
}

/// Sequential reference: the same rules evaluated on the global leaf set.
/// `marks` gives the relative mark of every leaf; returns final targets.
pub fn sequential_targets(domain: &Domain, marks: &BTreeMap<BlockId, i8>) -> Result<BTreeMap<BlockId, u8>> {
    let index = LeafIndex::new(domain, marks.keys().map(|&id| (id, 0)));
    let neighbors: BTreeMap<BlockId, Vec<BlockId>> = marks
        .keys()
        .map(|&id| Ok((id, index.neighbors_of(id)?.into_iter().map(|n| n.id).collect())))
        .collect::<Result<_>>()?;
    let mut target: BTreeMap<BlockId, u8> = marks
        .iter()
        .map(|(&id, &m)| Ok((id, apply_delta(domain, id, domain.level(id), m)?)))
        .collect::<Result<_>>()?;
    let level = |id: BlockId| domain.level(id);
    // forced splits
    loop {
        let mut todo = Vec::new();
        for (&id, &t) in &target {
            if t > level(id) {
                continue;
            }
            if neighbors[&id].iter().any(|n| target[n].max(level(*n)) > level(id) + 1) {
                todo.push(id);
            }
        }
        if todo.is_empty() {
            break;
        }
        for id in todo {
            target.insert(id, level(id) + 1);
        }
    }
    // coarsening acceptance
    let mut fin: BTreeMap<BlockId, u8> = target.iter().map(|(&id, &t)| (id, t.max(level(id)))).collect();
    let mut groups: BTreeMap<BlockId, Vec<BlockId>> = BTreeMap::new();
    for (&id, &t) in &target {
        if level(id) > 0 && t + 1 == level(id) {
            groups.entry(domain.parent(id)?).or_default().push(id);
        }
    }
    groups.retain(|_, members| members.len() == domain.children_per_split());
    let mut accepted = BTreeSet::new();
    loop {
        let mut changed = false;
        for (&parent, members) in &groups {
            if accepted.contains(&parent) {
                continue;
            }
            let ok = members.iter().all(|m| {
                neighbors[m]
                    .iter()
                    .filter(|n| !members.contains(n))
                    .all(|n| fin[n] <= level(*m))
            });
            if ok {
                accepted.insert(parent);
                for m in members {
                    fin.insert(*m, level(*m) - 1);
                }
                changed = true;
            }
        }
        if !changed {
            return Ok(fin);
        }
    }
}

/// Leaves of the forest that results from applying final target levels.
pub fn adapted_leaves(domain: &Domain, targets: impl IntoIterator<Item = (BlockId, u8)>) -> Result<Vec<BlockId>> {
    let mut out = BTreeSet::new();
    let mut merged: BTreeMap<BlockId, usize> = BTreeMap::new();
    for (id, t) in targets {
        let l = domain.level(id);
        if t == l + 1 {
            out.extend(domain.children(id)?);
        } else if t == l {
            out.insert(id);
        } else if t + 1 == l {
            *merged.entry(domain.parent(id)?).or_default() += 1;
        } else {
            return Err(Error::contract(format!("illegal target level {t} for {id}")));
        }
    }
    for (parent, n) in merged {
        if n != domain.children_per_split() {
            return Err(Error::contract(format!("only {n} children of {parent} are coarsened")));
        }
        out.insert(parent);
    }
    Ok(out.into_iter().collect())
}
