//! Diffusion balancing with nested iterations. Each main iteration runs a
//! fixed number of flow iterations to compute the load flow `f_ij` towards
//! every neighbor rank, turns the flows into block moves with the push
//! scheme (overloaded ranks choose what to send) or the pull scheme
//! (underloaded ranks request blocks), and migrates the proxies. All
//! point-to-point traffic follows process-graph edges; the only global
//! operations are one sum reduction (total load) and one boolean reduction
//! (is any rank overloaded) per invocation.
//!
//! In per-level mode every quantity is a vector with one entry per level
//! and blocks only ever move to balance their own level; the process graph
//! is the full one.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::pin::Pin;

use super::{BalanceDecision, Balancer, Termination};
use crate::block_id::BlockId;
use crate::error::{Error, Result};
use crate::forest::NeighborRecord;
use crate::proxy::{ProxyBlock, ProxyPart};
use crate::sim::wire::{WireReader, WireWriter};
use crate::sim::{Comm, Rank};

/// Slack for comparisons between accumulated flows and block weights.
pub(crate) const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionMode {
    /// Push only.
    Push,
    /// Push and pull alternating, starting with push.
    PushPull,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionBalancer {
    pub mode: DiffusionMode,
    pub flow_iters: u32,
    pub max_main_iters: u32,
    pub per_level: bool,
    pub tolerance: f64,
}

/// Per-rank flow computation state. Loads and flows have one entry per
/// balanced level (or a single entry).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    /// Remaining process load `w_i` (decremented by every flow).
    pub load: Vec<f64>,
    /// Number of neighbor ranks `d_i`.
    pub degree: usize,
    /// `α_ij` per neighbor.
    pub alpha: BTreeMap<Rank, f64>,
    /// Actual load of every neighbor when the state was set up.
    pub neighbor_load: BTreeMap<Rank, Vec<f64>>,
    /// Accumulated `f_ij` per neighbor.
    pub flow: BTreeMap<Rank, Vec<f64>>,
}

impl FlowState {
    /// Exchanges neighbor counts and loads and sets
    /// `α_ij = 1/(max(d_i, d_j) + 1)`, `f_ij = 0`.
    pub async fn new(comm: &mut Comm, neighbors: &BTreeSet<Rank>, load: Vec<f64>) -> Result<Self> {
        let degree = neighbors.len();
        let payloads = neighbors
            .iter()
            .map(|&j| {
                let mut w = WireWriter::with_capacity(4 + 8 * load.len());
                w.u32(degree as u32);
                for &x in &load {
                    w.f64(x);
                }
                (j, w.finish())
            })
            .collect();
        let received = comm.neighbor_exchange(neighbors, payloads).await?;
        let mut alpha = BTreeMap::new();
        let mut neighbor_load = BTreeMap::new();
        for &j in neighbors {
            let bytes = received
                .get(&j)
                .ok_or_else(|| Error::protocol(format!("no neighbor count from rank {j}")))?;
            let mut r = WireReader::new(bytes);
            let dj = r.u32()? as usize;
            alpha.insert(j, 1.0 / (degree.max(dj) + 1) as f64);
            let wj = (0..load.len()).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            neighbor_load.insert(j, wj);
        }
        let flow = neighbors.iter().map(|&j| (j, vec![0.0; load.len()])).collect();
        Ok(FlowState {
            load,
            degree,
            alpha,
            neighbor_load,
            flow,
        })
    }
}

/// Runs `iterations` flow iterations: exchange loads with all neighbors,
/// then `f'_ij = α_ij (w'_i − w_j)`, `f_ij += f'_ij`, `w_i −= f'_ij`, where
/// `w'_i` is the load at the start of the iteration.
pub async fn diffusion_flow(comm: &mut Comm, state: &mut FlowState, iterations: u32) -> Result<()> {
    if iterations < 1 {
        return Err(Error::contract("at least one flow iteration is required"));
    }
    let neighbors: BTreeSet<Rank> = state.alpha.keys().copied().collect();
    for _ in 0..iterations {
        let payloads = neighbors
            .iter()
            .map(|&j| {
                let mut w = WireWriter::with_capacity(8 * state.load.len());
                for &x in &state.load {
                    w.f64(x);
                }
                (j, w.finish())
            })
            .collect();
        let received = comm.neighbor_exchange(&neighbors, payloads).await?;
        let snapshot = state.load.clone();
        for (&j, &alpha) in &state.alpha {
            let bytes = received
                .get(&j)
                .ok_or_else(|| Error::protocol(format!("no load from rank {j}")))?;
            let mut r = WireReader::new(bytes);
            let f = state.flow.get_mut(&j).expect("flow entry per neighbor");
            for l in 0..snapshot.len() {
                let fp = alpha * (snapshot[l] - r.f64()?);
                f[l] += fp;
                state.load[l] -= fp;
            }
        }
    }
    Ok(())
}

/// Connection score of moving a block with `neighbors` away from `from`
/// to `to`: face 4, edge 2, corner 1, counted positive for neighbors on
/// `to` and negative for neighbors on `from`.
pub fn fit_score(neighbors: &[NeighborRecord], from: Rank, to: Rank) -> i32 {
    neighbors
        .iter()
        .map(|n| {
            let s = n.kind.strength() as i32;
            if n.rank == to {
                s
            } else if n.rank == from {
                -s
            } else {
                0
            }
        })
        .sum()
}

/// Picks the neighbor with the largest (`sign = 1`) or smallest
/// (`sign = -1`) flow among those with `sign·f > 0`, comparing flows
/// multiplied by the neighbor's `scale` (default 1); ties go to the lowest
/// rank.
fn pick(flows: &BTreeMap<Rank, f64>, scale: &BTreeMap<Rank, f64>, sign: f64) -> Option<Rank> {
    let mut best: Option<(Rank, f64)> = None;
    for (&j, &f) in flows {
        let v = sign * f;
        if v <= 0.0 {
            continue;
        }
        let v = v * scale.get(&j).copied().unwrap_or(1.0);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// The push scheme on one level: `blocks` are the local candidates,
/// `flows` the per-neighbor flows of the level. Returns the chosen moves.
pub fn push_marks(
    rank: Rank,
    blocks: &[&ProxyBlock],
    flows: &mut BTreeMap<Rank, f64>,
    outflow: f64,
) -> Vec<(BlockId, Rank)> {
    push_marks_scaled(rank, blocks, flows, &BTreeMap::new(), outflow)
}

/// [`push_marks`] with the neighbor order given by `f_ij · scale_j`.
pub fn push_marks_scaled(
    rank: Rank,
    blocks: &[&ProxyBlock],
    flows: &mut BTreeMap<Rank, f64>,
    scale: &BTreeMap<Rank, f64>,
    mut outflow: f64,
) -> Vec<(BlockId, Rank)> {
    let mut marked: BTreeSet<BlockId> = BTreeSet::new();
    let mut out = Vec::new();
    while outflow > EPS {
        let Some(j) = pick(flows, scale, 1.0) else { break };
        let best = blocks
            .iter()
            .filter(|b| !marked.contains(&b.id) && b.weight <= outflow + EPS)
            .map(|b| (fit_score(&b.neighbors, rank, j), b))
            .max_by(|(sa, a), (sb, b)| sa.cmp(sb).then(b.id.cmp(&a.id)));
        match best {
            Some((_, b)) => {
                marked.insert(b.id);
                out.push((b.id, j));
                *flows.get_mut(&j).expect("picked neighbor") -= b.weight;
                outflow -= b.weight;
            }
            None => {
                flows.insert(j, 0.0);
            }
        }
    }
    out
}

/// One block advertised by a neighbor for the pull scheme, with the
/// provider's fit score for moving it to the requesting rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PullOffer {
    pub id: BlockId,
    pub weight: f64,
    pub score: i32,
}

/// The requesting half of the pull scheme on one level: `offers` are the
/// blocks advertised by every neighbor. Returns `(block, provider)` pairs.
pub fn pull_requests(
    offers: &BTreeMap<Rank, Vec<PullOffer>>,
    flows: &mut BTreeMap<Rank, f64>,
    inflow: f64,
) -> Vec<(BlockId, Rank)> {
    pull_requests_scaled(offers, flows, &BTreeMap::new(), inflow)
}

/// [`pull_requests`] with the neighbor order given by `f_ij · scale_j`.
pub fn pull_requests_scaled(
    offers: &BTreeMap<Rank, Vec<PullOffer>>,
    flows: &mut BTreeMap<Rank, f64>,
    scale: &BTreeMap<Rank, f64>,
    mut inflow: f64,
) -> Vec<(BlockId, Rank)> {
    let mut bookmarked: BTreeSet<BlockId> = BTreeSet::new();
    let mut out = Vec::new();
    while inflow > EPS {
        let Some(j) = pick(flows, scale, -1.0) else { break };
        let best = offers
            .get(&j)
            .into_iter()
            .flatten()
            .filter(|o| !bookmarked.contains(&o.id) && o.weight <= inflow + EPS)
            .max_by(|a, b| a.score.cmp(&b.score).then(b.id.cmp(&a.id)));
        match best {
            Some(o) => {
                bookmarked.insert(o.id);
                out.push((o.id, j));
                *flows.get_mut(&j).expect("picked neighbor") += o.weight;
                inflow -= o.weight;
            }
            None => {
                flows.insert(j, 0.0);
            }
        }
    }
    out
}

/// The providing half of the pull scheme: every request is granted, except
/// that a block requested by several neighbors goes to the one with the
/// largest provider-side flow (ties: lowest rank). `flow(id, j)` returns
/// the provider's flow towards `j` at the block's level, or `None` if the
/// block is not local.
pub fn resolve_requests(
    requests: &BTreeMap<Rank, Vec<BlockId>>,
    flow: impl Fn(BlockId, Rank) -> Option<f64>,
) -> Result<BTreeMap<BlockId, Rank>> {
    let mut winners: BTreeMap<BlockId, (Rank, f64)> = BTreeMap::new();
    for (&j, ids) in requests {
        for &id in ids {
            let f = flow(id, j)
                .ok_or_else(|| Error::protocol(format!("rank {j} requested block {id}, which is not here")))?;
            match winners.get(&id) {
                Some(&(_, g)) if g >= f => {}
                _ => {
                    winners.insert(id, (j, f));
                }
            }
        }
    }
    Ok(winners.into_iter().map(|(id, (j, _))| (id, j)).collect())
}

/// Global load figures of one invocation, per balanced level.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct GlobalLoad {
    pub avg: Vec<f64>,
    /// Largest acceptable load per level.
    pub limit: Vec<f64>,
    /// The average rounded down to whole mean-weight blocks; ranks below
    /// it are short of at least one block.
    pub lower: Vec<f64>,
}

impl GlobalLoad {
    /// `sums` holds the global load per level followed by the global block
    /// count per level. Balance is perfect when no rank exceeds the
    /// average rounded up to whole mean-weight blocks.
    pub fn new(sums: &[f64], ranks: usize, tolerance: f64) -> Self {
        let levels = sums.len() / 2;
        let mut avg = Vec::with_capacity(levels);
        let mut limit = Vec::with_capacity(levels);
        let mut lower = Vec::with_capacity(levels);
        for l in 0..levels {
            let (total, count) = (sums[l], sums[levels + l]);
            let a = total / ranks as f64;
            let (granular, floor) = if count > 0.0 && total > 0.0 {
                let g = total / count;
                (g * (a / g - EPS).ceil(), g * (a / g + EPS).floor())
            } else {
                (0.0, 0.0)
            };
            avg.push(a);
            limit.push(granular.max(tolerance * a));
            lower.push(floor);
        }
        GlobalLoad { avg, limit, lower }
    }

    pub fn overloaded(&self, load: &[f64]) -> bool {
        load.iter().zip(&self.limit).any(|(&w, &m)| w > m + EPS * m.max(1.0))
    }
}

/// Outflow used by the push scheme: the positive flows, but at least the
/// excess over the limit of an overloaded rank so that incompletely
/// converged flows still shed whole blocks, and never so much that the
/// rank drops below `lower`.
pub(crate) fn adapted_outflow(flows: &BTreeMap<Rank, f64>, load: f64, limit: f64, lower: f64) -> f64 {
    let sum: f64 = flows.values().filter(|&&f| f > 0.0).sum();
    let out = if load > limit + EPS * limit.max(1.0) {
        sum.max(load - limit)
    } else {
        sum
    };
    out.min((load - lower).max(0.0))
}

/// Inflow used by the pull scheme, mirroring [`adapted_outflow`]: at least
/// the shortfall below `lower`, and never so much that the rank exceeds
/// `limit`.
pub(crate) fn adapted_inflow(flows: &BTreeMap<Rank, f64>, load: f64, limit: f64, lower: f64) -> f64 {
    let sum: f64 = flows.values().filter(|&&f| f < 0.0).map(|f| -f).sum();
    let inflow = if load < lower - EPS * lower.max(1.0) {
        sum.max(lower - load)
    } else {
        sum
    };
    inflow.min((limit - load).max(0.0))
}

/// Restricts push flows to neighbors that can still take load (their load
/// is below `limit`), provided at least one of them has a positive flow;
/// otherwise the flows are left alone so that surplus can travel on.
pub(crate) fn push_flows(flows: &mut BTreeMap<Rank, f64>, neighbor_load: &BTreeMap<Rank, f64>, limit: f64) {
    let room = |j: &Rank| neighbor_load[j] < limit - EPS * limit.max(1.0);
    if flows.iter().any(|(j, &f)| f > 0.0 && room(j)) {
        for (j, f) in flows.iter_mut() {
            if *f > 0.0 && !room(j) {
                *f = 0.0;
            }
        }
    }
}

/// Pull counterpart of [`push_flows`]: prefers providers whose load is
/// above `lower`.
pub(crate) fn pull_flows(flows: &mut BTreeMap<Rank, f64>, neighbor_load: &BTreeMap<Rank, f64>, lower: f64) {
    let spare = |j: &Rank| neighbor_load[j] > lower + EPS * lower.max(1.0);
    if flows.iter().any(|(j, &f)| f < 0.0 && spare(j)) {
        for (j, f) in flows.iter_mut() {
            if *f < 0.0 && !spare(j) {
                *f = 0.0;
            }
        }
    }
}

/// Bucket of a block: its level in per-level mode, else 0.
fn bucket(per_level: bool, b: &ProxyBlock) -> usize {
    if per_level {
        b.level as usize
    } else {
        0
    }
}

impl DiffusionBalancer {
    fn buckets(&self, part: &ProxyPart) -> usize {
        if self.per_level {
            part.domain.max_levels() as usize + 1
        } else {
            1
        }
    }

    async fn run(&self, comm: &mut Comm, part: &ProxyPart, iteration: u32) -> Result<BalanceDecision> {
        let rank = comm.rank();
        let nb = self.buckets(part);
        let load = part.loads(self.per_level);
        let mut counts = vec![0.0; nb];
        for b in part.proxies.values() {
            counts[bucket(self.per_level, b)] += 1.0;
        }
        let mut local = load.clone();
        local.extend(counts);
        let sums = comm.all_reduce_sum(&local).await;
        let global = GlobalLoad::new(&sums, comm.size(), self.tolerance);
        let any = comm.all_reduce_or(global.overloaded(&load)).await;
        let stop = |t| BalanceDecision {
            termination: Some(t),
            ..Default::default()
        };
        if !any {
            return Ok(stop(Termination::Converged));
        }
        if iteration >= self.max_main_iters {
            return Ok(stop(Termination::IterationCap));
        }

        let neighbors = part.process_neighbors();
        let mut state = FlowState::new(comm, &neighbors, load.clone()).await?;
        diffusion_flow(comm, &mut state, self.flow_iters).await?;

        let pull = self.mode == DiffusionMode::PushPull && iteration % 2 == 1;
        // neighbors are ranked by the accumulated load difference f_ij / α_ij
        let scale: BTreeMap<Rank, f64> = state.alpha.iter().map(|(&j, &a)| (j, 1.0 / a)).collect();
        let mut targets = BTreeMap::new();
        let mut by_bucket: Vec<Vec<&ProxyBlock>> = vec![Vec::new(); nb];
        for b in part.proxies.values() {
            by_bucket[bucket(self.per_level, b)].push(b);
        }
        if !pull {
            for (l, blocks) in by_bucket.iter().enumerate() {
                let mut flows: BTreeMap<Rank, f64> = state.flow.iter().map(|(&j, f)| (j, f[l])).collect();
                let nl: BTreeMap<Rank, f64> = state.neighbor_load.iter().map(|(&j, w)| (j, w[l])).collect();
                push_flows(&mut flows, &nl, global.limit[l]);
                let outflow = adapted_outflow(&flows, load[l], global.limit[l], global.lower[l]);
                targets.extend(push_marks_scaled(rank, blocks, &mut flows, &scale, outflow));
            }
        } else {
            // advertise every local block to every neighbor
            let payloads = neighbors
                .iter()
                .map(|&j| {
                    let mut w = WireWriter::with_capacity(4 + 20 * part.proxies.len());
                    w.u32(part.proxies.len() as u32);
                    for b in part.proxies.values() {
                        w.id(b.id).f64(b.weight);
                        w.u32(fit_score(&b.neighbors, rank, j) as u32);
                    }
                    (j, w.finish())
                })
                .collect();
            let received = comm.neighbor_exchange(&neighbors, payloads).await?;
            let mut offers: Vec<BTreeMap<Rank, Vec<PullOffer>>> = vec![BTreeMap::new(); nb];
            for (&j, bytes) in &received {
                let mut r = WireReader::new(bytes);
                for _ in 0..r.u32()? {
                    let id = r.id()?;
                    let weight = r.f64()?;
                    let score = r.u32()? as i32;
                    let l = if self.per_level {
                        part.domain.level(id) as usize
                    } else {
                        0
                    };
                    offers[l].entry(j).or_default().push(PullOffer { id, weight, score });
                }
            }
            let mut requests: BTreeMap<Rank, Vec<BlockId>> = BTreeMap::new();
            for (l, level_offers) in offers.iter().enumerate() {
                let mut flows: BTreeMap<Rank, f64> = state.flow.iter().map(|(&j, f)| (j, f[l])).collect();
                let nl: BTreeMap<Rank, f64> = state.neighbor_load.iter().map(|(&j, w)| (j, w[l])).collect();
                pull_flows(&mut flows, &nl, global.lower[l]);
                let inflow = adapted_inflow(&flows, load[l], global.limit[l], global.lower[l]);
                for (id, j) in pull_requests_scaled(level_offers, &mut flows, &scale, inflow) {
                    requests.entry(j).or_default().push(id);
                }
            }
            let payloads = requests
                .into_iter()
                .map(|(j, ids)| {
                    let mut w = WireWriter::with_capacity(4 + 8 * ids.len());
                    w.u32(ids.len() as u32);
                    for id in ids {
                        w.id(id);
                    }
                    (j, w.finish())
                })
                .collect();
            let received = comm.neighbor_exchange(&neighbors, payloads).await?;
            let mut incoming: BTreeMap<Rank, Vec<BlockId>> = BTreeMap::new();
            for (&j, bytes) in &received {
                let mut r = WireReader::new(bytes);
                let list = incoming.entry(j).or_default();
                for _ in 0..r.u32()? {
                    list.push(r.id()?);
                }
            }
            targets = resolve_requests(&incoming, |id, j| {
                let b = part.proxies.get(&id)?;
                Some(state.flow[&j][bucket(self.per_level, b)])
            })?;
        }

        // tell every neighbor whether proxies are about to arrive
        let mut sending: BTreeMap<Rank, u32> = BTreeMap::new();
        for &j in targets.values() {
            *sending.entry(j).or_default() += 1;
        }
        let payloads = sending
            .into_iter()
            .map(|(j, n)| {
                let mut w = WireWriter::with_capacity(4);
                w.u32(n);
                (j, w.finish())
            })
            .collect();
        let received = comm.neighbor_exchange(&neighbors, payloads).await?;
        Ok(BalanceDecision {
            targets,
            expected_senders: received.keys().copied().collect(),
            migrate: true,
            again: true,
            termination: None,
        })
    }
}

impl Balancer for DiffusionBalancer {
    fn balance<'a>(
        &'a self,
        comm: &'a mut Comm,
        part: &'a ProxyPart,
        iteration: u32,
    ) -> Pin<Box<dyn Future<Output = Result<BalanceDecision>> + Send + 'a>> {
        Box::pin(self.run(comm, part, iteration))
    }
}
