//! Space-filling-curve balancing: the blocks are ordered along a Morton or
//! Hilbert curve and the list is cut into as many consecutive pieces as
//! there are ranks. Per-level mode orders and cuts every level separately.
//!
//! Global synchronization per mode (bytes contributed per rank or block):
//!
//! | mode                  | gathered data            |
//! |-----------------------|--------------------------|
//! | whole forest          | block count (varint)     |
//! | whole forest weighted | f32 weight per block     |
//! | per level             | u64 id per block         |
//! | per level weighted    | u64 id + f32 per block   |
//!
//! Whole-forest mode only exchanges counts and weights, so it relies on the
//! current distribution already being contiguous along the curve in rank
//! order (true for curve-initialized forests refined and coarsened in
//! place, not after diffusion balancing).

use std::collections::BTreeSet;
use std::future::Future;
use std::pin::Pin;

use super::{BalanceDecision, Balancer, Termination};
use crate::block_id::BlockId;
use crate::curve::CurveOrder;
use crate::error::Result;
use crate::proxy::ProxyPart;
use crate::sim::wire::{WireReader, WireWriter};
use crate::sim::{Comm, Rank};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SfcBalancer {
    pub order: CurveOrder,
    pub per_level: bool,
    pub weighted: bool,
}

/// Segment owner of each of `n` equal blocks cut into `p` pieces whose
/// sizes differ by at most one: position k goes to `k·p / n`.
pub fn split_unweighted(n: usize, p: usize) -> Vec<Rank> {
    (0..n).map(|k| position_owner(k, n, p)).collect()
}

fn position_owner(k: usize, n: usize, p: usize) -> Rank {
    ((k as u128 * p as u128) / n as u128) as Rank
}

/// Greedy prefix walk over weighted blocks: a block belongs to the first
/// rank r whose cumulative target `W·(r+1)/p` lies beyond the block's
/// weight midpoint. Zero total weight falls back to the unweighted cut.
pub fn split_weighted(weights: &[f64], p: usize) -> Vec<Rank> {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return split_unweighted(weights.len(), p);
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut prefix = 0.0;
    let mut r = 0;
    for &w in weights {
        let mid = prefix + 0.5 * w;
        while r + 1 < p && mid >= total * (r + 1) as f64 / p as f64 {
            r += 1;
        }
        out.push(r);
        prefix += w;
    }
    out
}

impl SfcBalancer {
    async fn run(&self, comm: &mut Comm, part: &ProxyPart) -> Result<BalanceDecision> {
        let d = &part.domain;
        let rank = comm.rank();
        let p = comm.size();
        let mut local: Vec<(u64, BlockId, f64)> = part
            .proxies
            .values()
            .map(|b| (d.curve_key(b.id, self.order), b.id, b.weight))
            .collect();
        local.sort_by_key(|&(key, id, _)| (key, id));

        let mut decision = BalanceDecision {
            migrate: true,
            again: false,
            termination: Some(Termination::SingleShot),
            ..Default::default()
        };
        if self.per_level {
            let mut w = WireWriter::with_capacity(local.len() * if self.weighted { 12 } else { 8 });
            for &(_, id, weight) in &local {
                w.id(id);
                if self.weighted {
                    w.f32(weight as f32);
                }
            }
            let all = comm.all_gather(w.finish()).await;
            // (key, id, weight, source) per level
            let mut levels: Vec<Vec<(u64, BlockId, f64, Rank)>> = vec![Vec::new(); d.max_levels() as usize + 1];
            for (src, bytes) in all.iter().enumerate() {
                let mut r = WireReader::new(bytes);
                while !r.is_empty() {
                    let id = r.id()?;
                    let weight = if self.weighted { r.f32()? as f64 } else { 1.0 };
                    levels[d.level(id) as usize].push((d.curve_key(id, self.order), id, weight, src));
                }
            }
            for list in &mut levels {
                list.sort_by_key(|&(key, id, _, _)| (key, id));
                let owners = if self.weighted {
                    split_weighted(&list.iter().map(|e| e.2).collect::<Vec<_>>(), p)
                } else {
                    split_unweighted(list.len(), p)
                };
                for (&(_, id, _, src), &to) in list.iter().zip(&owners) {
                    if src == rank && to != rank {
                        decision.targets.insert(id, to);
                    } else if to == rank && src != rank {
                        decision.expected_senders.insert(src);
                    }
                }
            }
        } else if self.weighted {
            let mut w = WireWriter::with_capacity(4 * local.len());
            for &(_, _, weight) in &local {
                w.f32(weight as f32);
            }
            let all = comm.all_gather(w.finish()).await;
            let mut weights = Vec::new();
            let mut source = Vec::new();
            for (src, bytes) in all.iter().enumerate() {
                let mut r = WireReader::new(bytes);
                while !r.is_empty() {
                    weights.push(r.f32()? as f64);
                    source.push(src);
                }
            }
            let owners = split_weighted(&weights, p);
            let offset = source.iter().take_while(|&&s| s < rank).count();
            for (k, &(_, id, _)) in local.iter().enumerate() {
                if owners[offset + k] != rank {
                    decision.targets.insert(id, owners[offset + k]);
                }
            }
            decision.expected_senders = source
                .iter()
                .zip(&owners)
                .filter(|&(&s, &to)| to == rank && s != rank)
                .map(|(&s, _)| s)
                .collect();
        } else {
            let mut w = WireWriter::with_capacity(1);
            w.varint(local.len() as u64);
            let all = comm.all_gather(w.finish()).await;
            let counts = all
                .iter()
                .map(|b| WireReader::new(b).varint().map(|c| c as usize))
                .collect::<Result<Vec<usize>>>()?;
            let n: usize = counts.iter().sum();
            let mut offset = 0;
            let mut senders = BTreeSet::new();
            for (src, &c) in counts.iter().enumerate() {
                if src == rank {
                    for (k, &(_, id, _)) in local.iter().enumerate() {
                        let to = position_owner(offset + k, n, p);
                        if to != rank {
                            decision.targets.insert(id, to);
                        }
                    }
                } else if c > 0 {
                    let first = position_owner(offset, n, p);
                    let last = position_owner(offset + c - 1, n, p);
                    if (first..=last).contains(&rank) {
                        senders.insert(src);
                    }
                }
                offset += c;
            }
            decision.expected_senders = senders;
        }
        Ok(decision)
    }
}

impl Balancer for SfcBalancer {
    fn balance<'a>(
        &'a self,
        comm: &'a mut Comm,
        part: &'a ProxyPart,
        _iteration: u32,
    ) -> Pin<Box<dyn Future<Output = Result<BalanceDecision>> + Send + 'a>> {
        Box::pin(self.run(comm, part))
    }
}
