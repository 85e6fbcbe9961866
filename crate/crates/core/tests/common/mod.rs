//! Independent reference computations shared by the integration tests.
//! Everything here works on plain geometry (block boxes) and never calls the
//! library's own neighborhood, refinement or balancing code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use amr_core::{BlockId, Domain, LeafSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Number of axes on which two distinct leaves touch, or `None` if they are
/// not adjacent (non-periodic domains only).
pub fn touching_axes(d: &Domain, a: BlockId, b: BlockId) -> Option<usize> {
    if a == b {
        return None;
    }
    let (ba, bb) = (d.block_box(a), d.block_box(b));
    let mut touching = 0;
    for k in 0..d.dim() as usize {
        let (a0, a1) = (ba.lo[k], ba.lo[k] + ba.size);
        let (b0, b1) = (bb.lo[k], bb.lo[k] + bb.size);
        if a1 < b0 || b1 < a0 {
            return None;
        }
        if a1 == b0 || b1 == a0 {
            touching += 1;
        }
    }
    (touching > 0).then_some(touching)
}

/// Connection strength: face 4, edge 2, corner 1.
pub fn strength(d: &Domain, a: BlockId, b: BlockId) -> i32 {
    match (touching_axes(d, a, b), d.dim()) {
        (Some(1), _) => 4,
        (Some(2), 3) => 2,
        (Some(_), _) => 1,
        (None, _) => 0,
    }
}

/// Brute-force adjacency lists of a leaf set.
pub fn neighbor_map(d: &Domain, leaves: &[BlockId]) -> BTreeMap<BlockId, Vec<BlockId>> {
    let mut out: BTreeMap<BlockId, Vec<BlockId>> = leaves.iter().map(|&id| (id, Vec::new())).collect();
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            if touching_axes(d, a, b).is_some() {
                out.get_mut(&a).unwrap().push(b);
                out.get_mut(&b).unwrap().push(a);
            }
        }
    }
    out
}

/// Whether every pair of adjacent leaves differs by at most one level.
pub fn two_to_one(d: &Domain, leaves: &[BlockId]) -> bool {
    neighbor_map(d, leaves)
        .iter()
        .all(|(&a, ns)| ns.iter().all(|&b| d.level(a).abs_diff(d.level(b)) <= 1))
}

/// A random 2:1-balanced leaf set: random splits, then the library's
/// balancing (only used to produce inputs).
pub fn random_leaves(rng: &mut ChaCha8Rng, d: &Domain, split_prob: f64) -> Vec<BlockId> {
    let mut set = LeafSet::roots(d);
    for _ in 0..d.max_levels() {
        let ids: Vec<BlockId> = set.ids().collect();
        for id in ids {
            if d.level(id) < d.max_levels() && rng.gen_bool(split_prob) {
                set.split(id).unwrap();
            }
        }
    }
    set.balance().unwrap();
    set.ids().collect()
}

/// Random marks: +1 (never on the finest level), −1 or 0.
pub fn random_marks(
    rng: &mut ChaCha8Rng,
    d: &Domain,
    leaves: &[BlockId],
    p_refine: f64,
    p_coarsen: f64,
) -> BTreeMap<BlockId, i8> {
    leaves
        .iter()
        .map(|&id| {
            let x: f64 = rng.gen();
            let m = if x < p_refine && d.level(id) < d.max_levels() {
                1
            } else if x >= p_refine && x < p_refine + p_coarsen {
                -1
            } else {
                0
            };
            (id, m)
        })
        .collect()
}

/// Leaves after one refinement/coarsening step with 2:1 enforcement:
/// refinement marks always win and force coarser neighbors to split; a
/// sibling group merges only if all its members asked for it and no
/// neighbor outside the group ends up more than one level finer than the
/// merged block.
pub fn adapt(d: &Domain, marks: &BTreeMap<BlockId, i8>) -> Vec<BlockId> {
    let leaves: Vec<BlockId> = marks.keys().copied().collect();
    let nbrs = neighbor_map(d, &leaves);
    let lvl = |id: BlockId| d.level(id) as i32;
    let mut target: BTreeMap<BlockId, i32> = marks
        .iter()
        .map(|(&id, &m)| (id, (lvl(id) + m as i32).max(0)))
        .collect();
    loop {
        let forced: Vec<BlockId> = leaves
            .iter()
            .copied()
            .filter(|&id| target[&id] <= lvl(id))
            .filter(|&id| nbrs[&id].iter().any(|&n| target[&n].max(lvl(n)) > lvl(id) + 1))
            .collect();
        if forced.is_empty() {
            break;
        }
        for id in forced {
            target.insert(id, lvl(id) + 1);
        }
    }
    let mut groups: BTreeMap<BlockId, Vec<BlockId>> = BTreeMap::new();
    for &id in &leaves {
        if target[&id] < lvl(id) {
            groups.entry(d.parent(id).unwrap()).or_default().push(id);
        }
    }
    let per_split = 1usize << d.dim();
    groups.retain(|_, m| m.len() == per_split);
    let mut fin: BTreeMap<BlockId, i32> = leaves.iter().map(|&id| (id, target[&id].max(lvl(id)))).collect();
    let mut merged: BTreeSet<BlockId> = BTreeSet::new();
    loop {
        let mut progress = false;
        for (&parent, members) in &groups {
            if merged.contains(&parent) {
                continue;
            }
            let ok = members.iter().all(|&m| {
                nbrs[&m]
                    .iter()
                    .filter(|n| !members.contains(n))
                    .all(|n| fin[n] <= lvl(m))
            });
            if ok {
                merged.insert(parent);
                for &m in members {
                    fin.insert(m, lvl(m) - 1);
                }
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    let mut out = BTreeSet::new();
    for &id in &leaves {
        if fin[&id] > lvl(id) {
            out.extend(d.children(id).unwrap());
        } else if fin[&id] == lvl(id) {
            out.insert(id);
        }
    }
    out.extend(merged);
    out.into_iter().collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
