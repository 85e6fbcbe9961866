//! The distributed diffusion balancer against a sequential, global-view
//! re-implementation of the same rules: flow iterations with snapshot
//! semantics, outflow/inflow adapted to the granular global average, push
//! and pull block selection by connection score, and request resolution.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use amr_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-9;

struct Instance {
    domain: Domain,
    ranks: usize,
    owner: BTreeMap<BlockId, Rank>,
    weight: BTreeMap<BlockId, f64>,
    neighbors: BTreeMap<BlockId, Vec<BlockId>>,
    per_level: bool,
    pushpull: bool,
    flow_iters: u32,
    max_main_iters: u32,
}

struct Outcome {
    owner: BTreeMap<BlockId, Rank>,
    main_iterations: u32,
    termination: Termination,
}

impl Instance {
    fn bucket(&self, id: BlockId) -> usize {
        if self.per_level {
            self.domain.level(id) as usize
        } else {
            0
        }
    }

    fn buckets(&self) -> usize {
        if self.per_level {
            self.domain.max_levels() as usize + 1
        } else {
            1
        }
    }

    fn fit(&self, owner: &BTreeMap<BlockId, Rank>, id: BlockId, from: Rank, to: Rank) -> i32 {
        self.neighbors[&id]
            .iter()
            .map(|&n| {
                let s = common::strength(&self.domain, id, n);
                if owner[&n] == to {
                    s
                } else if owner[&n] == from {
                    -s
                } else {
                    0
                }
            })
            .sum()
    }

    /// Largest `sign·f·scale` among neighbors with `sign·f > 0`, lowest rank
    /// on ties.
    fn pick(flows: &BTreeMap<Rank, f64>, scale: &BTreeMap<Rank, f64>, sign: f64) -> Option<Rank> {
        let mut best: Option<(Rank, f64)> = None;
        for (&j, &f) in flows {
            if sign * f <= 0.0 {
                continue;
            }
            let v = sign * f * scale[&j];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        best.map(|(j, _)| j)
    }

    fn run(&self) -> Outcome {
        let p = self.ranks;
        let nb = self.buckets();
        let mut owner = self.owner.clone();
        let mut main_iterations = 0;
        let mut iteration = 0;
        loop {
            // loads and block counts per rank and bucket (ascending ids)
            let mut load = vec![vec![0.0; nb]; p];
            let mut count = vec![vec![0.0; nb]; p];
            for (&id, &r) in &owner {
                load[r][self.bucket(id)] += self.weight[&id];
                count[r][self.bucket(id)] += 1.0;
            }
            let mut limit = vec![0.0; nb];
            let mut lower = vec![0.0; nb];
            for l in 0..nb {
                let (mut total, mut n) = (0.0, 0.0);
                for r in 0..p {
                    total += load[r][l];
                    n += count[r][l];
                }
                let avg = total / p as f64;
                let (granular, floor) = if n > 0.0 && total > 0.0 {
                    let g = total / n;
                    (g * (avg / g - EPS).ceil(), g * (avg / g + EPS).floor())
                } else {
                    (0.0, 0.0)
                };
                limit[l] = f64::max(granular, avg);
                lower[l] = floor;
            }
            let over = |w: f64, m: f64| w > m + EPS * m.max(1.0);
            if !(0..p).any(|r| (0..nb).any(|l| over(load[r][l], limit[l]))) {
                return Outcome {
                    owner,
                    main_iterations,
                    termination: Termination::Converged,
                };
            }
            if iteration >= self.max_main_iters {
                return Outcome {
                    owner,
                    main_iterations,
                    termination: Termination::IterationCap,
                };
            }

            // process graph and flows
            let graph: Vec<BTreeSet<Rank>> = (0..p)
                .map(|r| {
                    owner
                        .iter()
                        .filter(|&(_, &o)| o == r)
                        .flat_map(|(id, _)| self.neighbors[id].iter().map(|n| owner[n]))
                        .filter(|&o| o != r)
                        .collect()
                })
                .collect();
            let alpha = |i: Rank, j: Rank| 1.0 / (graph[i].len().max(graph[j].len()) + 1) as f64;
            let mut w = load.clone();
            let mut flow: Vec<BTreeMap<Rank, Vec<f64>>> = (0..p)
                .map(|i| graph[i].iter().map(|&j| (j, vec![0.0; nb])).collect())
                .collect();
            for _ in 0..self.flow_iters {
                let snap = w.clone();
                for i in 0..p {
                    for &j in &graph[i] {
                        let a = alpha(i, j);
                        for l in 0..nb {
                            let fp = a * (snap[i][l] - snap[j][l]);
                            flow[i].get_mut(&j).unwrap()[l] += fp;
                            w[i][l] -= fp;
                        }
                    }
                }
            }

            let pull = self.pushpull && iteration % 2 == 1;
            let mut targets: BTreeMap<BlockId, Rank> = BTreeMap::new();
            let blocks_of = |r: Rank, l: usize| -> Vec<BlockId> {
                owner
                    .iter()
                    .filter(|&(&id, &o)| o == r && self.bucket(id) == l)
                    .map(|(&id, _)| id)
                    .collect()
            };
            if !pull {
                for i in 0..p {
                    let scale: BTreeMap<Rank, f64> = graph[i].iter().map(|&j| (j, 1.0 / alpha(i, j))).collect();
                    for l in 0..nb {
                        let mut flows: BTreeMap<Rank, f64> = flow[i].iter().map(|(&j, f)| (j, f[l])).collect();
                        let room = |j: Rank| load[j][l] < limit[l] - EPS * limit[l].max(1.0);
                        if flows.iter().any(|(&j, &f)| f > 0.0 && room(j)) {
                            for (&j, f) in flows.iter_mut() {
                                if *f > 0.0 && !room(j) {
                                    *f = 0.0;
                                }
                            }
                        }
                        let positive: f64 = flows.values().filter(|&&f| f > 0.0).sum();
                        let mut out = if over(load[i][l], limit[l]) {
                            positive.max(load[i][l] - limit[l])
                        } else {
                            positive
                        };
                        out = out.min((load[i][l] - lower[l]).max(0.0));
                        let candidates = blocks_of(i, l);
                        let mut marked = BTreeSet::new();
                        while out > EPS {
                            let Some(j) = Self::pick(&flows, &scale, 1.0) else {
                                break;
                            };
                            let mut best: Option<(i32, BlockId)> = None;
                            for &id in &candidates {
                                if marked.contains(&id) || self.weight[&id] > out + EPS {
                                    continue;
                                }
                                let s = self.fit(&owner, id, i, j);
                                if best.is_none_or(|(bs, _)| s > bs) {
                                    best = Some((s, id));
                                }
                            }
                            match best {
                                Some((_, id)) => {
                                    marked.insert(id);
                                    targets.insert(id, j);
                                    *flows.get_mut(&j).unwrap() -= self.weight[&id];
                                    out -= self.weight[&id];
                                }
                                None => {
                                    flows.insert(j, 0.0);
                                }
                            }
                        }
                    }
                }
            } else {
                // requests[provider][requester] in request order
                let mut requests: Vec<BTreeMap<Rank, Vec<BlockId>>> = vec![BTreeMap::new(); p];
                for i in 0..p {
                    let scale: BTreeMap<Rank, f64> = graph[i].iter().map(|&j| (j, 1.0 / alpha(i, j))).collect();
                    for l in 0..nb {
                        let mut flows: BTreeMap<Rank, f64> = flow[i].iter().map(|(&j, f)| (j, f[l])).collect();
                        let spare = |j: Rank| load[j][l] > lower[l] + EPS * lower[l].max(1.0);
                        if flows.iter().any(|(&j, &f)| f < 0.0 && spare(j)) {
                            for (&j, f) in flows.iter_mut() {
                                if *f < 0.0 && !spare(j) {
                                    *f = 0.0;
                                }
                            }
                        }
                        let negative: f64 = flows.values().filter(|&&f| f < 0.0).map(|f| -f).sum();
                        let short = load[i][l] < lower[l] - EPS * lower[l].max(1.0);
                        let mut inflow = if short {
                            negative.max(lower[l] - load[i][l])
                        } else {
                            negative
                        };
                        inflow = inflow.min((limit[l] - load[i][l]).max(0.0));
                        let mut booked = BTreeSet::new();
                        while inflow > EPS {
                            let Some(j) = Self::pick(&flows, &scale, -1.0) else {
                                break;
                            };
                            let mut best: Option<(i32, BlockId)> = None;
                            for id in blocks_of(j, l) {
                                if booked.contains(&id) || self.weight[&id] > inflow + EPS {
                                    continue;
                                }
                                let s = self.fit(&owner, id, j, i);
                                if best.is_none_or(|(bs, _)| s > bs) {
                                    best = Some((s, id));
                                }
                            }
                            match best {
                                Some((_, id)) => {
                                    booked.insert(id);
                                    requests[j].entry(i).or_default().push(id);
                                    *flows.get_mut(&j).unwrap() += self.weight[&id];
                                    inflow -= self.weight[&id];
                                }
                                None => {
                                    flows.insert(j, 0.0);
                                }
                            }
                        }
                    }
                }
                for (j, incoming) in requests.iter().enumerate() {
                    let mut winners: BTreeMap<BlockId, (Rank, f64)> = BTreeMap::new();
                    for (&i, ids) in incoming {
                        for &id in ids {
                            let f = flow[j][&i][self.bucket(id)];
                            if winners.get(&id).is_none_or(|&(_, g)| f > g) {
                                winners.insert(id, (i, f));
                            }
                        }
                    }
                    targets.extend(winners.into_iter().map(|(id, (i, _))| (id, i)));
                }
            }
            for (id, to) in targets {
                owner.insert(id, to);
            }
            main_iterations += 1;
            iteration += 1;
        }
    }
}

fn random_instance(case: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd1ff_0000 + case);
    let domain = if case % 5 == 4 {
        Domain::new(3, [rng.gen_range(1..=2), rng.gen_range(1..=2), 1], rng.gen_range(1..=2)).unwrap()
    } else {
        Domain::new(2, [rng.gen_range(1..=4), rng.gen_range(1..=3), 1], rng.gen_range(1..=3)).unwrap()
    };
    let split_prob = rng.gen_range(0.2..0.6);
    let leaves = common::random_leaves(&mut rng, &domain, split_prob);
    let ranks = rng.gen_range(2..=8);
    let owner: BTreeMap<BlockId, Rank> = if rng.gen_bool(0.5) {
        leaves.iter().map(|&id| (id, rng.gen_range(0..ranks))).collect()
    } else {
        // skewed: everything on a few ranks
        let used = rng.gen_range(1..=ranks.min(3));
        leaves.iter().map(|&id| (id, rng.gen_range(0..used))).collect()
    };
    let level_weights = rng.gen_bool(0.3);
    let weight = leaves
        .iter()
        .map(|&id| {
            (
                id,
                if level_weights {
                    2f64.powi(domain.level(id) as i32)
                } else {
                    1.0
                },
            )
        })
        .collect();
    let neighbors = common::neighbor_map(&domain, &leaves);
    Instance {
        domain,
        ranks,
        owner,
        weight,
        neighbors,
        per_level: rng.gen_bool(0.6),
        pushpull: rng.gen_bool(0.5),
        flow_iters: rng.gen_range(1..=15),
        max_main_iters: rng.gen_range(1..=12),
    }
}

fn distributed(inst: &Instance) -> (BTreeMap<BlockId, Rank>, BalanceReport) {
    let forest = BlockForest::from_leaves(
        inst.domain.clone(),
        inst.ranks,
        inst.owner.iter().map(|(&id, &r)| (id, r)),
    )
    .unwrap();
    let fabric = Fabric::new(inst.ranks).workers(3);
    let (mut proxy, _) = build_proxy(&forest, &fabric).unwrap();
    let weights = Arc::new(inst.weight.clone());
    let weight: WeightFn = Arc::new(move |_, p| weights[&p.id]);
    set_proxy_weights(&mut proxy, &weight).unwrap();
    let mode = if inst.pushpull {
        "diffusion:pushpull"
    } else {
        "diffusion:push"
    };
    let mut config = BalanceConfig::new(mode.parse().unwrap());
    config.per_level = inst.per_level;
    config.flow_iters = inst.flow_iters;
    config.max_main_iters = inst.max_main_iters;
    let (balanced, report, _) = balance_forest(proxy, &config, &fabric).unwrap();
    balanced.validate().unwrap();
    (balanced.ownership().into_iter().collect(), report)
}

#[test]
fn distributed_diffusion_matches_sequential_rules() {
    let mut moved = 0;
    let mut converged = 0;
    for case in 0..500 {
        let inst = random_instance(case);
        let expected = inst.run();
        let (owner, report) = distributed(&inst);
        assert_eq!(report.termination, expected.termination, "case {case}");
        assert_eq!(report.main_iterations, expected.main_iterations, "case {case}");
        assert_eq!(owner, expected.owner, "case {case}");
        moved += owner.iter().filter(|(id, r)| inst.owner[id] != **r).count();
        converged += (expected.termination == Termination::Converged) as usize;
    }
    assert!(moved > 1000, "only {moved} blocks moved");
    assert!(converged > 100, "only {converged} runs converged");
}

#[test]
fn per_level_push_pull_reaches_ceiling_on_skewed_levels() {
    // every rank owns coarse blocks, but all refined blocks start on ranks
    // 0 and 1: every level must end with max = ceil(avg)
    let d = Domain::new(2, [4, 4, 1], 2).unwrap();
    let mut set = LeafSet::roots(&d);
    set.refine_where(2, |d, id| d.coords(id)[0] < 1 << d.level(id)).unwrap();
    let leaves: Vec<BlockId> = set.ids().collect();
    for mode in ["diffusion:push", "diffusion:pushpull"] {
        let inst = Instance {
            domain: d.clone(),
            ranks: 6,
            owner: skewed(&d, &leaves, 6),
            weight: leaves.iter().map(|&id| (id, 1.0)).collect(),
            neighbors: common::neighbor_map(&d, &leaves),
            per_level: true,
            pushpull: mode.ends_with("pushpull"),
            flow_iters: if mode.ends_with("pushpull") { 5 } else { 15 },
            max_main_iters: 40,
        };
        let expected = inst.run();
        let (owner, report) = distributed(&inst);
        assert_eq!(owner, expected.owner, "{mode}");
        assert_eq!(report.termination, Termination::Converged, "{mode}");
        for l in &report.levels {
            assert!(
                l.max_load <= (l.avg_load - 1e-9).ceil(),
                "{mode} level {}: {} > ceil({})",
                l.level,
                l.max_load,
                l.avg_load
            );
        }
    }
}

/// Coarse blocks round-robin over all ranks, refined blocks alternate
/// between ranks 0 and 1.
fn skewed(d: &Domain, leaves: &[BlockId], ranks: usize) -> BTreeMap<BlockId, Rank> {
    let (mut coarse, mut fine) = (0, 0);
    leaves
        .iter()
        .map(|&id| {
            let r = if d.level(id) == 0 {
                coarse += 1;
                (coarse - 1) % ranks
            } else {
                fine += 1;
                (fine - 1) % 2
            };
            (id, r)
        })
        .collect()
}
