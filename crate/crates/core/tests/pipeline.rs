//! The AMR cycle end to end: early aborts, forced rebalancing and
//! multi-cycle runs.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use amr_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forest_with_grid(d: &Domain, ranks: usize, owners: Vec<(BlockId, Rank)>) -> (BlockForest, DataHandle<GridPayload>) {
    let mut forest = BlockForest::from_leaves(d.clone(), ranks, owners).unwrap();
    let h = forest.register_data(GridDescriptor::default()).unwrap();
    for b in forest.blocks_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(b.id.raw());
        let g = GridPayload::from_fn(d.dim(), 4, b.level, |_| rng.gen_range(0.0..1.0)).unwrap();
        b.set_data(h, g);
    }
    (forest, h)
}

fn payloads(forest: &BlockForest, h: DataHandle<GridPayload>) -> BTreeMap<BlockId, (Rank, Vec<u8>)> {
    forest
        .blocks()
        .map(|b| (b.id, (b.owner, b.data_of(h).unwrap().encode())))
        .collect()
}

fn config(marker: impl Fn(&Domain, &Block) -> i8 + Send + Sync + 'static, balancer: &str) -> PipelineConfig {
    PipelineConfig::new(Arc::new(marker), BalanceConfig::new(balancer.parse().unwrap()))
}

/// Refines the block in the lower corner of the domain, one level per cycle.
fn corner(d: &Domain, b: &Block) -> i8 {
    (d.coords(b.id) == [0, 0, 0] && b.level < d.max_levels()) as i8
}

#[test]
fn nothing_marked_aborts_after_one_reduction() {
    let d = Domain::new(2, [3, 2, 1], 2).unwrap();
    let (forest, h) = forest_with_grid(&d, 3, (0..6).map(|r| (d.root_block(r), r as usize / 2)).collect());
    let before = (forest.dump(), payloads(&forest, h));
    let mut cfg = config(|_: &Domain, _: &Block| 0, "diffusion:pushpull");
    cfg.cycles = 4;
    let (after, report) = run_pipeline(forest, &cfg, &Fabric::new(3)).unwrap();
    assert_eq!(report.cycles.len(), 1);
    assert_eq!(report.cycles[0].outcome, RefineOutcome::NothingMarked);
    assert!(!report.cycles[0].rebalanced);
    assert_eq!((after.dump(), payloads(&after, h)), before);
    let m = &report.metrics;
    assert_eq!(m.collective_count(None, CollectiveKind::AllReduceBoolOr), 1);
    assert_eq!(m.collective_count(None, CollectiveKind::AllReduceSum), 0);
    assert_eq!(m.total().p2p_msgs, 0);
}

#[test]
fn marks_rejected_by_two_to_one_abort_after_two_reductions() {
    // one child of a family asks for coarsening, its siblings do not
    let d = Domain::new(2, [2, 1, 1], 1).unwrap();
    let owners: Vec<(BlockId, Rank)> = (0..2)
        .flat_map(|r| d.children(d.root_block(r)).unwrap())
        .map(|k| (k, 0))
        .collect();
    let (forest, h) = forest_with_grid(
        &d,
        2,
        owners.iter().enumerate().map(|(i, &(k, _))| (k, i / 4)).collect(),
    );
    let before = payloads(&forest, h);
    let lonely = owners[0].0;
    let cfg = config(move |_: &Domain, b: &Block| -((b.id == lonely) as i8), "sfc:hilbert");
    let (after, report) = run_pipeline(forest, &cfg, &Fabric::new(2)).unwrap();
    assert_eq!(report.cycles[0].outcome, RefineOutcome::NothingAccepted);
    assert_eq!(
        report.metrics.collective_count(None, CollectiveKind::AllReduceBoolOr),
        2
    );
    assert_eq!(report.metrics.total().collectives, 2 * 2);
    assert_eq!(payloads(&after, h), before);
}

#[test]
fn forced_rebalance_redistributes_an_unchanged_forest() {
    let d = Domain::new(3, [2, 2, 2], 2).unwrap();
    let set = LeafSet::uniform(&d, 1).unwrap();
    let ranks = 6;
    let (forest, h) = forest_with_grid(&d, ranks, set.ids().map(|id| (id, 0)).collect());
    let before = payloads(&forest, h);
    for balancer in ["sfc:morton", "sfc:hilbert", "diffusion:push", "diffusion:pushpull"] {
        let mut cfg = config(|_: &Domain, _: &Block| 0, balancer);
        cfg.force_rebalance = true;
        let (after, report) = run_pipeline(forest.clone(), &cfg, &Fabric::new(ranks)).unwrap();
        after.validate().unwrap();
        assert_eq!(report.cycles[0].outcome, RefineOutcome::NothingMarked);
        assert!(report.cycles[0].rebalanced);
        let counts: Vec<u64> = after.level_counts_per_rank().iter().map(|c| c.iter().sum()).collect();
        let total: u64 = counts.iter().sum();
        if balancer.starts_with("sfc") {
            // 64 blocks on 6 ranks
            assert_eq!(
                counts.iter().max(),
                Some(&total.div_ceil(ranks as u64)),
                "{balancer}: {counts:?}"
            );
        } else {
            // a single loaded rank has no process neighbors: diffusion
            // cannot start from there
            assert_eq!(counts[0], total, "{balancer}: {counts:?}");
        }
        let now = payloads(&after, h);
        assert_eq!(now.len(), before.len());
        for (id, (_, bytes)) in &before {
            assert_eq!(&now[id].1, bytes, "{balancer}: {id}");
        }
    }
}

#[test]
fn two_cycles_equal_two_single_cycle_runs() {
    let d = Domain::new(2, [3, 3, 1], 3).unwrap();
    let ranks = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = common::random_leaves(&mut rng, &d, 0.3);
    let owners = leaves.iter().map(|&id| (id, rng.gen_range(0..ranks))).collect();
    let (forest, h) = forest_with_grid(&d, ranks, owners);
    for balancer in ["sfc:hilbert", "diffusion:pushpull"] {
        let fabric = Fabric::new(ranks);
        let mut twice = config(corner, balancer);
        twice.cycles = 2;
        let (a, report) = run_pipeline(forest.clone(), &twice, &fabric).unwrap();
        assert_eq!(report.cycles.len(), 2);
        let once = config(corner, balancer);
        let (b, _) = run_pipeline(forest.clone(), &once, &fabric).unwrap();
        let (b, _) = run_pipeline(b, &once, &fabric).unwrap();
        assert_eq!(a.dump(), b.dump(), "{balancer}");
        assert_eq!(payloads(&a, h), payloads(&b, h), "{balancer}");
    }
}

#[test]
fn pipeline_stops_once_a_cycle_changes_nothing() {
    let d = Domain::new(2, [2, 2, 1], 2).unwrap();
    let (forest, _) = forest_with_grid(&d, 2, (0..4).map(|r| (d.root_block(r), r as usize % 2)).collect());
    let mut cfg = config(corner, "diffusion:push");
    cfg.cycles = 10;
    let (after, report) = run_pipeline(forest, &cfg, &Fabric::new(2)).unwrap();
    let outcomes: Vec<RefineOutcome> = report.cycles.iter().map(|c| c.outcome).collect();
    assert_eq!(
        outcomes,
        [
            RefineOutcome::Changed,
            RefineOutcome::Changed,
            RefineOutcome::NothingMarked
        ]
    );
    assert!(after.check_two_to_one());
    assert_eq!(after.leaf_ids().iter().map(|&id| d.level(id)).max(), Some(2));
}

#[test]
fn mismatched_fabric_is_rejected() {
    let d = Domain::new(2, [2, 1, 1], 1).unwrap();
    let forest = BlockForest::uniform(d, 0, 2).unwrap();
    let cfg = config(|_: &Domain, _: &Block| 0, "sfc:morton");
    let err = run_pipeline(forest, &cfg, &Fabric::new(3)).unwrap_err();
    assert!(matches!(err.root(), Error::Config(_)), "{err}");
}
