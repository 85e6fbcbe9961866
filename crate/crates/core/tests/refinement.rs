//! Distributed refinement/coarsening against the sequential rules and a
//! geometric oracle, in two and three dimensions.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use amr_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    domain: Domain,
    ranks: usize,
    owners: Vec<(BlockId, Rank)>,
    marks: BTreeMap<BlockId, i8>,
}

fn case(seed: u64, dim: u8) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = if dim == 2 {
        Domain::new(2, [rng.gen_range(1..=3), rng.gen_range(1..=3), 1], rng.gen_range(1..=4)).unwrap()
    } else {
        Domain::new(
            3,
            [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)],
            rng.gen_range(1..=3),
        )
        .unwrap()
    };
    let split_prob = rng.gen_range(0.1..0.4);
    let leaves = common::random_leaves(&mut rng, &domain, split_prob);
    let ranks = rng.gen_range(1..=5);
    let owners = leaves.iter().map(|&id| (id, rng.gen_range(0..ranks))).collect();
    let p_refine = rng.gen_range(0.0..0.3);
    let p_coarsen = rng.gen_range(0.0..0.9);
    let marks = common::random_marks(&mut rng, &domain, &leaves, p_refine, p_coarsen);
    Case {
        domain,
        ranks,
        owners,
        marks,
    }
}

fn distributed_targets(c: &Case) -> (BTreeMap<BlockId, u8>, RefineOutcome) {
    let forest = BlockForest::from_leaves(c.domain.clone(), c.ranks, c.owners.clone()).unwrap();
    let marks = Arc::new(c.marks.clone());
    let marker = move |_: &Domain, b: &Block| marks[&b.id];
    let (forest, outcome, _) = refine_forest(forest, Arc::new(marker), &Fabric::new(c.ranks)).unwrap();
    (forest.blocks().map(|b| (b.id, b.target_level)).collect(), outcome)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn distributed_refinement_matches_the_oracle(seed in any::<u64>(), dim in 2u8..=3) {
        let c = case(seed, dim);
        let (targets, outcome) = distributed_targets(&c);
        prop_assert_eq!(&targets, &sequential_targets(&c.domain, &c.marks).unwrap());

        let leaves = adapted_leaves(&c.domain, targets.iter().map(|(&id, &t)| (id, t))).unwrap();
        prop_assert_eq!(&leaves, &common::adapt(&c.domain, &c.marks));
        prop_assert!(common::two_to_one(&c.domain, &leaves));
        check_tiling(&c.domain, leaves.iter().copied()).unwrap();

        let changed = targets.iter().any(|(&id, &t)| t != c.domain.level(id));
        // a coarsening mark on a root block is ignored
        let marked = c.marks.iter().any(|(&id, &m)| m == 1 || (m == -1 && c.domain.level(id) > 0));
        prop_assert_eq!(outcome.proceeds(), changed);
        prop_assert_eq!(outcome == RefineOutcome::NothingMarked, !marked);
    }

    #[test]
    fn targets_move_at_most_one_level(seed in any::<u64>(), dim in 2u8..=3) {
        let c = case(seed, dim);
        let (targets, _) = distributed_targets(&c);
        for (&id, &t) in &targets {
            let l = c.domain.level(id);
            prop_assert!(t + 1 >= l && t <= l + 1, "{} from {} to {}", id, l, t);
            prop_assert!(t <= c.domain.max_levels());
            // coarsening only where asked for
            if t < l {
                prop_assert_eq!(c.marks[&id], -1);
            }
            // a refinement mark is never dropped below the finest level
            if c.marks[&id] == 1 && l < c.domain.max_levels() {
                prop_assert_eq!(t, l + 1);
            }
        }
    }
}

#[test]
fn root_coarsening_is_ignored_and_finest_refinement_rejected() {
    let d = Domain::new(2, [2, 1, 1], 1).unwrap();
    let kids = d.children(d.root_block(1)).unwrap();
    let mut marks: BTreeMap<BlockId, i8> = BTreeMap::from([(d.root_block(0), -1)]);
    marks.extend(kids.iter().map(|&k| (k, 0)));
    let targets = sequential_targets(&d, &marks).unwrap();
    assert!(targets.iter().all(|(&id, &t)| t == d.level(id)));

    let owners: Vec<(BlockId, Rank)> = marks.keys().enumerate().map(|(i, &id)| (id, i % 2)).collect();
    let c = Case {
        domain: d.clone(),
        ranks: 2,
        owners,
        marks: marks.clone(),
    };
    assert_eq!(distributed_targets(&c).1, RefineOutcome::NothingMarked);

    marks.insert(kids[0], 1);
    let err = sequential_targets(&d, &marks).unwrap_err();
    assert!(matches!(err.root(), Error::Contract(_)), "{err}");
    let forest = BlockForest::from_leaves(d.clone(), 2, c.owners.clone()).unwrap();
    let marks = Arc::new(marks);
    let marker = move |_: &Domain, b: &Block| marks[&b.id];
    let err = refine_forest(forest, Arc::new(marker), &Fabric::new(2)).unwrap_err();
    assert!(matches!(err.root(), Error::Contract(_)), "{err}");
}

#[test]
fn refinement_ripples_across_ranks() {
    // refining toward the corner shared by roots 0 and 1 forces 2:1 splits
    // in blocks owned by other ranks
    let d = Domain::new(2, [4, 1, 1], 3).unwrap();
    let owners: Vec<(BlockId, Rank)> = (0..4).map(|r| (d.root_block(r), r as usize)).collect();
    let forest = BlockForest::from_leaves(d.clone(), 4, owners.clone()).unwrap();
    let corner = |d: &Domain, b: &Block| {
        let c = d.coords(b.id);
        (c[0] + 1 == 1 << b.level && c[1] == 0 && b.level < d.max_levels()) as i8
    };
    let mut cfg = PipelineConfig::new(Arc::new(corner), BalanceConfig::new("sfc:morton".parse().unwrap()));
    cfg.cycles = 3;
    let (out, report) = run_pipeline(forest, &cfg, &Fabric::new(4)).unwrap();
    assert_eq!(report.cycles.len(), 3);

    let mut leaves: Vec<BlockId> = owners.iter().map(|&(id, _)| id).collect();
    for _ in 0..3 {
        let marks: BTreeMap<BlockId, i8> = leaves
            .iter()
            .map(|&id| {
                let c = d.coords(id);
                let l = d.level(id);
                (id, (c[0] + 1 == 1 << l && c[1] == 0 && l < d.max_levels()) as i8)
            })
            .collect();
        leaves = common::adapt(&d, &marks);
    }
    assert_eq!(out.leaf_ids(), leaves);
    assert!(leaves.iter().any(|&id| d.root_of(id) == 1 && d.level(id) > 1));
}
