//! The AMR cycle: mark → refine/coarsen with 2:1 enforcement → proxy →
//! balance → migrate, executed as one program per rank on the fabric.
//!
//! A cycle ends early after the first boolean reduction if nothing was
//! marked, or after the second if no change survived 2:1 enforcement,
//! unless a rebalance is forced, in which case the proxy forest mirrors the
//! current topology and only the distribution changes. Block weights are
//! evaluated on the proxies of every cycle.

use std::sync::Arc;

use crate::balancing::{balance_local, BalanceConfig, BalanceRun, Termination};
use crate::error::{Error, Result};
use crate::forest::BlockForest;
use crate::local::LocalForest;
use crate::migration::{migrate_local, MigrationStats};
use crate::proxy::{build_proxy_local, unit_weight, WeightFn};
use crate::refinement::{refine_local, Marker, RefineOutcome};
use crate::sim::{Comm, Fabric, Metrics};

#[derive(Clone)]
pub struct PipelineConfig {
    pub marker: Arc<dyn Marker>,
    pub balance: BalanceConfig,
    pub weight: WeightFn,
    /// Number of AMR cycles; the pipeline stops earlier once a cycle
    /// changes nothing.
    pub cycles: u32,
    /// Run proxy, balancing and migration even if no block changes.
    pub force_rebalance: bool,
}

impl PipelineConfig {
    pub fn new(marker: Arc<dyn Marker>, balance: BalanceConfig) -> Self {
        PipelineConfig {
            marker,
            balance,
            weight: unit_weight(),
            cycles: 1,
            force_rebalance: false,
        }
    }
}

/// What happened in one cycle, collected over all ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleReport {
    pub outcome: RefineOutcome,
    /// Whether proxy, balancing and migration ran.
    pub rebalanced: bool,
    pub main_iterations: u32,
    pub termination: Option<Termination>,
    /// Fraction of the cells (of the forest before the cycle) whose size
    /// changes.
    pub cells_resized_fraction: f64,
    /// Per-rank, per-level block counts of the actual forest at the start
    /// of the cycle.
    pub counts_initial: Vec<Vec<u64>>,
    /// Per-rank, per-level proxy counts before balancing.
    pub counts_before: Vec<Vec<u64>>,
    /// Per-rank, per-level proxy counts after balancing.
    pub counts_after: Vec<Vec<u64>>,
    pub migration: Vec<MigrationStats>,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub cycles: Vec<CycleReport>,
    pub metrics: Metrics,
}

impl PipelineReport {
    /// Main iterations summed over all cycles.
    pub fn main_iterations(&self) -> u32 {
        self.cycles.iter().map(|c| c.main_iterations).sum()
    }
}

/// One rank's view of one cycle.
#[derive(Clone, Debug, Default)]
struct RankCycle {
    outcome: Option<RefineOutcome>,
    run: Option<BalanceRun>,
    /// Blocks whose level changes (every block holds the same number of cells).
    resized: u64,
    initial: Vec<u64>,
    before: Vec<u64>,
    after: Vec<u64>,
    migration: MigrationStats,
}

fn level_counts(levels: usize, ids: impl Iterator<Item = u8>) -> Vec<u64> {
    let mut c = vec![0u64; levels];
    for l in ids {
        c[l as usize] += 1;
    }
    c
}

fn tag(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| e.in_stage(stage)
}

async fn cycle_local(
    comm: &mut Comm,
    mut local: LocalForest,
    config: &PipelineConfig,
) -> Result<(LocalForest, RankCycle)> {
    let d = local.domain.clone();
    let levels = d.max_levels() as usize + 1;
    let mut rc = RankCycle {
        initial: level_counts(levels, local.blocks.values().map(|b| b.level)),
        ..Default::default()
    };
    comm.set_stage("refinement");
    let outcome = refine_local(comm, &mut local, &*config.marker)
        .await
        .map_err(tag("refinement"))?;
    rc.outcome = Some(outcome);
    if !outcome.proceeds() && !config.force_rebalance {
        return Ok((local, rc));
    }
    rc.resized = local.blocks.values().filter(|b| b.target_level != b.level).count() as u64;

    comm.set_stage("proxy");
    let mut part = build_proxy_local(comm, &local).await.map_err(tag("proxy"))?;
    part.set_weights(&*config.weight).map_err(tag("proxy"))?;
    rc.before = level_counts(levels, part.proxies.values().map(|p| p.level));

    comm.set_stage("balance");
    let balancer = config.balance.build().map_err(tag("balance"))?;
    let run = balance_local(comm, &mut part, &*balancer)
        .await
        .map_err(tag("balance"))?;
    rc.run = Some(run);
    rc.after = level_counts(levels, part.proxies.values().map(|p| p.level));

    comm.set_stage("migration");
    let (local, stats) = migrate_local(comm, local, part).await.map_err(tag("migration"))?;
    rc.migration = stats;
    Ok((local, rc))
}

/// Runs up to `config.cycles` AMR cycles on `fabric` and returns the new
/// forest plus per-cycle reports and the communication metrics.
pub fn run_pipeline(
    forest: BlockForest,
    config: &PipelineConfig,
    fabric: &Fabric,
) -> Result<(BlockForest, PipelineReport)> {
    if fabric.size() != forest.num_ranks() {
        return Err(Error::Config(format!(
            "fabric has {} ranks, forest {}",
            fabric.size(),
            forest.num_ranks()
        )));
    }
    config.balance.validate()?;
    let domain = forest.domain().clone();
    let registry = forest.registry().clone();
    let cfg = config.clone();
    let out = fabric.run_each(forest.into_locals(), move |mut comm, mut local| {
        let cfg = cfg.clone();
        async move {
            let mut cycles = Vec::new();
            for _ in 0..cfg.cycles {
                let (next, rc) = cycle_local(&mut comm, local, &cfg).await?;
                local = next;
                let stop = rc.run.is_none();
                cycles.push(rc);
                if stop {
                    break;
                }
            }
            Ok((local, cycles))
        }
    })?;
    let metrics = out.metrics;
    let mut locals = Vec::with_capacity(out.results.len());
    let mut per_rank = Vec::with_capacity(out.results.len());
    for (local, cycles) in out.results {
        locals.push(local);
        per_rank.push(cycles);
    }
    let n_cycles = per_rank[0].len();
    let cycles = (0..n_cycles)
        .map(|c| {
            let first = &per_rank[0][c];
            let run = first.run;
            CycleReport {
                outcome: first.outcome.expect("every cycle refines"),
                rebalanced: run.is_some(),
                main_iterations: run.map_or(0, |r| r.main_iterations),
                termination: run.map(|r| r.termination),
                cells_resized_fraction: {
                    let resized: u64 = per_rank.iter().map(|r| r[c].resized).sum();
                    let total: u64 = per_rank.iter().flat_map(|r| r[c].initial.iter()).sum();
                    resized as f64 / total.max(1) as f64
                },
                counts_initial: per_rank.iter().map(|r| r[c].initial.clone()).collect(),
                counts_before: per_rank.iter().map(|r| r[c].before.clone()).collect(),
                counts_after: per_rank.iter().map(|r| r[c].after.clone()).collect(),
                migration: per_rank.iter().map(|r| r[c].migration).collect(),
            }
        })
        .collect();
    let forest = BlockForest::from_locals(domain, registry, locals);
    Ok((forest, PipelineReport { cycles, metrics }))
}
