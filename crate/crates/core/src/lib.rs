//! Distributed dynamic repartitioning for block-structured adaptive mesh
//! refinement.
//!
//! The crate provides a forest-of-octrees block partitioning whose metadata
//! is fully distributed, a deterministic multi-rank fabric to execute rank
//! programs against, and the four-stage AMR pipeline that runs on top of it:
//!
//! 1. block-level refinement/coarsening with 2:1 balance enforcement
//!    ([`refinement`]),
//! 2. construction of a lightweight proxy forest ([`proxy`]),
//! 3. dynamic load balancing of the proxy blocks, either along space-filling
//!    curves or by diffusion ([`balancing`]),
//! 4. migration, refinement and coarsening of the block data through
//!    registered serialization callbacks ([`migration`]).
//!
//! [`pipeline`] chains the stages, [`scenario`] builds the synthetic benchmark
//! and [`grid_payload`] provides a conservative reference block payload.

pub mod balancing;
pub mod block_id;
pub mod curve;
pub mod domain;
pub mod error;
pub mod forest;
pub mod grid_payload;
pub mod local;
pub mod migration;
pub mod pipeline;
pub mod proxy;
pub mod refinement;
pub mod scenario;
pub mod sim;

pub use balancing::{
    balance_forest, BalanceConfig, BalanceDecision, BalanceReport, BalanceRun, Balancer, BalancerSpec,
    DiffusionBalancer, DiffusionMode, SfcBalancer, Termination,
};
pub use block_id::BlockId;
pub use curve::CurveOrder;
pub use domain::{AdjacencyKind, BlockBox, Domain};
pub use error::{Error, Result};
pub use forest::{
    check_tiling, check_two_to_one, parse_dump, Block, BlockForest, DumpRecord, LeafIndex, LeafSet, NeighborRecord,
    Payloads,
};
pub use grid_payload::{
    level_stats, merge_payloads, split_payload, GridDescriptor, GridPayload, LevelShare, LevelStats,
};
pub use local::LocalForest;
pub use migration::{migrate_forest, DataDescriptor, DataHandle, DataRegistry, MigrationStats};
pub use pipeline::{run_pipeline, CycleReport, PipelineConfig, PipelineReport};
pub use proxy::{
    build_proxy, level_weight, set_proxy_weights, unit_weight, ActualLink, ProxyBlock, ProxyForest,
    ProxyMigrationStats, ProxyOrigin, ProxyPart, WeightFn,
};
pub use refinement::{adapted_leaves, refine_forest, sequential_targets, Marker, RefineOutcome, ThresholdMarker};
pub use scenario::{run_benchmark, Benchmark, RunReport, ScenarioConfig, Trigger};
pub use sim::{CollectiveKind, Comm, Fabric, Metrics, Rank, RunOutput, StageMetrics};
