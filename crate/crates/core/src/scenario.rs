//! The synthetic benchmark: a tile of root blocks with a thin slab refined
//! to the finest level along a domain edge, replicated (mirrored on odd
//! tile indices so that neighboring tiles fit) once per group of ranks. An
//! AMR event coarsens all finest blocks and refines a region next to them,
//! so the finest region moves inwards and 2:1 enforcement adds further
//! refinement.
//!
//! Configuration is plain `key = value` text; see [`ScenarioConfig::parse`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::balancing::{BalanceConfig, BalancerSpec, Termination};
use crate::block_id::BlockId;
use crate::curve::CurveOrder;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::forest::{Block, BlockForest, LeafSet};
use crate::grid_payload::{level_stats, GridDescriptor, GridPayload};
use crate::migration::DataHandle;
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineReport};
use crate::proxy::{level_weight, unit_weight};
use crate::refinement::Marker;
use crate::sim::{Fabric, Metrics, Rank};

/// Axis-aligned box in root-block units of one tile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

/// Blocks intersecting `region` are refined to `level`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineRegion {
    pub level: u8,
    pub region: TileBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trigger {
    /// All finest blocks outside the box are marked for coarsening, all
    /// coarser blocks inside it for refinement.
    Shift(TileBox),
    /// Every block is marked +1 or −1 with probability `fraction / 2` each
    /// (where legal).
    Random(f64),
    /// Nothing is marked (useful with `force_rebalance`).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Unit,
    /// `2^level`, the work of level-subcycled time stepping.
    Level,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub dim: u8,
    /// Root blocks per tile.
    pub tile_roots: [u32; 3],
    pub max_levels: u8,
    pub ranks: usize,
    /// Ranks per tile when `tiles` is not given.
    pub ranks_per_tile: usize,
    /// Tile grid `[tx, ty]`; derived from `ranks` if `None`.
    pub tiles: Option<[u32; 2]>,
    pub refine: Vec<RefineRegion>,
    pub trigger: Trigger,
    pub balance: BalanceConfig,
    pub weights: WeightKind,
    /// Cells per block edge of the grid payload.
    pub payload_n: u32,
    pub cycles: u32,
    pub force_rebalance: bool,
    pub seed: u64,
    /// Fabric worker threads (does not influence results).
    pub workers: usize,
}

fn tile_box(lo: [f64; 3], hi: [f64; 3]) -> TileBox {
    TileBox { lo, hi }
}

impl Default for ScenarioConfig {
    /// The benchmark: 3×3×1 roots per tile, four levels, a level-3 slab in
    /// the corner root, 16 ranks per tile.
    fn default() -> Self {
        ScenarioConfig {
            dim: 3,
            tile_roots: [3, 3, 1],
            max_levels: 3,
            ranks: 16,
            ranks_per_tile: 16,
            tiles: None,
            refine: vec![RefineRegion {
                level: 3,
                region: tile_box([0.0, 0.0, 0.0], [0.25, 0.5, 1.0]),
            }],
            trigger: Trigger::Shift(tile_box([0.0, 0.5, 0.0], [0.25, 2.0, 1.0])),
            balance: BalanceConfig::new(BalancerSpec::Diffusion(crate::balancing::DiffusionMode::PushPull)),
            weights: WeightKind::Unit,
            payload_n: 4,
            cycles: 1,
            force_rebalance: false,
            seed: 1,
            workers: 1,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_nums<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split_whitespace().map(|x| parse_num(key, x)).collect()
}

fn parse_box(key: &str, v: &[f64]) -> Result<TileBox> {
    if v.len() != 6 {
        return Err(Error::Config(format!("{key}: a box needs x0 x1 y0 y1 z0 z1")));
    }
    Ok(tile_box([v[0], v[2], v[4]], [v[1], v[3], v[5]]))
}

impl ScenarioConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    ///
    /// | key | value |
    /// |-----|-------|
    /// | `dim` | 2 or 3 |
    /// | `tile_roots` | `rx ry rz` |
    /// | `max_levels` | finest level |
    /// | `ranks`, `ranks_per_tile` | integers |
    /// | `tiles` | `tx ty` |
    /// | `refine` | `level x0 x1 y0 y1 z0 z1` (repeatable; the first occurrence replaces the default) |
    /// | `trigger` | `shift x0 x1 y0 y1 z0 z1`, `random fraction` or `none` |
    /// | `balancer` | `sfc:morton`, `sfc:hilbert`, `diffusion:push`, `diffusion:pushpull` |
    /// | `flow_iters`, `max_main_iters` | integers (default per balancer) |
    /// | `per_level`, `weighted`, `force_rebalance` | booleans |
    /// | `tolerance` | number ≥ 1 |
    /// | `weights` | `unit` or `level` |
    /// | `payload_n`, `cycles`, `seed`, `workers` | integers |
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ScenarioConfig::default();
        let mut refine_seen = false;
        let mut flow_iters = None;
        let mut max_main_iters = None;
        let mut knobs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dim" => c.dim = parse_num(key, value)?,
                "tile_roots" => {
                    let v: Vec<u32> = parse_nums(key, value)?;
                    if v.len() != 3 {
                        return Err(Error::Config("tile_roots needs three extents".into()));
                    }
                    c.tile_roots = [v[0], v[1], v[2]];
                }
                "max_levels" => c.max_levels = parse_num(key, value)?,
                "ranks" => c.ranks = parse_num(key, value)?,
                "ranks_per_tile" => c.ranks_per_tile = parse_num(key, value)?,
                "tiles" => {
                    let v: Vec<u32> = parse_nums(key, value)?;
                    if v.len() != 2 {
                        return Err(Error::Config("tiles needs two counts".into()));
                    }
                    c.tiles = Some([v[0], v[1]]);
                }
                "refine" => {
                    let v: Vec<f64> = parse_nums(key, value)?;
                    if v.len() != 7 {
                        return Err(Error::Config("refine needs a level and a box".into()));
                    }
                    if !refine_seen {
                        c.refine.clear();
                        refine_seen = true;
                    }
                    c.refine.push(RefineRegion {
                        level: v[0] as u8,
                        region: parse_box(key, &v[1..])?,
                    });
                }
                "trigger" => {
                    let mut it = value.splitn(2, char::is_whitespace);
                    let kind = it.next().unwrap_or("");
                    let rest = it.next().unwrap_or("").trim();
                    c.trigger = match kind {
                        "shift" => Trigger::Shift(parse_box(key, &parse_nums(key, rest)?)?),
                        "random" => Trigger::Random(parse_num(key, rest)?),
                        "none" => Trigger::None,
                        _ => return Err(Error::Config(format!("unknown trigger '{value}'"))),
                    };
                }
                "balancer" => c.balance.spec = value.parse()?,
                "flow_iters" => flow_iters = Some(parse_num(key, value)?),
                "max_main_iters" => max_main_iters = Some(parse_num(key, value)?),
                "per_level" | "weighted" | "tolerance" => knobs.push((key.into(), value.into())),
                "weights" => {
                    c.weights = match value {
                        "unit" => WeightKind::Unit,
                        "level" => WeightKind::Level,
                        _ => return Err(Error::Config(format!("unknown weights '{value}'"))),
                    }
                }
                "payload_n" => c.payload_n = parse_num(key, value)?,
                "cycles" => c.cycles = parse_num(key, value)?,
                "force_rebalance" => c.force_rebalance = parse_bool(key, value)?,
                "seed" => c.seed = parse_num(key, value)?,
                "workers" => c.workers = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        // balancer defaults first, explicit knobs on top
        c.set_balancer(c.balance.spec);
        for (key, value) in knobs {
            match key.as_str() {
                "per_level" => c.balance.per_level = parse_bool(&key, &value)?,
                "weighted" => c.balance.weighted = parse_bool(&key, &value)?,
                _ => c.balance.tolerance = parse_num(&key, &value)?,
            }
        }
        if let Some(f) = flow_iters {
            c.balance.flow_iters = f;
        }
        if let Some(m) = max_main_iters {
            c.balance.max_main_iters = m;
        }
        c.validate()?;
        Ok(c)
    }

    /// Switches the balancer, resetting the knobs that depend on it.
    pub fn set_balancer(&mut self, spec: BalancerSpec) {
        let old = self.balance;
        self.balance = BalanceConfig {
            per_level: old.per_level,
            weighted: old.weighted,
            tolerance: old.tolerance,
            ..BalanceConfig::new(spec)
        };
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks == 0 || self.ranks_per_tile == 0 {
            return Err(Error::Config("rank counts must be positive".into()));
        }
        if self.refine.iter().any(|r| r.level > self.max_levels) {
            return Err(Error::Config("refinement level above max_levels".into()));
        }
        if let Trigger::Random(f) = self.trigger {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("random trigger fraction {f} outside [0, 1]")));
            }
        }
        if self.payload_n == 0 || self.cycles == 0 {
            return Err(Error::Config("payload_n and cycles must be positive".into()));
        }
        self.balance.validate()
    }

    /// Tile grid: explicit, or `ranks / ranks_per_tile` tiles arranged as
    /// squarely as possible (at least one tile).
    pub fn tile_grid(&self) -> [u32; 2] {
        if let Some(t) = self.tiles {
            return t;
        }
        let t = (self.ranks / self.ranks_per_tile).max(1) as u32;
        let mut ty = (t as f64).sqrt() as u32;
        while !t.is_multiple_of(ty) {
            ty -= 1;
        }
        [t / ty, ty]
    }

    pub fn domain(&self) -> Result<Domain> {
        let [tx, ty] = self.tile_grid();
        let r = self.tile_roots;
        Domain::new(
            self.dim,
            [r[0] * tx, r[1] * ty, if self.dim == 3 { r[2] } else { 1 }],
            self.max_levels,
        )
    }

    /// Maps a tile-local box to every tile (mirrored on odd tile indices)
    /// and tests whether block `id` overlaps any copy.
    fn overlaps(&self, d: &Domain, id: BlockId, b: &TileBox) -> bool {
        let bb = d.block_box(id);
        let scale = (1u64 << d.max_levels()) as f64;
        let lo: Vec<f64> = (0..3).map(|k| bb.lo[k] as f64 / scale).collect();
        let hi: Vec<f64> = (0..3).map(|k| (bb.lo[k] + bb.size) as f64 / scale).collect();
        let r = self.tile_roots;
        let [tx, ty] = self.tile_grid();
        for i in 0..tx {
            for j in 0..ty {
                let mut ok = true;
                for k in 0..self.dim as usize {
                    let (t, ext) = match k {
                        0 => (i, r[0] as f64),
                        1 => (j, r[1] as f64),
                        _ => (0, r[2] as f64),
                    };
                    let (mut a, mut c) = (b.lo[k], b.hi[k]);
                    if t % 2 == 1 {
                        (a, c) = (ext - c, ext - a);
                    }
                    let off = t as f64 * ext;
                    if !(lo[k] < off + c && hi[k] > off + a) {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    return true;
                }
            }
        }
        false
    }

    /// Leaves of the initial partitioning.
    pub fn initial_leaves(&self) -> Result<LeafSet> {
        let d = self.domain()?;
        let mut set = LeafSet::roots(&d);
        for r in &self.refine {
            set.refine_where(r.level, |d, id| self.overlaps(d, id, &r.region))?;
        }
        Ok(set)
    }

    /// Mark of the AMR event for one block. The marker is evaluated anew
    /// in every cycle, so with several cycles the event keeps acting on the
    /// blocks it created.
    pub fn trigger_mark(&self, d: &Domain, b: &Block) -> i8 {
        let ml = d.max_levels();
        match self.trigger {
            Trigger::Shift(region) => {
                let inside = self.overlaps(d, b.id, &region);
                if b.level == ml && !inside {
                    -1
                } else if b.level < ml && inside {
                    1
                } else {
                    0
                }
            }
            Trigger::Random(f) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ b.id.raw().wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let x: f64 = rng.gen();
                if x < f / 2.0 && b.level < ml {
                    1
                } else if x >= f / 2.0 && x < f && b.level > 0 {
                    -1
                } else {
                    0
                }
            }
            Trigger::None => 0,
        }
    }

    /// Marks of the AMR event for the leaves of `forest`.
    pub fn trigger_marks(&self, forest: &BlockForest) -> BTreeMap<BlockId, i8> {
        forest
            .blocks()
            .map(|b| (b.id, self.trigger_mark(forest.domain(), b)))
            .collect()
    }

    /// Initial forest: per-level curve-balanced distribution and a smooth
    /// grid payload on every block.
    pub fn initial_forest(&self) -> Result<(BlockForest, DataHandle<GridPayload>)> {
        let set = self.initial_leaves()?;
        let owners = distribute_per_level(&set, self.ranks, CurveOrder::Hilbert);
        let mut forest = BlockForest::from_leaves(set.domain().clone(), self.ranks, owners)?;
        let handle = forest.register_data(GridDescriptor::default())?;
        let d = forest.domain().clone();
        for b in forest.blocks_mut() {
            let payload = initial_payload(&d, b, self.payload_n)?;
            b.set_data(handle, payload);
        }
        Ok((forest, handle))
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let scenario = self.clone();
        let marker: Arc<dyn Marker> = Arc::new(move |d: &Domain, b: &Block| scenario.trigger_mark(d, b));
        PipelineConfig {
            marker,
            balance: self.balance,
            weight: match self.weights {
                WeightKind::Unit => unit_weight(),
                WeightKind::Level => level_weight(),
            },
            cycles: self.cycles,
            force_rebalance: self.force_rebalance,
        }
    }

    pub fn fabric(&self) -> Fabric {
        Fabric::new(self.ranks).workers(self.workers).seed(self.seed)
    }
}

/// Distributes every level separately along the curve: position k of the
/// N blocks of a level goes to rank `k·P/N`.
pub fn distribute_per_level(set: &LeafSet, ranks: usize, order: CurveOrder) -> Vec<(BlockId, Rank)> {
    let d = set.domain();
    let mut levels: Vec<Vec<BlockId>> = vec![Vec::new(); d.max_levels() as usize + 1];
    for id in set.ids() {
        levels[d.level(id) as usize].push(id);
    }
    let mut out = Vec::with_capacity(set.len());
    for mut ids in levels {
        ids.sort_by_key(|&id| (d.curve_key(id, order), id));
        let n = ids.len();
        out.extend(ids.into_iter().enumerate().map(|(k, id)| (id, k * ranks / n)));
    }
    out
}

/// A smooth positive field sampled at the cell centers of a block.
pub fn initial_payload(d: &Domain, b: &Block, n: u32) -> Result<GridPayload> {
    let bb = d.block_box(b.id);
    let scale = (1u64 << d.max_levels()) as f64;
    let ext = d.extent(0);
    let size = bb.size as f64 / scale;
    GridPayload::from_fn(d.dim(), n, b.level, |c| {
        let mut v = 1.0;
        for k in 0..d.dim() as usize {
            let x = (bb.lo[k] as f64 / scale + (c[k] as f64 + 0.5) * size / n as f64) / ext[k] as f64;
            v += 0.25 * (std::f64::consts::TAU * x).sin() * (k as f64 + 1.0).recip();
        }
        v
    })
}

/// One row of the per-level distribution table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelRow {
    pub level: u8,
    pub count: u64,
    pub coverage: f64,
    pub workload_share: f64,
    pub memory_share: f64,
    pub avg_per_rank: f64,
    pub max_per_rank: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    pub name: String,
    pub p2p_msgs: u64,
    pub p2p_bytes: u64,
    pub collectives: u64,
    pub replicated_bytes: u64,
    /// Largest per-rank p2p byte count.
    pub max_rank_p2p_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub balancer: String,
    pub per_level: bool,
    pub ranks: usize,
    pub tiles: [u32; 2],
    pub seed: u64,
    /// Initial partitioning.
    pub initial_levels: Vec<LevelRow>,
    /// Proxy distribution after refinement, before balancing.
    pub levels_before_balance: Vec<LevelRow>,
    /// Final partitioning.
    pub levels: Vec<LevelRow>,
    pub blocks_before: u64,
    pub blocks_after: u64,
    /// `blocks_after / blocks_before − 1`.
    pub block_growth: f64,
    pub main_iterations: u32,
    pub termination: Option<Termination>,
    pub cells_resized_fraction: f64,
    pub stages: Vec<StageRow>,
}

fn level_rows(per_rank: &[Vec<u64>], dim: u8) -> Result<Vec<LevelRow>> {
    let levels = per_rank.first().map_or(0, |r| r.len());
    let counts: Vec<u64> = (0..levels).map(|l| per_rank.iter().map(|r| r[l]).sum()).collect();
    let stats = level_stats(&counts, dim)?;
    let p = per_rank.len() as f64;
    Ok(stats
        .levels
        .iter()
        .enumerate()
        .map(|(l, s)| LevelRow {
            level: l as u8,
            count: s.count,
            coverage: s.coverage,
            workload_share: s.workload,
            memory_share: s.memory,
            avg_per_rank: s.count as f64 / p,
            max_per_rank: per_rank.iter().map(|r| r[l]).max().unwrap_or(0),
        })
        .collect())
}

impl RunReport {
    pub fn new(
        config: &ScenarioConfig,
        initial: &BlockForest,
        final_forest: &BlockForest,
        pipeline: &PipelineReport,
    ) -> Result<Self> {
        let dim = initial.domain().dim();
        let first = pipeline.cycles.first();
        let before = match first {
            Some(c) if c.rebalanced => level_rows(&c.counts_before, dim)?,
            _ => level_rows(&initial.level_counts_per_rank(), dim)?,
        };
        let m = &pipeline.metrics;
        let stages = ["refinement", "proxy", "balance", "migration"]
            .iter()
            .map(|&name| {
                let t = m.stage_total(name);
                StageRow {
                    name: name.to_string(),
                    p2p_msgs: t.p2p_msgs,
                    p2p_bytes: t.p2p_bytes,
                    collectives: t.collectives,
                    replicated_bytes: t.replicated_bytes,
                    max_rank_p2p_bytes: (0..m.num_ranks())
                        .map(|r| m.rank_stage(r, name).p2p_bytes)
                        .max()
                        .unwrap_or(0),
                }
            })
            .collect();
        let blocks_before = initial.num_blocks() as u64;
        let blocks_after = final_forest.num_blocks() as u64;
        Ok(RunReport {
            balancer: config.balance.spec.to_string(),
            per_level: config.balance.per_level,
            ranks: config.ranks,
            tiles: config.tile_grid(),
            seed: config.seed,
            initial_levels: level_rows(&initial.level_counts_per_rank(), dim)?,
            levels_before_balance: before,
            levels: level_rows(&final_forest.level_counts_per_rank(), dim)?,
            blocks_before,
            blocks_after,
            block_growth: blocks_after as f64 / blocks_before as f64 - 1.0,
            main_iterations: pipeline.main_iterations(),
            termination: pipeline.cycles.iter().rev().find_map(|c| c.termination),
            cells_resized_fraction: first.map_or(0.0, |c| c.cells_resized_fraction),
            stages,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a benchmark run produces.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub report: RunReport,
    pub initial: BlockForest,
    pub forest: BlockForest,
    pub pipeline: PipelineReport,
    pub handle: DataHandle<GridPayload>,
}

impl Benchmark {
    pub fn metrics(&self) -> &Metrics {
        &self.pipeline.metrics
    }
}

/// Builds the initial partitioning, triggers the AMR event and runs the
/// pipeline.
pub fn run_benchmark(config: &ScenarioConfig) -> Result<Benchmark> {
    config.validate()?;
    let (initial, handle) = config.initial_forest()?;
    let pipeline_config = config.pipeline_config();
    let (forest, pipeline) = run_pipeline(initial.clone(), &pipeline_config, &config.fabric())?;
    let report = RunReport::new(config, &initial, &forest, &pipeline)?;
    Ok(Benchmark {
        report,
        initial,
        forest,
        pipeline,
        handle,
    })
}
