//! Stage 3: dynamic load balancing of the proxy forest.
//!
//! A balancer runs on every rank against its proxy part and has three
//! duties: assign a target rank to local proxies, tell every rank which
//! ranks will send it proxies, and report whether another round is needed.
//! The driver ([`balance_local`]) migrates proxies after every round that
//! asks for it and repeats while the balancer wants to continue.

mod diffusion;
mod sfc;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::block_id::BlockId;
use crate::curve::CurveOrder;
use crate::error::{Error, Result};
use crate::proxy::{migrate_proxies, ProxyForest, ProxyPart};
use crate::sim::{Comm, Fabric, Metrics, Rank};

pub use diffusion::{
    diffusion_flow, fit_score, pull_requests, pull_requests_scaled, push_marks, push_marks_scaled, resolve_requests,
    DiffusionBalancer, DiffusionMode, FlowState, PullOffer,
};
pub use sfc::{split_unweighted, split_weighted, SfcBalancer};

/// What one balancer invocation decided on one rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BalanceDecision {
    /// New owners of local proxies; proxies not listed stay.
    pub targets: BTreeMap<BlockId, Rank>,
    /// Ranks that will send proxies to this rank.
    pub expected_senders: BTreeSet<Rank>,
    /// Whether proxies are migrated after this invocation. Must agree on
    /// all ranks.
    pub migrate: bool,
    /// Whether the balancer must be called again. Must agree on all ranks.
    pub again: bool,
    /// Set on the final invocation.
    pub termination: Option<Termination>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Balance reached (possibly without any migration).
    Converged,
    /// Stopped at the main-iteration limit without reaching balance.
    IterationCap,
    /// A balancer that always finishes in one round.
    SingleShot,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::IterationCap => "iteration_cap",
            Termination::SingleShot => "single_shot",
        })
    }
}

/// A load balancing algorithm operating on one rank's proxy part.
pub trait Balancer: Send + Sync {
    /// Invocation `iteration` (starting at 0) of the balancer.
    fn balance<'a>(
        &'a self,
        comm: &'a mut Comm,
        part: &'a ProxyPart,
        iteration: u32,
    ) -> Pin<Box<dyn Future<Output = Result<BalanceDecision>> + Send + 'a>>;
}

/// Balancer selection string: `sfc:morton`, `sfc:hilbert`,
/// `diffusion:push`, `diffusion:pushpull`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalancerSpec {
    Sfc(CurveOrder),
    Diffusion(DiffusionMode),
}

impl FromStr for BalancerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sfc:morton" => Ok(BalancerSpec::Sfc(CurveOrder::Morton)),
            "sfc:hilbert" => Ok(BalancerSpec::Sfc(CurveOrder::Hilbert)),
            "diffusion:push" => Ok(BalancerSpec::Diffusion(DiffusionMode::Push)),
            "diffusion:pushpull" => Ok(BalancerSpec::Diffusion(DiffusionMode::PushPull)),
            other => Err(Error::Config(format!("unknown balancer '{other}'"))),
        }
    }
}

impl fmt::Display for BalancerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BalancerSpec::Sfc(CurveOrder::Morton) => "sfc:morton",
            BalancerSpec::Sfc(CurveOrder::Hilbert) => "sfc:hilbert",
            BalancerSpec::Diffusion(DiffusionMode::Push) => "diffusion:push",
            BalancerSpec::Diffusion(DiffusionMode::PushPull) => "diffusion:pushpull",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceConfig {
    pub spec: BalancerSpec,
    /// Flow iterations per diffusion invocation.
    pub flow_iters: u32,
    /// Upper limit on diffusion main iterations.
    pub max_main_iters: u32,
    /// Balance every level separately.
    pub per_level: bool,
    /// Use block weights (SFC); diffusion always uses weights.
    pub weighted: bool,
    /// Diffusion stops once no rank exceeds `tolerance × average` (and
    /// never demands better than whole-block granularity).
    pub tolerance: f64,
}

impl BalanceConfig {
    /// Defaults for a balancer: 15 flow iterations for push, 5 for
    /// push/pull, 20 main iterations, per-level balancing, perfect balance.
    pub fn new(spec: BalancerSpec) -> Self {
        let flow_iters = match spec {
            BalancerSpec::Diffusion(DiffusionMode::PushPull) => 5,
            _ => 15,
        };
        BalanceConfig {
            spec,
            flow_iters,
            max_main_iters: 20,
            per_level: true,
            weighted: false,
            tolerance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flow_iters < 1 {
            return Err(Error::Config("flow_iters must be at least 1".into()));
        }
        if !(self.tolerance >= 1.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!("tolerance {} must be >= 1", self.tolerance)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Balancer>> {
        self.validate()?;
        Ok(match self.spec {
            BalancerSpec::Sfc(order) => Arc::new(SfcBalancer {
                order,
                per_level: self.per_level,
                weighted: self.weighted,
            }),
            BalancerSpec::Diffusion(mode) => Arc::new(DiffusionBalancer {
                mode,
                flow_iters: self.flow_iters,
                max_main_iters: self.max_main_iters,
                per_level: self.per_level,
                tolerance: self.tolerance,
            }),
        })
    }
}

/// Outcome of the balancing stage on one rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BalanceRun {
    /// Number of proxy migrations performed.
    pub main_iterations: u32,
    pub termination: Termination,
}

/// Runs a balancer to completion on one rank, migrating proxies between
/// invocations.
pub async fn balance_local(comm: &mut Comm, part: &mut ProxyPart, balancer: &dyn Balancer) -> Result<BalanceRun> {
    let mut main_iterations = 0;
    let mut iteration = 0;
    loop {
        let decision = balancer.balance(comm, part, iteration).await?;
        if decision.migrate {
            migrate_proxies(comm, part, &decision.targets, &decision.expected_senders).await?;
            main_iterations += 1;
        } else if !decision.targets.is_empty() {
            return Err(Error::contract("balancer assigned targets without migrating"));
        }
        iteration += 1;
        if !decision.again {
            let termination = decision
                .termination
                .ok_or_else(|| Error::contract("balancer stopped without a termination reason"))?;
            return Ok(BalanceRun {
                main_iterations,
                termination,
            });
        }
    }
}

/// Per-level load statistics of a proxy distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelLoad {
    pub level: u8,
    pub blocks: u64,
    pub avg_load: f64,
    pub max_load: f64,
    /// max / avg (1 for an empty level).
    pub imbalance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub main_iterations: u32,
    pub termination: Termination,
    pub levels: Vec<LevelLoad>,
}

impl BalanceReport {
    pub fn new(proxy: &ProxyForest, run: BalanceRun) -> Self {
        let ml = proxy.domain.max_levels() as usize;
        let p = proxy.num_ranks() as f64;
        let levels = (0..=ml)
            .map(|l| {
                let loads: Vec<f64> = proxy
                    .parts
                    .iter()
                    .map(|part| {
                        part.proxies
                            .values()
                            .filter(|b| b.level as usize == l)
                            .map(|b| b.weight)
                            .sum()
                    })
                    .collect();
                let blocks = proxy.proxies().filter(|b| b.level as usize == l).count() as u64;
                let avg_load = loads.iter().sum::<f64>() / p;
                let max_load = loads.iter().copied().fold(0.0, f64::max);
                let imbalance = if avg_load > 0.0 {
                    (max_load / avg_load).max(1.0)
                } else {
                    1.0
                };
                LevelLoad {
                    level: l as u8,
                    blocks,
                    avg_load,
                    max_load,
                    imbalance,
                }
            })
            .collect();
        BalanceReport {
            main_iterations: run.main_iterations,
            termination: run.termination,
            levels,
        }
    }
}

/// Balances a whole proxy forest on `fabric` (stage tag "balance").
pub fn balance_forest(
    proxy: ProxyForest,
    config: &BalanceConfig,
    fabric: &Fabric,
) -> Result<(ProxyForest, BalanceReport, Metrics)> {
    let balancer = config.build()?;
    let out = fabric.run_each(proxy.parts, move |mut comm, mut part| {
        let balancer = balancer.clone();
        async move {
            comm.set_stage("balance");
            let run = balance_local(&mut comm, &mut part, &*balancer).await?;
            Ok((part, run))
        }
    })?;
    let run = out.results[0].1;
    let forest = ProxyForest::new(out.results.into_iter().map(|(p, _)| p).collect())?;
    let report = BalanceReport::new(&forest, run);
    Ok((forest, report, out.metrics))
}
