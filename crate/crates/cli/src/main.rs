use std::fs;
use std::path::PathBuf;

use amr_core::{run_benchmark, BalancerSpec, RunReport, ScenarioConfig};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Block forest AMR pipeline benchmark.
#[derive(Parser, Debug)]
#[command(name = "amrbench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the initial partitioning, trigger the AMR event and run the
    /// full pipeline. Command-line options override the config file.
    Run(RunArgs),
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Scenario file with `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// sfc:morton, sfc:hilbert, diffusion:push or diffusion:pushpull.
    #[arg(long)]
    balancer: Option<BalancerSpec>,
    /// Number of simulated ranks.
    #[arg(long)]
    ranks: Option<usize>,
    /// Balance every level separately.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    per_level: Option<bool>,
    /// Use block weights in SFC balancing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    weighted: Option<bool>,
    /// Flow iterations per diffusion main iteration.
    #[arg(long)]
    flow_iters: Option<u32>,
    /// Upper limit on diffusion main iterations.
    #[arg(long)]
    max_main_iters: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the final forest, one block per line.
    #[arg(long, value_name = "PATH")]
    dump_forest: Option<PathBuf>,
    /// Write the JSON report.
    #[arg(long, value_name = "PATH.json")]
    report: Option<PathBuf>,
    /// Write per-rank, per-stage communication metrics as CSV.
    #[arg(long, value_name = "PATH.csv")]
    metrics: Option<PathBuf>,
}

impl RunArgs {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let text = fs::read_to_string(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        let mut c = ScenarioConfig::parse(&text).with_context(|| format!("parsing {}", self.config.display()))?;
        if let Some(spec) = self.balancer {
            c.set_balancer(spec);
        }
        if let Some(p) = self.ranks {
            c.ranks = p;
        }
        if let Some(v) = self.per_level {
            c.balance.per_level = v;
        }
        if let Some(v) = self.weighted {
            c.balance.weighted = v;
        }
        if let Some(n) = self.flow_iters {
            c.balance.flow_iters = n;
        }
        if let Some(n) = self.max_main_iters {
            c.balance.max_main_iters = n;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_summary(r: &RunReport) {
    println!(
        "{} on {} ranks ({}x{} tiles), per_level={}, seed={}",
        r.balancer, r.ranks, r.tiles[0], r.tiles[1], r.per_level, r.seed
    );
    println!(
        "blocks {} -> {} ({:+.1} %), cells resized {:.1} %",
        r.blocks_before,
        r.blocks_after,
        100.0 * r.block_growth,
        100.0 * r.cells_resized_fraction
    );
    println!("level    count  coverage  workload    memory   avg/rank  max/rank");
    for l in &r.levels {
        println!(
            "{:>5} {:>8} {:>8.2} % {:>7.2} % {:>7.2} % {:>10.3} {:>9}",
            l.level,
            l.count,
            100.0 * l.coverage,
            100.0 * l.workload_share,
            100.0 * l.memory_share,
            l.avg_per_rank,
            l.max_per_rank
        );
    }
    match r.termination {
        Some(t) => println!("main iterations: {} ({t:?})", r.main_iterations),
        None => println!("main iterations: {}", r.main_iterations),
    }
    for s in &r.stages {
        println!(
            "stage {:<10} p2p {:>8} msgs {:>12} bytes, {:>4} collectives, {:>10} replicated bytes",
            s.name, s.p2p_msgs, s.p2p_bytes, s.collectives, s.replicated_bytes
        );
    }
}

fn run(args: RunArgs) -> Result<()> {
    let config = args.scenario()?;
    let bench = run_benchmark(&config).context("running the benchmark")?;
    print_summary(&bench.report);
    if let Some(path) = &args.report {
        fs::write(path, bench.report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.metrics {
        fs::write(path, bench.metrics().to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.dump_forest {
        fs::write(path, bench.forest.dump()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
    }
}
