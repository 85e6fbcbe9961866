//! Scenario builders shared by the pipeline benchmarks.

use amr_core::{build_proxy, refine_forest, set_proxy_weights, ProxyForest, Result, ScenarioConfig};

/// The benchmark scenario with `balancer` on `ranks` ranks.
pub fn scenario(balancer: &str, ranks: usize) -> Result<ScenarioConfig> {
    let mut c = ScenarioConfig::default();
    c.set_balancer(balancer.parse()?);
    c.ranks = ranks;
    c.validate()?;
    Ok(c)
}

/// The proxy forest of the benchmark's AMR event, weighted as configured:
/// the input of the balancing stage.
pub fn balancing_input(config: &ScenarioConfig) -> Result<ProxyForest> {
    let (forest, _) = config.initial_forest()?;
    let fabric = config.fabric();
    let pipeline = config.pipeline_config();
    let (forest, _, _) = refine_forest(forest, pipeline.marker, &fabric)?;
    let (mut proxy, _) = build_proxy(&forest, &fabric)?;
    set_proxy_weights(&mut proxy, &pipeline.weight)?;
    Ok(proxy)
}
