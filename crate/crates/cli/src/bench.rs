//! Latency benchmark across router counts.

use mor_core::{bench_models, BenchConfig, GateMode, LatencyReport, Model, ModelSpec, Rng};

use crate::artifacts::OutDir;
use crate::config::{ExperimentConfig, Format};
use crate::error::CliError;
use crate::experiment::INIT_STREAM;

/// Square single-layer models of width `bench.dim`, one per router count,
/// with the model section's expert settings.
pub fn bench_models_for(cfg: &ExperimentConfig) -> Result<Vec<Model>, CliError> {
    let m = &cfg.model;
    cfg.bench
        .routers
        .iter()
        .map(|&r| {
            let spec = ModelSpec {
                dims: vec![cfg.bench.dim, cfg.bench.dim],
                n_experts: m.n_experts,
                n_routers: r,
                k_experts: m.k_experts,
                k_routers: r,
                rank: m.rank,
                alpha: m.alpha,
                mode: GateMode::Mor,
                activation: m.activation,
            };
            Ok(Model::init(&spec, None, &mut Rng::new(cfg.seed).split(INIT_STREAM))?)
        })
        .collect()
}

pub fn bench_experiment(cfg: &ExperimentConfig) -> Result<LatencyReport, CliError> {
    cfg.validate()?;
    let models = bench_models_for(cfg)?;
    let bc = BenchConfig {
        block_tokens: cfg.bench.block_tokens,
        blocks: cfg.bench.blocks,
        warmup: cfg.bench.warmup,
        seed: cfg.seed,
    };
    Ok(bench_models(&models, &bc)?)
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<LatencyReport, CliError> {
    let report = bench_experiment(cfg)?;
    let out = OutDir::create(&cfg.output.dir)?;
    out.write("effective_config.json", &cfg.to_json())?;
    if cfg.wants(Format::Json) {
        out.write("latency.json", &report.to_json()?)?;
    }
    if cfg.wants(Format::Csv) {
        out.write("latency.csv", &report.to_csv()?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_model_per_router_count() {
        let mut cfg = ExperimentConfig::default();
        cfg.bench.routers = vec![1, 2, 4];
        cfg.bench.dim = 8;
        let models = bench_models_for(&cfg).unwrap();
        let rs: Vec<_> = models.iter().map(|m| m.layers()[0].gate().n_routers()).collect();
        assert_eq!(rs, vec![1, 2, 4]);
        assert!(models.iter().all(|m| m.d_in() == 8 && m.d_out() == 8));
    }

    #[test]
    fn baseline_overhead_is_zero() {
        let mut cfg = ExperimentConfig::default();
        cfg.bench.routers = vec![1, 2];
        cfg.bench.dim = 8;
        cfg.bench.blocks = 2;
        cfg.bench.warmup = 1;
        cfg.bench.block_tokens = 8;
        let rep = bench_experiment(&cfg).unwrap();
        assert_eq!(rep.entries[0].forward_overhead, 0.0);
        assert_eq!(rep.entries.len(), 2);
    }
}
