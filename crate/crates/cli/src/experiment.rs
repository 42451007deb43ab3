//! Training runs and router-count sweeps.

use std::time::Instant;

use mor_core::{
    balance_report, bench_forward, generate_task, to_csv, train, write_dataset_cache, BalanceReport, Checkpoint, Dataset,
    GateMode, Model, Rng, SyntheticTask, TrainOutcome,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{json, OutDir};
use crate::config::{BaseInit, ExperimentConfig, Format};
use crate::error::CliError;

pub(crate) const TASK_STREAM: u64 = 1;
pub(crate) const INIT_STREAM: u64 = 2;

/// Task and training set for a seed.
pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<(SyntheticTask, Dataset), CliError> {
    let mut rng = Rng::new(seed).split(TASK_STREAM);
    Ok(generate_task(&cfg.task_spec(), &mut rng, cfg.task.n_train)?)
}

pub fn build_model(cfg: &ExperimentConfig, task: &SyntheticTask, seed: u64) -> Result<Model, CliError> {
    let bases = match cfg.model.base_init {
        BaseInit::Task => Some(vec![task.base().clone()]),
        BaseInit::Kaiming => None,
    };
    let mut rng = Rng::new(seed).split(INIT_STREAM);
    Ok(Model::init(&cfg.model_spec(), bases, &mut rng)?)
}

/// Deterministic outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub mode: GateMode,
    pub n_routers: usize,
    pub epochs: usize,
    pub epoch0_mse: f64,
    pub final_mse: f64,
    pub final_total_loss: f64,
    pub mean_cov: f64,
    pub mean_max_min_ratio: f64,
    pub mean_balance_loss: f64,
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub report: BalanceReport,
    pub summary: TrainSummary,
    pub dataset: Dataset,
    pub train_time_ms: f64,
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    epoch: usize,
    task: f64,
    balance_expert: f64,
    balance_router: f64,
    total: f64,
}

#[derive(Serialize)]
struct TimingRow {
    step: usize,
    wall_ms: f64,
}

pub fn train_experiment(cfg: &ExperimentConfig) -> Result<TrainRun, CliError> {
    cfg.validate()?;
    let (task, data) = build_task(cfg, cfg.seed)?;
    let model = build_model(cfg, &task, cfg.seed)?;
    let start = Instant::now();
    let outcome = train(model, &data, &cfg.train_config())?;
    let train_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let report = balance_report(&outcome.final_stats)?;
    let first = &outcome.epochs[0];
    let last = outcome.epochs.last().expect("epoch 0 is always logged");
    let n = report.layers.len() as f64;
    let summary = TrainSummary {
        seed: cfg.seed,
        mode: cfg.model.mode,
        n_routers: cfg.model.n_routers,
        epochs: cfg.train.epochs,
        epoch0_mse: first.mse,
        final_mse: last.mse,
        final_total_loss: last.total,
        mean_cov: report.mean_cov(),
        mean_max_min_ratio: report.mean_max_min_ratio(),
        mean_balance_loss: report.layers.iter().map(|l| l.balance_loss).sum::<f64>() / n,
    };
    Ok(TrainRun {
        outcome,
        report,
        summary,
        dataset: data,
        train_time_ms,
    })
}

fn condition(mode: GateMode) -> &'static str {
    match mode {
        GateMode::Single => "pre-mor",
        GateMode::Mor => "post-mor",
    }
}

/// Trains and writes every artifact into the configured output directory.
/// Everything except `timing.csv` is byte-for-byte reproducible.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    let run = train_experiment(cfg)?;
    let out = OutDir::create(&cfg.output.dir)?;
    out.write("effective_config.json", &cfg.to_json())?;

    let ckpt = Checkpoint::new(run.outcome.model.clone(), cfg.seed, cfg.train.epochs);
    out.write("checkpoint.json", &ckpt.to_json()?)?;

    let mut cache = Vec::new();
    write_dataset_cache(&mut cache, cfg.seed, &cfg.task_spec(), &run.dataset)?;
    out.write_bytes("dataset.bin", &cache)?;

    let steps: Vec<StepRow> = run
        .outcome
        .steps
        .iter()
        .map(|s| StepRow {
            step: s.step,
            epoch: s.epoch,
            task: s.task,
            balance_expert: s.balance_expert,
            balance_router: s.balance_router,
            total: s.total,
        })
        .collect();
    out.write("train_log.csv", &to_csv(&steps)?)?;
    out.write("epochs.csv", &to_csv(&run.outcome.epochs)?)?;
    let timing: Vec<TimingRow> = run
        .outcome
        .steps
        .iter()
        .map(|s| TimingRow {
            step: s.step,
            wall_ms: s.wall_ms,
        })
        .collect();
    out.write("timing.csv", &to_csv(&timing)?)?;

    if cfg.wants(Format::Json) {
        out.write("balance_report.json", &run.report.to_json()?)?;
        out.write("summary.json", &json(&run.summary))?;
    }
    if cfg.wants(Format::Csv) {
        out.write("balance_histogram.csv", &run.report.histogram_csv(condition(cfg.model.mode))?)?;
        out.write("summary.csv", &to_csv(std::slice::from_ref(&run.summary))?)?;
    }
    Ok(run.summary)
}

/// One row of the router-count table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub summary: TrainSummary,
    pub train_time_ms: f64,
    pub forward_ns_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Whether train time is nondecreasing in the order of `rows`. Timing
    /// dependent; reported only.
    pub train_time_monotone: bool,
}

#[derive(Serialize)]
struct SweepCsvRow {
    n_routers: usize,
    mode: GateMode,
    seed: u64,
    epochs: usize,
    epoch0_mse: f64,
    final_mse: f64,
    final_total_loss: f64,
    mean_cov: f64,
    mean_max_min_ratio: f64,
    mean_balance_loss: f64,
    train_time_ms: f64,
    forward_ns_per_token: f64,
}

impl From<&SweepRow> for SweepCsvRow {
    fn from(r: &SweepRow) -> Self {
        let s = &r.summary;
        Self {
            n_routers: s.n_routers,
            mode: s.mode,
            seed: s.seed,
            epochs: s.epochs,
            epoch0_mse: s.epoch0_mse,
            final_mse: s.final_mse,
            final_total_loss: s.final_total_loss,
            mean_cov: s.mean_cov,
            mean_max_min_ratio: s.mean_max_min_ratio,
            mean_balance_loss: s.mean_balance_loss,
            train_time_ms: r.train_time_ms,
            forward_ns_per_token: r.forward_ns_per_token,
        }
    }
}

pub fn sweep_experiment(cfg: &ExperimentConfig) -> Result<SweepReport, CliError> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.sweep.routers.len());
    for &r in &cfg.sweep.routers {
        let c = cfg.with_routers(r);
        c.validate()
            .map_err(|e| CliError::Config(format!("sweep.routers ({r} routers): {e}")))?;
        let run = train_experiment(&c)?;
        let lat = bench_forward(&run.outcome.model, c.sweep.latency_tokens, 2, c.seed)?;
        rows.push(SweepRow {
            summary: run.summary,
            train_time_ms: run.train_time_ms,
            forward_ns_per_token: lat.forward_median_ns,
        });
    }
    let train_time_monotone = rows.windows(2).all(|w| w[1].train_time_ms >= w[0].train_time_ms);
    Ok(SweepReport {
        rows,
        train_time_monotone,
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepReport, CliError> {
    let report = sweep_experiment(cfg)?;
    let out = OutDir::create(&cfg.output.dir)?;
    out.write("effective_config.json", &cfg.to_json())?;
    if cfg.wants(Format::Csv) {
        let rows: Vec<SweepCsvRow> = report.rows.iter().map(SweepCsvRow::from).collect();
        out.write("sweep.csv", &to_csv(&rows)?)?;
    }
    if cfg.wants(Format::Json) {
        out.write("sweep.json", &json(&report))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task.n_train = 128;
        cfg.task.d_in = 6;
        cfg.task.d_out = 6;
        cfg.task.n_clusters = 3;
        cfg.model.n_experts = 4;
        cfg.model.rank = 2;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 32;
        cfg
    }

    #[test]
    fn summaries_are_deterministic() {
        let cfg = tiny();
        let a = train_experiment(&cfg).unwrap();
        let b = train_experiment(&cfg).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.outcome.model, b.outcome.model);
        assert!(a.summary.final_mse < a.summary.epoch0_mse);
    }

    #[test]
    fn task_base_seeds_the_frozen_weight() {
        let cfg = tiny();
        let (task, _) = build_task(&cfg, 3).unwrap();
        let model = build_model(&cfg, &task, 3).unwrap();
        assert_eq!(model.layers()[0].w0(), task.base());
    }

    #[test]
    fn sweep_rows_follow_router_list() {
        let mut cfg = tiny();
        cfg.sweep.routers = vec![1, 3];
        cfg.sweep.latency_tokens = 16;
        let rep = sweep_experiment(&cfg).unwrap();
        let rs: Vec<_> = rep.rows.iter().map(|r| r.summary.n_routers).collect();
        assert_eq!(rs, vec![1, 3]);
        assert!(rep.rows.iter().all(|r| r.forward_ns_per_token > 0.0 && r.train_time_ms > 0.0));
    }

    #[test]
    fn sweep_rejects_single_mode_with_many_routers() {
        let mut cfg = tiny();
        cfg.model.mode = GateMode::Single;
        cfg.model.n_routers = 1;
        cfg.model.k_routers = 1;
        cfg.sweep.routers = vec![2];
        let err = sweep_experiment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
