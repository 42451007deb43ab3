//! Paired fault-injection experiment: single router versus MoR.

use mor_core::{
    inject_router_fault, mean_squared_error, selection_agreement, to_csv, train, FaultSpec, GateMode, Model, Rng, Sample,
    Vector,
};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::artifacts::{json, OutDir};
use crate::config::{ExperimentConfig, Format};
use crate::error::CliError;
use crate::experiment::{build_model, build_task};

const EVAL_STREAM: u64 = 3;
const FAULT_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Single,
    Mor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRow {
    pub seed: u64,
    pub sigma: f64,
    pub arm: Arm,
    pub n_routers: usize,
    /// Fraction of inputs whose selected expert set is unchanged.
    pub exact_agreement: f64,
    /// Mean fraction of clean selections still selected.
    pub overlap_agreement: f64,
    pub clean_mse: f64,
    pub faulty_mse: f64,
    pub mse_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSummary {
    pub sigma: f64,
    pub n_seeds: usize,
    pub single_mean_agreement: f64,
    pub mor_mean_agreement: f64,
    /// MoR minus single, paired by seed.
    pub mean_difference: f64,
    pub std_difference: f64,
    pub confidence: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seeds_mor_better: usize,
    pub single_mean_overlap: f64,
    pub mor_mean_overlap: f64,
    pub single_mean_mse_delta: f64,
    pub mor_mean_mse_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub rows: Vec<FaultRow>,
    pub summaries: Vec<FaultSummary>,
}

impl FaultReport {
    pub fn summary(&self, sigma: f64) -> Option<&FaultSummary> {
        self.summaries.iter().find(|s| s.sigma == sigma)
    }
}

fn arm_config(cfg: &ExperimentConfig, arm: Arm) -> ExperimentConfig {
    let mut c = cfg.clone();
    let r = match arm {
        Arm::Single => 1,
        Arm::Mor => cfg.fault.mor_routers,
    };
    c.model.mode = match arm {
        Arm::Single => GateMode::Single,
        Arm::Mor => GateMode::Mor,
    };
    c.model.n_routers = r;
    c.model.k_routers = r;
    c
}

fn arm_model(cfg: &ExperimentConfig, arm: Arm, seed: u64, train_data: &[Sample], task: &mor_core::SyntheticTask) -> Result<Model, CliError> {
    let c = arm_config(cfg, arm);
    c.validate()?;
    let model = build_model(&c, task, seed)?;
    if !cfg.fault.train {
        return Ok(model);
    }
    let mut tc = c.train_config();
    tc.seed = seed;
    let data = mor_core::Dataset {
        samples: train_data.to_vec(),
    };
    Ok(train(model, &data, &tc)?.model)
}

pub fn fault_experiment(cfg: &ExperimentConfig) -> Result<FaultReport, CliError> {
    cfg.validate()?;
    let f = &cfg.fault;
    let mut rows = Vec::new();
    for seed in cfg.seed..cfg.seed + f.seeds as u64 {
        let (task, data) = build_task(cfg, seed)?;
        let eval = task.sample(&mut Rng::new(seed).split(EVAL_STREAM), f.n_inputs)?;
        let inputs: Vec<Vector> = eval.samples.iter().map(|s| s.x.clone()).collect();
        for arm in [Arm::Single, Arm::Mor] {
            let clean = arm_model(cfg, arm, seed, &data.samples, &task)?;
            let clean_mse = mean_squared_error(&clean, &eval.samples)?;
            for (si, &sigma) in f.sigmas.iter().enumerate() {
                let spec = FaultSpec {
                    target_router: if arm == Arm::Single { 0 } else { f.target_router },
                    noise_sigma: sigma,
                    mode: f.mode,
                };
                // both arms draw the same noise stream for a given seed and sigma
                let mut rng = Rng::new(seed).split(FAULT_STREAM + si as u64);
                let faulty = inject_router_fault(&clean, &spec, &mut rng)?;
                let agreement = selection_agreement(&clean, &faulty, &inputs)?;
                let faulty_mse = mean_squared_error(&faulty, &eval.samples)?;
                rows.push(FaultRow {
                    seed,
                    sigma,
                    arm,
                    n_routers: clean.layers()[0].gate().n_routers(),
                    exact_agreement: agreement.exact,
                    overlap_agreement: agreement.overlap,
                    clean_mse,
                    faulty_mse,
                    mse_delta: faulty_mse - clean_mse,
                });
            }
        }
    }
    let summaries = f
        .sigmas
        .iter()
        .map(|&sigma| summarize(&rows, sigma, f.confidence))
        .collect::<Result<_, _>>()?;
    Ok(FaultReport { rows, summaries })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(rows: &[FaultRow], sigma: f64, confidence: f64) -> Result<FaultSummary, CliError> {
    let pick = |arm: Arm| -> Vec<&FaultRow> { rows.iter().filter(|r| r.sigma == sigma && r.arm == arm).collect() };
    let single = pick(Arm::Single);
    let mor = pick(Arm::Mor);
    let diffs: Vec<f64> = single
        .iter()
        .zip(&mor)
        .map(|(s, m)| {
            debug_assert_eq!(s.seed, m.seed);
            m.exact_agreement - s.exact_agreement
        })
        .collect();
    let n = diffs.len();
    let md = mean(&diffs);
    let sd = (diffs.iter().map(|d| (d - md).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .map_err(|e| CliError::Config(format!("fault.seeds: {e}")))?
        .inverse_cdf(0.5 + confidence / 2.0);
    let half = t * sd / (n as f64).sqrt();
    let col = |rs: &[&FaultRow], f: fn(&FaultRow) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
    Ok(FaultSummary {
        sigma,
        n_seeds: n,
        single_mean_agreement: col(&single, |r| r.exact_agreement),
        mor_mean_agreement: col(&mor, |r| r.exact_agreement),
        mean_difference: md,
        std_difference: sd,
        confidence,
        ci_low: md - half,
        ci_high: md + half,
        seeds_mor_better: diffs.iter().filter(|&&d| d > 0.0).count(),
        single_mean_overlap: col(&single, |r| r.overlap_agreement),
        mor_mean_overlap: col(&mor, |r| r.overlap_agreement),
        single_mean_mse_delta: col(&single, |r| r.mse_delta),
        mor_mean_mse_delta: col(&mor, |r| r.mse_delta),
    })
}

pub fn cmd_fault(cfg: &ExperimentConfig) -> Result<FaultReport, CliError> {
    let report = fault_experiment(cfg)?;
    let out = OutDir::create(&cfg.output.dir)?;
    out.write("effective_config.json", &cfg.to_json())?;
    if cfg.wants(Format::Csv) {
        out.write("fault.csv", &to_csv(&report.rows)?)?;
        out.write("fault_summary.csv", &to_csv(&report.summaries)?)?;
    }
    if cfg.wants(Format::Json) {
        out.write("fault_summary.json", &json(&report))?;
    }
    Ok(report)
}
