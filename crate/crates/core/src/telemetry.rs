//! Expert-allocation balance metrics and forward/train latency benchmarks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MorError, Result};
use crate::layer::GateUpstream;
use crate::model::Model;
use crate::numeric::Vector;
use crate::objective::{task_loss, ActivationStats};
use crate::rng::Rng;

/// Balance of one layer. Counts are top-k memberships, so they sum to
/// `token_count · k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBalance {
    pub layer: usize,
    pub histogram: Vec<u64>,
    pub token_count: u64,
    pub k: usize,
    /// Population std over mean of the counts.
    pub coefficient_of_variation: f64,
    /// `max / max(min, 1)`; an idle expert counts as 1.
    pub max_min_ratio: f64,
    pub balance_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub layers: Vec<LayerBalance>,
}

pub fn balance_report(stats: &ActivationStats) -> Result<BalanceReport> {
    if stats.layers.is_empty() || stats.token_count() == 0 {
        return Err(MorError::InvalidArgument("balance report needs non-empty stats".into()));
    }
    let layers = stats
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let counts: Vec<f64> = l.assign_counts.iter().map(|&c| c as f64).collect();
            let (cov, ratio) = spread(&counts);
            Ok(LayerBalance {
                layer: i,
                histogram: l.assign_counts.clone(),
                token_count: l.token_count,
                k: l.k,
                coefficient_of_variation: cov,
                max_min_ratio: ratio,
                balance_loss: l.balance_loss()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BalanceReport { layers })
}

/// Two-pass CoV and clamped max/min ratio.
fn spread(counts: &[f64]) -> (f64, f64) {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    let cov = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = counts.iter().copied().fold(f64::INFINITY, f64::min);
    (cov, max / min.max(1.0))
}

impl BalanceReport {
    pub fn mean_cov(&self) -> f64 {
        self.layers.iter().map(|l| l.coefficient_of_variation).sum::<f64>() / self.layers.len() as f64
    }

    pub fn mean_max_min_ratio(&self) -> f64 {
        self.layers.iter().map(|l| l.max_min_ratio).sum::<f64>() / self.layers.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MorError::InvalidArgument(e.to_string()))
    }

    /// Histogram rows `layer,expert_id,count,condition`, with header.
    pub fn histogram_csv(&self, condition: &str) -> Result<String> {
        let rows: Vec<HistogramRow> = self.histogram_rows(condition).collect();
        to_csv(&rows)
    }

    pub fn histogram_rows<'a>(&'a self, condition: &'a str) -> impl Iterator<Item = HistogramRow<'a>> + 'a {
        self.layers.iter().flat_map(move |l| {
            l.histogram.iter().enumerate().map(move |(j, &count)| HistogramRow {
                layer: l.layer,
                expert_id: j,
                count,
                condition,
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramRow<'a> {
    pub layer: usize,
    pub expert_id: usize,
    pub count: u64,
    pub condition: &'a str,
}

/// Serializes `rows` as CSV with a header taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let err = |e: String| MorError::InvalidArgument(format!("csv encoding failed: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| err(e.to_string()))
}

/// Timing summary for one model, per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub n_routers: usize,
    pub n_tokens: usize,
    pub forward_mean_ns: f64,
    pub forward_std_ns: f64,
    pub forward_median_ns: f64,
    pub train_step_mean_ns: f64,
    pub train_step_median_ns: f64,
    /// `(t_r − t_1) / t_1` on median forward time.
    pub forward_overhead: f64,
    /// `(t_r − t_1) / t_1` on median train-step time.
    pub train_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub entries: Vec<LatencyEntry>,
}

impl LatencyReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MorError::InvalidArgument(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.entries)
    }

    /// Whether median forward time never decreases along the entries.
    pub fn forward_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].forward_median_ns >= w[0].forward_median_ns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Tokens per timed block.
    pub block_tokens: usize,
    /// Timed blocks per model.
    pub blocks: usize,
    /// Untimed warmup blocks per model.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            block_tokens: 256,
            blocks: 40,
            warmup: 3,
            seed: 0,
        }
    }
}

/// Per-token times of each timed block.
struct Samples {
    forward: Vec<f64>,
    train: Vec<f64>,
}

/// Benchmarks every model on the same fixed inputs, single-threaded. Blocks
/// are interleaved across models so drift in machine load hits all of them
/// alike. Overheads are relative to the first model.
pub fn bench_models(models: &[Model], cfg: &BenchConfig) -> Result<LatencyReport> {
    if models.is_empty() {
        return Err(MorError::InvalidArgument("bench needs at least one model".into()));
    }
    if cfg.warmup == 0 || cfg.blocks == 0 || cfg.block_tokens == 0 {
        return Err(MorError::InvalidArgument("warmup, blocks and block_tokens must be at least 1".into()));
    }
    let d_in = models[0].d_in();
    let d_out = models[0].d_out();
    if models.iter().any(|m| m.d_in() != d_in || m.d_out() != d_out) {
        return Err(MorError::InvalidArgument("benchmarked models must share input and output widths".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let inputs: Vec<Vector> = (0..cfg.block_tokens)
        .map(|_| Vector::from((0..d_in).map(|_| rng.standard_normal()).collect::<Vec<_>>()))
        .collect();
    let targets: Vec<Vector> = (0..cfg.block_tokens)
        .map(|_| Vector::from((0..d_out).map(|_| rng.standard_normal()).collect::<Vec<_>>()))
        .collect();

    let mut samples: Vec<Samples> = models
        .iter()
        .map(|_| Samples {
            forward: Vec::with_capacity(cfg.blocks),
            train: Vec::with_capacity(cfg.blocks),
        })
        .collect();
    let per_token = |elapsed: std::time::Duration| elapsed.as_nanos() as f64 / cfg.block_tokens as f64;
    for round in 0..cfg.warmup + cfg.blocks {
        for (m, s) in models.iter().zip(samples.iter_mut()) {
            let t = Instant::now();
            for x in &inputs {
                std::hint::black_box(m.forward(std::hint::black_box(x), None)?);
            }
            let fwd = per_token(t.elapsed());

            let t = Instant::now();
            for (x, y) in inputs.iter().zip(&targets) {
                let (out, trace) = m.forward(x, None)?;
                let (_, g) = task_loss(&out, y)?;
                std::hint::black_box(m.backward(&trace, &g, &[] as &[GateUpstream])?);
            }
            let train = per_token(t.elapsed());
            if round >= cfg.warmup {
                s.forward.push(fwd);
                s.train.push(train);
            }
        }
    }

    let base_fwd = median(&samples[0].forward);
    let base_train = median(&samples[0].train);
    let entries = models
        .iter()
        .zip(&samples)
        .enumerate()
        .map(|(i, (m, s))| {
            let (mean, std) = mean_std(&s.forward);
            let fwd_med = median(&s.forward);
            let train_med = median(&s.train);
            LatencyEntry {
                n_routers: m.layers()[0].gate().n_routers(),
                n_tokens: cfg.block_tokens * cfg.blocks,
                forward_mean_ns: mean,
                forward_std_ns: std,
                forward_median_ns: fwd_med,
                train_step_mean_ns: mean_std(&s.train).0,
                train_step_median_ns: train_med,
                forward_overhead: if i == 0 { 0.0 } else { (fwd_med - base_fwd) / base_fwd },
                train_overhead: if i == 0 { 0.0 } else { (train_med - base_train) / base_train },
            }
        })
        .collect();
    Ok(LatencyReport { entries })
}

/// Forward latency of a single model.
pub fn bench_forward(model: &Model, n_tokens: usize, warmup: usize, seed: u64) -> Result<LatencyEntry> {
    let block_tokens = n_tokens.clamp(1, 256);
    let cfg = BenchConfig {
        block_tokens,
        blocks: n_tokens.div_ceil(block_tokens).max(1),
        warmup,
        seed,
    };
    let mut report = bench_models(std::slice::from_ref(model), &cfg)?;
    Ok(report.entries.remove(0))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec};
    use crate::objective::LayerStats;
    use crate::routing::GateMode;

    fn stats_with(counts: Vec<u64>, k: usize) -> ActivationStats {
        let n = counts.len();
        let tokens = counts.iter().sum::<u64>() / k as u64;
        let mut l = LayerStats::new(n, k, None);
        l.token_count = tokens;
        l.assign_counts = counts;
        l.prob_sums = vec![tokens as f64 / n as f64; n];
        ActivationStats::new(vec![l])
    }

    #[test]
    fn uniform_counts() {
        let r = balance_report(&stats_with(vec![50; 4], 2)).unwrap();
        assert_eq!(r.layers[0].coefficient_of_variation, 0.0);
        assert_eq!(r.layers[0].max_min_ratio, 1.0);
        assert_eq!(r.layers[0].balance_loss, 1.0);
    }

    #[test]
    fn idle_experts_clamp_ratio() {
        let r = balance_report(&stats_with(vec![100, 0, 0, 0], 1)).unwrap();
        assert_eq!(r.layers[0].max_min_ratio, 100.0);
    }

    #[test]
    fn cov_matches_naive_formula() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let n = 2 + rng.below(10);
            let counts: Vec<u64> = (0..n).map(|_| rng.below(1000) as u64).collect();
            let total: u64 = counts.iter().sum();
            if total == 0 {
                continue;
            }
            let mut l = LayerStats::new(n, 1, None);
            l.token_count = total;
            l.assign_counts = counts.clone();
            l.prob_sums = vec![total as f64 / n as f64; n];
            let r = balance_report(&ActivationStats::new(vec![l])).unwrap();
            // naive: E[c²] − E[c]² with sums accumulated directly
            let nf = n as f64;
            let s1: f64 = counts.iter().map(|&c| c as f64).sum();
            let s2: f64 = counts.iter().map(|&c| (c as f64).powi(2)).sum();
            let mean = s1 / nf;
            let naive = ((s2 / nf - mean * mean).max(0.0)).sqrt() / mean;
            assert!((r.layers[0].coefficient_of_variation - naive).abs() <= 1e-10);
        }
    }

    #[test]
    fn histogram_conserves_assignments() {
        let spec = ModelSpec {
            dims: vec![5, 5, 5],
            n_experts: 6,
            n_routers: 2,
            k_experts: 3,
            k_routers: 2,
            rank: 2,
            alpha: 4.0,
            mode: GateMode::Mor,
            activation: Activation::Tanh,
        };
        let mut rng = Rng::new(2);
        let model = Model::init(&spec, None, &mut rng).unwrap();
        let mut stats = model.new_stats();
        for _ in 0..37 {
            let x: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
            model.forward(&x, Some(&mut stats)).unwrap();
        }
        let r = balance_report(&stats).unwrap();
        for l in &r.layers {
            assert_eq!(l.histogram.iter().sum::<u64>(), 37 * 3);
        }
        assert_eq!(balance_report(&stats).unwrap(), r);
        let csv = r.histogram_csv("post-mor").unwrap();
        assert!(csv.starts_with("layer,expert_id,count,condition\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 6);
    }

    #[test]
    fn empty_stats_rejected() {
        let stats = ActivationStats::new(vec![LayerStats::new(4, 1, None)]);
        assert!(balance_report(&stats).is_err());
    }

    #[test]
    fn bench_reports_zero_overhead_for_baseline() {
        let spec = ModelSpec {
            dims: vec![8, 8],
            n_experts: 4,
            n_routers: 1,
            k_experts: 2,
            k_routers: 1,
            rank: 2,
            alpha: 4.0,
            mode: GateMode::Mor,
            activation: Activation::Tanh,
        };
        let model = Model::init(&spec, None, &mut Rng::new(1)).unwrap();
        let e = bench_forward(&model, 64, 1, 0).unwrap();
        assert_eq!(e.forward_overhead, 0.0);
        assert!(e.forward_mean_ns > 0.0 && e.train_step_mean_ns > 0.0);
        assert!(bench_forward(&model, 64, 0, 0).is_err());
    }
}
