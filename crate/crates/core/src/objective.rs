//! Training objective: squared-error task loss plus the load-balancing
//! auxiliary loss `Σ_layers N · Σ_j t_j · R_j`.
//!
//! `t_j` is the fraction of top-k slots that went to expert `j` and `R_j` is
//! the mean routing probability of expert `j`. Only `R` carries gradient;
//! `t` is a count and is held constant in the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::numeric::{top_k_indices, Vector};
use crate::routing::RoutingDecision;

/// Sub-router usage of one MoR layer. A token is assigned to the sub-router
/// with the largest main-router weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub n_routers: usize,
    pub assign_counts: Vec<u64>,
    pub weight_sums: Vec<f64>,
}

/// Expert usage of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub n_experts: usize,
    pub k: usize,
    pub token_count: u64,
    pub assign_counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    pub router: Option<RouterStats>,
}

impl LayerStats {
    /// `n_routers` is `Some` for MoR layers.
    pub fn new(n_experts: usize, k: usize, n_routers: Option<usize>) -> Self {
        Self {
            n_experts,
            k,
            token_count: 0,
            assign_counts: vec![0; n_experts],
            prob_sums: vec![0.0; n_experts],
            router: n_routers.map(|n| RouterStats {
                n_routers: n,
                assign_counts: vec![0; n],
                weight_sums: vec![0.0; n],
            }),
        }
    }

    pub fn record(&mut self, decision: &RoutingDecision) -> Result<()> {
        if decision.full_dist.len() != self.n_experts || decision.k() != self.k {
            return Err(shape_err(
                "LayerStats::record",
                format!("{} experts, k = {}", self.n_experts, self.k),
                format!("{} experts, k = {}", decision.full_dist.len(), decision.k()),
            ));
        }
        self.token_count += 1;
        for &j in &decision.selected {
            self.assign_counts[j] += 1;
        }
        for (s, p) in self.prob_sums.iter_mut().zip(decision.full_dist.iter()) {
            *s += p;
        }
        if let Some(r) = self.router.as_mut() {
            if decision.router_weights.len() != r.n_routers {
                return Err(shape_err("LayerStats::record", format!("{} routers", r.n_routers), decision.router_weights.len()));
            }
            let top = top_k_indices(&decision.router_weights, 1)?[0];
            r.assign_counts[top] += 1;
            for (s, w) in r.weight_sums.iter_mut().zip(decision.router_weights.iter()) {
                *s += w;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &LayerStats) -> Result<()> {
        if self.n_experts != other.n_experts
            || self.k != other.k
            || self.router.as_ref().map(|r| r.n_routers) != other.router.as_ref().map(|r| r.n_routers)
        {
            return Err(shape_err("LayerStats::merge", "matching layer layout", "different layout"));
        }
        self.token_count += other.token_count;
        for (a, b) in self.assign_counts.iter_mut().zip(&other.assign_counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.router.as_mut(), other.router.as_ref()) {
            for (x, y) in a.assign_counts.iter_mut().zip(&b.assign_counts) {
                *x += y;
            }
            for (x, y) in a.weight_sums.iter_mut().zip(&b.weight_sums) {
                *x += y;
            }
        }
        Ok(())
    }

    fn require_tokens(&self) -> Result<f64> {
        if self.token_count == 0 {
            return Err(MorError::InvalidArgument("activation stats hold no tokens".into()));
        }
        Ok(self.token_count as f64)
    }

    /// `t_j = assign_counts[j] / (token_count · k)`.
    pub fn assignment_fractions(&self) -> Result<Vec<f64>> {
        let denom = self.require_tokens()? * self.k as f64;
        Ok(self.assign_counts.iter().map(|&c| c as f64 / denom).collect())
    }

    /// `R_j`, the mean of `full_dist[j]`.
    pub fn mean_probs(&self) -> Result<Vec<f64>> {
        let t = self.require_tokens()?;
        Ok(self.prob_sums.iter().map(|s| s / t).collect())
    }

    /// `N · Σ_j t_j R_j` for this layer.
    pub fn balance_loss(&self) -> Result<f64> {
        let tokens = self.require_tokens()?;
        let denom = tokens * self.k as f64 * tokens;
        Ok(weighted_balance(self.n_experts, &self.assign_counts, &self.prob_sums, denom))
    }

    /// Router-level balance loss; 0 for a single-router layer.
    pub fn router_balance_loss(&self) -> Result<f64> {
        let tokens = self.require_tokens()?;
        Ok(match &self.router {
            None => 0.0,
            Some(r) => weighted_balance(r.n_routers, &r.assign_counts, &r.weight_sums, tokens * tokens),
        })
    }

    /// Per-token `dL/d full_dist` of `λ · balance_loss`: `λ N t_j / T`.
    pub fn balance_upstream(&self, lambda: f64) -> Result<Vec<f64>> {
        let tokens = self.require_tokens()?;
        let n = self.n_experts as f64;
        Ok(self.assignment_fractions()?.iter().map(|t| lambda * n * t / tokens).collect())
    }

    /// Per-token `dL/d router_weights` of `λ · router_balance_loss`.
    pub fn router_balance_upstream(&self, lambda: f64) -> Result<Option<Vec<f64>>> {
        let tokens = self.require_tokens()?;
        Ok(self.router.as_ref().map(|r| {
            let n = r.n_routers as f64;
            r.assign_counts.iter().map(|&c| lambda * n * (c as f64 / tokens) / tokens).collect()
        }))
    }
}

/// `n · Σ_j counts_j sums_j / denom`. Dividing once keeps integral inputs
/// exact.
fn weighted_balance(n: usize, counts: &[u64], sums: &[f64], denom: f64) -> f64 {
    n as f64 * counts.iter().zip(sums).map(|(&c, s)| c as f64 * s).sum::<f64>() / denom
}

/// Usage statistics for every layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
}

impl ActivationStats {
    pub fn new(layers: Vec<LayerStats>) -> Self {
        Self { layers }
    }

    pub fn token_count(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.token_count)
    }

    pub fn merge(&mut self, other: &ActivationStats) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err("ActivationStats::merge", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.merge(b)?;
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            *l = LayerStats::new(l.n_experts, l.k, l.router.as_ref().map(|r| r.n_routers));
        }
    }
}

/// Expert load-balancing loss summed over layers.
pub fn balance_loss(stats: &ActivationStats) -> Result<f64> {
    if stats.layers.is_empty() {
        return Err(MorError::InvalidArgument("activation stats have no layers".into()));
    }
    stats.layers.iter().map(LayerStats::balance_loss).sum()
}

/// Sub-router load-balancing loss summed over MoR layers.
pub fn router_balance_loss(stats: &ActivationStats) -> Result<f64> {
    if stats.layers.is_empty() {
        return Err(MorError::InvalidArgument("activation stats have no layers".into()));
    }
    stats.layers.iter().map(LayerStats::router_balance_loss).sum()
}

/// `½‖pred − target‖² / len` and its gradient `(pred − target) / len`.
pub fn task_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vector)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err("task_loss", format!("target len {}", pred.len()), target.len()));
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, Vector::from(diff.into_iter().map(|d| d / n).collect::<Vec<_>>())))
}

/// Components of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub balance_expert: f64,
    pub balance_router: f64,
    pub total: f64,
    pub lambda_expert: f64,
    pub lambda_router: f64,
}

pub fn total_loss(task: f64, stats: &ActivationStats, lambda_expert: f64, lambda_router: f64) -> Result<LossBreakdown> {
    if !(lambda_expert >= 0.0) || !(lambda_router >= 0.0) {
        return Err(MorError::InvalidArgument(format!(
            "balance coefficients must be non-negative, got {lambda_expert} and {lambda_router}"
        )));
    }
    let balance_expert = balance_loss(stats)?;
    let balance_router = router_balance_loss(stats)?;
    Ok(LossBreakdown {
        task,
        balance_expert,
        balance_router,
        total: task + lambda_expert * balance_expert + lambda_router * balance_router,
        lambda_expert,
        lambda_router,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn decision(selected: Vec<usize>, full: Vec<f64>, router_weights: Vec<f64>) -> RoutingDecision {
        let mass: f64 = selected.iter().map(|&i| full[i]).sum();
        RoutingDecision {
            weights: selected.iter().map(|&i| full[i] / mass).collect(),
            router_selected: (0..router_weights.len()).collect(),
            selected,
            full_dist: full.into(),
            router_weights: router_weights.into(),
        }
    }

    fn uniform_layer(n: usize, tokens: usize) -> LayerStats {
        let mut s = LayerStats::new(n, 1, None);
        for t in 0..tokens {
            s.record(&decision(vec![t % n], vec![1.0 / n as f64; n], vec![1.0])).unwrap();
        }
        s
    }

    #[test]
    fn balance_loss_uniform_is_one() {
        let stats = ActivationStats::new(vec![uniform_layer(4, 40)]);
        assert_eq!(balance_loss(&stats).unwrap(), 1.0);
        let two = ActivationStats::new(vec![uniform_layer(4, 40), uniform_layer(4, 40)]);
        assert_eq!(balance_loss(&two).unwrap(), 2.0);
    }

    #[test]
    fn balance_loss_collapsed_is_n() {
        let mut s = LayerStats::new(4, 1, None);
        for _ in 0..10 {
            s.record(&decision(vec![0], vec![1.0, 0.0, 0.0, 0.0], vec![1.0])).unwrap();
        }
        assert_eq!(balance_loss(&ActivationStats::new(vec![s])).unwrap(), 4.0);
    }

    #[test]
    fn balance_loss_rejects_empty() {
        assert!(balance_loss(&ActivationStats::new(vec![])).is_err());
        assert!(balance_loss(&ActivationStats::new(vec![LayerStats::new(3, 1, None)])).is_err());
    }

    #[test]
    fn top_k_counts_normalize_by_k() {
        let mut s = LayerStats::new(4, 2, None);
        s.record(&decision(vec![0, 1], vec![0.25; 4], vec![1.0])).unwrap();
        s.record(&decision(vec![2, 3], vec![0.25; 4], vec![1.0])).unwrap();
        let t = s.assignment_fractions().unwrap();
        assert_eq!(t, vec![0.25; 4]);
        assert!(s.assign_counts.iter().all(|&c| c <= s.token_count * s.k as u64));
        assert_eq!(s.balance_loss().unwrap(), 1.0);
    }

    #[test]
    fn router_balance_examples() {
        let mut one = LayerStats::new(2, 1, Some(1));
        one.record(&decision(vec![0], vec![0.6, 0.4], vec![1.0])).unwrap();
        assert_eq!(one.router_balance_loss().unwrap(), 1.0);

        let mut uniform = LayerStats::new(2, 1, Some(2));
        uniform.record(&decision(vec![0], vec![0.6, 0.4], vec![0.5, 0.5])).unwrap();
        assert_eq!(uniform.router_balance_loss().unwrap(), 1.0);

        let mut skewed = LayerStats::new(2, 1, Some(2));
        skewed.record(&decision(vec![0], vec![0.6, 0.4], vec![1.0, 0.0])).unwrap();
        assert_eq!(skewed.router_balance_loss().unwrap(), 2.0);

        let single = uniform_layer(2, 4);
        assert_eq!(single.router_balance_loss().unwrap(), 0.0);
    }

    #[test]
    fn task_loss_examples() {
        let (l, g) = task_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = task_loss(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 1.0);
        assert!(task_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn task_loss_gradient_matches_finite_differences() {
        let pred = [0.3, -1.2, 2.5];
        let target = [1.0, 0.0, -0.5];
        let (_, g) = task_loss(&pred, &target).unwrap();
        let eps = 1e-5;
        for i in 0..3 {
            let mut hi = pred;
            let mut lo = pred;
            hi[i] += eps;
            lo[i] -= eps;
            let num = (task_loss(&hi, &target).unwrap().0 - task_loss(&lo, &target).unwrap().0) / (2.0 * eps);
            assert!((num - g[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn total_loss_composition() {
        let stats = ActivationStats::new(vec![uniform_layer(4, 8)]);
        let b = total_loss(0.7, &stats, 0.0, 0.0).unwrap();
        assert_eq!(b.total, 0.7);
        let b = total_loss(0.7, &stats, 0.01, 0.0).unwrap();
        assert!((b.total - 0.71).abs() < 1e-15);
        let b2 = total_loss(0.7, &stats, 0.02, 0.0).unwrap();
        assert!(((b2.total - b2.task) - 2.0 * (b.total - b.task)).abs() < 1e-15);
        assert!(total_loss(0.7, &stats, -0.1, 0.0).is_err());
        assert!(total_loss(0.7, &stats, 0.0, -0.1).is_err());
    }

    fn stats_from_distribution(p: &[f64], tokens: u64) -> LayerStats {
        // t == R == p: counts proportional to p with k = 1
        let n = p.len();
        LayerStats {
            n_experts: n,
            k: 1,
            token_count: tokens,
            assign_counts: vec![0; n],
            prob_sums: p.iter().map(|v| v * tokens as f64).collect(),
            router: None,
        }
    }

    #[test]
    fn balance_bounds_over_random_distributions() {
        let mut rng = Rng::new(6);
        for _ in 0..2000 {
            let n = 2 + rng.below(7);
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0).powi(3)).collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let loss = n as f64 * p.iter().map(|v| v * v).sum::<f64>();
            assert!(loss >= 1.0 - 1e-12 && loss <= n as f64 + 1e-12);
            // permutation invariance through the stats path
            let s = stats_from_distribution(&p, 1);
            let mut rev = p.clone();
            rev.reverse();
            let r = stats_from_distribution(&rev, 1);
            let a = s.balance_loss().unwrap();
            let b = r.balance_loss().unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_is_summation() {
        let a = uniform_layer(3, 5);
        let b = uniform_layer(3, 7);
        let mut m = a.clone();
        m.merge(&b).unwrap();
        assert_eq!(m.token_count, 12);
        assert_eq!(m.assign_counts, vec![5, 4, 3]);
        for j in 0..3 {
            assert!((m.prob_sums[j] - 4.0).abs() < 1e-12);
        }
        let mut wrong = a.clone();
        assert!(wrong.merge(&LayerStats::new(4, 1, None)).is_err());
    }

    #[test]
    fn mean_probs_sum_to_one() {
        let mut s = LayerStats::new(3, 2, Some(2));
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..3).map(|_| rng.uniform(0.1, 1.0)).collect();
            let t: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / t).collect();
            let ids = top_k_indices(&p, 2).unwrap();
            s.record(&decision(ids, p, vec![0.3, 0.7])).unwrap();
        }
        assert!((s.mean_probs().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(s.router.as_ref().unwrap().assign_counts, vec![0, 100]);
    }
}
