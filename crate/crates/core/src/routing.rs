//! Expert gating.
//!
//! A single router turns `softmax(W_r · x)` into a sparse decision by keeping
//! the top-k experts and renormalizing the retained probabilities.
//!
//! The Mixture-of-Routers gate replaces that single router with a committee:
//! every sub-router emits a full distribution over experts, a main router
//! emits weights over the sub-routers, and the expert scores are the convex
//! combination of the sub-router distributions. Expert-level top-k is applied
//! after aggregation.
//!
//! Backward passes treat the discrete top-k choices (of experts and of
//! sub-routers) as constants and differentiate exactly through the softmaxes
//! and the renormalization of retained entries.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::numeric::{dot, init_kaiming, softmax_backward, softmax_owned, top_k_indices, Matrix, Vector};
use crate::rng::Rng;

/// Tolerance on the total mass of a probability vector handed to
/// [`topk_renormalize`].
pub const PROB_TOLERANCE: f64 = 1e-6;
/// Tolerance on the sum of a decision's renormalized weights.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;
const CACHE_TOLERANCE: f64 = 1e-12;

#[derive(Deserialize)]
struct RouterRecord {
    main: Matrix,
    subs: Vec<Matrix>,
}

impl TryFrom<RouterRecord> for RouterParams {
    type Error = MorError;

    fn try_from(r: RouterRecord) -> Result<Self> {
        RouterParams::new(r.main, r.subs)
    }
}

/// Main router (`n_routers × d_in`) plus `n_routers` sub-routers
/// (`n_experts × d_in` each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RouterRecord")]
pub struct RouterParams {
    main: Matrix,
    subs: Vec<Matrix>,
}

impl RouterParams {
    pub fn new(main: Matrix, subs: Vec<Matrix>) -> Result<Self> {
        let first = subs
            .first()
            .ok_or_else(|| MorError::InvalidArgument("at least one sub-router is required".into()))?;
        let shape = first.shape();
        if let Some((i, s)) = subs.iter().enumerate().find(|(_, s)| s.shape() != shape) {
            return Err(shape_err(
                "RouterParams::new",
                format!("sub-router shape {shape:?}"),
                format!("sub-router {i} has {:?}", s.shape()),
            ));
        }
        if main.rows() != subs.len() || main.cols() != shape.1 {
            return Err(shape_err(
                "RouterParams::new",
                format!("main router {}x{}", subs.len(), shape.1),
                format!("{}x{}", main.rows(), main.cols()),
            ));
        }
        Ok(Self { main, subs })
    }

    /// Kaiming-initialized committee so sub-routers start out disagreeing.
    pub fn init(n_routers: usize, n_experts: usize, d_in: usize, rng: &mut Rng) -> Result<Self> {
        if n_routers == 0 {
            return Err(MorError::InvalidArgument("n_routers must be >= 1".into()));
        }
        let main = init_kaiming(n_routers, d_in, rng)?;
        let subs = (0..n_routers)
            .map(|_| init_kaiming(n_experts, d_in, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(main, subs)
    }

    pub fn main(&self) -> &Matrix {
        &self.main
    }

    pub fn subs(&self) -> &[Matrix] {
        &self.subs
    }

    pub fn n_routers(&self) -> usize {
        self.subs.len()
    }

    pub fn n_experts(&self) -> usize {
        self.subs[0].rows()
    }

    pub fn d_in(&self) -> usize {
        self.main.cols()
    }

    pub(crate) fn subs_mut(&mut self) -> &mut [Matrix] {
        &mut self.subs
    }

    pub(crate) fn split_mut(&mut self) -> (&mut Matrix, &mut [Matrix]) {
        (&mut self.main, &mut self.subs)
    }
}

/// Per-input routing outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected expert ids, by descending score.
    pub selected: Vec<usize>,
    /// Renormalized gate weights of `selected`.
    pub weights: Vec<f64>,
    /// Pre-top-k expert distribution (aggregate over sub-routers for MoR).
    pub full_dist: Vector,
    /// Dense weights over sub-routers, zero for dropped ones. `[1.0]` for a
    /// single router.
    pub router_weights: Vector,
    /// Sub-routers retained by the main router's top-k.
    pub router_selected: Vec<usize>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// Checks the structural contract against a bank of `n_experts`.
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.selected.is_empty() || self.selected.len() != self.weights.len() {
            return Err(MorError::InvalidDecision(format!(
                "{} ids vs {} weights",
                self.selected.len(),
                self.weights.len()
            )));
        }
        for (pos, &id) in self.selected.iter().enumerate() {
            if id >= n_experts {
                return Err(MorError::InvalidDecision(format!(
                    "expert id {id} out of range for {n_experts} experts"
                )));
            }
            if self.selected[..pos].contains(&id) {
                return Err(MorError::InvalidDecision(format!("expert id {id} selected twice")));
            }
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MorError::InvalidDecision("weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(MorError::InvalidDecision(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// The discrete part of the decision, for replaying a forward pass with
    /// the same choices.
    pub fn selection(&self) -> Selection {
        Selection {
            experts: self.selected.clone(),
            routers: self.router_selected.clone(),
        }
    }
}

/// Frozen discrete choices: which experts and which sub-routers were kept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection {
    pub experts: Vec<usize>,
    pub routers: Vec<usize>,
}

fn check_probability(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MorError::InvalidArgument("probability vector has negative or non-finite entries".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(MorError::InvalidArgument(format!(
            "probability vector sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Divides the entries at `ids` by their sum.
fn renormalize(p: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
    let mass: f64 = ids.iter().map(|&i| p[i]).sum();
    if !(mass > 0.0) {
        return Err(MorError::NonFinite("top-k renormalization (retained mass is zero)"));
    }
    Ok(ids.iter().map(|&i| p[i] / mass).collect())
}

/// Backward of `w_m = p[ids_m] / Σ p[ids]`: returns dense `dL/dp`, zero
/// outside `ids`.
fn renormalize_backward(p: &[f64], ids: &[usize], weights: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mass: f64 = ids.iter().map(|&i| p[i]).sum();
    let mean = dot(upstream, weights);
    let mut out = vec![0.0; p.len()];
    for (&i, &g) in ids.iter().zip(upstream) {
        out[i] = (g - mean) / mass;
    }
    out
}

/// Keeps the `k` largest entries of a probability vector (ties to the lower
/// index) and rescales them to sum to one.
pub fn topk_renormalize(p: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    check_probability(p)?;
    let ids = top_k_indices(p, k)?;
    let weights = renormalize(p, &ids)?;
    Ok((ids, weights))
}

/// Single-router gating: `softmax(W_r · x)` followed by top-k
/// renormalization.
pub fn single_route(w_r: &Matrix, x: &[f64], k: usize) -> Result<RoutingDecision> {
    Ok(route_parts(std::slice::from_ref(w_r), None, x, k, 1, None)?.0)
}

/// Weights over sub-routers: `softmax(W_R · x)`, top-`k_routers`
/// renormalized, returned densely with zeros at dropped sub-routers.
pub fn main_router_weights(main: &Matrix, x: &[f64], k_routers: usize) -> Result<Vector> {
    let n = main.rows();
    if k_routers == 0 || k_routers > n {
        return Err(MorError::InvalidArgument(format!(
            "k_routers must be in 1..={n}, got {k_routers}"
        )));
    }
    let (dense, _, _) = main_router_forward(main, x, k_routers, None)?;
    Ok(dense)
}

/// `(dense router weights, retained ids, softmax over routers)`.
fn main_router_forward(
    main: &Matrix,
    x: &[f64],
    k_routers: usize,
    frozen: Option<&[usize]>,
) -> Result<(Vector, Vec<usize>, Vector)> {
    let n = main.rows();
    if x.len() != main.cols() {
        return Err(shape_err("main_router_weights", format!("input len {}", main.cols()), format!("len {}", x.len())));
    }
    if n == 1 {
        // softmax over a single logit is identically one
        return Ok((Vector::from(vec![1.0]), vec![0], Vector::from(vec![1.0])));
    }
    let probs = softmax_owned(main.matvec(x)?, 1.0)?;
    let ids = match frozen {
        Some(ids) => ids.to_vec(),
        None => top_k_indices(&probs, k_routers)?,
    };
    let retained = renormalize(&probs, &ids)?;
    let mut dense = Vector::zeros(n);
    for (&i, &w) in ids.iter().zip(&retained) {
        dense[i] = w;
    }
    Ok((dense, ids, probs))
}

/// Mixture-of-Routers gating.
pub fn mor_route(params: &RouterParams, x: &[f64], k_experts: usize, k_routers: usize) -> Result<RoutingDecision> {
    Ok(route_parts(&params.subs, Some(&params.main), x, k_experts, k_routers, None)?.0)
}

/// Intermediate softmaxes kept from a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteCache {
    /// `softmax(W_s · x)` for every retained sub-router, `None` if dropped.
    pub sub_probs: Vec<Option<Vector>>,
    /// `softmax(W_R · x)`; absent for a single router.
    pub main_probs: Option<Vector>,
}

fn check_k(k: usize, n: usize, what: &str) -> Result<()> {
    if k == 0 || k > n {
        return Err(MorError::InvalidArgument(format!("{what} must be in 1..={n}, got {k}")));
    }
    Ok(())
}

fn check_frozen(ids: &[usize], n: usize, what: &'static str) -> Result<()> {
    if ids.is_empty() {
        return Err(MorError::InvalidArgument(format!("frozen {what} selection is empty")));
    }
    for (pos, &id) in ids.iter().enumerate() {
        if id >= n {
            return Err(MorError::IndexOutOfRange { what, index: id, len: n });
        }
        if ids[..pos].contains(&id) {
            return Err(MorError::InvalidArgument(format!("frozen {what} selection repeats {id}")));
        }
    }
    Ok(())
}

/// Shared forward for both gate kinds. With `frozen`, the discrete choices
/// are replayed instead of recomputed.
pub(crate) fn route_parts(
    subs: &[Matrix],
    main: Option<&Matrix>,
    x: &[f64],
    k_experts: usize,
    k_routers: usize,
    frozen: Option<&Selection>,
) -> Result<(RoutingDecision, RouteCache)> {
    let n_routers = subs.len();
    let n_experts = subs[0].rows();
    check_k(k_experts, n_experts, "k_experts")?;

    let (router_weights, router_selected, main_probs) = match main {
        None => (Vector::from(vec![1.0]), vec![0], None),
        Some(m) => {
            check_k(k_routers, n_routers, "k_routers")?;
            let frozen_routers = frozen.map(|f| f.routers.as_slice());
            if let Some(ids) = frozen_routers {
                check_frozen(ids, n_routers, "router")?;
            }
            let (dense, ids, probs) = main_router_forward(m, x, k_routers, frozen_routers)?;
            (dense, ids, Some(probs))
        }
    };

    let mut sub_probs: Vec<Option<Vector>> = vec![None; n_routers];
    let mut full = vec![0.0; n_experts];
    for &s in &router_selected {
        let p = softmax_owned(subs[s].matvec(x)?, 1.0)?;
        let rho = router_weights[s];
        for (f, &ps) in full.iter_mut().zip(p.iter()) {
            *f += rho * ps;
        }
        sub_probs[s] = Some(p);
    }

    let selected = match frozen {
        Some(f) => {
            check_frozen(&f.experts, n_experts, "expert")?;
            f.experts.clone()
        }
        None => top_k_indices(&full, k_experts)?,
    };
    let weights = renormalize(&full, &selected)?;

    let decision = RoutingDecision {
        selected,
        weights,
        full_dist: Vector::from(full),
        router_weights,
        router_selected,
    };
    Ok((decision, RouteCache { sub_probs, main_probs }))
}

/// Upstream gradients arriving at a routing decision.
#[derive(Debug, Clone, Copy, Default)]
pub struct RouteUpstream<'a> {
    /// `dL/d weights`, aligned with `decision.selected`.
    pub weights: &'a [f64],
    /// Optional `dL/d full_dist` (e.g. from the expert balance loss).
    pub full_dist: Option<&'a [f64]>,
    /// Optional `dL/d router_weights` (e.g. from the router balance loss).
    pub router_weights: Option<&'a [f64]>,
}

/// Gradients for the router matrices plus the routing input.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteGrads {
    /// One entry per sub-router (a single router is `subs[0]`).
    pub subs: Vec<Matrix>,
    /// Main-router gradient; `None` for single-router gating.
    pub main: Option<Matrix>,
    pub input: Vector,
}

fn check_cache(
    subs: &[Matrix],
    main: Option<&Matrix>,
    x: &[f64],
    decision: &RoutingDecision,
    cache: &RouteCache,
) -> Result<()> {
    if cache.sub_probs.len() != subs.len() || cache.main_probs.is_some() != main.is_some() {
        return Err(MorError::StaleCache("cache layout does not match the gate".into()));
    }
    if decision.router_weights.len() != subs.len() || decision.full_dist.len() != subs[0].rows() {
        return Err(MorError::StaleCache("decision shape does not match the gate".into()));
    }
    let mut full = vec![0.0; subs[0].rows()];
    for &s in &decision.router_selected {
        let p = cache.sub_probs.get(s).and_then(|p| p.as_ref()).ok_or_else(|| {
            MorError::StaleCache(format!("retained sub-router {s} has no cached distribution"))
        })?;
        for (f, &ps) in full.iter_mut().zip(p.iter()) {
            *f += decision.router_weights[s] * ps;
        }
    }
    let drift = full
        .iter()
        .zip(decision.full_dist.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if drift > CACHE_TOLERANCE {
        return Err(MorError::StaleCache(format!(
            "cached distributions disagree with the decision (max drift {drift:e})"
        )));
    }
    // Spot-check the cache against the current parameters: one retained
    // sub-router and the main router.
    let mut probes: Vec<(&Matrix, &Vector)> = Vec::with_capacity(2);
    if let Some(&s) = decision.router_selected.first() {
        if let Some(p) = cache.sub_probs[s].as_ref() {
            probes.push((&subs[s], p));
        }
    }
    if let (Some(m), Some(p)) = (main, cache.main_probs.as_ref()) {
        probes.push((m, p));
    }
    for (w, cached) in probes {
        let fresh = softmax_owned(w.matvec(x)?, 1.0)?;
        let drift = fresh.iter().zip(cached.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > CACHE_TOLERANCE {
            return Err(MorError::StaleCache(format!(
                "cached router distribution was produced by other parameters (max drift {drift:e})"
            )));
        }
    }
    Ok(())
}

/// Backward pass through the gate with the decision's selections held fixed.
///
/// Without a cache, the intermediates are recomputed from `(subs, main, x)`
/// under the decision's frozen selection; if the recomputed aggregate no
/// longer matches `decision.full_dist` the decision is stale and rejected.
pub(crate) fn route_backward(
    subs: &[Matrix],
    main: Option<&Matrix>,
    x: &[f64],
    decision: &RoutingDecision,
    cache: Option<&RouteCache>,
    upstream: RouteUpstream<'_>,
) -> Result<RouteGrads> {
    let recomputed;
    let cache = match cache {
        Some(c) => c,
        None => {
            let (d, c) = route_parts(
                subs,
                main,
                x,
                decision.k(),
                decision.router_selected.len(),
                Some(&decision.selection()),
            )?;
            if d.selected != decision.selected || d.router_selected != decision.router_selected {
                return Err(MorError::StaleCache("recomputed selection differs".into()));
            }
            recomputed = c;
            &recomputed
        }
    };
    check_cache(subs, main, x, decision, cache)?;

    let n_experts = subs[0].rows();
    let n_routers = subs.len();
    if upstream.weights.len() != decision.k() {
        return Err(shape_err("routing_grads", format!("{} weight grads", decision.k()), upstream.weights.len()));
    }
    if let Some(g) = upstream.full_dist {
        if g.len() != n_experts {
            return Err(shape_err("routing_grads", format!("{n_experts} full_dist grads"), g.len()));
        }
    }
    if let Some(g) = upstream.router_weights {
        if g.len() != n_routers {
            return Err(shape_err("routing_grads", format!("{n_routers} router-weight grads"), g.len()));
        }
    }

    // dL/dq over the aggregate distribution
    let mut g_full = renormalize_backward(&decision.full_dist, &decision.selected, &decision.weights, upstream.weights);
    if let Some(extra) = upstream.full_dist {
        for (g, e) in g_full.iter_mut().zip(extra) {
            *g += e;
        }
    }

    let d_in = x.len();
    let mut input = vec![0.0; d_in];
    let mut sub_grads: Vec<Matrix> = subs.iter().map(|s| Matrix::zeros(s.rows(), s.cols())).collect();
    let mut g_rho = vec![0.0; n_routers];
    for &s in &decision.router_selected {
        let p = cache.sub_probs[s].as_ref().expect("checked by check_cache");
        let rho = decision.router_weights[s];
        g_rho[s] = dot(p, &g_full);
        let g_p: Vec<f64> = g_full.iter().map(|g| rho * g).collect();
        let dz = softmax_backward(p, &g_p);
        sub_grads[s].add_outer(1.0, &dz, x)?;
        for (i, v) in subs[s].matvec_t(&dz)?.iter().enumerate() {
            input[i] += v;
        }
    }

    let main_grad = match (main, cache.main_probs.as_ref()) {
        (Some(m), Some(probs)) => {
            let mut grad = Matrix::zeros(m.rows(), m.cols());
            if n_routers > 1 {
                if let Some(extra) = upstream.router_weights {
                    for (g, e) in g_rho.iter_mut().zip(extra) {
                        *g += e;
                    }
                }
                let retained: Vec<f64> = decision.router_selected.iter().map(|&s| decision.router_weights[s]).collect();
                let g_retained: Vec<f64> = decision.router_selected.iter().map(|&s| g_rho[s]).collect();
                let g_probs = renormalize_backward(probs, &decision.router_selected, &retained, &g_retained);
                let dz = softmax_backward(probs, &g_probs);
                grad.add_outer(1.0, &dz, x)?;
                for (i, v) in m.matvec_t(&dz)?.iter().enumerate() {
                    input[i] += v;
                }
            }
            Some(grad)
        }
        _ => None,
    };

    Ok(RouteGrads {
        subs: sub_grads,
        main: main_grad,
        input: Vector::from(input),
    })
}

/// Gradients of the router parameters for the routing of `x`.
///
/// `decision` must come from routing `x` through `params`; a decision that
/// no longer matches the parameters is rejected as stale.
pub fn routing_grads(
    params: &RouterParams,
    x: &[f64],
    decision: &RoutingDecision,
    upstream: RouteUpstream<'_>,
) -> Result<RouteGrads> {
    route_backward(&params.subs, Some(&params.main), x, decision, None, upstream)
}

/// Gate of one layer: a lone router or a committee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Gate {
    Single { router: Matrix },
    Mor(RouterParams),
}

/// Gating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Single,
    Mor,
}

impl Gate {
    pub fn mode(&self) -> GateMode {
        match self {
            Gate::Single { .. } => GateMode::Single,
            Gate::Mor(_) => GateMode::Mor,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.subs()[0].rows()
    }

    pub fn n_routers(&self) -> usize {
        self.subs().len()
    }

    pub fn d_in(&self) -> usize {
        self.subs()[0].cols()
    }

    pub fn subs(&self) -> &[Matrix] {
        match self {
            Gate::Single { router } => std::slice::from_ref(router),
            Gate::Mor(p) => &p.subs,
        }
    }

    pub fn main(&self) -> Option<&Matrix> {
        match self {
            Gate::Single { .. } => None,
            Gate::Mor(p) => Some(&p.main),
        }
    }

    pub(crate) fn subs_mut(&mut self) -> &mut [Matrix] {
        match self {
            Gate::Single { router } => std::slice::from_mut(router),
            Gate::Mor(p) => p.subs_mut(),
        }
    }

    pub fn route(
        &self,
        x: &[f64],
        k_experts: usize,
        k_routers: usize,
        frozen: Option<&Selection>,
    ) -> Result<(RoutingDecision, RouteCache)> {
        route_parts(self.subs(), self.main(), x, k_experts, k_routers, frozen)
    }

    pub fn backward(
        &self,
        x: &[f64],
        decision: &RoutingDecision,
        cache: Option<&RouteCache>,
        upstream: RouteUpstream<'_>,
    ) -> Result<RouteGrads> {
        route_backward(self.subs(), self.main(), x, decision, cache, upstream)
    }
}
