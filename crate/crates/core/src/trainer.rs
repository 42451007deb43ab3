//! Optimization loop, optimizers, and the finite-difference gradient oracle.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::layer::{GateUpstream, ParamKind};
use crate::model::{Model, ModelGrads};
use crate::numeric::Matrix;
use crate::objective::{task_loss, total_loss, ActivationStats, LossBreakdown};
use crate::rng::Rng;
use crate::routing::Selection;
use crate::task::{Dataset, Sample};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay; 0 gives plain Adam / SGD.
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_expert: f64,
    pub lambda_router: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 0.02,
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            seed: 0,
            lambda_expert: 0.01,
            lambda_router: 0.01,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted here (a no-op run); configuration files demand
    /// a positive rate.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MorError::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(self.lambda_expert >= 0.0 && self.lambda_router >= 0.0) {
            return bad("balance coefficients must be non-negative".into());
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad(format!("invalid adam parameters β1={beta1} β2={beta2} ε={eps}"));
            }
        }
        Ok(())
    }
}

/// First-order optimizer with per-matrix state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of `params` against the aligned `grads`.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("Optimizer::step", params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data().len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(shape_err("Optimizer::step", format!("{} tracked matrices", self.m.len()), grads.len()));
        }
        self.t += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != g.data().len() {
                return Err(shape_err(
                    "Optimizer::step",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let pd = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gw) in pd.iter_mut().zip(g.data()) {
                        *w -= lr * gw + lr * wd * *w;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &gw)) in pd.iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gw;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gw * gw;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mean objective and gradient over a batch. Balance statistics are taken
/// over the batch itself.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: ModelGrads,
    pub stats: ActivationStats,
    pub selections: Vec<Vec<Selection>>,
}

pub fn batch_gradient(model: &Model, batch: &[Sample], lambda_expert: f64, lambda_router: f64) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(MorError::InvalidArgument("empty batch".into()));
    }
    let mut stats = model.new_stats();
    let mut traces = Vec::with_capacity(batch.len());
    let mut task = 0.0;
    let mut task_grads = Vec::with_capacity(batch.len());
    for s in batch {
        let (y, trace) = model.forward(&s.x, Some(&mut stats))?;
        let (l, g) = task_loss(&y, &s.target)?;
        task += l;
        task_grads.push(g);
        traces.push(trace);
    }
    let inv = 1.0 / batch.len() as f64;
    task *= inv;
    let loss = total_loss(task, &stats, lambda_expert, lambda_router)?;
    let aux = stats
        .layers
        .iter()
        .map(|ls| {
            Ok(GateUpstream {
                full_dist: (lambda_expert > 0.0).then(|| ls.balance_upstream(lambda_expert)).transpose()?,
                router_weights: if lambda_router > 0.0 { ls.router_balance_upstream(lambda_router)? } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = ModelGrads::zeros(model);
    for (trace, g) in traces.iter().zip(&task_grads) {
        let scaled: Vec<f64> = g.iter().map(|v| v * inv).collect();
        let gi = model.backward(trace, &scaled, &aux)?;
        grads.accumulate(&gi, 1.0)?;
    }
    Ok(BatchResult {
        loss,
        grads,
        stats,
        selections: traces.iter().map(|t| t.selections()).collect(),
    })
}

/// The batch objective evaluated with routing replayed from `selections`.
pub fn batch_objective_frozen(
    model: &Model,
    batch: &[Sample],
    selections: &[Vec<Selection>],
    lambda_expert: f64,
    lambda_router: f64,
) -> Result<(LossBreakdown, ActivationStats)> {
    if batch.len() != selections.len() || batch.is_empty() {
        return Err(shape_err("batch_objective_frozen", batch.len(), selections.len()));
    }
    let mut stats = model.new_stats();
    let mut task = 0.0;
    for (s, sel) in batch.iter().zip(selections) {
        let (y, trace) = model.forward_frozen(&s.x, sel)?;
        for (ls, lt) in stats.layers.iter_mut().zip(&trace.layers) {
            ls.record(&lt.decision)?;
        }
        task += task_loss(&y, &s.target)?.0;
    }
    task /= batch.len() as f64;
    Ok((total_loss(task, &stats, lambda_expert, lambda_router)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub task: f64,
    pub balance_expert: f64,
    pub balance_router: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Full-pass evaluation on the training set. Epoch 0 is taken before any
/// update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean squared error per output coordinate.
    pub mse: f64,
    pub task: f64,
    pub balance_expert: f64,
    pub balance_router: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Routing statistics of the final evaluation pass.
    pub final_stats: ActivationStats,
}

/// Evaluates the objective over `data` without updating anything.
pub fn evaluate(model: &Model, data: &Dataset, lambda_expert: f64, lambda_router: f64) -> Result<(EpochLog, ActivationStats)> {
    if data.is_empty() {
        return Err(MorError::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut stats = model.new_stats();
    let (mut task, mut sq) = (0.0, 0.0);
    for s in &data.samples {
        let (y, _) = model.forward(&s.x, Some(&mut stats))?;
        let (l, _) = task_loss(&y, &s.target)?;
        task += l;
        sq += 2.0 * l;
    }
    let n = data.len() as f64;
    let loss = total_loss(task / n, &stats, lambda_expert, lambda_router)?;
    let log = EpochLog {
        epoch: 0,
        mse: sq / n,
        task: loss.task,
        balance_expert: loss.balance_expert,
        balance_router: loss.balance_router,
        total: loss.total,
    };
    Ok((log, stats))
}

fn diverged(epoch: usize, step: usize, detail: impl Into<String>) -> MorError {
    MorError::Divergence {
        epoch,
        step,
        detail: detail.into(),
    }
}

/// Mini-batch training. Deterministic for a given model, data and config.
pub fn train(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MorError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if let Some(s) = data.samples.iter().find(|s| s.x.len() != model.d_in() || s.target.len() != model.d_out()) {
        return Err(shape_err(
            "train",
            format!("samples of width {} -> {}", model.d_in(), model.d_out()),
            format!("{} -> {}", s.x.len(), s.target.len()),
        ));
    }
    let mut model = model;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut rng = Rng::new(cfg.seed).split(SHUFFLE_STREAM);
    let start = Instant::now();
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs + 1);

    let (log0, mut final_stats) = evaluate(&model, data, cfg.lambda_expert, cfg.lambda_router)?;
    if !log0.total.is_finite() {
        return Err(diverged(0, 0, "non-finite loss before training"));
    }
    epochs.push(log0);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.samples[i].clone()).collect();
            let res = batch_gradient(&model, &batch, cfg.lambda_expert, cfg.lambda_router)
                .map_err(|e| match e {
                    MorError::NonFinite(what) => diverged(epoch, step, format!("non-finite value in {what}")),
                    other => other,
                })?;
            if !res.loss.total.is_finite() {
                return Err(diverged(epoch, step, format!("loss became {}", res.loss.total)));
            }
            let grads = res.grads.params();
            if let Some(g) = grads.iter().position(|g| !g.is_finite()) {
                return Err(diverged(epoch, step, format!("non-finite gradient in parameter matrix {g}")));
            }
            let params: Vec<&mut Matrix> = model.params_mut().into_iter().map(|(_, m)| m).collect();
            opt.step(params, &grads)?;
            if let Some((kind, _)) = model.params_mut().into_iter().find(|(_, m)| !m.is_finite()) {
                return Err(diverged(epoch, step, format!("non-finite parameter in a {kind:?} matrix")));
            }
            steps.push(StepLog {
                step,
                epoch,
                task: res.loss.task,
                balance_expert: res.loss.balance_expert,
                balance_router: res.loss.balance_router,
                total: res.loss.total,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let (mut log, stats) = evaluate(&model, data, cfg.lambda_expert, cfg.lambda_router)
            .map_err(|e| diverged(epoch, step, e.to_string()))?;
        if !log.total.is_finite() {
            return Err(diverged(epoch, step, format!("epoch loss became {}", log.total)));
        }
        log.epoch = epoch;
        epochs.push(log);
        final_stats = stats;
    }
    Ok(TrainOutcome {
        model,
        steps,
        epochs,
        final_stats,
    })
}

/// Central differences `(f(θ + eps e_i) − f(θ − eps e_i)) / 2eps` for every
/// coordinate.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(MorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let hi = f(&theta);
        theta[i] = orig - eps;
        let lo = f(&theta);
        theta[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Agreement between analytic and numeric gradients for one parameter
/// group, over the coordinates that were checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub kind: ParamKind,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; 0 when both
    /// vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub groups: Vec<GroupCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn group(&self, kind: ParamKind) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.kind == kind)
    }
}

const VANISHING_NORM: f64 = 1e-12;

/// Compares [`batch_gradient`] against central differences of the batch
/// objective. Routing is frozen at the base point; a coordinate whose
/// perturbation would change any routing choice (expert sets, retained
/// sub-routers, or the argmax sub-router counted by the router balance
/// loss) is skipped.
pub fn gradient_check(model: &Model, batch: &[Sample], lambda_expert: f64, lambda_router: f64, eps: f64) -> Result<GradCheck> {
    let base = batch_gradient(model, batch, lambda_expert, lambda_router)?;
    let analytic: Vec<Matrix> = base.grads.params().into_iter().cloned().collect();
    let base_routing = routing_signature(&base.stats);

    let mut probe = model.clone();
    let kinds: Vec<ParamKind> = probe.params_mut().iter().map(|(k, _)| *k).collect();
    let mut per_group: std::collections::BTreeMap<ParamKind, (Vec<f64>, Vec<f64>, usize)> = Default::default();
    for k in &kinds {
        per_group.entry(*k).or_default();
    }

    for (mi, kind) in kinds.iter().enumerate() {
        let len = analytic[mi].data().len();
        for j in 0..len {
            let orig = probe.params_mut()[mi].1.data()[j];
            let eval = |value: f64, probe: &mut Model| -> Result<Option<f64>> {
                probe.params_mut()[mi].1.data_mut()[j] = value;
                let natural = natural_selections(probe, batch)?;
                if natural != base.selections {
                    return Ok(None);
                }
                let (loss, stats) = batch_objective_frozen(probe, batch, &base.selections, lambda_expert, lambda_router)?;
                if routing_signature(&stats) != base_routing {
                    return Ok(None);
                }
                Ok(Some(loss.total))
            };
            let hi = eval(orig + eps, &mut probe)?;
            let lo = eval(orig - eps, &mut probe)?;
            probe.params_mut()[mi].1.data_mut()[j] = orig;
            let entry = per_group.get_mut(kind).expect("group registered");
            match (hi, lo) {
                (Some(h), Some(l)) => {
                    entry.0.push(analytic[mi].data()[j]);
                    entry.1.push((h - l) / (2.0 * eps));
                }
                _ => entry.2 += 1,
            }
        }
    }

    let groups = per_group
        .into_iter()
        .map(|(kind, (a, n, skipped))| {
            let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = a.iter().zip(&n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale = an.max(nn);
            GroupCheck {
                kind,
                rel_error: if scale < VANISHING_NORM { diff } else { diff / scale },
                analytic_norm: an,
                numeric_norm: nn,
                checked: a.len(),
                skipped,
            }
        })
        .collect();
    Ok(GradCheck { groups })
}

fn natural_selections(model: &Model, batch: &[Sample]) -> Result<Vec<Vec<Selection>>> {
    batch.iter().map(|s| Ok(model.forward(&s.x, None)?.1.selections())).collect()
}

fn routing_signature(stats: &ActivationStats) -> Vec<(Vec<u64>, Option<Vec<u64>>)> {
    stats
        .layers
        .iter()
        .map(|l| (l.assign_counts.clone(), l.router.as_ref().map(|r| r.assign_counts.clone())))
        .collect()
}
