//! One MoE-LoRA layer: `y = W0 · x + Σ_m F_m(x) · scaling · B_m A_m x`,
//! with `W0` frozen and `F` produced by the layer's gate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::lora::{ExpertGrads, LoraExpertBank};
use crate::numeric::{dot, init_kaiming, Matrix, Vector};
use crate::objective::LayerStats;
use crate::rng::Rng;
use crate::routing::{Gate, GateMode, RouteCache, RouteUpstream, RouterParams, RoutingDecision, Selection};

/// Shape and gating hyperparameters of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub n_experts: usize,
    pub n_routers: usize,
    pub k_experts: usize,
    pub k_routers: usize,
    pub rank: usize,
    pub alpha: f64,
    pub mode: GateMode,
}

#[derive(Deserialize)]
struct LayerRecord {
    w0: Matrix,
    bank: LoraExpertBank,
    gate: Gate,
    k_experts: usize,
    k_routers: usize,
}

impl TryFrom<LayerRecord> for MoeLoraLayer {
    type Error = MorError;

    fn try_from(r: LayerRecord) -> Result<Self> {
        MoeLoraLayer::new(r.w0, r.bank, r.gate, r.k_experts, r.k_routers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRecord")]
pub struct MoeLoraLayer {
    w0: Matrix,
    bank: LoraExpertBank,
    gate: Gate,
    k_experts: usize,
    k_routers: usize,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub decision: RoutingDecision,
    pub input: Vector,
    pub output: Vector,
    pub(crate) cache: RouteCache,
    /// `scaling · B_m A_m x` for each selected expert, aligned with
    /// `decision.selected`.
    pub(crate) expert_outputs: Vec<Vector>,
}

/// Extra upstream gradients on the gate, from the balance losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateUpstream {
    pub full_dist: Option<Vec<f64>>,
    pub router_weights: Option<Vec<f64>>,
}

/// Parameter and input gradients of one layer. `w0` is frozen and has none.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// One entry per expert; unselected experts stay exactly zero.
    pub experts: Vec<ExpertGrads>,
    pub subs: Vec<Matrix>,
    pub main: Option<Matrix>,
    pub input: Vector,
}

impl LayerGrads {
    pub fn zeros(layer: &MoeLoraLayer) -> Self {
        Self {
            experts: layer.bank.experts().iter().map(ExpertGrads::zeros_like).collect(),
            subs: layer.gate.subs().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
            main: layer.gate.main().map(|m| Matrix::zeros(m.rows(), m.cols())),
            input: Vector::zeros(layer.d_in()),
        }
    }

    /// Parameter gradients in the same order as
    /// [`MoeLoraLayer::params_mut`].
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        for e in &self.experts {
            out.push(&e.a);
            out.push(&e.b);
        }
        out.extend(self.subs.iter());
        out.extend(self.main.iter());
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for e in &mut self.experts {
            out.push(&mut e.a);
            out.push(&mut e.b);
        }
        out.extend(self.subs.iter_mut());
        out.extend(self.main.iter_mut());
        out
    }
}

/// Role of a trainable matrix, for per-group reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    ExpertA,
    ExpertB,
    SubRouter,
    MainRouter,
}

impl MoeLoraLayer {
    pub fn new(w0: Matrix, bank: LoraExpertBank, gate: Gate, k_experts: usize, k_routers: usize) -> Result<Self> {
        if w0.shape() != (bank.d_out(), bank.d_in()) {
            return Err(shape_err(
                "MoeLoraLayer::new",
                format!("w0 {}x{}", bank.d_out(), bank.d_in()),
                format!("{}x{}", w0.rows(), w0.cols()),
            ));
        }
        if gate.n_experts() != bank.n_experts() || gate.d_in() != bank.d_in() {
            return Err(shape_err(
                "MoeLoraLayer::new",
                format!("gate over {} experts with d_in {}", bank.n_experts(), bank.d_in()),
                format!("{} experts with d_in {}", gate.n_experts(), gate.d_in()),
            ));
        }
        if k_experts == 0 || k_experts > bank.n_experts() {
            return Err(MorError::InvalidArgument(format!(
                "k_experts must be in 1..={}, got {k_experts}",
                bank.n_experts()
            )));
        }
        if k_routers == 0 || k_routers > gate.n_routers() {
            return Err(MorError::InvalidArgument(format!(
                "k_routers must be in 1..={}, got {k_routers}",
                gate.n_routers()
            )));
        }
        if let Gate::Mor(p) = &gate {
            if p.d_in() != bank.d_in() {
                return Err(shape_err("MoeLoraLayer::new", bank.d_in(), p.d_in()));
            }
        }
        Ok(Self {
            w0,
            bank,
            gate,
            k_experts,
            k_routers,
        })
    }

    /// Fresh layer around a given frozen base weight. Experts start inert;
    /// routers are kaiming-initialized.
    pub fn init(spec: &LayerSpec, w0: Matrix, rng: &mut Rng) -> Result<Self> {
        let bank = LoraExpertBank::new(spec.n_experts, spec.d_in, spec.d_out, spec.rank, spec.alpha, rng)?;
        let (gate, k_routers) = match spec.mode {
            GateMode::Single => (
                Gate::Single {
                    router: init_kaiming(spec.n_experts, spec.d_in, rng)?,
                },
                1,
            ),
            GateMode::Mor => (
                Gate::Mor(RouterParams::init(spec.n_routers, spec.n_experts, spec.d_in, rng)?),
                spec.k_routers,
            ),
        };
        Self::new(w0, bank, gate, spec.k_experts, k_routers)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bank(&self) -> &LoraExpertBank {
        &self.bank
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn mode(&self) -> GateMode {
        self.gate.mode()
    }

    pub fn k_experts(&self) -> usize {
        self.k_experts
    }

    pub fn k_routers(&self) -> usize {
        self.k_routers
    }

    pub fn d_in(&self) -> usize {
        self.bank.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.bank.d_out()
    }

    pub fn n_experts(&self) -> usize {
        self.bank.n_experts()
    }

    pub fn new_stats(&self) -> LayerStats {
        let routers = match self.gate.mode() {
            GateMode::Single => None,
            GateMode::Mor => Some(self.gate.n_routers()),
        };
        LayerStats::new(self.n_experts(), self.k_experts, routers)
    }

    /// Trainable matrices: per expert `A`, `B`; then sub-routers; then the
    /// main router if present.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Matrix)> {
        let mut out: Vec<(ParamKind, &mut Matrix)> = Vec::new();
        for e in self.bank.experts_mut() {
            out.push((ParamKind::ExpertA, &mut e.a));
            out.push((ParamKind::ExpertB, &mut e.b));
        }
        match &mut self.gate {
            Gate::Single { router } => out.push((ParamKind::SubRouter, router)),
            Gate::Mor(p) => {
                let (main, subs) = p.split_mut();
                out.extend(subs.iter_mut().map(|m| (ParamKind::SubRouter, m)));
                out.push((ParamKind::MainRouter, main));
            }
        }
        out
    }

    pub(crate) fn gate_mut(&mut self) -> &mut Gate {
        &mut self.gate
    }

    /// Forward pass; records routing into `stats` when given.
    pub fn forward(&self, x: &[f64], stats: Option<&mut LayerStats>) -> Result<(Vector, LayerTrace)> {
        let out = self.forward_with(x, None)?;
        if let Some(s) = stats {
            s.record(&out.1.decision)?;
        }
        Ok(out)
    }

    /// Forward pass with the discrete routing choices replayed from
    /// `selection` (the smooth path is still recomputed).
    pub fn forward_frozen(&self, x: &[f64], selection: &Selection) -> Result<(Vector, LayerTrace)> {
        self.forward_with(x, Some(selection))
    }

    fn forward_with(&self, x: &[f64], frozen: Option<&Selection>) -> Result<(Vector, LayerTrace)> {
        if x.len() != self.d_in() {
            return Err(shape_err("layer_forward", format!("input len {}", self.d_in()), x.len()));
        }
        let (decision, cache) = self.gate.route(x, self.k_experts, self.k_routers, frozen)?;
        let mut y = self.w0.matvec(x)?;
        let mut expert_outputs = Vec::with_capacity(decision.k());
        for (&id, &w) in decision.selected.iter().zip(&decision.weights) {
            let e = self.bank.expert_forward(id, x)?;
            for (o, v) in y.iter_mut().zip(e.iter()) {
                *o += w * v;
            }
            expert_outputs.push(e);
        }
        let trace = LayerTrace {
            decision,
            input: Vector::from(x.to_vec()),
            output: y.clone(),
            cache,
            expert_outputs,
        };
        Ok((y, trace))
    }

    /// Backward pass for `upstream = dL/dy`, plus optional balance-loss
    /// gradients on the gate outputs.
    pub fn backward(&self, trace: &LayerTrace, upstream: &[f64], aux: &GateUpstream) -> Result<LayerGrads> {
        if trace.input.len() != self.d_in()
            || trace.output.len() != self.d_out()
            || trace.expert_outputs.len() != trace.decision.k()
        {
            return Err(MorError::StaleCache("trace does not belong to this layer".into()));
        }
        trace
            .decision
            .validate(self.n_experts())
            .map_err(|e| MorError::StaleCache(e.to_string()))?;
        if upstream.len() != self.d_out() {
            return Err(shape_err("layer_backward", format!("upstream len {}", self.d_out()), upstream.len()));
        }
        let x = trace.input.as_slice();
        let mut grads = LayerGrads::zeros(self);

        let mut g_weights = Vec::with_capacity(trace.decision.k());
        let mut input = self.w0.matvec_t(upstream)?;
        for (m, (&id, &w)) in trace.decision.selected.iter().zip(&trace.decision.weights).enumerate() {
            g_weights.push(dot(upstream, &trace.expert_outputs[m]));
            self.bank.accumulate_param_grads(id, x, upstream, w, &mut grads.experts[id])?;
            for (i, v) in self.bank.expert_input_grad(id, upstream)?.iter().enumerate() {
                input[i] += w * v;
            }
        }

        let route = self.gate.backward(
            x,
            &trace.decision,
            Some(&trace.cache),
            RouteUpstream {
                weights: &g_weights,
                full_dist: aux.full_dist.as_deref(),
                router_weights: aux.router_weights.as_deref(),
            },
        )?;
        for (i, v) in route.input.iter().enumerate() {
            input[i] += v;
        }
        grads.subs = route.subs;
        grads.main = route.main;
        grads.input = input;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraExpert;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    fn random_layer(mode: GateMode, rng: &mut Rng) -> MoeLoraLayer {
        let (d_in, d_out, n, rank) = (5, 4, 4, 2);
        let experts = (0..n)
            .map(|_| LoraExpert::new(random_matrix(rank, d_in, rng), random_matrix(d_out, rank, rng)).unwrap())
            .collect();
        let bank = LoraExpertBank::from_experts(experts, 0.8).unwrap();
        let (gate, kr) = match mode {
            GateMode::Single => (Gate::Single { router: random_matrix(n, d_in, rng) }, 1),
            GateMode::Mor => (Gate::Mor(RouterParams::init(3, n, d_in, rng).unwrap()), 2),
        };
        MoeLoraLayer::new(random_matrix(d_out, d_in, rng), bank, gate, 2, kr).unwrap()
    }

    fn spec(mode: GateMode) -> LayerSpec {
        LayerSpec {
            d_in: 6,
            d_out: 5,
            n_experts: 4,
            n_routers: 2,
            k_experts: 2,
            k_routers: 2,
            rank: 2,
            alpha: 4.0,
            mode,
        }
    }

    #[test]
    fn fresh_layer_is_base_only() {
        let mut rng = Rng::new(1);
        for mode in [GateMode::Single, GateMode::Mor] {
            let w0 = random_matrix(5, 6, &mut rng);
            let layer = MoeLoraLayer::init(&spec(mode), w0.clone(), &mut rng).unwrap();
            let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
            let (y, _) = layer.forward(&x, None).unwrap();
            assert_eq!(y, w0.matvec(&x).unwrap());
        }
    }

    #[test]
    fn zero_base_single_expert_is_expert_output() {
        let mut rng = Rng::new(2);
        let e = LoraExpert::new(random_matrix(2, 3, &mut rng), random_matrix(3, 2, &mut rng)).unwrap();
        let bank = LoraExpertBank::from_experts(vec![e], 1.5).unwrap();
        let layer = MoeLoraLayer::new(
            Matrix::zeros(3, 3),
            bank.clone(),
            Gate::Single { router: random_matrix(1, 3, &mut rng) },
            1,
            1,
        )
        .unwrap();
        let x = [0.4, -0.3, 1.2];
        let (y, t) = layer.forward(&x, None).unwrap();
        assert_eq!(t.decision.weights, vec![1.0]);
        assert_eq!(y, bank.expert_forward(0, &x).unwrap());
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = Rng::new(3);
        for mode in [GateMode::Single, GateMode::Mor] {
            for _ in 0..50 {
                let layer = random_layer(mode, &mut rng);
                let x: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
                let (y, trace) = layer.forward(&x, None).unwrap();
                // dense: every expert evaluated, unselected gate weights zero
                let mut gates = vec![0.0; 4];
                for (&i, &w) in trace.decision.selected.iter().zip(&trace.decision.weights) {
                    gates[i] = w;
                }
                let mut oracle = layer.w0().matvec(&x).unwrap();
                for (i, &g) in gates.iter().enumerate() {
                    let e = layer.bank().expert(i).unwrap();
                    let dense = e.b().matmul(e.a()).unwrap().matvec(&x).unwrap();
                    for (o, d) in oracle.iter_mut().zip(dense.iter()) {
                        *o += g * layer.bank().scaling() * d;
                    }
                }
                for (a, b) in y.iter().zip(oracle.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_updates_stats() {
        let mut rng = Rng::new(4);
        let layer = random_layer(GateMode::Mor, &mut rng);
        let mut stats = layer.new_stats();
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
            layer.forward(&x, Some(&mut stats)).unwrap();
        }
        assert_eq!(stats.token_count, 10);
        assert_eq!(stats.assign_counts.iter().sum::<u64>(), 20);
        assert_eq!(stats.router.as_ref().unwrap().assign_counts.iter().sum::<u64>(), 10);
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = Rng::new(5);
        let layer = random_layer(GateMode::Mor, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
        let (_, trace) = layer.forward(&x, None).unwrap();
        let g = layer.backward(&trace, &[0.0; 4], &GateUpstream::default()).unwrap();
        assert!(g.params().iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unselected_experts_get_no_gradient() {
        let mut rng = Rng::new(6);
        let layer = random_layer(GateMode::Single, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
        let (_, trace) = layer.forward(&x, None).unwrap();
        let g = layer.backward(&trace, &[1.0, -1.0, 0.5, 2.0], &GateUpstream::default()).unwrap();
        for (i, eg) in g.experts.iter().enumerate() {
            let zero = eg.a.data().iter().chain(eg.b.data()).all(|&v| v == 0.0);
            assert_eq!(zero, !trace.decision.selected.contains(&i));
        }
    }

    #[test]
    fn single_expert_reduces_to_expert_grads() {
        let mut rng = Rng::new(7);
        let e = LoraExpert::new(random_matrix(2, 3, &mut rng), random_matrix(3, 2, &mut rng)).unwrap();
        let bank = LoraExpertBank::from_experts(vec![e], 1.5).unwrap();
        let layer = MoeLoraLayer::new(
            Matrix::zeros(3, 3),
            bank.clone(),
            Gate::Single { router: random_matrix(1, 3, &mut rng) },
            1,
            1,
        )
        .unwrap();
        let x = [0.4, -0.3, 1.2];
        let up = [1.0, 0.5, -2.0];
        let (_, t) = layer.forward(&x, None).unwrap();
        let g = layer.backward(&t, &up, &GateUpstream::default()).unwrap();
        assert_eq!(g.experts[0], bank.expert_param_grads(0, &x, &up).unwrap());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let mut rng = Rng::new(8);
        let layer = random_layer(GateMode::Mor, &mut rng);
        let other = random_layer(GateMode::Mor, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
        let (_, trace) = other.forward(&x, None).unwrap();
        let err = layer.backward(&trace, &[1.0; 4], &GateUpstream::default());
        assert!(matches!(err, Err(MorError::StaleCache(_))));
    }

    #[test]
    fn constructor_validates() {
        let mut rng = Rng::new(9);
        let bank = LoraExpertBank::new(4, 3, 3, 1, 1.0, &mut rng).unwrap();
        let router = random_matrix(4, 3, &mut rng);
        assert!(MoeLoraLayer::new(Matrix::zeros(3, 2), bank.clone(), Gate::Single { router: router.clone() }, 1, 1).is_err());
        assert!(MoeLoraLayer::new(Matrix::zeros(3, 3), bank.clone(), Gate::Single { router: router.clone() }, 5, 1).is_err());
        assert!(MoeLoraLayer::new(Matrix::zeros(3, 3), bank.clone(), Gate::Single { router: random_matrix(3, 3, &mut rng) }, 1, 1).is_err());
        assert!(MoeLoraLayer::new(Matrix::zeros(3, 3), bank, Gate::Single { router }, 2, 2).is_err());
    }
}
