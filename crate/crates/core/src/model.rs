//! A stack of MoE-LoRA layers with an elementwise nonlinearity between
//! consecutive layers (none after the last).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::layer::{GateUpstream, LayerGrads, LayerSpec, LayerTrace, MoeLoraLayer, ParamKind};
use crate::numeric::{init_kaiming, Matrix, Vector};
use crate::objective::ActivationStats;
use crate::rng::Rng;
use crate::routing::{GateMode, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Tanh {
            v.iter_mut().for_each(|x| *x = x.tanh());
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a model stack. `dims` has one more entry than there are
/// layers: `dims[0]` is the input width, `dims[L]` the output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    pub n_experts: usize,
    pub n_routers: usize,
    pub k_experts: usize,
    pub k_routers: usize,
    pub rank: usize,
    pub alpha: f64,
    pub mode: GateMode,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn layer_spec(&self, l: usize) -> LayerSpec {
        LayerSpec {
            d_in: self.dims[l],
            d_out: self.dims[l + 1],
            n_experts: self.n_experts,
            n_routers: self.n_routers,
            k_experts: self.k_experts,
            k_routers: self.k_routers,
            rank: self.rank,
            alpha: self.alpha,
            mode: self.mode,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }
}

#[derive(Deserialize)]
struct ModelRecord {
    layers: Vec<MoeLoraLayer>,
    activation: Activation,
}

impl TryFrom<ModelRecord> for Model {
    type Error = MorError;

    fn try_from(r: ModelRecord) -> Result<Self> {
        Model::new(r.layers, r.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord")]
pub struct Model {
    layers: Vec<MoeLoraLayer>,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace {
    pub layers: Vec<LayerTrace>,
}

impl ModelTrace {
    pub fn selections(&self) -> Vec<Selection> {
        self.layers.iter().map(|t| t.decision.selection()).collect()
    }

    pub fn output(&self) -> &Vector {
        &self.layers.last().expect("model has layers").output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub input: Vector,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        Self {
            layers: model.layers.iter().map(LayerGrads::zeros).collect(),
            input: Vector::zeros(model.d_in()),
        }
    }

    /// Parameter gradients in the order of [`Model::params_mut`].
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// `self += scale · other`.
    pub fn accumulate(&mut self, other: &ModelGrads, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err("ModelGrads::accumulate", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            let dst = a.params_mut();
            let src = b.params();
            if dst.len() != src.len() {
                return Err(shape_err("ModelGrads::accumulate", dst.len(), src.len()));
            }
            for (d, s) in dst.into_iter().zip(src) {
                d.add_scaled(scale, s)?;
            }
        }
        for (a, b) in self.input.iter_mut().zip(other.input.iter()) {
            *a += scale * b;
        }
        Ok(())
    }
}

impl Model {
    pub fn new(layers: Vec<MoeLoraLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(MorError::InvalidArgument("a model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(shape_err(
                    "Model::new",
                    format!("layer {} input width {}", l + 1, pair[0].d_out()),
                    pair[1].d_in(),
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Fresh model. `bases` supplies the frozen weight of every layer; when
    /// absent each base is kaiming-initialized from `rng`.
    pub fn init(spec: &ModelSpec, bases: Option<Vec<Matrix>>, rng: &mut Rng) -> Result<Self> {
        let n = spec.n_layers();
        if n == 0 {
            return Err(MorError::InvalidArgument("model dims need at least two entries".into()));
        }
        let bases = match bases {
            Some(b) if b.len() == n => b,
            Some(b) => return Err(shape_err("Model::init", format!("{n} base weights"), b.len())),
            None => (0..n)
                .map(|l| init_kaiming(spec.dims[l + 1], spec.dims[l], rng))
                .collect::<Result<Vec<_>>>()?,
        };
        let layers = bases
            .into_iter()
            .enumerate()
            .map(|(l, w0)| MoeLoraLayer::init(&spec.layer_spec(l), w0, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, spec.activation)
    }

    pub fn layers(&self) -> &[MoeLoraLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [MoeLoraLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("model has layers").d_out()
    }

    pub fn mode(&self) -> GateMode {
        self.layers[0].mode()
    }

    pub fn new_stats(&self) -> ActivationStats {
        ActivationStats::new(self.layers.iter().map(MoeLoraLayer::new_stats).collect())
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Matrix)> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.clone().params_mut().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn forward(&self, x: &[f64], stats: Option<&mut ActivationStats>) -> Result<(Vector, ModelTrace)> {
        if let Some(s) = &stats {
            if s.layers.len() != self.layers.len() {
                return Err(shape_err("Model::forward", format!("{} stats layers", self.layers.len()), s.layers.len()));
            }
        }
        let mut stats = stats;
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = Vector::from(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let layer_stats = stats.as_deref_mut().map(|s| &mut s.layers[l]);
            let (mut y, trace) = layer.forward(&h, layer_stats)?;
            traces.push(trace);
            if l + 1 < self.layers.len() {
                self.activation.apply(&mut y);
            }
            h = y;
        }
        Ok((h, ModelTrace { layers: traces }))
    }

    /// Forward pass replaying the routing choices of an earlier pass.
    pub fn forward_frozen(&self, x: &[f64], selections: &[Selection]) -> Result<(Vector, ModelTrace)> {
        if selections.len() != self.layers.len() {
            return Err(shape_err("Model::forward_frozen", self.layers.len(), selections.len()));
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = Vector::from(x.to_vec());
        for (l, (layer, sel)) in self.layers.iter().zip(selections).enumerate() {
            let (mut y, trace) = layer.forward_frozen(&h, sel)?;
            traces.push(trace);
            if l + 1 < self.layers.len() {
                self.activation.apply(&mut y);
            }
            h = y;
        }
        Ok((h, ModelTrace { layers: traces }))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vector> {
        Ok(self.forward(x, None)?.0)
    }

    /// Backward pass for `upstream = dL/d(model output)`. `aux` carries
    /// per-layer balance-loss gradients; an empty slice means none.
    pub fn backward(&self, trace: &ModelTrace, upstream: &[f64], aux: &[GateUpstream]) -> Result<ModelGrads> {
        if trace.layers.len() != self.layers.len() {
            return Err(MorError::StaleCache("trace depth differs from model depth".into()));
        }
        if !aux.is_empty() && aux.len() != self.layers.len() {
            return Err(shape_err("Model::backward", format!("{} aux entries", self.layers.len()), aux.len()));
        }
        let none = GateUpstream::default();
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut g = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let a = aux.get(l).unwrap_or(&none);
            let lg = self.layers[l].backward(&trace.layers[l], &g, a)?;
            g = lg.input.to_vec();
            if l > 0 {
                // input of layer l is act(output of layer l - 1)
                let act_out = &trace.layers[l].input;
                for (gi, &o) in g.iter_mut().zip(act_out.iter()) {
                    *gi *= self.activation.derivative_from_output(o);
                }
            }
            grads[l] = Some(lg);
        }
        Ok(ModelGrads {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
            input: Vector::from(g),
        })
    }
}
