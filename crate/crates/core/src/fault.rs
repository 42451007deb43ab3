//! Router fault injection and selection-agreement measurement.

use serde::{Deserialize, Serialize};

use crate::error::{MorError, Result};
use crate::model::Model;
use crate::numeric::Vector;
use crate::objective::task_loss;
use crate::rng::Rng;
use crate::task::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// Adds `N(0, σ²)` to every weight of the target router.
    LogitNoise,
    /// Zeroes the target router, so it emits the uniform distribution.
    WeightZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Sub-router index; 0 addresses the only router of a single-router gate.
    pub target_router: usize,
    pub noise_sigma: f64,
    pub mode: FaultMode,
}

/// Copy of `model` with the fault applied to the target router of every
/// layer.
pub fn inject_router_fault(model: &Model, fault: &FaultSpec, rng: &mut Rng) -> Result<Model> {
    if !(fault.noise_sigma >= 0.0 && fault.noise_sigma.is_finite()) {
        return Err(MorError::InvalidArgument(format!(
            "noise_sigma must be finite and non-negative, got {}",
            fault.noise_sigma
        )));
    }
    let mut out = model.clone();
    for layer in out.layers_mut() {
        let subs = layer.gate_mut().subs_mut();
        let len = subs.len();
        let target = subs.get_mut(fault.target_router).ok_or(MorError::IndexOutOfRange {
            what: "router",
            index: fault.target_router,
            len,
        })?;
        match fault.mode {
            FaultMode::WeightZero => target.fill_zero(),
            FaultMode::LogitNoise => {
                if fault.noise_sigma > 0.0 {
                    target
                        .data_mut()
                        .iter_mut()
                        .for_each(|w| *w += fault.noise_sigma * rng.standard_normal());
                }
            }
        }
    }
    Ok(out)
}

/// How often two models route inputs the same way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Fraction of inputs whose selected expert set is identical in every
    /// layer.
    pub exact: f64,
    /// Mean of `|S ∩ S'| / k` over inputs and layers.
    pub overlap: f64,
    pub n_inputs: usize,
}

pub fn selection_agreement(reference: &Model, other: &Model, inputs: &[Vector]) -> Result<Agreement> {
    if inputs.is_empty() {
        return Err(MorError::InvalidArgument("selection agreement needs inputs".into()));
    }
    if reference.layers().len() != other.layers().len() {
        return Err(MorError::InvalidArgument("models differ in depth".into()));
    }
    let n_layers = reference.layers().len();
    let (mut exact, mut overlap) = (0usize, 0.0);
    for x in inputs {
        let a = reference.forward(x, None)?.1.selections();
        let b = other.forward(x, None)?.1.selections();
        let mut all_same = true;
        for (sa, sb) in a.iter().zip(&b) {
            let mut ea = sa.experts.clone();
            let mut eb = sb.experts.clone();
            ea.sort_unstable();
            eb.sort_unstable();
            all_same &= ea == eb;
            let shared = ea.iter().filter(|e| eb.binary_search(e).is_ok()).count();
            overlap += shared as f64 / ea.len() as f64;
        }
        exact += all_same as usize;
    }
    let n = inputs.len() as f64;
    Ok(Agreement {
        exact: exact as f64 / n,
        overlap: overlap / (n * n_layers as f64),
        n_inputs: inputs.len(),
    })
}

/// Mean squared error per output coordinate over `samples`.
pub fn mean_squared_error(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MorError::InvalidArgument("mse needs samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let y = model.predict(&s.x)?;
        total += 2.0 * task_loss(&y, &s.target)?.0;
    }
    Ok(total / samples.len() as f64)
}
