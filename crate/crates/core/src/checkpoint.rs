//! Versioned JSON checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{MorError, Result};
use crate::layer::ParamKind;
use crate::model::Model;
use crate::numeric::Matrix;
use crate::routing::GateMode;

pub const CHECKPOINT_SCHEMA: &str = "mor-kit.checkpoint.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub seed: u64,
    pub epochs_trained: usize,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, epochs_trained: usize) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.to_string(),
            seed,
            epochs_trained,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| MorError::Checkpoint(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates a checkpoint. Syntax errors report the byte
    /// offset at which parsing failed.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| located(text, &e))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(CHECKPOINT_SCHEMA) => {}
            Some(other) => {
                return Err(MorError::Checkpoint(format!(
                    "unsupported schema tag {other:?} (expected {CHECKPOINT_SCHEMA:?})"
                )))
            }
            None => return Err(MorError::Checkpoint("missing schema tag".into())),
        }
        serde_json::from_str(text).map_err(|e| located(text, &e))
    }
}

fn located(text: &str, e: &serde_json::Error) -> MorError {
    MorError::Checkpoint(format!("{e} (byte offset {})", byte_offset(text, e.line(), e.column())))
}

/// Converts serde_json's 1-based line and column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Shape and norm of one trainable or frozen matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub layer: usize,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frobenius_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub schema: String,
    pub seed: u64,
    pub epochs_trained: usize,
    pub mode: GateMode,
    pub n_layers: usize,
    pub n_params: usize,
    pub matrices: Vec<MatrixSummary>,
}

pub fn summarize(ckpt: &Checkpoint) -> CheckpointSummary {
    let mut matrices = Vec::new();
    for (li, layer) in ckpt.model.layers().iter().enumerate() {
        let mut entry = |name: String, m: &Matrix| {
            matrices.push(MatrixSummary {
                layer: li,
                name,
                rows: m.rows(),
                cols: m.cols(),
                frobenius_norm: m.frobenius_norm(),
            })
        };
        entry("w0".into(), layer.w0());
        let mut layer = layer.clone();
        let (mut expert, mut sub) = (0, 0);
        for (kind, m) in layer.params_mut() {
            let name = match kind {
                ParamKind::ExpertA => format!("expert{expert}.a"),
                ParamKind::ExpertB => {
                    expert += 1;
                    format!("expert{}.b", expert - 1)
                }
                ParamKind::SubRouter => {
                    sub += 1;
                    format!("router{}", sub - 1)
                }
                ParamKind::MainRouter => "main_router".into(),
            };
            entry(name, m);
        }
    }
    CheckpointSummary {
        schema: ckpt.schema.clone(),
        seed: ckpt.seed,
        epochs_trained: ckpt.epochs_trained,
        mode: ckpt.model.mode(),
        n_layers: ckpt.model.layers().len(),
        n_params: ckpt.model.n_params(),
        matrices,
    }
}

impl std::fmt::Display for CheckpointSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "schema: {}", self.schema)?;
        writeln!(f, "mode: {:?}", self.mode)?;
        writeln!(f, "seed: {}", self.seed)?;
        writeln!(f, "epochs trained: {}", self.epochs_trained)?;
        writeln!(f, "layers: {}", self.n_layers)?;
        writeln!(f, "trainable parameters: {}", self.n_params)?;
        for m in &self.matrices {
            writeln!(f, "  layer {} {:<12} {:>3}x{:<3} norm {:.6e}", m.layer, m.name, m.rows, m.cols, m.frobenius_norm)?;
        }
        Ok(())
    }
}
