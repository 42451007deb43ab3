use std::path::Path;

use mor_core::{summarize, Checkpoint, CheckpointSummary};

use crate::error::{io_err, CliError};

/// Reads and summarizes a checkpoint without modifying it.
pub fn cmd_inspect(path: &Path) -> Result<CheckpointSummary, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let ckpt = Checkpoint::from_json(&text)?;
    Ok(summarize(&ckpt))
}
