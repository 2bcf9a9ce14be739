//! Checkpoints, graph exports and run-log reports.

mod checkpoint;
mod graph;
mod stats;

pub use checkpoint::{
    decode_layer, encode_layer, load_checkpoint, reachable_layers, save_checkpoint, Checkpoint,
};
pub use graph::{flow_graph_dot, model_graph_dot};
pub use stats::{aggregate, report_from_files, Report, Stat};

use std::fs;
use std::path::Path;

use crate::data::TaskData;
use crate::error::{io_err, Result};
use crate::evolution::{RunConfig, RunOutput};

/// Writes `checkpoint/` and `summary.json` for a finished run into `dir`.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &RunConfig,
    tasks: &[TaskData],
    run: &RunOutput,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let defs: Vec<_> = tasks.iter().map(|t| t.def.clone()).collect();
    save_checkpoint(&run.system, Some(cfg), &defs, &dir.join("checkpoint"))?;
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&run.summary)?).map_err(io_err(&path))
}
