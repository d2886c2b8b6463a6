//! On-disk formats: tensor containers, dataset directories and checkpoints.

mod checkpoint;
mod container;
mod dataset;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{Checkpoint, CheckpointModel, TrainingMetadata, CHECKPOINT_SCHEMA};
pub use container::{Container, ContainerHeader, Role, CONTAINER_SCHEMA};
pub use dataset::{load_ground_truth, load_split, load_truth, save_ground_truth, split_path, Truth, TRUTH_FILE};

use crate::error::Result;

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}
