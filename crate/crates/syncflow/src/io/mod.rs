//! File formats, configuration, datasets, and checkpoints.
//!
//! Every format here is bit-exact by construction: multi-byte integers are
//! little-endian, float payloads are raw IEEE-754 bits, and writers go
//! through write-then-rename so a crashed process never leaves a torn file.

mod config;
mod dataset;
mod ppm;
mod tensor_file;
mod wav;

pub mod checkpoint;
pub mod cli;


pub use config::{DataConfig, EvalConfig, RunConfig, SampleConfig, StageSection};
pub use dataset::{load_sample_dir, load_split, write_sample_dir, write_splits, LoadedSample};
pub use ppm::{read_frames, write_frames};
pub use tensor_file::{read_tensor, read_tensor_from, write_tensor, write_tensor_to};
pub use wav::{read_wav, write_wav};

use crate::error::Result;
use std::path::Path;

/// Write a file atomically: write to `<path>.tmp`, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
