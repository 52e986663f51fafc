//! Command-line front end: configuration, corpus wiring, checkpoints and
//! one subcommand per training stage.

pub mod checkpoint;
pub mod commands;
pub mod repro;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "EVOTEXT_OUT";
pub const CONFIG_FILE: &str = "effective.cfg";

/// Writes `cfg` as `key=value` lines into `dir/effective.cfg`, preceded by
/// a comment with the invocation. Loading the file back with `--config`
/// ignores the comment.
pub fn write_effective_config<T: Serialize>(dir: &Path, cfg: &T, invocation: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = format!("# {invocation}\n{}", evotext::config::to_kv(cfg));
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
