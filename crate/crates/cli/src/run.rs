//! Run directories, checkpoint lookup and exit-code mapping.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use advseg::dataset::{load_folder_dataset, Dataset};
use advseg::trainer::{latest_checkpoint, TrainConfig};

/// Bad flags or inputs detected by the tool itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<advseg::Error>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

/// Makes `dir` ready for writing. An existing non-empty directory is
/// refused unless `force` is set, in which case the listed entries the
/// command owns are removed first. Other files are left alone.
pub fn prepare_out(dir: &Path, force: bool, owned: &[&str]) -> Result<()> {
    let non_empty = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", dir.display())));
    }
    if non_empty {
        if !force {
            return Err(usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            } else if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    load_folder_dataset(dir).with_context(|| format!("loading {}", dir.display()))
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("reading {}: {e}", p.display())))?;
            TrainConfig::from_toml_str(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

/// Paths of a saved segmentation net and, when present, its discriminator.
pub struct CheckpointFiles {
    pub seg: PathBuf,
    pub disc: Option<PathBuf>,
}

/// Accepts a `seg.bin` file, a checkpoint directory, or a run directory
/// (latest checkpoint).
pub fn resolve_checkpoint(path: &Path) -> Result<CheckpointFiles> {
    let dir = if path.is_file() {
        let disc = path.with_file_name("disc.bin");
        return Ok(CheckpointFiles {
            seg: path.to_path_buf(),
            disc: disc.is_file().then_some(disc),
        });
    } else if path.join("seg.bin").is_file() {
        path.to_path_buf()
    } else if let Some(latest) = latest_checkpoint(&path.join("checkpoints")) {
        latest
    } else {
        return Err(usage(format!("no checkpoint found at {}", path.display())));
    };
    let disc = dir.join("disc.bin");
    Ok(CheckpointFiles {
        seg: dir.join("seg.bin"),
        disc: disc.is_file().then_some(disc),
    })
}

/// Written to `manifest.json` in every run directory.
#[derive(Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_snapshot: &'static str,
    pub dataset: DatasetInfo,
    pub seeds: Vec<u64>,
    pub fraction: f64,
    pub labeled_samples: usize,
    pub flags: Flags,
    pub completed_iterations: usize,
    pub layout: Layout,
}

#[derive(Serialize)]
pub struct DatasetInfo {
    pub path: String,
    pub fingerprint: String,
    pub samples: usize,
    pub classes: usize,
}

#[derive(Serialize)]
pub struct Flags {
    pub no_adv: bool,
    pub no_semi: bool,
    pub global_disc: bool,
    pub allow_degenerate: bool,
}

#[derive(Serialize)]
pub struct Layout {
    pub config: &'static str,
    pub train_log: &'static str,
    pub checkpoints: &'static str,
    pub metrics: &'static str,
    pub exports: &'static str,
}

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const SELECTED: &str = "selected_pixels.csv";
pub const EXPORTS: &str = "exports";
pub const MANIFEST: &str = "manifest.json";

pub const LAYOUT: Layout = Layout {
    config: CONFIG_SNAPSHOT,
    train_log: TRAIN_LOG,
    checkpoints: CHECKPOINTS,
    metrics: METRICS,
    exports: EXPORTS,
};
