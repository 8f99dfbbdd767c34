//! `rollout`: an autoregressive trajectory from one seed batch.

use std::path::{Path, PathBuf};

use biocast_core::batch_builder::read_batch;
use biocast_core::model::Model;
use serde_json::json;

use super::Ctx;
use crate::data::{ensure_dir, read_stats};
use crate::error::Result;

pub const TRAJECTORY_FILE: &str = "trajectory.bbc";

pub fn run(
    ctx: &Ctx,
    checkpoint: &Path,
    seed_batch: &Path,
    steps: Option<usize>,
    stats: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let cfg = &ctx.loaded.config;
    let k = steps.unwrap_or(cfg.rollout.steps);
    if k == 0 {
        return Err(crate::error::CliError::Config("rollout needs at least one step".into()));
    }
    let model = Model::load(checkpoint)?;
    let batch = read_batch(seed_batch)?;
    let stats = read_stats(&stats.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.stats)))?;
    let traj = model.rollout(&batch.slice(0), &batch.slice(1), k, &stats)?;
    let out = out.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.output).join(TRAJECTORY_FILE));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(&out, traj.to_bytes()?)?;
    let months: Vec<String> = traj.timestamps().iter().map(|m| m.to_string()).collect();
    ctx.log.info("rollout", json!({ "steps": k, "months": months, "path": out }));
    Ok(out)
}
