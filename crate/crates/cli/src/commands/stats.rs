//! `compute-stats`: normalization statistics over a batch directory.

use std::path::PathBuf;

use biocast_core::data_model::compute_norm_stats;
use serde_json::json;

use super::Ctx;
use crate::data::{load_batches, write_stats};
use crate::error::Result;

pub fn run(ctx: &Ctx, batches: Option<PathBuf>, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = &ctx.loaded.config;
    let dir = batches.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.batches));
    let out = out.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.stats));
    let batches = load_batches(&dir)?;
    let stats = compute_norm_stats(&batches)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::data::ensure_dir(parent)?;
    }
    write_stats(&out, &stats)?;
    ctx.log.info("stats", json!({ "batches": batches.len(), "entries": stats.len(), "path": out }));
    Ok(out)
}
