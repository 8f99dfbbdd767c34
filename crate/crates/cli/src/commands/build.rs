//! `build-batches`: one container per two-month window plus a manifest.

use std::path::{Path, PathBuf};

use biocast_core::batch_builder::container::checksum;
use biocast_core::batch_builder::{assemble_batch, serialize_batch, SourceDescriptor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Ctx;
use crate::data::{ensure_dir, BATCH_EXT};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub start: String,
    pub bytes: usize,
    pub sha256: String,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub channels: usize,
    pub windows: Vec<ManifestEntry>,
}

/// Relative source paths are looked up in each input directory in turn,
/// then next to the config file.
fn resolve_source(ctx: &Ctx, inputs: &[PathBuf], path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    inputs.iter().map(|d| d.join(path)).find(|p| p.exists()).unwrap_or_else(|| ctx.loaded.resolve(path))
}

pub fn run(ctx: &Ctx, inputs: &[PathBuf], out: Option<PathBuf>) -> Result<Manifest> {
    let cfg = &ctx.loaded.config;
    let model = cfg.model_config()?;
    if cfg.data.sources.is_empty() {
        return Err(CliError::Config("data.sources lists no sources".into()));
    }
    let sources: Vec<SourceDescriptor> = cfg
        .data
        .sources
        .iter()
        .map(|s| SourceDescriptor { path: resolve_source(ctx, inputs, &s.path), ..s.clone() })
        .collect();

    let mut failed = 0;
    for s in &sources {
        match std::fs::File::open(&s.path) {
            Ok(_) => ctx.log.info("source", json!({ "path": s.path, "group": s.group.to_string(), "status": "ok" })),
            Err(e) => {
                failed += 1;
                ctx.log.warn(
                    "source",
                    json!({ "path": s.path, "group": s.group.to_string(), "status": "unreadable", "error": e.to_string() }),
                );
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} of {} sources unreadable", sources.len())));
    }

    let out = out.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.batches));
    ensure_dir(&out)?;
    let mut windows = Vec::with_capacity(cfg.data.windows);
    for w in 0..cfg.data.windows {
        let start = cfg.data.start.plus(w as i64);
        let (batch, report) = assemble_batch(&sources, start, &model.grid, &model.schema)?;
        let bytes = serialize_batch(&batch);
        let file = format!("batch_{start}.{BATCH_EXT}");
        std::fs::write(out.join(&file), &bytes)?;
        let entry =
            ManifestEntry { file, start: start.to_string(), bytes: bytes.len(), sha256: checksum(&bytes), warnings: report.warnings };
        ctx.log.info("window", json!({ "file": entry.file, "sha256": entry.sha256, "warnings": entry.warnings.len() }));
        windows.push(entry);
    }
    let manifest = Manifest { channels: model.schema.channel_count(), windows };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join(MANIFEST), text + "\n")?;
    ctx.log.info("manifest", json!({ "path": out.join(MANIFEST), "windows": manifest.windows.len() }));
    Ok(manifest)
}
