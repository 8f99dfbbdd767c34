//! Batch directories as ordered monthly series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use biocast_core::batch_builder::read_batch;
use biocast_core::data_model::{compute_norm_stats, Batch, Month, NormStats, StateSlice};

use crate::error::{CliError, Result};

pub const BATCH_EXT: &str = "bbc";

/// Every `.bbc` file of `dir`, in file-name order.
pub fn batch_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("batch directory {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == BATCH_EXT) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no .{BATCH_EXT} files in {}", dir.display())));
    }
    Ok(files)
}

pub fn load_batches(dir: &Path) -> Result<Vec<Batch>> {
    let mut batches = batch_files(dir)?.iter().map(|p| read_batch(p).map_err(CliError::from)).collect::<Result<Vec<_>>>()?;
    batches.sort_by_key(|b| b.timestamps()[0]);
    Ok(batches)
}

/// Distinct monthly states; where two batches share a month the earlier
/// batch wins.
pub fn states_by_month(batches: &[Batch]) -> BTreeMap<Month, StateSlice> {
    let mut out = BTreeMap::new();
    for b in batches {
        for t in 0..2 {
            let s = b.slice(t);
            out.entry(s.timestamp).or_insert(s);
        }
    }
    out
}

/// Every run of `len` consecutive months.
pub fn consecutive_runs(states: &BTreeMap<Month, StateSlice>, len: usize) -> Vec<Vec<StateSlice>> {
    let months: Vec<Month> = states.keys().copied().collect();
    let mut runs = Vec::new();
    for i in 0..months.len() {
        let run: Vec<Month> = (0..len).map(|k| months[i].plus(k as i64)).collect();
        if run.iter().all(|m| states.contains_key(m)) {
            runs.push(run.iter().map(|m| states[m].clone()).collect());
        }
    }
    runs
}

pub fn read_stats(path: &Path) -> Result<NormStats> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("stats file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("stats file {}: {e}", path.display())))
}

pub fn write_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let text = serde_json::to_string_pretty(stats).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Stats from `path`, or computed from `batches` when the file is absent.
pub fn stats_or_compute(path: &Path, batches: &[Batch]) -> Result<(NormStats, bool)> {
    if path.exists() {
        Ok((read_stats(path)?, false))
    } else {
        Ok((compute_norm_stats(batches)?, true))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}
