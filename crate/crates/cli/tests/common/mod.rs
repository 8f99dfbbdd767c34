//! A six-month source corpus on the desk grid and helpers to drive the binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biocast_core::batch_builder::{GriddedFile, GriddedVariable};
use biocast_core::data_model::GridSpec;
use serde_json::json;

pub const MONTHS: usize = 6;
pub const SPECIES: [u64; 3] = [1920506, 1898286, 5219173];

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    /// Runs `biocast --config run.toml --quiet <args>`.
    pub fn run(&self, args: &[&str]) -> Output {
        let cfg = self.config();
        let mut all = vec!["--quiet", "--config", cfg.to_str().unwrap()];
        all.extend_from_slice(args);
        biocast(&all)
    }

    pub fn build(&self) {
        ok(&self.run(&["build-batches"]));
    }
}

pub fn biocast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biocast")).args(args).output().expect("binary runs")
}

pub fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn month(t: usize) -> String {
    format!("2001-{:02}-01", t + 1)
}

fn gridded(coords: Vec<(&str, serde_json::Value)>, vars: Vec<(&str, Vec<&str>, Vec<Option<f64>>)>) -> String {
    let file = GriddedFile {
        coords: coords.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        variables: vars
            .into_iter()
            .map(|(k, dims, data)| (k.to_string(), GriddedVariable { dims: dims.iter().map(|d| d.to_string()).collect(), data }))
            .collect(),
    };
    serde_json::to_string(&file).unwrap()
}

fn write_sources(dir: &Path) {
    let grid = GridSpec::desk();
    let (h, w) = (grid.height, grid.width);
    let lats: Vec<f64> = (0..h).map(|r| grid.row_lat(r)).collect();
    let lons: Vec<f64> = (0..w).map(|c| grid.col_lon(c)).collect();
    let times: Vec<String> = (0..MONTHS).map(month).collect();

    let mut t2m = Vec::new();
    let mut msl = Vec::new();
    for t in 0..MONTHS {
        for i in 0..h {
            for j in 0..w {
                let season = (t as f64 * 0.9).sin();
                t2m.push(Some(285.0 + 4.0 * season - 0.6 * i as f64 + 0.1 * j as f64));
                msl.push(Some(101_300.0 + 150.0 * season + 8.0 * j as f64 - 5.0 * i as f64));
            }
        }
    }
    let dims = vec!["time", "lat", "lon"];
    let surface = gridded(
        vec![("time", json!(times)), ("lat", json!(lats)), ("lon", json!(lons))],
        vec![("t2m", dims.clone(), t2m), ("msl", dims, msl)],
    );
    std::fs::write(dir.join("surface.json"), surface).unwrap();

    let levels = [850u32, 500];
    let mut t = Vec::new();
    for m in 0..MONTHS {
        for &l in &levels {
            for i in 0..h {
                for j in 0..w {
                    t.push(Some(l as f64 / 4.0 + 3.0 * (m as f64 * 0.7).cos() - 0.4 * i as f64 + 0.05 * j as f64));
                }
            }
        }
    }
    let atmos = gridded(
        vec![("time", json!(times)), ("level", json!(levels)), ("lat", json!(lats)), ("lon", json!(lons))],
        vec![("t", vec!["time", "level", "lat", "lon"], t)],
    );
    std::fs::write(dir.join("atmospheric.json"), atmos).unwrap();

    let mut csv = String::from("species_id,lat,lon,timestamp,distribution_value\n");
    for m in 0..MONTHS {
        for (k, id) in SPECIES.iter().enumerate().take(2) {
            for r in 0..4 {
                let i = (3 * r + k + m) % h;
                let j = (5 * r + 2 * k + m) % w;
                csv.push_str(&format!("{id},{},{},{},{}\n", lats[i], lons[j], month(m), 1.0 + r as f64));
            }
        }
    }
    std::fs::write(dir.join("species.csv"), csv).unwrap();
}

/// Writes the corpus under `sources/` and a config whose relative paths
/// point into the workspace.
pub fn workspace() -> Workspace {
    workspace_with("")
}

/// As [`workspace`], with `extra` appended to the config.
pub fn workspace_with(extra: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let sources = dir.path().join("sources");
    std::fs::create_dir(&sources).unwrap();
    write_sources(&sources);
    let config = format!(
        r#"seed = 11

[model]
preset = "desk"

[optim]
base_lr = 1e-3
t_periodic = 10

[train]
steps = 3
rollout_k = 1
weights = "uniform"

[finetune]
steps = 2
rollout_k = 2

[finetune.adapter]
rank = 2
seed = 5

[rollout]
steps = 2

[data]
start = "2001-01"
windows = {windows}

[[data.sources]]
kind = "gridded_reanalysis"
path = "sources/surface.json"
group = "surface"

[[data.sources]]
kind = "gridded_reanalysis"
path = "sources/atmospheric.json"
group = "atmospheric"

[[data.sources]]
kind = "species_records"
path = "sources/species.csv"
group = "species"

[paths]
batches = "batches"
stats = "stats.json"
output = "run"
{extra}"#,
        windows = MONTHS - 1
    );
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    Workspace { dir }
}
