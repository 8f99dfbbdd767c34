//! `evaluate`: scores a trajectory against true states from a batch directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use biocast_core::data_model::{GroupName, StateSlice};
use biocast_core::metrics;
use biocast_core::model::RolloutTrajectory;
use serde::Serialize;
use serde_json::json;

use super::Ctx;
use crate::data::{ensure_dir, load_batches, states_by_month};
use crate::error::{CliError, Result};

pub const REPORT: &str = "metrics.json";
pub const SCORECARD: &str = "scorecard.csv";

#[derive(Debug, Default, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub month: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<metrics::VariableScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<metrics::VariableScores>,
    /// Per channel; `null` where the truth has no variance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<BTreeMap<String, Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sorensen_mean: Option<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub richness: Option<RichnessReport>,
}

#[derive(Debug, Serialize)]
pub struct RichnessReport {
    pub predicted_mean: f64,
    pub observed_mean: f64,
    pub mae: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub channels: Vec<String>,
    pub threshold: f64,
    pub steps: Vec<StepReport>,
}

fn presence(s: &StateSlice, pos: usize, threshold: f64) -> Vec<bool> {
    metrics::threshold(&s.groups[pos].iter().map(|&v| v as f64).collect::<Vec<_>>(), threshold)
}

fn land_mask(s: &StateSlice) -> Option<Vec<bool>> {
    let pos = s.schema.group_pos(GroupName::Land)?;
    Some(s.groups[pos].iter().take(s.grid.cells()).map(|&v| v > 0.0).collect())
}

fn write_grid(dir: &Path, name: &str, s: &StateSlice, values: &[f32]) -> Result<()> {
    std::fs::write(dir.join(format!("{name}.grid")), metrics::grid_bytes(name, s.grid.height, s.grid.width, values))?;
    Ok(())
}

pub fn run(ctx: &Ctx, trajectory: &Path, truth: Option<PathBuf>, selected: Option<Vec<String>>, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = &ctx.loaded.config;
    let wanted = selected.unwrap_or_else(|| cfg.evaluate.metrics.clone());
    for m in &wanted {
        if !crate::config::ALL_METRICS.contains(&m.as_str()) {
            return Err(CliError::Config(format!("unknown metric `{m}`")));
        }
    }
    let has = |m: &str| wanted.iter().any(|w| w == m);
    let bytes = std::fs::read(trajectory).map_err(|e| CliError::Data(format!("trajectory {}: {e}", trajectory.display())))?;
    let traj = RolloutTrajectory::from_bytes(&bytes)?;
    let truth_dir = truth.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.batches));
    let states = states_by_month(&load_batches(&truth_dir)?);
    let truth: Vec<StateSlice> = traj
        .timestamps()
        .iter()
        .map(|m| states.get(m).cloned().ok_or_else(|| CliError::Data(format!("no true state for {m} in {}", truth_dir.display()))))
        .collect::<Result<_>>()?;

    let out = out.unwrap_or_else(|| ctx.loaded.resolve(&cfg.paths.output).join("eval"));
    ensure_dir(&out)?;
    let first = &traj.steps[0];
    let channels: Vec<String> = first.schema.channels().iter().map(|c| c.label()).collect();
    let species_pos = first.schema.group_pos(GroupName::Species);
    let species_n = first.schema.group(GroupName::Species).map_or(0, |g| g.channel_count());
    let threshold = cfg.evaluate.threshold;

    if has("scorecard") {
        let card = metrics::rollout_scorecard(&traj, &truth)?;
        std::fs::write(out.join(SCORECARD), card.to_delimited()?)?;
    }
    let mut steps = Vec::with_capacity(traj.len());
    for (k, (p, t)) in traj.steps.iter().zip(&truth).enumerate() {
        let mut r = StepReport { step: k + 1, month: p.timestamp.to_string(), ..Default::default() };
        let (pr, tr) = (p.to_rows(), t.to_rows());
        if has("mae") {
            r.mae = Some(metrics::mae(&pr, &tr, channels.len())?);
        }
        if has("rmse") {
            r.rmse = Some(metrics::rmse(&pr, &tr, channels.len())?);
        }
        if has("r2") {
            let hw = p.grid.cells();
            let per = channels
                .iter()
                .enumerate()
                .map(|(c, l)| (l.clone(), metrics::r_squared(&pr[c * hw..(c + 1) * hw], &tr[c * hw..(c + 1) * hw]).ok()))
                .collect();
            r.r2 = Some(per);
        }
        if let Some(pos) = species_pos {
            let (pp, tp) = (presence(p, pos, threshold), presence(t, pos, threshold));
            if has("f1") {
                r.f1 = Some(metrics::f1_sites(&pp, &tp, species_n)?);
            }
            if has("sorensen") {
                let map = metrics::sorensen_map(&pp, &tp, species_n, p.grid.height, p.grid.width)?;
                r.sorensen_mean = Some(map.masked_mean(land_mask(t).as_deref()));
                std::fs::write(out.join(format!("sorensen_step_{}.grid", k + 1)), map.to_grid_bytes("sorensen"))?;
            }
            if has("richness") {
                let land = land_mask(t);
                let rp = metrics::richness_map(&pp, species_n, land.as_deref())?;
                let rt = metrics::richness_map(&tp, species_n, land.as_deref())?;
                let pairs: Vec<(f64, f64)> =
                    rp.iter().zip(&rt).filter_map(|(a, b)| Some((f64::from((*a)?), f64::from((*b)?)))).collect();
                let n = pairs.len().max(1) as f64;
                r.richness = Some(RichnessReport {
                    predicted_mean: pairs.iter().map(|x| x.0).sum::<f64>() / n,
                    observed_mean: pairs.iter().map(|x| x.1).sum::<f64>() / n,
                    mae: pairs.iter().map(|x| (x.0 - x.1).abs()).sum::<f64>() / n,
                });
                let as_f32 = |m: &[Option<u32>]| m.iter().map(|v| v.map_or(f32::NAN, |c| c as f32)).collect::<Vec<_>>();
                write_grid(&out, &format!("richness_pred_step_{}", k + 1), p, &as_f32(&rp))?;
                write_grid(&out, &format!("richness_obs_step_{}", k + 1), p, &as_f32(&rt))?;
            }
        } else if has("f1") || has("sorensen") || has("richness") {
            ctx.log.warn("evaluate", json!({ "message": "schema has no species group; species metrics skipped" }));
        }
        steps.push(r);
    }
    let report = Report { channels, threshold, steps };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(out.join(REPORT), text + "\n")?;
    ctx.log.info("evaluate", json!({ "steps": report.steps.len(), "metrics": wanted, "path": out }));
    Ok(out)
}
