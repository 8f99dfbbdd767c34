#![allow(dead_code)]

pub mod fixtures;
pub mod grad;

use biocast_core::data_model::{compute_norm_stats, Batch, GridSpec, GroupName, Month, NormStats, Schema, StateSlice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Physical-looking base value and amplitude per group.
fn scale_for(group: GroupName, variable: &str) -> (f64, f64) {
    match (group, variable) {
        (GroupName::Surface, "t2m") => (285.0, 8.0),
        (GroupName::Surface, "msl") => (101_300.0, 600.0),
        (GroupName::Surface, "lsm") => (0.5, 0.5),
        (GroupName::Atmospheric, "z") => (50_000.0, 2_000.0),
        (GroupName::Atmospheric, _) => (250.0, 10.0),
        (GroupName::Species, _) => (0.3, 0.25),
        _ => (1.0, 0.5),
    }
}

/// Smooth fields drifting slowly in time; static channels stay fixed.
pub fn synthetic_series(schema: &Schema, grid: &GridSpec, start: Month, n: usize, seed: u64) -> Vec<StateSlice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = schema.channels();
    let params: Vec<[f64; 5]> = channels.iter().map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    let (h, w) = (grid.height, grid.width);
    (0..n)
        .map(|t| {
            let mut rows = Vec::with_capacity(channels.len() * h * w);
            for (ch, p) in channels.iter().zip(&params) {
                let (base, amp) = scale_for(ch.group, &ch.variable);
                let is_static = ch.variable == "lsm";
                for i in 0..h {
                    for j in 0..w {
                        let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
                        let tt = if is_static { 0.0 } else { t as f64 };
                        let v = (3.0 * p[0] * x + 2.0 * p[1] * y + 0.4 * p[2] * tt).sin()
                            + 0.5 * (2.0 * p[3] * y - 3.0 * x + 0.3 * p[4] * tt).cos();
                        let mut val = base + amp * 0.5 * v;
                        if is_static {
                            val = if v > 0.0 { 1.0 } else { 0.0 };
                        }
                        if ch.group == GroupName::Species {
                            val = val.max(0.0);
                        }
                        rows.push(val);
                    }
                }
            }
            StateSlice::from_rows(grid.clone(), schema.clone(), start.plus(t as i64), &rows).unwrap()
        })
        .collect()
}

pub fn pairs(series: &[StateSlice]) -> Vec<Batch> {
    series.windows(2).map(|w| Batch::from_slices(&w[0], &w[1]).unwrap()).collect()
}

pub fn stats_for(series: &[StateSlice]) -> NormStats {
    compute_norm_stats(&pairs(series)).unwrap()
}

pub fn start() -> Month {
    Month::new(2012, 3).unwrap()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
