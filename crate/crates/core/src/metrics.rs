//! Evaluation: MAE, RMSE, site-averaged F1, R², Sørensen similarity maps,
//! richness maps, rollout scorecards and PCA diagnostics.
//!
//! Multi-variable arrays are row-major `(V, cells)`; presence arrays are
//! `(species, units)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::data_model::StateSlice;
use crate::error::{CoreError, Result};
use crate::model::RolloutTrajectory;

/// Per-variable values and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariableScores {
    pub per_variable: Vec<f64>,
    pub aggregate: f64,
}

fn check_shape(pred: &[f64], target: &[f64], vars: usize) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(CoreError::ShapeMismatch(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if vars == 0 || pred.is_empty() || pred.len() % vars != 0 {
        return Err(CoreError::ShapeMismatch(format!("{} values cannot split into {vars} variables", pred.len())));
    }
    Ok(pred.len() / vars)
}

fn per_variable(pred: &[f64], target: &[f64], vars: usize, f: impl Fn(&[f64], &[f64]) -> f64) -> Result<VariableScores> {
    let n = check_shape(pred, target, vars)?;
    let per: Vec<f64> = (0..vars).map(|v| f(&pred[v * n..(v + 1) * n], &target[v * n..(v + 1) * n])).collect();
    let aggregate = per.iter().sum::<f64>() / vars as f64;
    Ok(VariableScores { per_variable: per, aggregate })
}

/// Spatial mean absolute error per variable, averaged over variables.
pub fn mae(pred: &[f64], target: &[f64], vars: usize) -> Result<VariableScores> {
    per_variable(pred, target, vars, |p, t| p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Root of the spatial mean squared error per variable, averaged over variables.
pub fn rmse(pred: &[f64], target: &[f64], vars: usize) -> Result<VariableScores> {
    per_variable(pred, target, vars, |p, t| {
        (p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64).sqrt()
    })
}

/// Per-channel MAE between two slices in schema channel order.
pub fn mae_per_channel(pred: &StateSlice, target: &StateSlice) -> Result<Vec<f64>> {
    pred.check_compatible(target)?;
    Ok(mae(&pred.to_rows(), &target.to_rows(), pred.channel_count())?.per_variable)
}

fn check_presence(a: &[bool], b: &[bool], species: usize) -> Result<usize> {
    if a.len() != b.len() {
        return Err(CoreError::ShapeMismatch(format!("presence arrays of {} and {} entries", a.len(), b.len())));
    }
    if species == 0 || a.len() % species != 0 {
        return Err(CoreError::ShapeMismatch(format!("{} entries cannot split into {species} species", a.len())));
    }
    Ok(a.len() / species)
}

/// Confusion counts `(tp, fp, fn)` for one unit.
fn counts(pred: &[bool], obs: &[bool], species: usize, units: usize, i: usize) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for s in 0..species {
        match (pred[s * units + i], obs[s * units + i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fnn)
}

/// Mean over units of `TP / (TP + (FP + FN) / 2)`. A unit with nothing
/// predicted and nothing observed scores 1.
pub fn f1_sites(pred: &[bool], obs: &[bool], species: usize) -> Result<f64> {
    let units = check_presence(pred, obs, species)?;
    if units == 0 {
        return Err(CoreError::Empty("no evaluation units".into()));
    }
    let mut total = 0.0;
    for i in 0..units {
        let (tp, fp, fnn) = counts(pred, obs, species, units, i);
        total += if tp + fp + fnn == 0 { 1.0 } else { tp as f64 / (tp as f64 + (fp + fnn) as f64 / 2.0) };
    }
    Ok(total / units as f64)
}

/// Per-cell Sørensen–Dice similarity; `None` where neither set has a species.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<Option<f64>>,
}

impl SimilarityMap {
    /// Mean over defined cells, `None` if no cell is defined.
    pub fn mean(&self) -> Option<f64> {
        self.masked_mean(None)
    }

    /// Mean over defined cells where `mask` is set.
    pub fn masked_mean(&self, mask: Option<&[bool]>) -> Option<f64> {
        let mut n = 0usize;
        let mut sum = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            if let (Some(v), true) = (v, mask.is_none_or(|m| m[i])) {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Raw float32 grid with undefined cells as NaN.
    pub fn to_grid_bytes(&self, name: &str) -> Vec<u8> {
        let vals: Vec<f32> = self.values.iter().map(|v| v.map_or(f32::NAN, |x| x as f32)).collect();
        grid_bytes(name, self.height, self.width, &vals)
    }
}

/// `2a / (2a + b + c)` per cell over `(species, H, W)` presence arrays.
pub fn sorensen_map(pred: &[bool], truth: &[bool], species: usize, height: usize, width: usize) -> Result<SimilarityMap> {
    let units = check_presence(pred, truth, species)?;
    if units != height * width {
        return Err(CoreError::ShapeMismatch(format!("{units} cells per species, grid has {}", height * width)));
    }
    let values = (0..units)
        .map(|i| {
            let (a, c, b) = counts(pred, truth, species, units, i);
            let denom = 2 * a + b + c;
            (denom > 0).then(|| 2.0 * a as f64 / denom as f64)
        })
        .collect();
    Ok(SimilarityMap { height, width, values })
}

/// Coefficient of determination over the flattened sample.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CoreError::ShapeMismatch(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if target.len() < 2 {
        return Err(CoreError::Empty("R² needs at least two observations".into()));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(CoreError::InvalidValue("target has zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Presence where `value > threshold`.
pub fn threshold(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v > threshold).collect()
}

/// Species count per cell; cells outside `land` are `None`.
pub fn richness_map(presence: &[bool], species: usize, land: Option<&[bool]>) -> Result<Vec<Option<u32>>> {
    if species == 0 || presence.len() % species != 0 {
        return Err(CoreError::ShapeMismatch(format!("{} entries cannot split into {species} species", presence.len())));
    }
    let cells = presence.len() / species;
    if let Some(m) = land {
        if m.len() != cells {
            return Err(CoreError::ShapeMismatch(format!("land mask of {} cells for {cells}", m.len())));
        }
    }
    Ok((0..cells)
        .map(|i| {
            land.is_none_or(|m| m[i]).then(|| (0..species).filter(|&s| presence[s * cells + i]).count() as u32)
        })
        .collect())
}

/// Per-variable MAE at each rollout step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scorecard {
    pub variables: Vec<String>,
    /// `mae[v][k]` for variable `v` at step `k + 1`.
    pub mae: Vec<Vec<f64>>,
}

impl Scorecard {
    pub fn steps(&self) -> usize {
        self.mae.first().map_or(0, Vec::len)
    }

    /// `variable,step_1,...,step_K` with one row per variable.
    pub fn to_delimited(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variable".to_string()];
        header.extend((1..=self.steps()).map(|k| format!("step_{k}")));
        w.write_record(&header).map_err(|e| CoreError::InvalidValue(e.to_string()))?;
        for (name, row) in self.variables.iter().zip(&self.mae) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.9e}")));
            w.write_record(&rec).map_err(|e| CoreError::InvalidValue(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CoreError::InvalidValue(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
    }
}

/// Scorecard of a trajectory against the true states at the same steps.
pub fn rollout_scorecard(traj: &RolloutTrajectory, truth: &[StateSlice]) -> Result<Scorecard> {
    if traj.steps.len() != truth.len() {
        return Err(CoreError::ShapeMismatch(format!("{} predicted steps vs {} true states", traj.steps.len(), truth.len())));
    }
    let first = traj.steps.first().ok_or_else(|| CoreError::Empty("empty trajectory".into()))?;
    let variables: Vec<String> = first.schema.channels().iter().map(|c| c.label()).collect();
    let mut mae = vec![Vec::with_capacity(truth.len()); variables.len()];
    for (p, t) in traj.steps.iter().zip(truth) {
        for (v, e) in mae_per_channel(p, t)?.into_iter().enumerate() {
            mae[v].push(e);
        }
    }
    Ok(Scorecard { variables, mae })
}

/// Principal components of a `(samples, D)` matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaReport {
    /// Fraction of variance per component, descending; sums to 1 unless all
    /// variance is zero.
    pub explained_ratio: Vec<f64>,
    /// Unit eigenvectors, one per row, matching `explained_ratio`.
    pub components: Vec<Vec<f64>>,
    /// Correlation matrix of the projected scores, `D x D` row-major.
    pub correlation: Vec<f64>,
}

pub fn pca_diagnostics(data: &[f64], samples: usize, dim: usize) -> Result<PcaReport> {
    if samples < 2 {
        return Err(CoreError::InvalidValue("PCA needs at least two samples".into()));
    }
    if dim == 0 || data.len() != samples * dim {
        return Err(CoreError::ShapeMismatch(format!("{} values for {samples} samples of width {dim}", data.len())));
    }
    let x = DMatrix::from_row_slice(samples, dim, data);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(samples, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = (centred.transpose() * &centred) / (samples - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let explained_ratio = vals.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    let components: Vec<Vec<f64>> = order.iter().map(|&k| eig.eigenvectors.column(k).iter().copied().collect()).collect();

    let basis = DMatrix::from_fn(dim, dim, |i, j| components[j][i]);
    let scores = &centred * basis;
    let sc = (scores.transpose() * &scores) / (samples - 1) as f64;
    // Components with no variance are reported as uncorrelated.
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut correlation = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            correlation[i * dim + j] = if i == j {
                1.0
            } else if sc[(i, i)] > tol && sc[(j, j)] > tol {
                sc[(i, j)] / (sc[(i, i)] * sc[(j, j)]).sqrt()
            } else {
                0.0
            };
        }
    }
    Ok(PcaReport { explained_ratio, components, correlation })
}

/// `BIOCAST-GRID <name> <H> <W>\n` followed by little-endian `f32` values.
pub fn grid_bytes(name: &str, height: usize, width: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("BIOCAST-GRID {name} {height} {width}\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        // One site: TP=1, FP=1, FN=0.
        let f = f1_sites(&[true, true], &[true, false], 2).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        // a=2, b=1, c=1 over four species in one cell.
        let pred = [true, true, false, true];
        let obs = [true, true, true, false];
        let m = sorensen_map(&pred, &obs, 4, 1, 1).unwrap();
        assert!((m.values[0].unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let r = rmse(&[3.0, 4.0], &[0.0, 0.0], 1).unwrap();
        assert!((r.aggregate - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_cells_undefined_and_vacuous_sites_score_one() {
        let m = sorensen_map(&[false, false], &[false, false], 1, 1, 2).unwrap();
        assert_eq!(m.values, vec![None, None]);
        assert_eq!(m.mean(), None);
        assert_eq!(f1_sites(&[false], &[false], 1).unwrap(), 1.0);
        assert_eq!(f1_sites(&[false], &[true], 1).unwrap(), 0.0);
    }

    #[test]
    fn r_squared_constant_predictors() {
        let y = [1.0, 2.0, 6.0];
        assert!((r_squared(&[3.0; 3], &y).unwrap()).abs() < 1e-15);
        // Constant 5: residuals 16+9+1=26, total 4+1+9=14.
        assert!((r_squared(&[5.0; 3], &y).unwrap() - (1.0 - 26.0 / 14.0)).abs() < 1e-15);
        assert!(r_squared(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn pca_line() {
        let data: Vec<f64> = (0..10).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let r = pca_diagnostics(&data, 10, 3).unwrap();
        assert!((r.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(r.explained_ratio[1].abs() < 1e-12);
    }
}
