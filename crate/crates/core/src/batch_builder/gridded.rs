//! Gridded sources stored as self-describing JSON.
//!
//! ```json
//! {
//!   "coords": {"time": ["2001-01-01", ...], "lat": [...], "lon": [...], "level": [850, 500]},
//!   "variables": {"t": {"dims": ["time", "level", "lat", "lon"], "data": [...]}}
//! }
//! ```
//!
//! `data` is row-major over `dims`; `null` marks a missing value. `level` is
//! optional and only needed by multi-level variables.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::{month_of, parse_utc_timestamp, window_slot, wrap_longitude, IngestReport, SourceDescriptor, VariableGrids};
use crate::data_model::{GridSpec, Levels, Month, Schema};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GriddedVariable {
    pub dims: Vec<String>,
    pub data: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GriddedFile {
    pub coords: BTreeMap<String, serde_json::Value>,
    pub variables: BTreeMap<String, GriddedVariable>,
}

fn source_err(src: &SourceDescriptor, detail: impl Into<String>) -> CoreError {
    CoreError::Source { path: src.path.display().to_string(), detail: detail.into() }
}

fn float_coord(file: &GriddedFile, name: &str) -> std::result::Result<Vec<f64>, String> {
    let v = file.coords.get(name).ok_or_else(|| format!("missing coordinate `{name}`"))?;
    serde_json::from_value(v.clone()).map_err(|e| format!("coordinate `{name}`: {e}"))
}

/// Source-to-target mapping shared by every field of one file.
struct Regridder {
    /// Contributing source indices and weights per target cell.
    cells: Vec<Vec<(usize, f64)>>,
}

impl Regridder {
    fn new(lats: &[f64], lons: &[f64], grid: &GridSpec) -> Result<Self> {
        let lons: Vec<f64> = lons.iter().map(|&l| wrap_longitude(l)).collect::<Result<_>>()?;
        let mut cells = vec![Vec::new(); grid.cells()];
        for (i, &lat) in lats.iter().enumerate() {
            let w = lat.to_radians().cos();
            for (j, &lon) in lons.iter().enumerate() {
                if let Some((r, c)) = super::snap_to_grid(lat, lon, grid) {
                    cells[r * grid.width + c].push((i * lons.len() + j, w));
                }
            }
        }
        // Cells no source point snapped into (coarser source): nearest point,
        // as long as the cell lies within one source spacing of the data.
        let reach = |xs: &[f64]| -> f64 {
            let mut v = xs.to_vec();
            v.sort_by(f64::total_cmp);
            v.windows(2).map(|p| p[1] - p[0]).fold(grid.resolution, f64::max)
        };
        let (lat_reach, lon_reach) = (reach(lats), reach(&lons));
        let nearest = |xs: &[f64], x: f64, dist: &dyn Fn(f64, f64) -> f64| {
            xs.iter()
                .enumerate()
                .map(|(k, &v)| (k, dist(v, x)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
        };
        let lon_dist = |a: f64, b: f64| {
            let d = (a - b).rem_euclid(360.0);
            d.min(360.0 - d)
        };
        for r in 0..grid.height {
            for c in 0..grid.width {
                let cell = &mut cells[r * grid.width + c];
                if !cell.is_empty() {
                    continue;
                }
                let lat_hit = nearest(lats, grid.row_lat(r), &|a, b| (a - b).abs());
                let lon_hit = nearest(&lons, grid.col_lon(c), &lon_dist);
                if let (Some((i, di)), Some((j, dj))) = (lat_hit, lon_hit) {
                    if di <= lat_reach && dj <= lon_reach {
                        cell.push((i * lons.len() + j, 1.0));
                    }
                }
            }
        }
        Ok(Self { cells })
    }

    /// Cos-latitude weighted mean of finite contributors; a lone contributor
    /// is copied unchanged. Cells without data are zero.
    fn apply(&self, field: &[f64], grid: &GridSpec) -> Array2<f32> {
        let mut out = Array2::zeros((grid.height, grid.width));
        for (k, contrib) in self.cells.iter().enumerate() {
            let v = if let [(idx, _)] = contrib.as_slice() {
                field[*idx]
            } else {
                let (mut num, mut den) = (0.0, 0.0);
                for &(idx, w) in contrib {
                    if field[idx].is_finite() {
                        num += w * field[idx];
                        den += w;
                    }
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            };
            out[[k / grid.width, k % grid.width]] = if v.is_finite() { v as f32 } else { 0.0 };
        }
        out
    }
}

/// Reads a gridded file and returns two monthly slices for every variable
/// of the source's schema group.
pub fn ingest_gridded_source(
    src: &SourceDescriptor,
    start: Month,
    grid: &GridSpec,
    schema: &Schema,
) -> Result<(VariableGrids, IngestReport)> {
    let text = std::fs::read_to_string(&src.path).map_err(|e| source_err(src, e.to_string()))?;
    let file: GriddedFile = serde_json::from_str(&text).map_err(|e| source_err(src, e.to_string()))?;
    let gs = schema
        .group(src.group)
        .ok_or_else(|| CoreError::SchemaMismatch(format!("schema lacks group `{}`", src.group)))?;

    let lats = float_coord(&file, "lat").map_err(|e| source_err(src, e))?;
    let lons = float_coord(&file, "lon").map_err(|e| source_err(src, e))?;
    let times: Vec<String> = file
        .coords
        .get("time")
        .ok_or_else(|| source_err(src, "missing coordinate `time`"))
        .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| source_err(src, e.to_string())))?;
    let levels_in_file: Option<Vec<f64>> =
        if file.coords.contains_key("level") { Some(float_coord(&file, "level").map_err(|e| source_err(src, e))?) } else { None };

    let mut report = IngestReport::default();

    // Earliest slice of each window month.
    let mut chosen: [Option<(chrono::DateTime<chrono::Utc>, usize)>; 2] = [None, None];
    for (k, t) in times.iter().enumerate() {
        let ts = parse_utc_timestamp(t).map_err(|e| source_err(src, e.to_string()))?;
        if let Some(slot) = window_slot(start, month_of(&ts)) {
            if chosen[slot].map_or(true, |(best, _)| ts < best) {
                chosen[slot] = Some((ts, k));
            }
        }
    }
    for (slot, c) in chosen.iter().enumerate() {
        if c.is_none() {
            report.warn(format!(
                "{}: no time slice in {}; {} zero-filled for that month",
                src.path.display(),
                start.plus(slot as i64),
                src.group
            ));
        }
    }

    let regrid = Regridder::new(&lats, &lons, grid)?;
    let level_count = gs.level_count().max(1);
    let mut out = VariableGrids::default();
    for var in &gs.variables {
        let mut arr = Array4::<f32>::zeros((2, level_count, grid.height, grid.width));
        let Some(v) = file.variables.get(var) else {
            report.warn(format!("{}: variable `{var}` absent; zero-filled", src.path.display()));
            out.grids.insert(var.clone(), arr);
            out.absent.push(var.clone());
            continue;
        };
        let dim_len = |d: &str| -> std::result::Result<usize, String> {
            match d {
                "time" => Ok(times.len()),
                "lat" => Ok(lats.len()),
                "lon" => Ok(lons.len()),
                "level" => levels_in_file.as_ref().map(Vec::len).ok_or_else(|| "dimension `level` without coordinate".into()),
                other => Err(format!("unknown dimension `{other}`")),
            }
        };
        let shape: Vec<usize> =
            v.dims.iter().map(|d| dim_len(d)).collect::<std::result::Result<_, _>>().map_err(|e| source_err(src, format!("`{var}`: {e}")))?;
        if shape.iter().product::<usize>() != v.data.len() {
            return Err(source_err(src, format!("`{var}`: {} values for shape {shape:?}", v.data.len())));
        }
        let pos = |name: &str| v.dims.iter().position(|d| d == name);
        let (Some(pt), Some(pla), Some(plo)) = (pos("time"), pos("lat"), pos("lon")) else {
            return Err(source_err(src, format!("`{var}` needs time, lat and lon dimensions")));
        };
        let plev = pos("level");
        let mut strides = vec![1usize; shape.len()];
        for d in (0..shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }

        // Which file level feeds each schema level.
        let wanted: Vec<Option<usize>> = match (&gs.levels, plev) {
            (Some(Levels::Pressure(ps)), Some(_)) => {
                let have = levels_in_file.as_ref().expect("checked with dims");
                ps.iter().map(|&p| have.iter().position(|&l| l == p as f64)).collect()
            }
            (Some(Levels::Pressure(ps)), None) => {
                return Err(source_err(src, format!("`{var}` needs a level dimension for {} levels", ps.len())))
            }
            (Some(Levels::Species(_)), _) => {
                return Err(source_err(src, "species rasters come from species record files"))
            }
            (None, Some(_)) if shape[plev.unwrap()] != 1 => {
                return Err(source_err(src, format!("`{var}` has levels but the schema expects a single field")))
            }
            (None, _) => vec![Some(0)],
        };
        for (li, w) in wanted.iter().enumerate() {
            if w.is_none() {
                report.warn(format!("{}: `{var}` lacks level {}; zero-filled", src.path.display(), gs.levels.as_ref().unwrap().key(li)));
            }
        }

        let mut field = vec![0.0f64; lats.len() * lons.len()];
        for (slot, c) in chosen.iter().enumerate() {
            let Some((_, ti)) = c else { continue };
            for (li, w) in wanted.iter().enumerate() {
                let Some(fl) = w else { continue };
                let base = ti * strides[pt] + plev.map_or(0, |p| fl * strides[p]);
                for i in 0..lats.len() {
                    for j in 0..lons.len() {
                        let x = v.data[base + i * strides[pla] + j * strides[plo]];
                        field[i * lons.len() + j] = x.unwrap_or(f64::NAN);
                    }
                }
                arr.slice_mut(ndarray::s![slot, li, .., ..]).assign(&regrid.apply(&field, grid));
            }
        }
        out.grids.insert(var.clone(), arr);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch_builder::SourceDescriptor;
    use crate::data_model::{GroupName, VariableGroupSchema};
    use std::io::Write;

    fn write(file: &GriddedFile) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(serde_json::to_string(file).unwrap().as_bytes()).unwrap();
        f
    }

    fn surface_schema() -> Schema {
        Schema::new(vec![VariableGroupSchema::new(GroupName::Surface, &["t2m", "msl"], None)]).unwrap()
    }

    fn on_grid(grid: &GridSpec, times: &[&str], value: impl Fn(usize, usize, usize) -> f64) -> GriddedFile {
        let lats: Vec<f64> = (0..grid.height).map(|r| grid.row_lat(r)).collect();
        let lons: Vec<f64> = (0..grid.width).map(|c| grid.col_lon(c)).collect();
        let mut data = Vec::new();
        for t in 0..times.len() {
            for i in 0..lats.len() {
                for j in 0..lons.len() {
                    data.push(Some(value(t, i, j)));
                }
            }
        }
        GriddedFile {
            coords: BTreeMap::from([
                ("time".into(), serde_json::json!(times)),
                ("lat".into(), serde_json::json!(lats)),
                ("lon".into(), serde_json::json!(lons)),
            ]),
            variables: BTreeMap::from([(
                "t2m".into(),
                GriddedVariable { dims: vec!["time".into(), "lat".into(), "lon".into()], data },
            )]),
        }
    }

    #[test]
    fn identity_regrid_copies_bits_and_keeps_earliest_slice() {
        let grid = GridSpec::desk();
        let f = on_grid(&grid, &["2001-01-15", "2001-01-01", "2001-02-01"], |t, i, j| {
            280.123456789 + t as f64 * 100.0 + i as f64 * 0.37 + j as f64 * 0.011
        });
        let tmp = write(&f);
        let src = SourceDescriptor::gridded(tmp.path(), GroupName::Surface);
        let (g, rep) = ingest_gridded_source(&src, Month::new(2001, 1).unwrap(), &grid, &surface_schema()).unwrap();
        let t2m = &g.grids["t2m"];
        for i in 0..grid.height {
            for j in 0..grid.width {
                // Slice index 1 is the 1st of January.
                let jan = 280.123456789 + 100.0 + i as f64 * 0.37 + j as f64 * 0.011;
                let feb = 280.123456789 + 200.0 + i as f64 * 0.37 + j as f64 * 0.011;
                assert_eq!(t2m[[0, 0, i, j]], jan as f32);
                assert_eq!(t2m[[1, 0, i, j]], feb as f32);
            }
        }
        assert!(g.absent.contains(&"msl".to_string()));
        assert!(rep.warnings.iter().any(|w| w.contains("msl")));
    }

    #[test]
    fn missing_month_is_zero_with_warning() {
        let grid = GridSpec::desk();
        let tmp = write(&on_grid(&grid, &["2001-01-01"], |_, _, _| 5.0));
        let src = SourceDescriptor::gridded(tmp.path(), GroupName::Surface);
        let (g, rep) = ingest_gridded_source(&src, Month::new(2001, 1).unwrap(), &grid, &surface_schema()).unwrap();
        let t2m = &g.grids["t2m"];
        assert!(t2m.slice(ndarray::s![0, .., .., ..]).iter().all(|&v| v == 5.0));
        assert!(t2m.slice(ndarray::s![1, .., .., ..]).iter().all(|&v| v == 0.0));
        assert!(rep.warnings.iter().any(|w| w.contains("2001-02")));
    }

    #[test]
    fn finer_source_is_area_averaged() {
        // Source at 0.125 degrees over the desk grid: every target cell
        // averages the points snapping into it.
        let grid = GridSpec::desk();
        let lats: Vec<f64> = (0..=32).map(|k| 32.0 + k as f64 * 0.125).collect();
        let lons: Vec<f64> = (0..=56).map(|k| -25.0 + k as f64 * 0.125).collect();
        let value = |lat: f64, lon: f64| lat * 2.0 + lon;
        let mut data = Vec::new();
        for &la in &lats {
            for &lo in &lons {
                data.push(Some(value(la, lo)));
            }
        }
        let f = GriddedFile {
            coords: BTreeMap::from([
                ("time".into(), serde_json::json!(["2001-01-01", "2001-02-01"])),
                ("lat".into(), serde_json::json!(lats)),
                ("lon".into(), serde_json::json!(lons)),
            ]),
            variables: BTreeMap::from([(
                "t2m".into(),
                GriddedVariable { dims: vec!["lat".into(), "lon".into(), "time".into()], data: data.iter().flat_map(|v| [*v, *v]).collect() },
            )]),
        };
        let tmp = write(&f);
        let src = SourceDescriptor::gridded(tmp.path(), GroupName::Surface);
        let (g, _) = ingest_gridded_source(&src, Month::new(2001, 1).unwrap(), &grid, &surface_schema()).unwrap();
        // Oracle: brute-force weighted mean over points whose nearest cell is (r, c).
        let (r, c) = (5, 7);
        let (mut num, mut den) = (0.0, 0.0);
        for &la in &lats {
            for &lo in &lons {
                if crate::batch_builder::snap_to_grid(la, lo, &grid) == Some((r, c)) {
                    let w = la.to_radians().cos();
                    num += w * value(la, lo);
                    den += w;
                }
            }
        }
        let got = g.grids["t2m"][[1, 0, r, c]] as f64;
        assert!((got - num / den).abs() < 1e-4, "{got} vs {}", num / den);
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let src = SourceDescriptor::gridded("/nonexistent/file.json", GroupName::Surface);
        assert!(ingest_gridded_source(&src, Month::new(2001, 1).unwrap(), &GridSpec::desk(), &surface_schema()).is_err());
    }
}
