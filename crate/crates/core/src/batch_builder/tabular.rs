//! Delimited-text indicator tables.
//!
//! Layout A: `lat,lon,Variable,2015,2016,...` with one row per point and
//! variable. Layout B: `lat,lon,NDVI_2015,NDVI_2016,...`. Values are annual;
//! both months of a window read the column of their own year. Empty value
//! cells mean "no data"; rows that land on the same grid cell are summed.

use std::collections::BTreeMap;

use ndarray::Array4;

use super::{snap_to_grid, wrap_longitude, IngestReport, SourceDescriptor, TabularLayout, VariableGrids};
use crate::data_model::{GridSpec, Month, Schema};
use crate::error::{CoreError, Result};

fn source_err(src: &SourceDescriptor, detail: impl Into<String>) -> CoreError {
    CoreError::Source { path: src.path.display().to_string(), detail: detail.into() }
}

fn parse_year(s: &str) -> Option<i32> {
    (s.len() == 4 && s.bytes().all(|b| b.is_ascii_digit())).then(|| s.parse().ok()).flatten()
}

fn parse_num(field: &str, row: usize, what: &str) -> Result<Option<f64>> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    match f.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(CoreError::MalformedRow { row, detail: format!("{what} `{f}` is not a finite number") }),
    }
}

pub fn ingest_tabular_source(
    src: &SourceDescriptor,
    start: Month,
    grid: &GridSpec,
    schema: &Schema,
) -> Result<(VariableGrids, IngestReport)> {
    let layout = src.layout.ok_or_else(|| CoreError::UnknownLayout("tabular source without a layout".into()))?;
    let gs = schema
        .group(src.group)
        .ok_or_else(|| CoreError::SchemaMismatch(format!("schema lacks group `{}`", src.group)))?;
    if gs.levels.is_some() {
        return Err(CoreError::SchemaMismatch(format!("group `{}` has levels; tables carry flat indicators", src.group)));
    }
    let years = [start.year(), start.next().year()];

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&src.path)
        .map_err(|e| source_err(src, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| source_err(src, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(lat_col), Some(lon_col)) = (col("lat"), col("lon")) else {
        return Err(source_err(src, "missing lat/lon columns"));
    };

    // Canonical variable name for a header or Variable-column entry.
    let resolve = |name: &str| -> Option<String> {
        gs.variables
            .iter()
            .find(|v| v.as_str() == name)
            .or_else(|| gs.variables.iter().find(|v| v.eq_ignore_ascii_case(name)))
            .cloned()
    };

    let mut sums: BTreeMap<String, Array4<f32>> = BTreeMap::new();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    // (variable, year) pairs the file can provide.
    let mut available: BTreeMap<String, [bool; 2]> = BTreeMap::new();
    let cells = grid.cells();
    let mut outside = 0usize;

    let var_col = col("variable");
    let year_cols: Vec<(usize, i32)> = headers.iter().enumerate().filter_map(|(k, h)| parse_year(h).map(|y| (k, y))).collect();
    // Layout B: column -> (variable, year).
    let combined: Vec<(usize, String, i32)> = headers
        .iter()
        .enumerate()
        .filter_map(|(k, h)| {
            let (v, y) = h.rsplit_once('_')?;
            Some((k, resolve(v)?, parse_year(y)?))
        })
        .collect();
    match layout {
        TabularLayout::A => {
            if var_col.is_none() {
                return Err(source_err(src, "layout A needs a Variable column"));
            }
        }
        TabularLayout::B => {
            for (_, v, y) in &combined {
                for (slot, &wy) in years.iter().enumerate() {
                    if *y == wy {
                        available.entry(v.clone()).or_default()[slot] = true;
                    }
                }
            }
        }
    }

    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| CoreError::MalformedRow { row, detail: e.to_string() })?;
        let lat = parse_num(&rec[lat_col], row, "lat")?
            .ok_or_else(|| CoreError::MalformedRow { row, detail: "empty lat".into() })?;
        let lon = parse_num(&rec[lon_col], row, "lon")?
            .ok_or_else(|| CoreError::MalformedRow { row, detail: "empty lon".into() })?;
        let lon = wrap_longitude(lon)?;
        let cell = snap_to_grid(lat, lon, grid);

        let mut entries: Vec<(String, usize, f64)> = Vec::new();
        match layout {
            TabularLayout::A => {
                let name = &rec[var_col.expect("checked")];
                let Some(var) = resolve(name) else {
                    continue;
                };
                for &(c, y) in &year_cols {
                    for (slot, &wy) in years.iter().enumerate() {
                        if y == wy {
                            available.entry(var.clone()).or_default()[slot] = true;
                            if let Some(v) = parse_num(&rec[c], row, "value")? {
                                entries.push((var.clone(), slot, v));
                            }
                        }
                    }
                }
            }
            TabularLayout::B => {
                for (c, var, y) in &combined {
                    for (slot, &wy) in years.iter().enumerate() {
                        if *y == wy {
                            if let Some(v) = parse_num(&rec[*c], row, "value")? {
                                entries.push((var.clone(), slot, v));
                            }
                        }
                    }
                }
            }
        }
        let Some((r, c)) = cell else {
            outside += 1;
            continue;
        };
        for (var, slot, v) in entries {
            acc.entry(var).or_insert_with(|| vec![0.0; 2 * cells])[slot * cells + r * grid.width + c] += v;
        }
    }

    let mut report = IngestReport::default();
    if outside > 0 {
        report.warn(format!("{}: {outside} rows outside the grid skipped", src.path.display()));
    }
    let mut out = VariableGrids::default();
    for var in &gs.variables {
        let mut arr = Array4::<f32>::zeros((2, 1, grid.height, grid.width));
        if let Some(buf) = acc.get(var) {
            for (k, v) in arr.iter_mut().enumerate() {
                *v = buf[k] as f32;
            }
        }
        let have = available.get(var).copied().unwrap_or([false; 2]);
        if !have[0] && !have[1] {
            report.warn(format!("{}: `{var}` has no data for {}; zero-filled", src.path.display(), years[0]));
            out.absent.push(var.clone());
        } else {
            for slot in 0..2 {
                if !have[slot] {
                    report.warn(format!("{}: `{var}` has no column for {}; zero-filled", src.path.display(), years[slot]));
                }
            }
        }
        sums.insert(var.clone(), arr);
    }
    out.grids = sums;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{GroupName, VariableGroupSchema};
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn schema(group: GroupName, vars: &[&str]) -> Schema {
        Schema::new(vec![VariableGroupSchema::new(group, vars, None)]).unwrap()
    }

    #[test]
    fn layout_b_places_one_value() {
        let grid = GridSpec::desk();
        let f = csv_file("lat,lon,NDVI_2020,NDVI_2019\n33.0,-24.0,0.5,0.1\n50.0,-24.0,0.7,0.2\n33.0,-24.0,,0.3\n");
        let src = SourceDescriptor::tabular(f.path(), GroupName::Vegetation, TabularLayout::B);
        let (g, _) =
            ingest_tabular_source(&src, Month::new(2020, 6).unwrap(), &grid, &schema(GroupName::Vegetation, &["NDVI"])).unwrap();
        let a = &g.grids["NDVI"];
        let (r, c) = snap_to_grid(33.0, -24.0, &grid).unwrap();
        for t in 0..2 {
            assert_eq!(a[[t, 0, r, c]], 0.5);
            assert_eq!(a.slice(ndarray::s![t, .., .., ..]).iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn layout_a_empty_body_is_zero_with_log() {
        let f = csv_file("lat,lon,Variable,2015\n");
        let src = SourceDescriptor::tabular(f.path(), GroupName::Land, TabularLayout::A);
        let (g, rep) =
            ingest_tabular_source(&src, Month::new(2015, 3).unwrap(), &GridSpec::desk(), &schema(GroupName::Land, &["Land"])).unwrap();
        assert!(g.grids["Land"].iter().all(|&v| v == 0.0));
        assert!(!rep.warnings.is_empty());
    }

    #[test]
    fn duplicate_cells_sum_and_years_split_across_window() {
        let grid = GridSpec::desk();
        let f = csv_file("lat,lon,Variable,2015,2016\n33.0,-24.0,Land,1.5,10\n33.01,-24.01,Land,2.0,20\n");
        let src = SourceDescriptor::tabular(f.path(), GroupName::Land, TabularLayout::A);
        let (g, _) = ingest_tabular_source(&src, Month::new(2015, 12).unwrap(), &grid, &schema(GroupName::Land, &["Land"])).unwrap();
        let (r, c) = snap_to_grid(33.0, -24.0, &grid).unwrap();
        assert_eq!(g.grids["Land"][[0, 0, r, c]], 3.5);
        assert_eq!(g.grids["Land"][[1, 0, r, c]], 30.0);
    }

    #[test]
    fn malformed_row_reports_index() {
        let f = csv_file("lat,lon,Variable,2015\n33.0,-24.0,Land,1\n33.0,oops,Land,1\n");
        let src = SourceDescriptor::tabular(f.path(), GroupName::Land, TabularLayout::A);
        let err = ingest_tabular_source(&src, Month::new(2015, 1).unwrap(), &GridSpec::desk(), &schema(GroupName::Land, &["Land"]))
            .unwrap_err();
        assert!(matches!(err, CoreError::MalformedRow { row: 2, .. }), "{err}");
    }

    #[test]
    fn missing_layout_is_an_error() {
        let f = csv_file("lat,lon\n");
        let mut src = SourceDescriptor::tabular(f.path(), GroupName::Land, TabularLayout::A);
        src.layout = None;
        let err = ingest_tabular_source(&src, Month::new(2015, 1).unwrap(), &GridSpec::desk(), &schema(GroupName::Land, &["Land"]))
            .unwrap_err();
        assert!(matches!(err, CoreError::UnknownLayout(_)));
    }
}
