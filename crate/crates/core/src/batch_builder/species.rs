//! Species occurrence records: `species_id,lat,lon,timestamp,distribution_value`.

use std::collections::BTreeMap;

use ndarray::Array4;

use super::{
    month_of, parse_utc_timestamp, snap_to_grid, window_slot, wrap_longitude, IngestReport, SourceDescriptor,
    VariableGrids,
};
use crate::data_model::{GridSpec, Month};
use crate::error::{CoreError, Result};

/// Name of the single species-group variable.
pub const SPECIES_VARIABLE: &str = "species";

/// Accumulates distribution values into one `(2, H, W)` raster per master
/// list species, returned as the `species` entry of shape `(2, S, H, W)`.
pub fn ingest_species_records(
    src: &SourceDescriptor,
    start: Month,
    grid: &GridSpec,
    master: &[u64],
) -> Result<(VariableGrids, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&src.path)
        .map_err(|e| CoreError::Source { path: src.path.display().to_string(), detail: e.to_string() })?;
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::Source { path: src.path.display().to_string(), detail: e.to_string() })?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| CoreError::Source {
            path: src.path.display().to_string(),
            detail: format!("missing column `{name}`"),
        })
    };
    let (c_id, c_lat, c_lon, c_ts, c_val) =
        (col("species_id")?, col("lat")?, col("lon")?, col("timestamp")?, col("distribution_value")?);

    let index: BTreeMap<u64, usize> = master.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut acc = vec![0.0f64; 2 * master.len() * grid.cells()];
    let mut unknown: BTreeMap<u64, usize> = BTreeMap::new();
    let mut outside = 0usize;

    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| CoreError::MalformedRow { row, detail: e.to_string() })?;
        let bad = |detail: String| CoreError::MalformedRow { row, detail };
        let id: u64 = rec[c_id].parse().map_err(|_| bad(format!("species_id `{}`", &rec[c_id])))?;
        let num = |c: usize, what: &str| -> Result<f64> {
            rec[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("{what} `{}`", &rec[c])))
        };
        let (lat, lon, value) = (num(c_lat, "lat")?, num(c_lon, "lon")?, num(c_val, "distribution_value")?);
        if value < 0.0 {
            return Err(bad(format!("negative distribution_value {value}")));
        }
        let ts = parse_utc_timestamp(&rec[c_ts]).map_err(|e| bad(e.to_string()))?;
        let Some(&s) = index.get(&id) else {
            *unknown.entry(id).or_default() += 1;
            continue;
        };
        let Some(slot) = window_slot(start, month_of(&ts)) else { continue };
        let Some((r, c)) = snap_to_grid(lat, wrap_longitude(lon)?, grid) else {
            outside += 1;
            continue;
        };
        acc[((slot * master.len() + s) * grid.height + r) * grid.width + c] += value;
    }

    let mut report = IngestReport::default();
    for (id, n) in unknown {
        report.warn(format!("{}: {n} records of species {id} not in the master list skipped", src.path.display()));
    }
    if outside > 0 {
        report.warn(format!("{}: {outside} records outside the grid skipped", src.path.display()));
    }
    let arr = Array4::from_shape_vec((2, master.len(), grid.height, grid.width), acc.into_iter().map(|v| v as f32).collect())
        .expect("sized buffer");
    let mut out = VariableGrids::default();
    out.grids.insert(SPECIES_VARIABLE.to_string(), arr);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::full_species_ids;
    use std::io::Write;

    fn records(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "species_id,lat,lon,timestamp,distribution_value\n{body}").unwrap();
        f
    }

    #[test]
    fn single_record_lands_in_one_cell() {
        let grid = GridSpec::full();
        let f = records("1920506,50.0,10.0,2001-01-20,3.0\n");
        let master = full_species_ids();
        let (g, _) = ingest_species_records(&SourceDescriptor::species(f.path()), Month::new(2001, 1).unwrap(), &grid, &master).unwrap();
        let a = &g.grids[SPECIES_VARIABLE];
        let s = master.iter().position(|&id| id == 1920506).unwrap();
        let (r, c) = snap_to_grid(50.0, 10.0, &grid).unwrap();
        assert_eq!(a[[0, s, r, c]], 3.0);
        assert_eq!(a.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn empty_records_give_all_zero_rasters() {
        let f = records("");
        let master = full_species_ids();
        let (g, _) =
            ingest_species_records(&SourceDescriptor::species(f.path()), Month::new(2001, 1).unwrap(), &GridSpec::mini(), &master).unwrap();
        let a = &g.grids[SPECIES_VARIABLE];
        assert_eq!(a.shape(), &[2, 28, 8, 14]);
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_cell_records_sum_and_unknown_ids_warn() {
        let grid = GridSpec::desk();
        let f = records("1,33.0,-24.0,2001-02-01,1.25\n1,33.0,-24.0,2001-02-28T12:00:00Z,2.5\n99,33.0,-24.0,2001-02-01,7\n");
        let (g, rep) =
            ingest_species_records(&SourceDescriptor::species(f.path()), Month::new(2001, 1).unwrap(), &grid, &[1, 2]).unwrap();
        let (r, c) = snap_to_grid(33.0, -24.0, &grid).unwrap();
        assert_eq!(g.grids[SPECIES_VARIABLE][[1, 0, r, c]], 3.75);
        assert_eq!(rep.warnings.len(), 1);
        assert!(rep.warnings[0].contains("99"));
    }

    #[test]
    fn negative_value_is_malformed() {
        let f = records("1,33.0,-24.0,2001-02-01,-1\n");
        let err = ingest_species_records(&SourceDescriptor::species(f.path()), Month::new(2001, 1).unwrap(), &GridSpec::desk(), &[1])
            .unwrap_err();
        assert!(matches!(err, CoreError::MalformedRow { row: 1, .. }));
    }
}
