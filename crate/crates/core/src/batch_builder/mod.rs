//! Deterministic batch construction from gridded, tabular and species-record
//! sources, plus the portable `.bbc` container.

pub mod container;
mod gridded;
mod serialize;
mod species;
mod tabular;

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::data_model::{Batch, GridSpec, GroupName, Month, Schema};
use crate::error::{CoreError, Result};

pub use gridded::{ingest_gridded_source, GriddedFile, GriddedVariable};
pub use serialize::{deserialize_batch, raw_container, read_batch, serialize_batch, write_batch, BATCH_KIND};
pub use species::{ingest_species_records, SPECIES_VARIABLE};
pub use tabular::ingest_tabular_source;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    GriddedReanalysis,
    TabularIndicator,
    SpeciesRecords,
}

/// Layout A: `lat, lon, Variable, <year>...`. Layout B: `lat, lon, <Var>_<year>...`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TabularLayout {
    A,
    B,
}

impl std::str::FromStr for TabularLayout {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(CoreError::UnknownLayout(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub kind: SourceKind,
    pub path: PathBuf,
    /// Schema group whose variables this source provides.
    pub group: GroupName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<TabularLayout>,
}

impl SourceDescriptor {
    pub fn gridded(path: impl Into<PathBuf>, group: GroupName) -> Self {
        Self { kind: SourceKind::GriddedReanalysis, path: path.into(), group, layout: None }
    }

    pub fn tabular(path: impl Into<PathBuf>, group: GroupName, layout: TabularLayout) -> Self {
        Self { kind: SourceKind::TabularIndicator, path: path.into(), group, layout: Some(layout) }
    }

    pub fn species(path: impl Into<PathBuf>) -> Self {
        Self { kind: SourceKind::SpeciesRecords, path: path.into(), group: GroupName::Species, layout: None }
    }
}

/// Warnings collected while ingesting; missing data degrades to zeros and
/// lands here instead of failing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub warnings: Vec<String>,
}

impl IngestReport {
    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn extend(&mut self, other: IngestReport) {
        self.warnings.extend(other.warnings);
    }
}

/// Rasters of one source. Each entry has shape `(2, L, H, W)` with `L` the
/// level (or species) count of the variable, 1 for single-level variables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VariableGrids {
    pub grids: BTreeMap<String, Array4<f32>>,
    /// Variables that were zero-filled because the source lacked them.
    pub absent: Vec<String>,
}

/// Maps any finite longitude into `(-180, 180]`.
pub fn wrap_longitude(lon: f64) -> Result<f64> {
    if !lon.is_finite() {
        return Err(CoreError::InvalidValue(format!("longitude {lon} is not finite")));
    }
    let r = (lon + 180.0).rem_euclid(360.0) - 180.0;
    Ok(if r == -180.0 { 180.0 } else { r })
}

/// Nearest cell `(row, col)` for a point, ties toward the higher latitude /
/// longitude index. `None` when the point falls outside the grid.
pub fn snap_to_grid(lat: f64, lon: f64, grid: &GridSpec) -> Option<(usize, usize)> {
    if !(lat.is_finite() && lon.is_finite()) {
        return None;
    }
    let i = ((lat - grid.lat_min) / grid.resolution + 0.5).floor();
    let j = ((lon - grid.lon_min) / grid.resolution + 0.5).floor();
    if i < 0.0 || j < 0.0 || i >= grid.height as f64 || j >= grid.width as f64 {
        return None;
    }
    Some((grid.height - 1 - i as usize, j as usize))
}

/// Parses a UTC timestamp: RFC 3339 with a zero offset, or a bare
/// `YYYY-MM-DD` date (read as UTC midnight). Other offsets are rejected.
pub fn parse_utc_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        if t.offset().local_minus_utc() != 0 {
            return Err(CoreError::InvalidValue(format!("timestamp `{s}` is not UTC")));
        }
        return Ok(t.with_timezone(&Utc));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    Err(CoreError::InvalidValue(format!("unrecognised timestamp `{s}` (expected RFC 3339 UTC or YYYY-MM-DD)")))
}

pub(crate) fn month_of(t: &DateTime<Utc>) -> Month {
    Month::new(t.year(), t.month()).expect("chrono months are valid")
}

/// Index of `m` inside the two-month window starting at `start`.
pub(crate) fn window_slot(start: Month, m: Month) -> Option<usize> {
    match m.months_since(start) {
        0 => Some(0),
        1 => Some(1),
        _ => None,
    }
}

fn ingest_one(
    src: &SourceDescriptor,
    start: Month,
    grid: &GridSpec,
    schema: &Schema,
) -> Result<(VariableGrids, IngestReport)> {
    match src.kind {
        SourceKind::GriddedReanalysis => ingest_gridded_source(src, start, grid, schema),
        SourceKind::TabularIndicator => ingest_tabular_source(src, start, grid, schema),
        SourceKind::SpeciesRecords => {
            let ids = schema.species_ids();
            ingest_species_records(src, start, grid, &ids)
        }
    }
}

/// Builds the batch for the months `start` and `start + 1`.
///
/// Sources are ingested concurrently and merged by schema position; the
/// first source (in list order) that actually carries a variable wins.
pub fn assemble_batch(
    sources: &[SourceDescriptor],
    start: Month,
    grid: &GridSpec,
    schema: &Schema,
) -> Result<(Batch, IngestReport)> {
    grid.validate()?;
    for src in sources {
        if schema.group_pos(src.group).is_none() {
            return Err(CoreError::SchemaMismatch(format!(
                "source {} provides group `{}`, which the schema lacks",
                src.path.display(),
                src.group
            )));
        }
        let species_kind = src.kind == SourceKind::SpeciesRecords;
        if species_kind != (src.group == GroupName::Species) {
            return Err(CoreError::SchemaMismatch(format!(
                "source {} of kind {:?} cannot provide group `{}`",
                src.path.display(),
                src.kind,
                src.group
            )));
        }
    }

    let results: Vec<Result<(VariableGrids, IngestReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            sources.iter().map(|src| scope.spawn(move || ingest_one(src, start, grid, schema))).collect();
        handles.into_iter().map(|h| h.join().expect("ingestion thread panicked")).collect()
    });

    let mut report = IngestReport::default();
    let mut ingested = Vec::with_capacity(results.len());
    for r in results {
        let (grids, rep) = r?;
        report.extend(rep);
        ingested.push(grids);
    }

    let mut batch = Batch::zeros(grid.clone(), schema.clone(), [start, start.next()], 1)?;
    for (pos, g) in schema.groups().iter().enumerate() {
        let levels = g.level_count().max(1);
        for (vi, var) in g.variables.iter().enumerate() {
            let provider = sources
                .iter()
                .zip(&ingested)
                .filter(|(src, _)| src.group == g.group)
                .find(|(_, vg)| vg.grids.contains_key(var) && !vg.absent.contains(var));
            match provider {
                Some((_, vg)) => {
                    let src_arr = &vg.grids[var];
                    batch.groups_mut()[pos]
                        .slice_mut(s![.., vi * levels..(vi + 1) * levels, .., ..])
                        .assign(src_arr);
                }
                None => report.warn(format!("{}.{var}: no source provides it; zero-filled", g.group)),
            }
        }
    }
    Ok((batch, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wrap_oracle(mut x: f64) -> f64 {
        while x > 180.0 {
            x -= 360.0;
        }
        while x <= -180.0 {
            x += 360.0;
        }
        x
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_longitude(190.0).unwrap(), -170.0);
        assert_eq!(wrap_longitude(180.0).unwrap(), 180.0);
        assert_eq!(wrap_longitude(-180.0).unwrap(), 180.0);
        assert_eq!(wrap_longitude(-540.0).unwrap(), wrap_oracle(-540.0));
        assert_eq!(wrap_longitude(-540.0).unwrap(), 180.0);
        assert!(wrap_longitude(f64::NAN).is_err());
        assert!(wrap_longitude(f64::INFINITY).is_err());
    }

    #[test]
    fn snap_examples() {
        let g = GridSpec::full();
        assert_eq!(snap_to_grid(32.0, -25.0, &g), Some((g.height - 1, 0)));
        assert_eq!(snap_to_grid(32.13, -25.0, &g), Some((g.height - 2, 0)));
        assert_eq!(snap_to_grid(32.125, -25.0, &g), Some((g.height - 2, 0)));
        assert_eq!(snap_to_grid(32.12, -25.0, &g), Some((g.height - 1, 0)));
        assert_eq!(snap_to_grid(90.0, 0.0, &g), None);
        assert_eq!(snap_to_grid(31.5, 0.0, &g), None);
    }

    #[test]
    fn timestamps_require_utc() {
        assert_eq!(month_of(&parse_utc_timestamp("2001-03-15").unwrap()), Month::new(2001, 3).unwrap());
        assert!(parse_utc_timestamp("2001-03-01T00:00:00Z").is_ok());
        assert!(parse_utc_timestamp("2001-03-01T00:00:00+00:00").is_ok());
        assert!(parse_utc_timestamp("2001-03-01T00:00:00+02:00").is_err());
        assert!(parse_utc_timestamp("March 2001").is_err());
    }

    #[test]
    fn layout_parsing() {
        assert_eq!("A".parse::<TabularLayout>().unwrap(), TabularLayout::A);
        assert!(matches!("C".parse::<TabularLayout>(), Err(CoreError::UnknownLayout(_))));
    }
}
