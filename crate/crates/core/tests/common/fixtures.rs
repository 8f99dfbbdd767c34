//! A small on-disk source corpus covering every source kind.

use std::path::Path;

use biocast_core::batch_builder::{GriddedFile, GriddedVariable, SourceDescriptor, TabularLayout};
use biocast_core::data_model::{GridSpec, GroupName, Levels, Month, Schema, VariableGroupSchema};
use serde_json::json;

pub const SPECIES_ID: u64 = 1920506;

pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub sources: Vec<SourceDescriptor>,
    pub schema: Schema,
    pub grid: GridSpec,
    pub start: Month,
}

/// Surface value at source slice `t`, row `i`, column `j`.
pub fn t2m_value(t: usize, i: usize, j: usize) -> f64 {
    [1000.0, 280.0, 290.0][t] + i as f64 * 0.37 + j as f64 * 0.011
}

pub fn atmos_value(level: u32, i: usize, j: usize) -> f64 {
    level as f64 / 10.0 + i as f64 - j as f64 * 0.5
}

/// Desk schema plus one layout-A and one layout-B indicator.
pub fn corpus_schema() -> Schema {
    Schema::new(vec![
        VariableGroupSchema::new(GroupName::Surface, &["t2m", "msl"], None),
        VariableGroupSchema::new(GroupName::Atmospheric, &["t"], Some(Levels::Pressure(vec![850, 500]))),
        VariableGroupSchema::new(GroupName::Vegetation, &["NDVI"], None),
        VariableGroupSchema::new(GroupName::Land, &["Land"], None),
        VariableGroupSchema::new(GroupName::Species, &["species"], Some(Levels::Species(vec![SPECIES_ID, 1898286]))),
    ])
    .unwrap()
}

fn write_json(path: &Path, file: &GriddedFile) {
    std::fs::write(path, serde_json::to_string(file).unwrap()).unwrap();
}

pub fn corpus() -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridSpec::desk();
    let (h, w) = (grid.height, grid.width);
    let lats: Vec<f64> = (0..h).map(|r| grid.row_lat(r)).collect();
    // Longitudes in [0, 360) form; they must wrap onto the grid.
    let lons: Vec<f64> = (0..w).map(|c| grid.col_lon(c) + 360.0).collect();

    // Surface: two January slices (the later one listed first), one for
    // February; msl is missing everywhere in February.
    let times = ["2001-01-20", "2001-01-01", "2001-02-01"];
    let mut t2m = Vec::new();
    let mut msl = Vec::new();
    for t in 0..3 {
        for i in 0..h {
            for j in 0..w {
                t2m.push(Some(t2m_value(t, i, j)));
                msl.push(if t == 2 { None } else { Some(101_000.0 + j as f64) });
            }
        }
    }
    let dims3 = vec!["time".to_string(), "lat".into(), "lon".into()];
    let surface = GriddedFile {
        coords: [("time", json!(times)), ("lat", json!(lats)), ("lon", json!(lons))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        variables: [
            ("t2m".to_string(), GriddedVariable { dims: dims3.clone(), data: t2m }),
            ("msl".to_string(), GriddedVariable { dims: dims3, data: msl }),
        ]
        .into_iter()
        .collect(),
    };
    let surface_path = dir.path().join("surface.json");
    write_json(&surface_path, &surface);

    // Atmospheric: January only, three levels of which the schema uses two.
    let levels = [850u32, 700, 500];
    let mut t = Vec::new();
    for &l in &levels {
        for i in 0..h {
            for j in 0..w {
                t.push(Some(atmos_value(l, i, j)));
            }
        }
    }
    let atmos = GriddedFile {
        coords: [("time", json!(["2001-01-01T00:00:00Z"])), ("lat", json!(lats)), ("lon", json!(lons)), ("level", json!(levels))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        variables: [(
            "t".to_string(),
            GriddedVariable { dims: vec!["time".into(), "level".into(), "lat".into(), "lon".into()], data: t },
        )]
        .into_iter()
        .collect(),
    };
    let atmos_path = dir.path().join("atmospheric.json");
    write_json(&atmos_path, &atmos);

    let land_path = dir.path().join("land.csv");
    std::fs::write(&land_path, "lat,lon,Variable,2001\n33.0,-24.0,Land,0.75\n").unwrap();
    let ndvi_path = dir.path().join("ndvi.csv");
    std::fs::write(&ndvi_path, "lat,lon,NDVI_2000,NDVI_2001\n33.5,-23.0,0.1,0.4\n").unwrap();

    // The first record sits exactly between two rows.
    let species_path = dir.path().join("species.csv");
    std::fs::write(
        &species_path,
        format!(
            "species_id,lat,lon,timestamp,distribution_value\n\
             {SPECIES_ID},32.125,336.0,2001-01-10,2.0\n\
             {SPECIES_ID},35.0,-20.0,2001-02-03T00:00:00Z,1.5\n"
        ),
    )
    .unwrap();

    let sources = vec![
        SourceDescriptor::gridded(&surface_path, GroupName::Surface),
        SourceDescriptor::gridded(&atmos_path, GroupName::Atmospheric),
        SourceDescriptor::tabular(&land_path, GroupName::Land, TabularLayout::A),
        SourceDescriptor::tabular(&ndvi_path, GroupName::Vegetation, TabularLayout::B),
        SourceDescriptor::species(&species_path),
    ];
    Corpus { dir, sources, schema: corpus_schema(), grid, start: Month::new(2001, 1).unwrap() }
}
