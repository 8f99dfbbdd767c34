use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Regular latitude/longitude grid.
///
/// Grid points sit at `lat_min + i * resolution` and `lon_min + j * resolution`
/// for `i < height`, `j < width`. Rows are stored north to south, so row 0 is
/// the northernmost latitude and row `height - 1` is `lat_min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub resolution: f64,
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, resolution: f64) -> Result<Self> {
        let all = [lat_min, lat_max, lon_min, lon_max, resolution];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidGrid("non-finite bound".into()));
        }
        if resolution <= 0.0 {
            return Err(CoreError::InvalidGrid(format!("resolution {resolution} must be positive")));
        }
        if lat_min >= lat_max {
            return Err(CoreError::InvalidGrid(format!("lat_min {lat_min} >= lat_max {lat_max}")));
        }
        if lon_min >= lon_max {
            return Err(CoreError::InvalidGrid(format!("lon_min {lon_min} >= lon_max {lon_max}")));
        }
        for lon in [lon_min, lon_max] {
            if lon <= -180.0 || lon > 180.0 {
                return Err(CoreError::InvalidGrid(format!("longitude {lon} outside (-180, 180]")));
            }
        }
        if lat_min < -90.0 || lat_max > 90.0 {
            return Err(CoreError::InvalidGrid("latitude outside [-90, 90]".into()));
        }
        let height = ((lat_max - lat_min) / resolution).round() as usize;
        let width = ((lon_max - lon_min) / resolution).round() as usize;
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidGrid("grid has no cells".into()));
        }
        Ok(Self { lat_min, lat_max, lon_min, lon_max, resolution, height, width })
    }

    /// Europe at 0.25 degrees: 160 x 280 cells.
    pub fn full() -> Self {
        Self::new(32.0, 72.0, -25.0, 45.0, 0.25).expect("valid preset")
    }

    /// 16 x 28 corner of the full grid.
    pub fn desk() -> Self {
        Self::new(32.0, 36.0, -25.0, -18.0, 0.25).expect("valid preset")
    }

    /// 8 x 14 corner of the full grid.
    pub fn mini() -> Self {
        Self::new(32.0, 34.0, -25.0, -21.5, 0.25).expect("valid preset")
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Latitude of a stored row (row 0 is northernmost).
    pub fn row_lat(&self, row: usize) -> f64 {
        self.lat_min + (self.height - 1 - row) as f64 * self.resolution
    }

    pub fn col_lon(&self, col: usize) -> f64 {
        self.lon_min + col as f64 * self.resolution
    }

    /// Validates the structural invariants of a deserialized grid.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.resolution)?;
        if rebuilt.height != self.height || rebuilt.width != self.width {
            return Err(CoreError::InvalidGrid(format!(
                "declared {}x{} but bounds imply {}x{}",
                self.height, self.width, rebuilt.height, rebuilt.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_dimensions() {
        let g = GridSpec::full();
        assert_eq!((g.height, g.width), (160, 280));
        assert_eq!(g.cells(), 44_800);
    }

    #[test]
    fn rows_run_north_to_south() {
        let g = GridSpec::full();
        assert_eq!(g.row_lat(g.height - 1), 32.0);
        assert_eq!(g.row_lat(0), 71.75);
        assert!(g.row_lat(0) > g.row_lat(1));
        assert_eq!(g.col_lon(0), -25.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(GridSpec::new(40.0, 30.0, 0.0, 10.0, 0.25).is_err());
        assert!(GridSpec::new(0.0, 10.0, -180.0, 10.0, 0.25).is_err());
        assert!(GridSpec::new(0.0, 10.0, 0.0, 10.0, 0.0).is_err());
    }
}
