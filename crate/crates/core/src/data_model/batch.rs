use ndarray::{s, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};

use super::{GridSpec, GroupName, Month, Schema};
use crate::error::{CoreError, Result};

/// Two consecutive monthly snapshots of every schema channel.
///
/// `groups[i]` belongs to `schema.groups()[i]` and has shape `(2, C_g, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    grid: GridSpec,
    schema: Schema,
    timestamps: [Month; 2],
    lead_time: u32,
    groups: Vec<Array4<f32>>,
}

impl Batch {
    pub fn new(
        grid: GridSpec,
        schema: Schema,
        timestamps: [Month; 2],
        lead_time: u32,
        groups: Vec<Array4<f32>>,
    ) -> Result<Self> {
        if groups.len() != schema.groups().len() {
            return Err(CoreError::SchemaMismatch(format!(
                "{} arrays for {} groups",
                groups.len(),
                schema.groups().len()
            )));
        }
        for (g, arr) in schema.groups().iter().zip(&groups) {
            let want = [2, g.channel_count(), grid.height, grid.width];
            if arr.shape() != want {
                return Err(CoreError::ShapeMismatch(format!(
                    "group `{}` has shape {:?}, expected {want:?}",
                    g.group,
                    arr.shape()
                )));
            }
            if arr.iter().any(|v| v.is_nan()) {
                return Err(CoreError::InvalidValue(format!("NaN in group `{}`", g.group)));
            }
        }
        if timestamps[1] <= timestamps[0] {
            return Err(CoreError::InvalidValue(format!(
                "timestamps {} and {} are not increasing",
                timestamps[0], timestamps[1]
            )));
        }
        Ok(Self { grid, schema, timestamps, lead_time, groups })
    }

    pub fn zeros(grid: GridSpec, schema: Schema, timestamps: [Month; 2], lead_time: u32) -> Result<Self> {
        let groups =
            schema.groups().iter().map(|g| Array4::zeros((2, g.channel_count(), grid.height, grid.width))).collect();
        Self::new(grid, schema, timestamps, lead_time, groups)
    }

    /// Joins two single-timestep states into a batch.
    pub fn from_slices(prev: &StateSlice, curr: &StateSlice) -> Result<Self> {
        prev.check_compatible(curr)?;
        let groups = prev
            .groups
            .iter()
            .zip(&curr.groups)
            .map(|(a, b)| ndarray::stack(Axis(0), &[a.view(), b.view()]).expect("equal shapes"))
            .collect();
        let lead = curr.timestamp.months_since(prev.timestamp);
        if lead <= 0 {
            return Err(CoreError::InvalidValue("slices are not in time order".into()));
        }
        Self::new(prev.grid.clone(), prev.schema.clone(), [prev.timestamp, curr.timestamp], lead as u32, groups)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn timestamps(&self) -> [Month; 2] {
        self.timestamps
    }

    pub fn lead_time(&self) -> u32 {
        self.lead_time
    }

    pub fn groups(&self) -> &[Array4<f32>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Array4<f32>] {
        &mut self.groups
    }

    pub fn group(&self, name: GroupName) -> Option<&Array4<f32>> {
        self.schema.group_pos(name).map(|i| &self.groups[i])
    }

    pub fn channel_count(&self) -> usize {
        self.groups.iter().map(|a| a.shape()[1]).sum()
    }

    pub fn species_ids(&self) -> Vec<u64> {
        self.schema.species_ids()
    }

    pub fn pressure_levels(&self) -> Vec<u32> {
        self.schema.pressure_levels()
    }

    /// The state at timestep `t` (0 = earlier, 1 = later).
    pub fn slice(&self, t: usize) -> StateSlice {
        assert!(t < 2, "batches hold two timesteps");
        StateSlice {
            grid: self.grid.clone(),
            schema: self.schema.clone(),
            timestamp: self.timestamps[t],
            groups: self.groups.iter().map(|a| a.index_axis(Axis(0), t).to_owned()).collect(),
        }
    }

    pub(crate) fn channel_mut(&mut self, group_pos: usize, t: usize, c: usize) -> ArrayViewMut2<'_, f32> {
        self.groups[group_pos].slice_mut(s![t, c, .., ..])
    }
}

/// One timestep of every schema channel; `groups[i]` has shape `(C_g, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSlice {
    pub grid: GridSpec,
    pub schema: Schema,
    pub timestamp: Month,
    pub groups: Vec<Array3<f32>>,
}

impl StateSlice {
    pub fn zeros(grid: GridSpec, schema: Schema, timestamp: Month) -> Self {
        let groups =
            schema.groups().iter().map(|g| Array3::zeros((g.channel_count(), grid.height, grid.width))).collect();
        Self { grid, schema, timestamp, groups }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() != self.schema.groups().len() {
            return Err(CoreError::SchemaMismatch("group count differs from schema".into()));
        }
        for (g, arr) in self.schema.groups().iter().zip(&self.groups) {
            let want = [g.channel_count(), self.grid.height, self.grid.width];
            if arr.shape() != want {
                return Err(CoreError::ShapeMismatch(format!(
                    "group `{}` has shape {:?}, expected {want:?}",
                    g.group,
                    arr.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &StateSlice) -> Result<()> {
        if self.schema != other.schema {
            return Err(CoreError::SchemaMismatch("slices use different schemas".into()));
        }
        if self.grid != other.grid {
            return Err(CoreError::SchemaMismatch("slices use different grids".into()));
        }
        self.validate()?;
        other.validate()
    }

    pub fn channel_count(&self) -> usize {
        self.schema.channel_count()
    }

    pub fn channel(&self, group_pos: usize, c: usize) -> ArrayView2<'_, f32> {
        self.groups[group_pos].slice(s![c, .., ..])
    }

    pub fn channel_mut(&mut self, group_pos: usize, c: usize) -> ArrayViewMut2<'_, f32> {
        self.groups[group_pos].slice_mut(s![c, .., ..])
    }

    /// All channels flattened to a `(C, H*W)` row-major buffer.
    pub fn to_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channel_count() * self.grid.cells());
        for arr in &self.groups {
            out.extend(arr.iter().map(|&v| v as f64));
        }
        out
    }

    /// Inverse of [`StateSlice::to_rows`].
    pub fn from_rows(grid: GridSpec, schema: Schema, timestamp: Month, rows: &[f64]) -> Result<Self> {
        let cells = grid.cells();
        if rows.len() != schema.channel_count() * cells {
            return Err(CoreError::ShapeMismatch(format!(
                "{} values for {} channels of {cells} cells",
                rows.len(),
                schema.channel_count()
            )));
        }
        let mut offset = 0;
        let mut groups = Vec::with_capacity(schema.groups().len());
        for g in schema.groups() {
            let n = g.channel_count() * cells;
            let data: Vec<f32> = rows[offset..offset + n].iter().map(|&v| v as f32).collect();
            groups.push(Array3::from_shape_vec((g.channel_count(), grid.height, grid.width), data).expect("sized"));
            offset += n;
        }
        Ok(Self { grid, schema, timestamp, groups })
    }
}
