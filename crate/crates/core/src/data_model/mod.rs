//! Grids, variable-group schemas, batches and normalization.

mod batch;
mod grid;
mod norm;
mod schema;
mod time;

pub use batch::{Batch, StateSlice};
pub use grid::GridSpec;
pub use norm::{
    compute_norm_stats, denormalize, denormalize_slice, normalize, normalize_slice, NormStats, Stat, StatKey,
};
pub use schema::{
    full_species_ids, Channel, GroupName, LevelKey, Levels, Schema, VariableGroupSchema, FULL_PRESSURE_LEVELS,
    FULL_SPECIES,
};
pub use time::Month;
