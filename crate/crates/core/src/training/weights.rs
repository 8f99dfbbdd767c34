use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_model::{GroupName, Schema};
use crate::error::{CoreError, Result};

/// Per-variable loss weights keyed by `(group, variable)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableWeights {
    entries: BTreeMap<(GroupName, String), f64>,
}

const FULL_WEIGHTS: [(GroupName, &str, f64); 37] = {
    use GroupName::*;
    [
        (Surface, "t2m", 2.50),
        (Surface, "msl", 1.50),
        (Surface, "slt", 0.80),
        (Surface, "z", 1.00),
        (Surface, "u10", 0.77),
        (Surface, "v10", 0.66),
        (Surface, "lsm", 1.20),
        (Edaphic, "swvl1", 1.10),
        (Edaphic, "swvl2", 0.90),
        (Edaphic, "stl1", 0.70),
        (Edaphic, "stl2", 0.60),
        (Atmospheric, "z", 2.80),
        (Atmospheric, "t", 1.70),
        (Atmospheric, "u", 0.87),
        (Atmospheric, "v", 0.60),
        (Atmospheric, "q", 0.78),
        (Climate, "smlt", 1.00),
        (Climate, "tp", 2.20),
        (Climate, "csfr", 0.60),
        (Climate, "avg_sdswrf", 0.90),
        (Climate, "avg_snswrf", 0.70),
        (Climate, "avg_snlwrf", 0.50),
        (Climate, "avg_tprate", 2.00),
        (Climate, "avg_sdswrfcs", 0.50),
        (Climate, "sd", 0.90),
        (Climate, "t2m", 2.50),
        (Climate, "d2m", 1.30),
        (Vegetation, "NDVI", 0.80),
        (Land, "Land", 0.60),
        (Agriculture, "Agriculture", 0.40),
        (Agriculture, "Arable", 0.30),
        (Agriculture, "Cropland", 0.40),
        (Forest, "Forest", 1.20),
        (Redlist, "RLI", 1.30),
        (Miscellaneous, "avg_slhtf", 1.20),
        (Miscellaneous, "avg_pevr", 1.00),
        (Species, "species", 10.00),
    ]
};

impl VariableWeights {
    pub fn new(entries: impl IntoIterator<Item = ((GroupName, String), f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, w) in entries {
            if !(w > 0.0 && w.is_finite()) {
                return Err(CoreError::InvalidValue(format!("weight for {}/{} must be positive", k.0, k.1)));
            }
            map.insert(k, w);
        }
        Ok(Self { entries: map })
    }

    /// The published table: one weight per variable, shared by all levels
    /// and species of that variable.
    pub fn full() -> Self {
        Self::new(FULL_WEIGHTS.iter().map(|&(g, v, w)| ((g, v.to_string()), w))).expect("positive table")
    }

    /// Every schema variable weighted 1.
    pub fn uniform(schema: &Schema) -> Self {
        let entries = schema.groups().iter().flat_map(|g| g.variables.iter().map(move |v| ((g.group, v.clone()), 1.0)));
        Self::new(entries).expect("positive")
    }

    pub fn get(&self, group: GroupName, variable: &str) -> Option<f64> {
        self.entries.get(&(group, variable.to_string())).copied()
    }

    pub fn set(&mut self, group: GroupName, variable: &str, w: f64) -> Result<()> {
        if !(w > 0.0 && w.is_finite()) {
            return Err(CoreError::InvalidValue(format!("weight for {group}/{variable} must be positive")));
        }
        self.entries.insert((group, variable.to_string()), w);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(GroupName, String), &f64)> {
        self.entries.iter()
    }

    /// Per-channel factor `w_v / (L_v * cells)`, where `L_v` is the number of
    /// levels (or species) the variable spans: each variable contributes its
    /// weight times its mean absolute error over levels and cells.
    pub fn channel_coefficients(&self, schema: &Schema, cells: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(schema.channel_count());
        for ch in schema.channels() {
            let w = self
                .get(ch.group, &ch.variable)
                .ok_or_else(|| CoreError::UnknownVariable(format!("no loss weight for {}/{}", ch.group, ch.variable)))?;
            let levels = schema.group(ch.group).map_or(1, |g| g.level_count().max(1));
            out.push(w / (levels * cells) as f64);
        }
        Ok(out)
    }
}
