use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Batch, GroupName, LevelKey, Schema, StateSlice};
use crate::error::{CoreError, Result};

/// Identifies one normalized quantity: a variable, or a variable on one
/// pressure level / species index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StatKey {
    pub group: GroupName,
    pub variable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<LevelKey>,
}

impl std::fmt::Display for StatKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.level {
            Some(l) => write!(f, "{}/{}/{}", self.group, self.variable, l),
            None => write!(f, "{}/{}", self.group, self.variable),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub centre: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StatEntry {
    #[serde(flatten)]
    key: StatKey,
    centre: f64,
    scale: f64,
}

/// Per-variable (and per-level) centre/scale pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<StatEntry>", into = "Vec<StatEntry>")]
pub struct NormStats {
    entries: BTreeMap<StatKey, Stat>,
}

impl NormStats {
    pub fn insert(&mut self, key: StatKey, stat: Stat) -> Result<()> {
        if !(stat.scale > 0.0 && stat.scale.is_finite() && stat.centre.is_finite()) {
            return Err(CoreError::InvalidValue(format!("stat for {key}: scale must be positive and finite")));
        }
        self.entries.insert(key, stat);
        Ok(())
    }

    pub fn get(&self, key: &StatKey) -> Option<Stat> {
        self.entries.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StatKey, &Stat)> {
        self.entries.iter()
    }

    /// Stats for every channel of `schema` in flattened channel order.
    pub fn for_schema(&self, schema: &Schema) -> Result<Vec<Stat>> {
        schema
            .channels()
            .into_iter()
            .map(|c| {
                let key = StatKey { group: c.group, variable: c.variable.clone(), level: c.level };
                self.get(&key).ok_or_else(|| CoreError::MissingStat(key.to_string()))
            })
            .collect()
    }
}

impl TryFrom<Vec<StatEntry>> for NormStats {
    type Error = CoreError;
    fn try_from(v: Vec<StatEntry>) -> Result<Self> {
        let mut s = NormStats::default();
        for e in v {
            s.insert(e.key, Stat { centre: e.centre, scale: e.scale })?;
        }
        Ok(s)
    }
}

impl From<NormStats> for Vec<StatEntry> {
    fn from(s: NormStats) -> Self {
        s.entries
            .into_iter()
            .map(|(key, st)| StatEntry { key, centre: st.centre, scale: st.scale })
            .collect()
    }
}

/// Dataset-wide mean and population standard deviation per channel,
/// accumulated in `f64`. Constant fields get scale 1.
pub fn compute_norm_stats(dataset: &[Batch]) -> Result<NormStats> {
    let first = dataset.first().ok_or_else(|| CoreError::Empty("no batches to compute statistics from".into()))?;
    let schema = first.schema();
    for (i, b) in dataset.iter().enumerate() {
        if b.schema() != schema {
            return Err(CoreError::SchemaMismatch(format!("batch {i} uses a different schema")));
        }
    }
    let channels = schema.channels();
    let mut stats = NormStats::default();
    for ch in &channels {
        // Two passes: mean first, then centred second moment.
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for b in dataset {
            let arr = &b.groups()[ch.group_pos];
            for t in 0..2 {
                for &v in arr.slice(ndarray::s![t, ch.group_channel, .., ..]).iter() {
                    sum += v as f64;
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        let mut ss = 0.0f64;
        for b in dataset {
            let arr = &b.groups()[ch.group_pos];
            for t in 0..2 {
                for &v in arr.slice(ndarray::s![t, ch.group_channel, .., ..]).iter() {
                    let d = v as f64 - mean;
                    ss += d * d;
                }
            }
        }
        let std = (ss / n as f64).sqrt();
        let scale = if std > 0.0 && std.is_finite() { std } else { 1.0 };
        let key = StatKey { group: ch.group, variable: ch.variable.clone(), level: ch.level };
        stats.insert(key, Stat { centre: mean, scale })?;
    }
    Ok(stats)
}

fn map_batch(batch: &Batch, stats: &NormStats, f: impl Fn(f64, Stat) -> f64) -> Result<Batch> {
    let per_channel = stats.for_schema(batch.schema())?;
    let mut out = batch.clone();
    for (ch, st) in batch.schema().channels().iter().zip(per_channel) {
        for t in 0..2 {
            out.channel_mut(ch.group_pos, t, ch.group_channel).mapv_inplace(|v| f(v as f64, st) as f32);
        }
    }
    Ok(out)
}

fn map_slice(slice: &StateSlice, stats: &NormStats, f: impl Fn(f64, Stat) -> f64) -> Result<StateSlice> {
    let per_channel = stats.for_schema(&slice.schema)?;
    let mut out = slice.clone();
    for (ch, st) in slice.schema.channels().iter().zip(per_channel) {
        out.channel_mut(ch.group_pos, ch.group_channel).mapv_inplace(|v| f(v as f64, st) as f32);
    }
    Ok(out)
}

fn forward(x: f64, s: Stat) -> f64 {
    (x - s.centre) / s.scale
}

fn inverse(x: f64, s: Stat) -> f64 {
    x * s.scale + s.centre
}

/// `x -> (x - centre) / scale` per channel.
pub fn normalize(batch: &Batch, stats: &NormStats) -> Result<Batch> {
    map_batch(batch, stats, forward)
}

/// `x -> x * scale + centre` per channel.
pub fn denormalize(batch: &Batch, stats: &NormStats) -> Result<Batch> {
    map_batch(batch, stats, inverse)
}

pub fn normalize_slice(slice: &StateSlice, stats: &NormStats) -> Result<StateSlice> {
    map_slice(slice, stats, forward)
}

pub fn denormalize_slice(slice: &StateSlice, stats: &NormStats) -> Result<StateSlice> {
    map_slice(slice, stats, inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{GridSpec, Levels, Month, VariableGroupSchema};
    use ndarray::Array4;

    fn months() -> [Month; 2] {
        [Month::new(2001, 1).unwrap(), Month::new(2001, 2).unwrap()]
    }

    fn one_var_batch(fill: impl Fn(usize, usize, usize) -> f32) -> Batch {
        let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.5).unwrap();
        let schema = Schema::new(vec![VariableGroupSchema::new(GroupName::Surface, &["t2m"], None)]).unwrap();
        let arr = Array4::from_shape_fn((2, 1, 2, 2), |(t, _, i, j)| fill(t, i, j));
        Batch::new(grid, schema, months(), 1, vec![arr]).unwrap()
    }

    fn key() -> StatKey {
        StatKey { group: GroupName::Surface, variable: "t2m".into(), level: None }
    }

    #[test]
    fn constant_field_gets_unit_scale() {
        let s = compute_norm_stats(&[one_var_batch(|_, _, _| 5.0)]).unwrap();
        assert_eq!(s.get(&key()).unwrap(), Stat { centre: 5.0, scale: 1.0 });
    }

    #[test]
    fn two_valued_field() {
        // Cells alternate 0 and 2 with equal frequency: mean 1, population std 1.
        let s = compute_norm_stats(&[one_var_batch(|_, i, j| if (i + j) % 2 == 0 { 0.0 } else { 2.0 })]).unwrap();
        assert_eq!(s.get(&key()).unwrap(), Stat { centre: 1.0, scale: 1.0 });
    }

    #[test]
    fn per_level_entries_are_independent() {
        let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.5).unwrap();
        let schema = Schema::new(vec![VariableGroupSchema::new(
            GroupName::Atmospheric,
            &["t"],
            Some(Levels::Pressure(vec![850, 500])),
        )])
        .unwrap();
        let arr = Array4::from_shape_fn((2, 2, 2, 2), |(t, c, i, _)| {
            if c == 0 {
                280.0 + (t + i) as f32
            } else {
                -40.0 - 3.0 * (t * i) as f32
            }
        });
        let b = Batch::new(grid, schema, months(), 1, vec![arr]).unwrap();
        let s = compute_norm_stats(&[b]).unwrap();
        let k = |p| StatKey { group: GroupName::Atmospheric, variable: "t".into(), level: Some(LevelKey::Pressure(p)) };
        let (a, b) = (s.get(&k(850)).unwrap(), s.get(&k(500)).unwrap());
        assert_eq!(a.centre, 281.0);
        assert!(b.centre < -40.0);
        assert_ne!(a.scale, b.scale);
    }

    #[test]
    fn formula_and_identity_cases() {
        let b = one_var_batch(|_, _, _| 300.0);
        let mut stats = NormStats::default();
        stats.insert(key(), Stat { centre: 280.0, scale: 10.0 }).unwrap();
        let n = normalize(&b, &stats).unwrap();
        assert!(n.groups()[0].iter().all(|&v| v == 2.0));
        let back = denormalize(&n, &stats).unwrap();
        assert!(back.groups()[0].iter().all(|&v| v == 300.0));

        let at_centre = one_var_batch(|_, _, _| 280.0);
        assert!(normalize(&at_centre, &stats).unwrap().groups()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_stat_names_variable() {
        let b = one_var_batch(|_, _, _| 1.0);
        let err = normalize(&b, &NormStats::default()).unwrap_err();
        assert!(err.to_string().contains("surface/t2m"), "{err}");
    }

    #[test]
    fn empty_and_mismatched_datasets_rejected() {
        assert!(compute_norm_stats(&[]).is_err());
        let a = one_var_batch(|_, _, _| 1.0);
        let other = Batch::zeros(GridSpec::desk(), Schema::desk(), months(), 1).unwrap();
        assert!(compute_norm_stats(&[a, other]).is_err());
    }

    #[test]
    fn non_positive_scale_rejected() {
        let mut s = NormStats::default();
        assert!(s.insert(key(), Stat { centre: 0.0, scale: 0.0 }).is_err());
    }

    #[test]
    fn stats_json_round_trip() {
        let s = compute_norm_stats(&[one_var_batch(|t, i, j| (t + i * 2 + j) as f32)]).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: NormStats = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
