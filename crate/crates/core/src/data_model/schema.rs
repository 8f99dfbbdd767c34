use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Variable groups in canonical order. The derived `Ord` is the channel
/// flattening order used everywhere (arrays, tokens, queries, containers).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupName {
    Surface,
    Edaphic,
    Atmospheric,
    Climate,
    Miscellaneous,
    Vegetation,
    Land,
    Agriculture,
    Redlist,
    Forest,
    Species,
}

impl GroupName {
    pub const ALL: [GroupName; 11] = [
        GroupName::Surface,
        GroupName::Edaphic,
        GroupName::Atmospheric,
        GroupName::Climate,
        GroupName::Miscellaneous,
        GroupName::Vegetation,
        GroupName::Land,
        GroupName::Agriculture,
        GroupName::Redlist,
        GroupName::Forest,
        GroupName::Species,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Surface => "surface",
            GroupName::Edaphic => "edaphic",
            GroupName::Atmospheric => "atmospheric",
            GroupName::Climate => "climate",
            GroupName::Miscellaneous => "miscellaneous",
            GroupName::Vegetation => "vegetation",
            GroupName::Land => "land",
            GroupName::Agriculture => "agriculture",
            GroupName::Redlist => "redlist",
            GroupName::Forest => "forest",
            GroupName::Species => "species",
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupName {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        GroupName::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| CoreError::InvalidSchema(format!("unknown group `{s}`")))
    }
}

pub const FULL_PRESSURE_LEVELS: [u32; 13] = [1000, 925, 850, 700, 600, 500, 400, 300, 250, 200, 150, 100, 50];

/// GBIF ids and scientific names of the 28 modelled species.
pub const FULL_SPECIES: [(u64, &str); 28] = [
    (8077224, "Alauda arvensis"),
    (2491534, "Emberiza citrinella"),
    (2473958, "Perdix perdix"),
    (4408498, "Crex crex"),
    (9809229, "Sturnus vulgaris"),
    (2431885, "Triturus cristatus"),
    (8909809, "Emys orbicularis"),
    (2430567, "Pelobates fuscus"),
    (8002952, "Ambrosia artemisiifolia"),
    (2437394, "Callosciurus erythraeus"),
    (3034825, "Heracleum mantegazzianum"),
    (2891770, "Impatiens glandulifera"),
    (5218786, "Procyon lotor"),
    (5219173, "Canis lupus"),
    (2433433, "Ursus arctos"),
    (2435240, "Lynx lynx"),
    (5219219, "Canis aureus"),
    (5219073, "Gulo gulo"),
    (2435261, "Lynx pardinus"),
    (5844449, "Aquila fasciata"),
    (2441454, "Testudo hermanni"),
    (2434779, "Monachus monachus"),
    (8894817, "Caretta caretta"),
    (1340503, "Bombus terrestris"),
    (1340361, "Bombus hyperboreus"),
    (1898286, "Vanessa atalanta"),
    (1920506, "Pieris brassicae"),
    (1536449, "Episyrphus balteatus"),
];

pub fn full_species_ids() -> Vec<u64> {
    FULL_SPECIES.iter().map(|(id, _)| *id).collect()
}

/// Secondary axis of a group: pressure levels (hPa) or species ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Levels {
    Pressure(Vec<u32>),
    Species(Vec<u64>),
}

impl Levels {
    pub fn len(&self) -> usize {
        match self {
            Levels::Pressure(v) => v.len(),
            Levels::Species(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(&self, i: usize) -> LevelKey {
        match self {
            Levels::Pressure(v) => LevelKey::Pressure(v[i]),
            Levels::Species(v) => LevelKey::Species(v[i]),
        }
    }
}

/// One entry on a group's secondary axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelKey {
    Pressure(u32),
    Species(u64),
}

impl fmt::Display for LevelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelKey::Pressure(p) => write!(f, "{p}hPa"),
            LevelKey::Species(s) => write!(f, "sp{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableGroupSchema {
    pub group: GroupName,
    pub variables: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Levels>,
}

impl VariableGroupSchema {
    pub fn new(group: GroupName, variables: &[&str], levels: Option<Levels>) -> Self {
        Self { group, variables: variables.iter().map(|s| s.to_string()).collect(), levels }
    }

    /// `|variables| * max(1, |levels|)`.
    pub fn channel_count(&self) -> usize {
        self.variables.len() * self.level_count().max(1)
    }

    pub fn level_count(&self) -> usize {
        self.levels.as_ref().map_or(0, Levels::len)
    }

    /// Full variable list of a group as published (climate included).
    pub fn full(group: GroupName) -> Self {
        use GroupName::*;
        match group {
            Surface => Self::new(group, &["t2m", "msl", "slt", "z", "u10", "v10", "lsm"], None),
            Edaphic => Self::new(group, &["swvl1", "swvl2", "stl1", "stl2"], None),
            Atmospheric => Self::new(
                group,
                &["z", "t", "u", "v", "q"],
                Some(Levels::Pressure(FULL_PRESSURE_LEVELS.to_vec())),
            ),
            Climate => Self::new(
                group,
                &[
                    "smlt",
                    "tp",
                    "csfr",
                    "avg_sdswrf",
                    "avg_snswrf",
                    "avg_snlwrf",
                    "avg_tprate",
                    "avg_sdswrfcs",
                    "sd",
                    "t2m",
                    "d2m",
                ],
                None,
            ),
            Miscellaneous => Self::new(group, &["avg_slhtf", "avg_pevr"], None),
            Vegetation => Self::new(group, &["NDVI"], None),
            Land => Self::new(group, &["Land"], None),
            Agriculture => Self::new(group, &["Agriculture", "Arable", "Cropland"], None),
            Redlist => Self::new(group, &["RLI"], None),
            Forest => Self::new(group, &["Forest"], None),
            Species => Self::new(group, &["species"], Some(Levels::Species(full_species_ids()))),
        }
    }
}

/// Identity of one flattened channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Channel {
    pub group: GroupName,
    pub variable: String,
    pub level: Option<LevelKey>,
    /// Position of the group within the schema.
    pub group_pos: usize,
    pub var_index: usize,
    pub level_index: Option<usize>,
    /// Channel position within its group array.
    pub group_channel: usize,
}

impl Channel {
    pub fn label(&self) -> String {
        match self.level {
            Some(l) => format!("{}/{}/{}", self.group, self.variable, l),
            None => format!("{}/{}", self.group, self.variable),
        }
    }
}

/// Ordered set of variable groups; the channel layout of a batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VariableGroupSchema>", into = "Vec<VariableGroupSchema>")]
pub struct Schema {
    groups: Vec<VariableGroupSchema>,
}

impl Schema {
    /// Validates and sorts groups into canonical order.
    pub fn new(mut groups: Vec<VariableGroupSchema>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::InvalidSchema("no groups".into()));
        }
        groups.sort_by_key(|g| g.group);
        for w in groups.windows(2) {
            if w[0].group == w[1].group {
                return Err(CoreError::InvalidSchema(format!("group `{}` listed twice", w[0].group)));
            }
        }
        for g in &groups {
            if g.variables.is_empty() {
                return Err(CoreError::InvalidSchema(format!("group `{}` has no variables", g.group)));
            }
            let mut names = g.variables.clone();
            names.sort();
            names.dedup();
            if names.len() != g.variables.len() {
                return Err(CoreError::InvalidSchema(format!("duplicate variable in `{}`", g.group)));
            }
            match (&g.group, &g.levels) {
                (GroupName::Atmospheric, Some(Levels::Pressure(l))) if !l.is_empty() => {}
                (GroupName::Species, Some(Levels::Species(l))) if !l.is_empty() => {}
                (GroupName::Atmospheric, _) => {
                    return Err(CoreError::InvalidSchema("atmospheric group needs pressure levels".into()))
                }
                (GroupName::Species, _) => {
                    return Err(CoreError::InvalidSchema("species group needs a species list".into()))
                }
                (_, None) => {}
                (other, Some(_)) => {
                    return Err(CoreError::InvalidSchema(format!("group `{other}` cannot carry levels")))
                }
            }
            if let Some(levels) = &g.levels {
                let keys: std::collections::BTreeSet<_> = (0..levels.len()).map(|i| levels.key(i)).collect();
                if keys.len() != levels.len() {
                    return Err(CoreError::InvalidSchema(format!("duplicate level in `{}`", g.group)));
                }
            }
        }
        Ok(Self { groups })
    }

    /// The ten-group, 113-channel configuration (all published groups except
    /// climate).
    pub fn full() -> Self {
        let groups = GroupName::ALL
            .into_iter()
            .filter(|g| *g != GroupName::Climate)
            .map(VariableGroupSchema::full)
            .collect();
        Self::new(groups).expect("valid preset")
    }

    /// Seven channels: two surface variables, one atmospheric variable on two
    /// levels and three species.
    pub fn desk() -> Self {
        Self::new(vec![
            VariableGroupSchema::new(GroupName::Surface, &["t2m", "msl"], None),
            VariableGroupSchema::new(GroupName::Atmospheric, &["t"], Some(Levels::Pressure(vec![850, 500]))),
            VariableGroupSchema::new(
                GroupName::Species,
                &["species"],
                Some(Levels::Species(vec![1920506, 1898286, 5219173])),
            ),
        ])
        .expect("valid preset")
    }

    pub fn groups(&self) -> &[VariableGroupSchema] {
        &self.groups
    }

    pub fn group(&self, name: GroupName) -> Option<&VariableGroupSchema> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn group_pos(&self, name: GroupName) -> Option<usize> {
        self.groups.iter().position(|g| g.group == name)
    }

    pub fn channel_count(&self) -> usize {
        self.groups.iter().map(VariableGroupSchema::channel_count).sum()
    }

    /// Flattened channels: group order, then variable, then level.
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::with_capacity(self.channel_count());
        for (gp, g) in self.groups.iter().enumerate() {
            let nl = g.level_count();
            for (vi, v) in g.variables.iter().enumerate() {
                if nl == 0 {
                    out.push(Channel {
                        group: g.group,
                        variable: v.clone(),
                        level: None,
                        group_pos: gp,
                        var_index: vi,
                        level_index: None,
                        group_channel: vi,
                    });
                } else {
                    let levels = g.levels.as_ref().expect("levels present");
                    for li in 0..nl {
                        out.push(Channel {
                            group: g.group,
                            variable: v.clone(),
                            level: Some(levels.key(li)),
                            group_pos: gp,
                            var_index: vi,
                            level_index: Some(li),
                            group_channel: vi * nl + li,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn pressure_levels(&self) -> Vec<u32> {
        match self.group(GroupName::Atmospheric).and_then(|g| g.levels.as_ref()) {
            Some(Levels::Pressure(l)) => l.clone(),
            _ => Vec::new(),
        }
    }

    pub fn species_ids(&self) -> Vec<u64> {
        match self.group(GroupName::Species).and_then(|g| g.levels.as_ref()) {
            Some(Levels::Species(l)) => l.clone(),
            _ => Vec::new(),
        }
    }
}

impl TryFrom<Vec<VariableGroupSchema>> for Schema {
    type Error = CoreError;
    fn try_from(groups: Vec<VariableGroupSchema>) -> Result<Self> {
        Schema::new(groups)
    }
}

impl From<Schema> for Vec<VariableGroupSchema> {
    fn from(s: Schema) -> Self {
        s.groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schema_has_113_channels_in_ten_groups() {
        let s = Schema::full();
        assert_eq!(s.groups().len(), 10);
        assert_eq!(s.channel_count(), 113);
        assert_eq!(s.pressure_levels().len(), 13);
        assert_eq!(s.species_ids().len(), 28);
    }

    #[test]
    fn all_published_groups_total_124() {
        let s = Schema::new(GroupName::ALL.into_iter().map(VariableGroupSchema::full).collect()).unwrap();
        assert_eq!(s.channel_count(), 124);
    }

    #[test]
    fn desk_schema_channel_arithmetic() {
        let s = Schema::desk();
        assert_eq!(s.channel_count(), 2 + 2 + 3);
        let labels: Vec<_> = s.channels().iter().map(Channel::label).collect();
        assert_eq!(labels[2], "atmospheric/t/850hPa");
        assert_eq!(labels[6], "species/species/sp5219173");
    }

    #[test]
    fn groups_are_sorted_canonically() {
        let s = Schema::new(vec![
            VariableGroupSchema::full(GroupName::Species),
            VariableGroupSchema::full(GroupName::Surface),
        ])
        .unwrap();
        assert_eq!(s.groups()[0].group, GroupName::Surface);
    }

    #[test]
    fn level_rules_enforced() {
        assert!(Schema::new(vec![VariableGroupSchema::new(GroupName::Atmospheric, &["t"], None)]).is_err());
        assert!(Schema::new(vec![VariableGroupSchema::new(
            GroupName::Surface,
            &["t2m"],
            Some(Levels::Pressure(vec![850]))
        )])
        .is_err());
        assert!(Schema::new(vec![VariableGroupSchema::new(GroupName::Surface, &["a", "a"], None)]).is_err());
    }

    #[test]
    fn atmospheric_channels_are_variable_major() {
        let s = Schema::full();
        let ch: Vec<_> = s.channels().into_iter().filter(|c| c.group == GroupName::Atmospheric).collect();
        assert_eq!(ch.len(), 65);
        assert_eq!(ch[13].variable, "t");
        assert_eq!(ch[13].level, Some(LevelKey::Pressure(1000)));
        assert_eq!(ch[13].group_channel, 13);
    }
}
