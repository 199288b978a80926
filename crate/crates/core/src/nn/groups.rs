use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

/// Parameter-group taxonomy used for dynamics and selective finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    /// The convolution closest to the input.
    Conv1,
    /// Later convolution stages, numbered from 1.
    ConvBlock(usize),
    /// Batch-norm scale and shift.
    BnAffine,
    /// Batch-norm running mean and variance.
    BnStats,
    FcHidden,
    /// The output layer.
    FcLast,
}

impl GroupId {
    /// Whether SGD updates this group. Running statistics are not trained by gradient.
    pub fn is_trainable(self) -> bool {
        !matches!(self, GroupId::BnStats)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Conv1 => f.write_str("CONV1"),
            GroupId::ConvBlock(k) => write!(f, "CONV_BLOCK_{k}"),
            GroupId::BnAffine => f.write_str("BN_AFFINE"),
            GroupId::BnStats => f.write_str("BN_STATS"),
            GroupId::FcHidden => f.write_str("FC_HIDDEN"),
            GroupId::FcLast => f.write_str("FC_LAST"),
        }
    }
}

impl FromStr for GroupId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "CONV1" => Ok(GroupId::Conv1),
            "BN_AFFINE" => Ok(GroupId::BnAffine),
            "BN_STATS" => Ok(GroupId::BnStats),
            "FC_HIDDEN" => Ok(GroupId::FcHidden),
            "FC_LAST" => Ok(GroupId::FcLast),
            _ => s
                .strip_prefix("CONV_BLOCK_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(GroupId::ConvBlock)
                .ok_or_else(|| ModelError::UnknownGroup(s.to_string())),
        }
    }
}

impl Serialize for GroupId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One group of the model's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub group_id: GroupId,
    /// Indices into the model's layer list.
    pub layer_ids: Vec<usize>,
    /// Indices into the model's parameter list.
    pub param_ids: Vec<usize>,
    pub param_count: usize,
}

/// Set of groups designated for finetuning.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionMask(BTreeSet<GroupId>);

impl SelectionMask {
    pub fn new(groups: impl IntoIterator<Item = GroupId>) -> Self {
        Self(groups.into_iter().collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, g: GroupId) -> bool {
        self.0.contains(&g)
    }

    pub fn insert(&mut self, g: GroupId) {
        self.0.insert(g);
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &SelectionMask) -> bool {
        self.0.is_subset(&other.0)
    }

    /// Parse a comma-separated list such as `BN_STATS,FC_LAST`.
    pub fn parse_list(s: &str) -> Result<Self, ModelError> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<BTreeSet<_>, _>>()
            .map(Self)
    }
}

impl fmt::Display for SelectionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromIterator<GroupId> for SelectionMask {
    fn from_iter<I: IntoIterator<Item = GroupId>>(iter: I) -> Self {
        Self::new(iter)
    }
}

/// Fraction of all parameters that belong to the masked groups.
pub fn group_fraction(groups: &[ParameterGroup], mask: &SelectionMask) -> Result<f64, ModelError> {
    for g in mask.iter() {
        if !groups.iter().any(|pg| pg.group_id == g) {
            return Err(ModelError::UnknownGroup(g.to_string()));
        }
    }
    let total: usize = groups.iter().map(|g| g.param_count).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let selected: usize = groups
        .iter()
        .filter(|g| mask.contains(g.group_id))
        .map(|g| g.param_count)
        .sum();
    Ok(selected as f64 / total as f64)
}
