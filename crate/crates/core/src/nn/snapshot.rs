use serde::{Deserialize, Serialize};

use super::{GroupId, Model};

/// Copy of one parameter tensor at a snapshot point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMember {
    pub name: String,
    pub group: GroupId,
    pub values: Vec<f64>,
}

/// Parameter values (including BN running statistics) at the end of epoch
/// `epoch` of task `task`, both 1-based. Immutable once captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    task: usize,
    epoch: usize,
    members: Vec<SnapshotMember>,
}

impl ModelSnapshot {
    pub(super) fn capture(model: &Model, task: usize, epoch: usize) -> Self {
        let members = model
            .params()
            .iter()
            .map(|p| SnapshotMember {
                name: p.name.clone(),
                group: p.group,
                values: p.tensor.data().to_vec(),
            })
            .collect();
        Self {
            task,
            epoch,
            members,
        }
    }

    pub fn from_members(task: usize, epoch: usize, members: Vec<SnapshotMember>) -> Self {
        Self {
            task,
            epoch,
            members,
        }
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn members(&self) -> &[SnapshotMember] {
        &self.members
    }

    pub fn members_of(&self, group: GroupId) -> impl Iterator<Item = &SnapshotMember> {
        self.members.iter().filter(move |m| m.group == group)
    }

    /// All of a group's values, concatenated in parameter order.
    pub fn group_vector(&self, group: GroupId) -> Vec<f64> {
        self.members_of(group)
            .flat_map(|m| m.values.iter().copied())
            .collect()
    }

    /// Distinct groups, in first-appearance order.
    pub fn groups(&self) -> Vec<GroupId> {
        let mut out: Vec<GroupId> = Vec::new();
        for m in &self.members {
            if !out.contains(&m.group) {
                out.push(m.group);
            }
        }
        out.sort();
        out
    }

    /// Copy with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let members = self
            .members
            .iter()
            .map(|m| SnapshotMember {
                values: m.values.iter().map(|v| v * c).collect(),
                ..m.clone()
            })
            .collect();
        Self { members, ..*self }
    }
}
