//! Trainability masks over parameter groups.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::model::{ParamGroup, TransformerModel};

/// Trainability of one group: all-or-nothing, or per scalar (flattened in
/// the group's tensor order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMask {
    Frozen,
    Trainable,
    Partial(Vec<bool>),
}

impl GroupMask {
    pub fn any(&self) -> bool {
        match self {
            GroupMask::Frozen => false,
            GroupMask::Trainable => true,
            GroupMask::Partial(m) => m.iter().any(|&b| b),
        }
    }

    fn count(&self, size: usize) -> usize {
        match self {
            GroupMask::Frozen => 0,
            GroupMask::Trainable => size,
            GroupMask::Partial(m) => m.iter().filter(|&&b| b).count(),
        }
    }
}

/// Which parameter groups of a model receive gradients and updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeMask {
    groups: BTreeMap<ParamGroup, GroupMask>,
}

impl FreezeMask {
    fn uniform(model: &TransformerModel, m: GroupMask) -> Self {
        Self {
            groups: model.groups().into_iter().map(|g| (g, m.clone())).collect(),
        }
    }

    pub fn all_trainable(model: &TransformerModel) -> Self {
        Self::uniform(model, GroupMask::Trainable)
    }

    pub fn all_frozen(model: &TransformerModel) -> Self {
        Self::uniform(model, GroupMask::Frozen)
    }

    /// Frozen everywhere except the listed groups.
    pub fn only(model: &TransformerModel, trainable: &[ParamGroup]) -> Self {
        let mut m = Self::all_frozen(model);
        for &g in trainable {
            m.groups.insert(g, GroupMask::Trainable);
        }
        m
    }

    pub fn set(&mut self, group: ParamGroup, trainable: bool) {
        let m = if trainable { GroupMask::Trainable } else { GroupMask::Frozen };
        self.groups.insert(group, m);
    }

    pub fn set_partial(&mut self, group: ParamGroup, scalars: Vec<bool>) {
        self.groups.insert(group, GroupMask::Partial(scalars));
    }

    pub fn get(&self, group: ParamGroup) -> Option<&GroupMask> {
        self.groups.get(&group)
    }

    /// True when at least one scalar of `group` is trainable.
    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.groups.get(&group).is_some_and(GroupMask::any)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamGroup, &GroupMask)> {
        self.groups.iter().map(|(g, m)| (*g, m))
    }

    /// Groups with any trainable scalar, in canonical order.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        self.iter().filter(|(_, m)| m.any()).map(|(g, _)| g).collect()
    }

    /// Layer indices whose base weights are trainable.
    pub fn trainable_layers(&self) -> Vec<usize> {
        self.trainable_groups()
            .into_iter()
            .filter_map(|g| match g {
                ParamGroup::Layer(i) => Some(i),
                _ => None,
            })
            .collect()
    }

    /// The mask must address exactly the groups of `model`, and partial
    /// masks must match the group's scalar count.
    pub fn validate(&self, model: &TransformerModel) -> Result<()> {
        let expected = model.groups();
        if expected.len() != self.groups.len() || expected.iter().any(|g| !self.groups.contains_key(g)) {
            return Err(input(format!(
                "freeze mask addresses {:?} but model has {:?}",
                self.groups.keys().collect::<Vec<_>>(),
                expected
            )));
        }
        for (g, m) in &self.groups {
            if let GroupMask::Partial(bits) = m {
                let n = model.group(*g).map_or(0, |p| p.num_params());
                if bits.len() != n {
                    return Err(input(format!("partial mask for {g:?} has {} entries, group has {n}", bits.len())));
                }
            }
        }
        Ok(())
    }

    /// Exact count of trainable scalars.
    pub fn trainable_params(&self, model: &TransformerModel) -> usize {
        self.groups
            .iter()
            .map(|(g, m)| m.count(model.group(*g).map_or(0, |p| p.num_params())))
            .sum()
    }
}

/// Fraction of scalar parameters of `model` that `mask` leaves trainable.
pub fn trainable_fraction(model: &TransformerModel, mask: &FreezeMask) -> f64 {
    let total = model.num_params();
    if total == 0 {
        return 0.0;
    }
    mask.trainable_params(model) as f64 / total as f64
}
