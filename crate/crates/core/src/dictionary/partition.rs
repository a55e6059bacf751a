use nalgebra::DVector;

use crate::error::{invalid, mismatch, Result};

/// Disjoint, exhaustive partition of atom indices `0..M` into groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>, n_atoms: usize) -> Result<Self> {
        let mut group_of = vec![usize::MAX; n_atoms];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(invalid(format!("group {g} is empty")));
            }
            for &j in members {
                if j >= n_atoms {
                    return Err(invalid(format!("group {g} references atom {j} >= {n_atoms}")));
                }
                if group_of[j] != usize::MAX {
                    return Err(invalid(format!(
                        "atom {j} appears in groups {} and {g}",
                        group_of[j]
                    )));
                }
                group_of[j] = g;
            }
        }
        if let Some(j) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(invalid(format!("atom {j} is not covered by any group")));
        }
        Ok(GroupPartition { groups, group_of })
    }

    /// Consecutive groups of `size` atoms.
    pub fn contiguous(n_atoms: usize, size: usize) -> Result<Self> {
        if size == 0 || !n_atoms.is_multiple_of(size) {
            return Err(invalid(format!("{n_atoms} atoms cannot be split into groups of {size}")));
        }
        let groups = (0..n_atoms / size).map(|g| (g * size..(g + 1) * size).collect()).collect();
        Self::new(groups, n_atoms)
    }

    pub fn singletons(n_atoms: usize) -> Self {
        GroupPartition {
            groups: (0..n_atoms).map(|j| vec![j]).collect(),
            group_of: (0..n_atoms).collect(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_of(&self, atom: usize) -> usize {
        self.group_of[atom]
    }

    /// Euclidean norm of every group of `values`.
    pub fn group_norms(&self, values: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.groups.len(),
            self.groups.iter().map(|g| g.iter().map(|&j| values[j] * values[j]).sum::<f64>().sqrt()),
        )
    }

    /// Partition of the concatenation of several index spaces, each with its
    /// own partition, in order.
    pub fn concat(parts: &[&GroupPartition]) -> Self {
        let mut groups = Vec::new();
        let mut offset = 0;
        for p in parts {
            groups.extend(p.groups.iter().map(|g| g.iter().map(|j| j + offset).collect::<Vec<_>>()));
            offset += p.n_atoms();
        }
        Self::new(groups, offset).expect("concatenation of valid partitions is valid")
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n_atoms() {
            return Err(mismatch(format!("length {len} vs partition over {} atoms", self.n_atoms())));
        }
        Ok(())
    }
}
