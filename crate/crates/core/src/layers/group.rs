use std::ops::Range;

use crate::error::{Result, VndError};
use crate::ordering::{BernoulliChain, DownhillParams, LayerWidth};

/// Partition of `units` outputs into `groups` contiguous groups whose sizes
/// differ by at most one. The first `n_base` groups are never dropped and
/// share ordering dimension 0, so the ordering unit has
/// `groups - n_base + 1` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    units: usize,
    n_base: usize,
    bounds: Vec<usize>,
}

impl GroupMap {
    pub fn new(units: usize, groups: usize, n_base: usize) -> Result<Self> {
        if groups == 0 || groups > units {
            return Err(VndError::InvalidParameter(format!(
                "cannot split {units} units into {groups} groups"
            )));
        }
        if n_base == 0 || n_base >= groups {
            return Err(VndError::InvalidParameter(format!(
                "n_base must be in 1..{groups}, got {n_base}"
            )));
        }
        let (q, r) = (units / groups, units % groups);
        let mut bounds = Vec::with_capacity(groups + 1);
        bounds.push(0);
        for g in 0..groups {
            let size = q + usize::from(g < r);
            bounds.push(bounds[g] + size);
        }
        Ok(Self { units, n_base, bounds })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn groups(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn ordering_dims(&self) -> usize {
        self.groups() - self.n_base + 1
    }

    pub fn range(&self, group: usize) -> Range<usize> {
        self.bounds[group]..self.bounds[group + 1]
    }

    /// Ordering dimension controlling `group`.
    pub fn dim_of_group(&self, group: usize) -> usize {
        group.saturating_sub(self.n_base - 1)
    }

    /// Broadcasts one value per ordering dimension to one value per unit.
    pub fn expand_dims(&self, per_dim: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.units];
        for g in 0..self.groups() {
            let v = per_dim[self.dim_of_group(g)];
            out[self.range(g)].iter_mut().for_each(|o| *o = v);
        }
        out
    }

    /// Broadcasts one value per group to one value per unit.
    pub fn expand_groups(&self, per_group: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.units];
        for (g, v) in per_group.iter().enumerate() {
            out[self.range(g)].iter_mut().for_each(|o| *o = *v);
        }
        out
    }

    /// Sums per-unit values into their ordering dimensions (adjoint of [`Self::expand_dims`]).
    pub fn reduce_to_dims(&self, per_unit: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ordering_dims()];
        for g in 0..self.groups() {
            out[self.dim_of_group(g)] += per_unit[self.range(g)].iter().sum::<f64>();
        }
        out
    }
}

/// Ordering unit owned by a masked layer: group layout, Downhill posterior and
/// Bernoulli-chain prior.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingUnit {
    pub groups: GroupMap,
    pub posterior: DownhillParams,
    pub prior: BernoulliChain,
    /// Stored for completeness; the shared-spike simplification never reads it.
    pub spike_sigma: f64,
}

impl OrderingUnit {
    pub fn new(groups: GroupMap, init_logit: f64, prior_keep: f64, tau: f64) -> Result<Self> {
        let dims = groups.ordering_dims();
        Ok(Self {
            posterior: DownhillParams::constant(dims, init_logit, tau)?,
            prior: BernoulliChain::uniform(dims, prior_keep)?,
            groups,
            spike_sigma: 1e-6,
        })
    }

    pub fn width(&self, fraction: f64) -> Result<LayerWidth> {
        LayerWidth::new(self.groups.groups(), self.groups.n_base(), &self.posterior, fraction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_units() {
        let g = GroupMap::new(10, 4, 1).unwrap();
        let sizes: Vec<usize> = (0..4).map(|i| g.range(i).len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(g.range(3).end, 10);
        assert_eq!(g.ordering_dims(), 4);
    }

    #[test]
    fn invalid_layouts() {
        assert!(GroupMap::new(4, 5, 1).is_err());
        assert!(GroupMap::new(8, 4, 0).is_err());
        assert!(GroupMap::new(8, 4, 4).is_err());
    }

    #[test]
    fn base_groups_collapse() {
        let g = GroupMap::new(8, 4, 2).unwrap();
        assert_eq!(g.ordering_dims(), 3);
        let z = g.expand_dims(&[1.0, 0.5, 0.25]);
        assert_eq!(z, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
        let r = g.reduce_to_dims(&[1.0; 8]);
        assert_eq!(r, vec![4.0, 2.0, 2.0]);
    }

    #[test]
    fn expand_reduce_are_adjoint() {
        let g = GroupMap::new(11, 5, 2).unwrap();
        let a = [0.3, -1.0, 2.0, 0.7];
        let b: Vec<f64> = (0..11).map(|i| (i as f64).sin()).collect();
        let lhs: f64 = g.expand_dims(&a).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(g.reduce_to_dims(&b)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
