use super::downhill::{keep_probabilities, DownhillParams};
use crate::error::{Result, VndError};

/// Truncation and rescaling of one masked layer at test time.
///
/// Groups `0..kept_groups` are kept and scaled by the probability that they
/// are kept during training; the rest are zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWidth {
    kept_groups: usize,
    group_scale: Vec<f64>,
}

impl LayerWidth {
    /// Builds the plan for a layer with `groups` output groups whose first
    /// `n_base` groups share ordering dimension 0.
    pub fn new(groups: usize, n_base: usize, params: &DownhillParams, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(VndError::InvalidParameter(format!(
                "width fraction {fraction} keeps no groups; expected (0, 1]"
            )));
        }
        if n_base == 0 || n_base > groups || params.dims() != groups - n_base + 1 {
            return Err(VndError::ShapeMismatch(format!(
                "{groups} groups with {n_base} base groups need {} ordering dimensions, got {}",
                groups + 1 - n_base.min(groups),
                params.dims()
            )));
        }
        let kept = ((fraction * groups as f64).round() as usize).clamp(n_base, groups);
        let keep = keep_probabilities(params);
        let group_scale = (0..groups)
            .map(|g| {
                if g < kept {
                    keep[g.saturating_sub(n_base - 1)]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            kept_groups: kept,
            group_scale,
        })
    }

    /// Keeps every group with unit scale.
    pub fn identity(groups: usize) -> Self {
        Self {
            kept_groups: groups,
            group_scale: vec![1.0; groups],
        }
    }

    pub fn kept_groups(&self) -> usize {
        self.kept_groups
    }

    pub fn group_scale(&self) -> &[f64] {
        &self.group_scale
    }
}

/// Per-layer widths for a whole network; `None` marks layers without an ordering unit.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthPlan {
    pub fraction: f64,
    pub layers: Vec<Option<LayerWidth>>,
}

/// One entry per layer: `(groups, n_base, posterior)` for masked layers.
pub fn make_width_plan(units: &[Option<(usize, usize, &DownhillParams)>], fraction: f64) -> Result<WidthPlan> {
    let layers = units
        .iter()
        .map(|u| {
            u.map(|(groups, n_base, params)| LayerWidth::new(groups, n_base, params, fraction))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WidthPlan { fraction, layers })
}
