use rand::Rng;

use super::mask::OrderedMask;
use crate::error::{Result, VndError};

/// Fixed tail-index distributions used by classic nested dropout.
#[derive(Debug, Clone, PartialEq)]
pub enum TailDistribution {
    /// Each node past the first is the tail with probability `p` given that the
    /// previous node was kept; the last node absorbs the remaining mass.
    Geometric { p: f64 },
    /// Explicit probabilities over tails `1..=K`.
    Categorical(Vec<f64>),
}

impl TailDistribution {
    /// Mass function over tails `1..=k`.
    pub fn pmf(&self, k: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(VndError::InvalidParameter("need at least one node".into()));
        }
        match self {
            TailDistribution::Geometric { p } => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(VndError::InvalidParameter(format!(
                        "geometric parameter {p} outside (0, 1]"
                    )));
                }
                let mut out: Vec<f64> = (0..k).map(|i| (1.0 - p).powi(i as i32) * p).collect();
                out[k - 1] = (1.0 - p).powi(k as i32 - 1);
                Ok(out)
            }
            TailDistribution::Categorical(probs) => {
                if probs.len() != k {
                    return Err(VndError::ShapeMismatch(format!(
                        "{} tail probabilities for {k} nodes",
                        probs.len()
                    )));
                }
                if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(VndError::InvalidParameter(
                        "tail probabilities must form a simplex".into(),
                    ));
                }
                Ok(probs.clone())
            }
        }
    }
}

/// Samples a tail from a fixed distribution and returns the prefix mask `v_b`.
pub fn fixed_rate_tail_sample<R: Rng + ?Sized>(dist: &TailDistribution, k: usize, rng: &mut R) -> Result<OrderedMask> {
    let pmf = dist.pmf(k)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return OrderedMask::hard(k, i + 1);
        }
    }
    // Rounding left u above the accumulated mass: take the last supported tail.
    let last = pmf.iter().rposition(|p| *p > 0.0).unwrap_or(k - 1);
    OrderedMask::hard(k, last + 1)
}
