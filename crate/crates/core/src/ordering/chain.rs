use rand::Rng;

use super::mask::OrderedMask;
use crate::error::{Result, VndError};

/// Prior over ordered masks: node `i` is kept with probability `pi[i]` given
/// that node `i - 1` was kept. `pi[0] = 1`; an implicit `pi[K] = 0` closes the
/// chain.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliChain {
    pi: Vec<f64>,
}

impl BernoulliChain {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(VndError::InvalidParameter("chain needs at least one node".into()));
        }
        if pi[0] != 1.0 {
            return Err(VndError::InvalidParameter(format!(
                "first conditional keep probability must be 1, got {}",
                pi[0]
            )));
        }
        if let Some(p) = pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(VndError::InvalidParameter(format!(
                "conditional keep probability {p} outside [0, 1]"
            )));
        }
        Ok(Self { pi })
    }

    /// `[1, keep, keep, ...]` over `k` nodes.
    pub fn uniform(k: usize, keep: f64) -> Result<Self> {
        let mut pi = vec![keep; k.max(1)];
        pi[0] = 1.0;
        Self::new(pi)
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// `p(v_j) = (1 - pi[j+1]) * prod_{k<=j} pi[k]`.
    pub fn mask_probs(&self) -> Vec<f64> {
        let k = self.pi.len();
        let mut out = Vec::with_capacity(k);
        let mut prefix = 1.0;
        for j in 0..k {
            prefix *= self.pi[j];
            let next = if j + 1 < k { self.pi[j + 1] } else { 0.0 };
            out.push((1.0 - next) * prefix);
        }
        out
    }

    /// `p(z_i = 1) = prod_{k<=i} pi[k]`.
    pub fn marginals(&self) -> Vec<f64> {
        self.pi
            .iter()
            .scan(1.0, |acc, p| {
                *acc *= p;
                Some(*acc)
            })
            .collect()
    }

    /// Sequential simulation of the chain, O(K).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OrderedMask {
        let mut tail = 1;
        while tail < self.pi.len() && rng.random::<f64>() < self.pi[tail] {
            tail += 1;
        }
        OrderedMask::hard(self.pi.len(), tail).expect("tail within range")
    }
}
