use crate::error::{Result, VndError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Exactly `tail` leading ones followed by zeros.
    Hard {
        tail: usize,
    },
    Soft,
}

/// A hard or relaxed ordered mask. The first entry is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedMask {
    values: Vec<f64>,
    kind: MaskKind,
}

impl OrderedMask {
    /// The prefix mask `v_tail` over `k` dimensions.
    pub fn hard(k: usize, tail: usize) -> Result<Self> {
        if tail == 0 || tail > k {
            return Err(VndError::InvalidParameter(format!("tail index {tail} outside 1..={k}")));
        }
        let values = (0..k).map(|i| if i < tail { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            values,
            kind: MaskKind::Hard { tail },
        })
    }

    /// Wraps a relaxed mask, validating `z[0] = 1`, monotonicity and range.
    pub fn soft(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(VndError::InvalidParameter("empty mask".into()));
        }
        if values[0] != 1.0 {
            return Err(VndError::InvalidParameter(format!(
                "first mask entry must be 1, got {}",
                values[0]
            )));
        }
        for w in values.windows(2) {
            if w[1] > w[0] {
                return Err(VndError::InvalidParameter("mask is not nonincreasing".into()));
            }
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VndError::InvalidParameter("mask entry outside [0, 1]".into()));
        }
        Ok(Self {
            values,
            kind: MaskKind::Soft,
        })
    }

    pub(crate) fn soft_unchecked(values: Vec<f64>) -> Self {
        Self {
            values,
            kind: MaskKind::Soft,
        }
    }

    /// All-ones mask (the full network).
    pub fn full(k: usize) -> Self {
        Self::hard(k, k.max(1)).expect("k >= 1")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Tail index of a hard mask, or of the hardened soft mask.
    pub fn tail(&self) -> usize {
        match self.kind {
            MaskKind::Hard { tail } => tail,
            MaskKind::Soft => self.harden().tail(),
        }
    }

    /// Rounds a relaxed mask to the nearest prefix mask (entries above 0.5 kept).
    pub fn harden(&self) -> OrderedMask {
        let tail = self.values.iter().take_while(|&&v| v > 0.5).count().max(1);
        OrderedMask::hard(self.values.len(), tail).expect("tail within range")
    }

    /// The increments `z[i] - z[i+1]` with `z[K] := 0`; a point on the simplex.
    pub fn increments(&self) -> Vec<f64> {
        let k = self.values.len();
        (0..k)
            .map(|i| self.values[i] - if i + 1 < k { self.values[i + 1] } else { 0.0 })
            .collect()
    }
}
