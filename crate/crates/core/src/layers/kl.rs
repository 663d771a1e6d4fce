use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::dense::{LOG_ALPHA_MAX, LOG_ALPHA_MIN};
use crate::error::{Result, VndError};
use crate::kl_approx::{eval_approx, eval_approx_derivative, KlApproxConstants};

/// Largest mask count accepted by [`phi2_bruteforce`].
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Fitted approximation of the per-weight negative KL with the published
/// constants; the additive constant is dropped. Input is clamped to the
/// trainable `log(alpha)` range.
pub fn neg_kl_weight_approx(log_alpha: f64) -> f64 {
    eval_approx(
        &KlApproxConstants::PUBLISHED,
        log_alpha.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX),
    )
}

pub fn neg_kl_weight_approx_derivative(log_alpha: f64) -> f64 {
    eval_approx_derivative(
        &KlApproxConstants::PUBLISHED,
        log_alpha.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX),
    )
}

/// Per-weight KL `K1 = -neg_kl_weight_approx`.
pub fn weight_kl(log_alpha: f64) -> f64 {
    -neg_kl_weight_approx(log_alpha)
}

/// Monte Carlo estimate of `0.5 log(alpha) - E log|eps|`, `eps ~ N(1, alpha)`.
pub fn neg_kl_weight_mc<R: Rng + ?Sized>(log_alpha: f64, samples: usize, rng: &mut R) -> f64 {
    let samples = samples.max(1);
    let sd = (0.5 * log_alpha).exp();
    let mut acc = 0.0;
    for _ in 0..samples {
        let n: f64 = rng.sample(StandardNormal);
        acc += (1.0 + sd * n).abs().ln();
    }
    0.5 * log_alpha - acc / samples as f64
}

fn check_phi2_shapes(k0: &Array2<f64>, k1: &Array2<f64>, beta: &[f64]) -> Result<()> {
    if k0.dim() != k1.dim() || k1.ncols() != beta.len() {
        return Err(VndError::ShapeMismatch(format!(
            "K0 {:?}, K1 {:?}, beta of length {}",
            k0.dim(),
            k1.dim(),
            beta.len()
        )));
    }
    Ok(())
}

/// `e^T K0 (J - J_L)^T beta + e^T K1 J_L^T beta` with `J` all ones and `J_L`
/// lower-triangular ones.
pub fn phi2_full(k0: &Array2<f64>, k1: &Array2<f64>, beta: &[f64]) -> Result<f64> {
    check_phi2_shapes(k0, k1, beta)?;
    let d = beta.len();
    let j = Array2::<f64>::ones((d, d));
    let jl = Array2::from_shape_fn((d, d), |(r, c)| if c <= r { 1.0 } else { 0.0 });
    let beta = Array1::from(beta.to_vec());
    let e = Array1::<f64>::ones(k1.nrows());
    let dropped = e.dot(k0).dot(&(&j - &jl).t().dot(&beta));
    let kept = e.dot(k1).dot(&jl.t().dot(&beta));
    Ok(dropped + kept)
}

/// Enumerates the ordered masks: mask `v_j` pays `K1` on columns `<= j` and
/// `K0` on the rest.
pub fn phi2_bruteforce(k0: &Array2<f64>, k1: &Array2<f64>, beta: &[f64]) -> Result<f64> {
    check_phi2_shapes(k0, k1, beta)?;
    let d = beta.len();
    if d > BRUTE_FORCE_LIMIT {
        return Err(VndError::TooLarge(d));
    }
    let mut total = 0.0;
    for (j, b) in beta.iter().enumerate() {
        let mut cost = 0.0;
        for col in 0..d {
            let k = if col <= j { k1 } else { k0 };
            cost += k.column(col).sum();
        }
        total += b * cost;
    }
    Ok(total)
}

/// `Phi2` with zero spike KL, aggregated by ordering dimension:
/// `sum_j beta[j] * sum_{g<=j} dim_sums[g]`.
pub fn grouped_phi2(dim_sums: &[f64], beta: &[f64]) -> f64 {
    let mut prefix = 0.0;
    let mut total = 0.0;
    for (s, b) in dim_sums.iter().zip(beta) {
        prefix += s;
        total += b * prefix;
    }
    total
}

/// Constant-KL slab with zero-KL spike: `chi * d * sum_j j beta[j]`.
pub fn l0_reduction(beta: &[f64], chi: f64, d: usize) -> Result<f64> {
    if chi < 0.0 {
        return Err(VndError::InvalidParameter(format!(
            "chi must be nonnegative, got {chi}"
        )));
    }
    let weighted: f64 = beta.iter().enumerate().map(|(j, b)| (j + 1) as f64 * b).sum();
    Ok(chi * d as f64 * weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream_rng;
    use ndarray::array;

    #[test]
    fn approx_at_zero() {
        assert!((neg_kl_weight_approx(0.0) - 0.3326).abs() < 1e-4);
    }

    #[test]
    fn approx_is_clamped() {
        assert_eq!(neg_kl_weight_approx(-20.0), neg_kl_weight_approx(LOG_ALPHA_MIN));
        assert_eq!(neg_kl_weight_approx(3.0), neg_kl_weight_approx(LOG_ALPHA_MAX));
    }

    #[test]
    fn mc_small_alpha_limit() {
        let mut rng = stream_rng(5, 0);
        let v = neg_kl_weight_mc(-12.0, 10_000, &mut rng);
        assert!((v + 6.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn phi2_examples() {
        let k0 = array![[0.1, 0.2]];
        let k1 = array![[1.0, 2.0]];
        let beta = [0.4, 0.6];
        assert!((phi2_full(&k0, &k1, &beta).unwrap() - 2.28).abs() < 1e-12);
        assert!((phi2_bruteforce(&k0, &k1, &beta).unwrap() - 2.28).abs() < 1e-12);
        let zero = Array2::zeros((1, 2));
        assert!((phi2_full(&zero, &k1, &beta).unwrap() - 2.2).abs() < 1e-12);
        assert!((grouped_phi2(&[1.0, 2.0], &beta) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn indistinguishable_components_pay_everything() {
        let k = array![[0.5, 1.5, -0.25], [2.0, 0.1, 0.3]];
        let total = k.sum();
        for beta in [[0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]] {
            assert!((phi2_full(&k, &k, &beta).unwrap() - total).abs() < 1e-12);
        }
        let k0 = Array2::zeros((2, 3));
        assert!((phi2_full(&k0, &k, &[0.0, 0.0, 1.0]).unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_guard_and_shapes() {
        let k = Array2::<f64>::zeros((1, 13));
        assert!(matches!(
            phi2_bruteforce(&k, &k, &[0.0; 13]),
            Err(VndError::TooLarge(13))
        ));
        let k2 = Array2::<f64>::zeros((1, 2));
        assert!(phi2_full(&k2, &k2, &[1.0]).is_err());
    }

    #[test]
    fn l0_examples() {
        assert!((l0_reduction(&[0.4, 0.6], 1.0, 1).unwrap() - 1.6).abs() < 1e-15);
        assert_eq!(l0_reduction(&[1.0, 0.0, 0.0], 0.7, 5).unwrap(), 0.7 * 5.0);
        assert!(l0_reduction(&[1.0], -1.0, 1).is_err());
    }
}
