use rand::Rng;

use super::chain::BernoulliChain;
use super::mask::OrderedMask;
use crate::error::{Result, VndError};
use crate::math::{ln_gamma_int, log_sigmoid, logsumexp, sigmoid, softmax_in_place, softplus};

/// Conditional logits are kept inside this interval so `log beta` stays finite.
pub const LOGIT_CLAMP: f64 = 12.0;

const UNIFORM_GUARD: f64 = 1e-12;

/// Downhill posterior over ordered masks of `K` dimensions.
///
/// Stored as `K - 1` conditional logits: `mu[j] = sigmoid(logit[j-1])` is the
/// probability of keeping node `j` given node `j - 1` is kept (`mu[0] = 1`).
/// The mask probabilities `beta[j] = (1 - mu[j+1]) * prod_{k<=j} mu[k]` are
/// always derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DownhillParams {
    logits: Vec<f64>,
    tau: f64,
}

impl DownhillParams {
    pub fn new(logits: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(VndError::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if logits.iter().any(|l| l.is_nan()) {
            return Err(VndError::InvalidParameter("NaN conditional logit".into()));
        }
        let mut p = Self { logits, tau };
        p.clamp_logits();
        Ok(p)
    }

    /// `k` dimensions with every conditional logit set to `logit`.
    pub fn constant(k: usize, logit: f64, tau: f64) -> Result<Self> {
        if k == 0 {
            return Err(VndError::InvalidParameter("need at least one dimension".into()));
        }
        Self::new(vec![logit; k - 1], tau)
    }

    /// Recovers conditional logits from mask probabilities (clamped).
    pub fn from_beta(beta: &[f64], tau: f64) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| *b < 0.0) {
            return Err(VndError::InvalidParameter("beta must be a nonempty simplex".into()));
        }
        let total: f64 = beta.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(VndError::InvalidParameter(format!("beta sums to {total}")));
        }
        let keep = keep_probabilities_from_beta(beta);
        let logits = (1..beta.len())
            .map(|j| {
                let mu = if keep[j - 1] > 0.0 { keep[j] / keep[j - 1] } else { 0.0 };
                let mu = mu.clamp(0.0, 1.0);
                (mu / (1.0 - mu)).ln()
            })
            .collect();
        Self::new(logits, tau)
    }

    pub fn dims(&self) -> usize {
        self.logits.len() + 1
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(VndError::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn clamp_logits(&mut self) {
        for l in &mut self.logits {
            *l = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
    }

    /// Conditional keep probabilities `mu`, with `mu[0] = 1`.
    pub fn conditional_keep(&self) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.logits.iter().map(|&l| sigmoid(l)))
            .collect()
    }

    /// `log beta`, computed in log space from the logits.
    pub fn log_beta(&self) -> Vec<f64> {
        let k = self.dims();
        let mut out = Vec::with_capacity(k);
        let mut prefix = 0.0;
        for j in 0..k {
            if j > 0 {
                prefix += log_sigmoid(self.logits[j - 1]);
            }
            let drop_next = if j + 1 < k { -softplus(self.logits[j]) } else { 0.0 };
            out.push(prefix + drop_next);
        }
        out
    }

    pub fn beta(&self) -> Vec<f64> {
        self.log_beta().into_iter().map(f64::exp).collect()
    }

    /// Chain rule from `d/d log beta` to `d/d logit`.
    pub fn grad_logits_from_log_beta(&self, grad_log_beta: &[f64]) -> Vec<f64> {
        let k = self.dims();
        debug_assert_eq!(grad_log_beta.len(), k);
        // suffix[j] = sum_{i>=j} grad_log_beta[i]
        let mut suffix = vec![0.0; k + 1];
        for j in (0..k).rev() {
            suffix[j] = suffix[j + 1] + grad_log_beta[j];
        }
        (1..k)
            .map(|g| {
                let s = sigmoid(self.logits[g - 1]);
                suffix[g] * (1.0 - s) - grad_log_beta[g - 1] * s
            })
            .collect()
    }
}

/// `K` standard Gumbel draws with the uniform guard applied.
pub fn sample_gumbel<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(UNIFORM_GUARD, 1.0 - UNIFORM_GUARD);
            -(-u.ln()).ln()
        })
        .collect()
}

/// One reparameterised Downhill draw: the relaxed one-hot weights `c` and the
/// mask `z[i] = 1 - sum_{j<i} c[j]`, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DownhillDraw {
    gumbel: Vec<f64>,
    weights: Vec<f64>,
    mask: Vec<f64>,
    tau: f64,
}

impl DownhillDraw {
    /// Deterministic transform of fixed Gumbel noise.
    pub fn from_noise(params: &DownhillParams, gumbel: Vec<f64>) -> Result<Self> {
        let k = params.dims();
        if gumbel.len() != k {
            return Err(VndError::ShapeMismatch(format!(
                "{} Gumbel draws for {k} dimensions",
                gumbel.len()
            )));
        }
        let log_beta = params.log_beta();
        if let Some(j) = log_beta.iter().position(|l| !l.is_finite()) {
            return Err(VndError::Domain(format!("beta[{j}] is zero; clamp the logits")));
        }
        let tau = params.tau();
        let mut weights: Vec<f64> = log_beta.iter().zip(&gumbel).map(|(lb, g)| (lb + g) / tau).collect();
        softmax_in_place(&mut weights);
        // Tail sums keep z nonnegative and exactly nonincreasing.
        let mut mask = vec![0.0; k];
        let mut acc = 0.0;
        for i in (1..k).rev() {
            acc += weights[i];
            mask[i] = acc.min(1.0);
        }
        mask[0] = 1.0;
        Ok(Self {
            gumbel,
            weights,
            mask,
            tau,
        })
    }

    pub fn sample<R: Rng + ?Sized>(params: &DownhillParams, rng: &mut R) -> Result<Self> {
        let g = sample_gumbel(params.dims(), rng);
        Self::from_noise(params, g)
    }

    pub fn mask_values(&self) -> &[f64] {
        &self.mask
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gumbel(&self) -> &[f64] {
        &self.gumbel
    }

    pub fn to_mask(&self) -> OrderedMask {
        OrderedMask::soft_unchecked(self.mask.clone())
    }

    /// Gradient with respect to `log beta` given the gradient with respect to `z`.
    pub fn backward_log_beta(&self, grad_mask: &[f64]) -> Vec<f64> {
        let k = self.mask.len();
        // z[i] = sum_{j>=i} c[j] for i >= 1, so dL/dc[j] = sum_{1<=i<=j} dL/dz[i].
        let mut grad_c = vec![0.0; k];
        let mut acc = 0.0;
        for j in 1..k {
            acc += grad_mask[j];
            grad_c[j] = acc;
        }
        let dot: f64 = self.weights.iter().zip(&grad_c).map(|(c, g)| c * g).sum();
        self.weights
            .iter()
            .zip(&grad_c)
            .map(|(c, g)| c * (g - dot) / self.tau)
            .collect()
    }

    /// Gradient with respect to the conditional logits.
    pub fn backward(&self, params: &DownhillParams, grad_mask: &[f64]) -> Vec<f64> {
        params.grad_logits_from_log_beta(&self.backward_log_beta(grad_mask))
    }
}

/// Relaxed Downhill sample (Gumbel-softmax followed by the reversed cumulative sum).
pub fn downhill_sample<R: Rng + ?Sized>(params: &DownhillParams, rng: &mut R) -> Result<OrderedMask> {
    Ok(DownhillDraw::sample(params, rng)?.to_mask())
}

/// Zero-temperature limit: `v_b` with `b = argmax(log beta + g)`.
pub fn downhill_hard_sample<R: Rng + ?Sized>(params: &DownhillParams, rng: &mut R) -> Result<OrderedMask> {
    let log_beta = params.log_beta();
    if let Some(j) = log_beta.iter().position(|l| !l.is_finite()) {
        return Err(VndError::Domain(format!("beta[{j}] is zero; clamp the logits")));
    }
    let g = sample_gumbel(log_beta.len(), rng);
    let (b, _) =
        log_beta
            .iter()
            .zip(&g)
            .map(|(l, g)| l + g)
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, v)| if v > best.1 { (i, v) } else { best },
            );
    OrderedMask::hard(log_beta.len(), b + 1)
}

/// Downhill log density evaluated on a simplex point given by the increments
/// `delta[i] = z[i] - z[i+1]`.
pub fn downhill_log_density_increments(delta: &[f64], beta: &[f64], tau: f64) -> Result<f64> {
    let k = delta.len();
    if beta.len() != k {
        return Err(VndError::ShapeMismatch(format!(
            "{k} increments for {} mask probabilities",
            beta.len()
        )));
    }
    if let Some(d) = delta.iter().find(|d| **d <= 0.0) {
        return Err(VndError::Domain(format!("nonpositive increment {d}")));
    }
    if !(tau > 0.0) {
        return Err(VndError::Domain(format!("temperature {tau}")));
    }
    let log_beta: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let log_delta: Vec<f64> = delta.iter().map(|d| d.ln()).collect();
    let terms: Vec<f64> = log_beta.iter().zip(&log_delta).map(|(lb, ld)| lb - tau * ld).collect();
    let kf = k as f64;
    let product: f64 = log_beta
        .iter()
        .zip(&log_delta)
        .map(|(lb, ld)| lb - (tau + 1.0) * ld)
        .sum();
    Ok(ln_gamma_int(k) + (kf - 1.0) * tau.ln() - kf * logsumexp(&terms) + product)
}

/// Downhill log density of a relaxed mask.
pub fn downhill_log_density(mask: &OrderedMask, params: &DownhillParams) -> Result<f64> {
    if mask.len() != params.dims() {
        return Err(VndError::ShapeMismatch(format!(
            "mask of length {} for {} dimensions",
            mask.len(),
            params.dims()
        )));
    }
    downhill_log_density_increments(&mask.increments(), &params.beta(), params.tau())
}

/// `sum_j beta[j] * log(beta[j] / p(v_j))`; terms with `beta[j] = 0` vanish.
pub fn kl_mask(beta: &[f64], chain: &BernoulliChain) -> Result<f64> {
    if beta.len() != chain.len() {
        return Err(VndError::ShapeMismatch(format!(
            "posterior over {} masks, prior over {}",
            beta.len(),
            chain.len()
        )));
    }
    let prior = chain.mask_probs();
    let mut kl = 0.0;
    for (j, (&b, &p)) in beta.iter().zip(&prior).enumerate() {
        if b > 0.0 {
            if p <= 0.0 {
                return Err(VndError::InfiniteKl { index: j + 1, beta: b });
            }
            kl += b * (b / p).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Closed-form KL between the zero-temperature Downhill posterior and the chain prior.
pub fn kl_mask_posterior_prior(params: &DownhillParams, chain: &BernoulliChain) -> Result<f64> {
    kl_mask(&params.beta(), chain)
}

/// `E_q[z_j] = prod_{k<=j} mu[k]`.
pub fn keep_probabilities(params: &DownhillParams) -> Vec<f64> {
    params
        .conditional_keep()
        .into_iter()
        .scan(1.0, |acc, mu| {
            *acc *= mu;
            Some(*acc)
        })
        .collect()
}

/// `E_q[z_j] = 1 - sum_{k<j} beta[k]`, computed as the tail sum.
pub fn keep_probabilities_from_beta(beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; beta.len()];
    let mut acc = 0.0;
    for j in (0..beta.len()).rev() {
        acc += beta[j];
        out[j] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream_rng;
    use proptest::prelude::*;

    fn params(beta: &[f64], tau: f64) -> DownhillParams {
        DownhillParams::from_beta(beta, tau).unwrap()
    }

    #[test]
    fn beta_is_a_simplex() {
        let p = DownhillParams::new(vec![3.0, -1.0, 0.5, 2.0], 0.5).unwrap();
        let beta = p.beta();
        assert!(beta.iter().all(|b| *b >= 0.0));
        assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(DownhillParams::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn logits_are_clamped() {
        let p = DownhillParams::new(vec![100.0, -100.0], 1.0).unwrap();
        assert_eq!(p.logits(), &[LOGIT_CLAMP, -LOGIT_CLAMP]);
        assert!(p.log_beta().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn from_beta_round_trips() {
        let beta = [0.2, 0.3, 0.5];
        let p = params(&beta, 1.0);
        for (a, b) in p.beta().iter().zip(&beta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_probability_examples() {
        let p = params(&[0.2, 0.3, 0.5], 1.0);
        let keep = keep_probabilities(&p);
        for (a, b) in keep.iter().zip(&[1.0, 0.8, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(keep_probabilities_from_beta(&[0.0, 0.0, 1.0]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn keep_probabilities_match_enumeration() {
        // E[z_j] summed over the masks v_b (b >= j) that keep node j.
        let beta = [0.1, 0.25, 0.05, 0.6];
        let p = params(&beta, 1.0);
        let keep = keep_probabilities(&p);
        for j in 0..4 {
            let mut e = 0.0;
            for b in 1..=4 {
                let v = OrderedMask::hard(4, b).unwrap();
                e += beta[b - 1] * v.values()[j];
            }
            assert!((keep[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_probabilities_match_hard_sample_means() {
        let p = params(&[0.2, 0.3, 0.5], 1.0);
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let m = downhill_hard_sample(&p, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        let keep = keep_probabilities(&p);
        for j in 0..3 {
            assert!((sums[j] / n as f64 - keep[j]).abs() < 0.01);
        }
    }

    #[test]
    fn hard_sample_frequencies_match_beta() {
        let beta = [0.2, 0.3, 0.5];
        let p = params(&beta, 1.0);
        let mut rng = stream_rng(12, 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[downhill_hard_sample(&p, &mut rng).unwrap().tail() - 1] += 1;
        }
        for j in 0..3 {
            assert!((counts[j] as f64 / n as f64 - beta[j]).abs() < 0.01);
        }
    }

    #[test]
    fn hard_sample_degenerate_cases() {
        let mut rng = stream_rng(13, 0);
        let single = DownhillParams::constant(1, 0.0, 1.0).unwrap();
        let full = DownhillParams::constant(4, LOGIT_CLAMP, 1.0).unwrap();
        for _ in 0..1000 {
            assert_eq!(downhill_hard_sample(&single, &mut rng).unwrap().tail(), 1);
            assert_eq!(downhill_hard_sample(&full, &mut rng).unwrap().tail(), 4);
        }
    }

    #[test]
    fn low_temperature_relaxed_samples_harden_to_beta() {
        let beta = [0.5, 0.25, 0.25];
        let p = params(&beta, 1e-4);
        let mut rng = stream_rng(14, 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[downhill_sample(&p, &mut rng).unwrap().harden().tail() - 1] += 1;
        }
        for j in 0..3 {
            assert!((counts[j] as f64 / n as f64 - beta[j]).abs() < 0.01);
        }
    }

    #[test]
    fn one_hot_at_last_gives_all_ones() {
        let p = DownhillParams::constant(5, LOGIT_CLAMP, 1e-4).unwrap();
        let mut rng = stream_rng(15, 0);
        for _ in 0..100 {
            let m = downhill_sample(&p, &mut rng).unwrap();
            assert!(m.values().iter().all(|v| (v - 1.0).abs() < 1e-6));
        }
    }

    /// Independent route for K = 2: logit(c1) = (log beta1/beta2 + L) / tau with
    /// L = g1 - g2 standard logistic; transform the logistic density.
    fn concrete2_log_density(c1: f64, beta: [f64; 2], tau: f64) -> f64 {
        let x = (c1 / (1.0 - c1)).ln();
        let t = tau * x - (beta[0] / beta[1]).ln();
        let logistic = -t - 2.0 * (-t).exp().ln_1p();
        tau.ln() + logistic - (c1 * (1.0 - c1)).ln()
    }

    #[test]
    fn two_dim_density_matches_logistic_route() {
        let beta = [0.3, 0.7];
        for tau in [0.3, 0.7, 1.0, 2.5] {
            let p = params(&beta, tau);
            for c1 in [0.01, 0.2, 0.5, 0.77, 0.99] {
                let mask = OrderedMask::soft(vec![1.0, 1.0 - c1]).unwrap();
                let got = downhill_log_density(&mask, &p).unwrap();
                let want = concrete2_log_density(c1, beta, tau);
                assert!((got - want).abs() < 1e-10, "tau {tau} c1 {c1}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn two_dim_density_integrates_to_one() {
        let beta = [0.3, 0.7];
        for tau in [0.5, 1.0, 2.0] {
            // Midpoint rule in x = logit(c1), dc1 = c1 (1 - c1) dx; the density
            // has integrable endpoint singularities for tau < 1.
            let (lo, hi) = (-40.0 / tau, 40.0 / tau);
            let n = 200_000;
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * h;
                let c1 = sigmoid(x);
                let c2 = sigmoid(-x);
                let delta = [c1, c2];
                total += downhill_log_density_increments(&delta, &beta, tau).unwrap().exp() * c1 * c2 * h;
            }
            assert!((total - 1.0).abs() < 1e-3, "tau {tau}: {total}");
        }
    }

    #[test]
    fn density_rejects_flat_steps() {
        let p = params(&[0.3, 0.3, 0.4], 1.0);
        let mask = OrderedMask::soft(vec![1.0, 1.0, 0.5]).unwrap();
        assert!(matches!(downhill_log_density(&mask, &p), Err(VndError::Domain(_))));
    }

    #[test]
    fn kl_examples() {
        let chain = BernoulliChain::new(vec![1.0, 0.5, 0.5]).unwrap();
        let matched = params(&[0.5, 0.25, 0.25], 1.0);
        assert!(kl_mask_posterior_prior(&matched, &chain).unwrap().abs() < 1e-12);
        let third = 1.0 / 3.0;
        // (1/3)[ln(2/3) + 2 ln(4/3)]
        let want = third * ((2.0f64 / 3.0).ln() + 2.0 * (4.0f64 / 3.0).ln());
        let got = kl_mask(&[third, third, third], &chain).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.0566).abs() < 1e-4);
        let probs = chain.mask_probs();
        for j in 0..3 {
            let mut one_hot = [0.0; 3];
            one_hot[j] = 1.0;
            let kl = kl_mask(&one_hot, &chain).unwrap();
            assert!((kl + probs[j].ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_support_mismatch_is_infinite() {
        let chain = BernoulliChain::new(vec![1.0, 1.0, 0.5]).unwrap();
        assert!(matches!(
            kl_mask(&[0.2, 0.3, 0.5], &chain),
            Err(VndError::InfiniteKl { index: 1, .. })
        ));
    }

    #[test]
    fn transform_gradient_matches_finite_differences() {
        let base = DownhillParams::new(vec![0.7, -0.4, 1.3, 0.1], 0.6).unwrap();
        let g = sample_gumbel(5, &mut stream_rng(16, 0));
        let w = [0.3, -1.2, 0.8, 2.0, -0.5];
        let objective = |p: &DownhillParams| {
            let d = DownhillDraw::from_noise(p, g.clone()).unwrap();
            d.mask_values().iter().zip(&w).map(|(z, w)| z * w).sum::<f64>()
        };
        let draw = DownhillDraw::from_noise(&base, g.clone()).unwrap();
        let analytic = draw.backward(&base, &w);
        let h = 1e-5;
        for i in 0..4 {
            let mut plus = base.clone();
            plus.logits_mut()[i] += h;
            let mut minus = base.clone();
            minus.logits_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "logit {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    proptest! {
        #[test]
        fn relaxed_samples_are_ordered_masks(
            logits in proptest::collection::vec(-12.0f64..12.0, 1..10),
            tau in 0.01f64..5.0,
            seed in any::<u64>(),
        ) {
            let p = DownhillParams::new(logits, tau).unwrap();
            let m = downhill_sample(&p, &mut stream_rng(seed, 0)).unwrap();
            let z = m.values();
            prop_assert_eq!(z[0], 1.0);
            prop_assert!(z.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!((m.increments().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(
            logits in proptest::collection::vec(-12.0f64..12.0, 1..8),
            keep in 0.01f64..0.99,
        ) {
            let p = DownhillParams::new(logits, 1.0).unwrap();
            let chain = BernoulliChain::uniform(p.dims(), keep).unwrap();
            prop_assert!(kl_mask_posterior_prior(&p, &chain).unwrap() >= 0.0);
        }

        #[test]
        fn keep_probability_routes_agree(logits in proptest::collection::vec(-12.0f64..12.0, 1..10)) {
            let p = DownhillParams::new(logits, 1.0).unwrap();
            let a = keep_probabilities(&p);
            let b = keep_probabilities_from_beta(&p.beta());
            prop_assert_eq!(a[0], 1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(a.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn density_is_permutation_invariant(
            raw in proptest::collection::vec(0.05f64..1.0, 2..6),
            braw in proptest::collection::vec(0.05f64..1.0, 6),
            tau in 0.1f64..3.0,
            rot in 0usize..6,
        ) {
            let k = raw.len();
            let s: f64 = raw.iter().sum();
            let delta: Vec<f64> = raw.iter().map(|d| d / s).collect();
            let bs: f64 = braw[..k].iter().sum();
            let beta: Vec<f64> = braw[..k].iter().map(|b| b / bs).collect();
            let r = rot % k;
            let mut pd = delta.clone();
            pd.rotate_left(r);
            let mut pb = beta.clone();
            pb.rotate_left(r);
            pd.swap(0, k - 1);
            pb.swap(0, k - 1);
            let a = downhill_log_density_increments(&delta, &beta, tau).unwrap();
            let b = downhill_log_density_increments(&pd, &pb, tau).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
