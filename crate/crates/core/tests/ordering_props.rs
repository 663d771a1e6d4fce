use proptest::prelude::*;

use vnd::exec::stream_rng;
use vnd::ordering::{
    downhill_hard_sample, downhill_sample, keep_probabilities, kl_mask_posterior_prior, BernoulliChain, DownhillDraw,
    DownhillParams,
};

fn params() -> impl Strategy<Value = DownhillParams> {
    (2usize..10, 0.05f64..3.0)
        .prop_flat_map(|(k, tau)| (prop::collection::vec(-6.0f64..6.0, k - 1), Just(tau)))
        .prop_map(|(logits, tau)| DownhillParams::new(logits, tau).unwrap())
}

fn chain(k: usize) -> impl Strategy<Value = BernoulliChain> {
    prop::collection::vec(0.01f64..1.0, k - 1).prop_map(|rest| {
        let mut pi = vec![1.0];
        pi.extend(rest);
        BernoulliChain::new(pi).unwrap()
    })
}

proptest! {
    #[test]
    fn relaxed_samples_are_ordered_masks(p in params(), seed in 0u64..1000) {
        let m = downhill_sample(&p, &mut stream_rng(seed, 0)).unwrap();
        let z = m.values();
        prop_assert!((z[0] - 1.0).abs() < 1e-9);
        prop_assert!(z.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        // the last increment is z[K] itself
        let total: f64 = m.increments().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn beta_is_a_distribution(p in params()) {
        let beta = p.beta();
        prop_assert_eq!(beta.len(), p.dims());
        prop_assert!(beta.iter().all(|&b| b >= 0.0));
        prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keep_probabilities_are_tail_sums(p in params()) {
        let beta = p.beta();
        let keep = keep_probabilities(&p);
        for i in 0..beta.len() {
            let tail: f64 = beta[i..].iter().sum();
            prop_assert!((keep[i] - tail).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_kl_is_nonnegative((p, c) in params().prop_flat_map(|p| { let k = p.dims(); (Just(p), chain(k)) })) {
        let kl = kl_mask_posterior_prior(&p, &c).unwrap();
        prop_assert!(kl >= -1e-12, "kl {}", kl);
    }

    #[test]
    fn mask_kl_vanishes_at_the_prior(c in (2usize..10).prop_flat_map(chain)) {
        let p = DownhillParams::from_beta(&c.mask_probs(), 0.5).unwrap();
        prop_assert!(kl_mask_posterior_prior(&p, &c).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences(
        p in params(),
        w in prop::collection::vec(-2.0f64..2.0, 10),
        seed in 0u64..1000,
    ) {
        let k = p.dims();
        let g = vnd::ordering::sample_gumbel(k, &mut stream_rng(seed, 0));
        let loss = |p: &DownhillParams| {
            let d = DownhillDraw::from_noise(p, g.clone()).unwrap();
            d.mask_values().iter().zip(&w).map(|(z, w)| z * w).sum::<f64>()
        };
        let draw = DownhillDraw::from_noise(&p, g.clone()).unwrap();
        let grad = draw.backward(&p, &w[..k]);
        let eps = 1e-5;
        for i in 0..k - 1 {
            let mut up = p.logits().to_vec();
            up[i] += eps;
            let mut down = p.logits().to_vec();
            down[i] -= eps;
            let fd = (loss(&DownhillParams::new(up, p.tau()).unwrap()) - loss(&DownhillParams::new(down, p.tau()).unwrap()))
                / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            prop_assert!(rel < 1e-4, "logit {}: fd {} analytic {}", i, fd, grad[i]);
        }
    }
}

fn frequencies(k: usize, draws: usize, mut tail: impl FnMut() -> usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        counts[tail() - 1] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn hard_samples_follow_beta() {
    let p = DownhillParams::new(vec![0.3, -1.0, 2.0, 0.5, 1.5], 1e-4).unwrap();
    let beta = p.beta();
    let mut rng = stream_rng(1, 0);
    let hard = frequencies(6, 100_000, || downhill_hard_sample(&p, &mut rng).unwrap().tail());
    assert!(max_gap(&hard, &beta) <= 0.01);
    let mut rng = stream_rng(2, 0);
    let relaxed = frequencies(6, 100_000, || downhill_sample(&p, &mut rng).unwrap().harden().tail());
    assert!(max_gap(&relaxed, &beta) <= 0.01);
}

#[test]
fn chain_samples_follow_mask_probs() {
    let c = BernoulliChain::new(vec![1.0, 0.8, 0.6, 0.9, 0.3]).unwrap();
    let mut rng = stream_rng(3, 0);
    let freq = frequencies(5, 100_000, || c.sample(&mut rng).tail());
    assert!(max_gap(&freq, &c.mask_probs()) <= 0.01);
}

#[test]
fn keep_probabilities_match_hard_sample_means() {
    let p = DownhillParams::new(vec![1.0, 0.0, -0.5], 0.5).unwrap();
    let keep = keep_probabilities(&p);
    let mut sums = [0.0; 4];
    let n = 100_000;
    let mut rng = stream_rng(4, 0);
    for _ in 0..n {
        let m = downhill_hard_sample(&p, &mut rng).unwrap();
        for (s, v) in sums.iter_mut().zip(m.values()) {
            *s += v;
        }
    }
    for (s, k) in sums.iter().zip(&keep) {
        assert!((s / n as f64 - k).abs() < 0.01);
    }
}
