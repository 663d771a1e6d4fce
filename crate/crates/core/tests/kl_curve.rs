use ndarray::Array2;
use proptest::prelude::*;

use vnd::exec::{stream_rng, Parallelism};
use vnd::kl_approx::{eval_approx, fit_constants, mc_truth_grid, FitOptions, GridPoint, KlApproxConstants};
use vnd::layers::{l0_reduction, neg_kl_weight_approx, phi2_bruteforce, phi2_full};

fn truth(seed: u64) -> Vec<GridPoint> {
    mc_truth_grid(64, 1_000_000, seed, Parallelism::Parallel).unwrap()
}

fn published_deviation(grid: &[GridPoint]) -> f64 {
    grid.iter()
        .map(|g| (neg_kl_weight_approx(g.log_alpha) - g.value).abs())
        .fold(0.0, f64::max)
}

/// The stated 0.02-nat agreement between the published constants and the
/// Monte Carlo oracle. It does not hold: see `published_constants_deviation_is_pinned`.
#[test]
#[ignore = "published constants deviate from the Monte Carlo oracle by about 0.13 nats"]
fn published_constants_within_002_of_monte_carlo() {
    let dev = published_deviation(&truth(0));
    assert!(dev <= 0.02, "max deviation {dev}");
}

#[test]
fn published_constants_deviation_is_pinned() {
    let grid = truth(0);
    let dev = published_deviation(&grid);
    assert!((0.12..=0.15).contains(&dev), "max deviation {dev}");
    // Most of the gap is shape, not offset: the best constant shift still leaves
    // more than 0.02.
    let shift = grid
        .iter()
        .map(|g| g.value - neg_kl_weight_approx(g.log_alpha))
        .sum::<f64>()
        / grid.len() as f64;
    let shifted = grid
        .iter()
        .map(|g| (neg_kl_weight_approx(g.log_alpha) + shift - g.value).abs())
        .fold(0.0, f64::max);
    assert!(shifted > 0.02, "offset-corrected deviation {shifted}");
}

#[test]
fn fitted_curve_beats_published_constants() {
    let grid = truth(1);
    let (_, report) = fit_constants(
        &grid,
        &FitOptions {
            seed: 1,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_deviation <= report.published_max_deviation);
    assert!(report.max_deviation <= 0.02, "{}", report.max_deviation);
}

#[test]
fn monte_carlo_grid_properties() {
    let a = truth(2);
    let b = truth(3);
    assert!((a[0].log_alpha + 5.0).abs() < 1e-12 && (a[63].log_alpha - 0.5).abs() < 1e-12);
    assert!((a[0].value + 2.5).abs() <= 0.01, "{}", a[0].value);
    for (p, q) in a.iter().zip(&b) {
        assert!((p.value - q.value).abs() <= 0.005, "{} vs {}", p.value, q.value);
    }
    assert!(a.windows(2).all(|w| w[1].value >= w[0].value - 0.005));
}

#[test]
fn approximation_is_smooth_on_the_fit_range() {
    let k = KlApproxConstants::PUBLISHED;
    let h = 1e-3;
    for i in 0..=550 {
        let x = -5.0 + 0.01 * i as f64;
        let d2 = (eval_approx(&k, x + h) - 2.0 * eval_approx(&k, x) + eval_approx(&k, x - h)) / (h * h);
        assert!(d2.abs() < 5.0, "{x}: {d2}");
    }
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Vec<f64>)> {
    (1usize..=12, 1usize..=8).prop_flat_map(|(rows, d)| {
        (
            prop::collection::vec(0.0f64..1.0, rows * d),
            prop::collection::vec(0.0f64..4.0, rows * d),
            prop::collection::vec(0.01f64..1.0, d),
        )
            .prop_map(move |(k0, k1, raw)| {
                let s: f64 = raw.iter().sum();
                (
                    Array2::from_shape_vec((rows, d), k0).unwrap(),
                    Array2::from_shape_vec((rows, d), k1).unwrap(),
                    raw.iter().map(|r| r / s).collect(),
                )
            })
    })
}

proptest! {
    #[test]
    fn phi2_matrix_form_matches_enumeration((k0, k1, beta) in instance()) {
        let a = phi2_full(&k0, &k1, &beta).unwrap();
        let b = phi2_bruteforce(&k0, &k1, &beta).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300));
    }

    #[test]
    fn l0_is_constant_slab_phi2((_, k1, beta) in instance(), chi in 0.0f64..5.0) {
        let (rows, d) = k1.dim();
        let a = l0_reduction(&beta, chi, rows).unwrap();
        let b = phi2_full(&Array2::zeros((rows, d)), &Array2::from_elem((rows, d), chi), &beta).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn phi2_grows_with_kept_mass((k0, k1, beta) in instance()) {
        // with K0 = 0 the cost is nondecreasing in the tail index
        let zero = Array2::zeros(k0.dim());
        let d = beta.len();
        let cost = |j: usize| {
            let mut b = vec![0.0; d];
            b[j] = 1.0;
            phi2_full(&zero, &k1, &b).unwrap()
        };
        prop_assert!((1..d).all(|j| cost(j) >= cost(j - 1)));
    }
}

#[test]
fn mc_oracle_small_alpha_limit() {
    let v = vnd::layers::neg_kl_weight_mc(-12.0, 100_000, &mut stream_rng(0, 0));
    assert!((v + 6.0).abs() < 1e-3);
}
